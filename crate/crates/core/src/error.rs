use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("collision state: gap {gap:.3} m between vehicle {ego} and leader {leader}")]
    CollisionState { ego: u64, leader: u64, gap: f64 },

    #[error("invalid lane-change duration {0} s")]
    InvalidDuration(f64),

    #[error("station placement error: {0}")]
    Placement(String),

    #[error("no signal forecast available")]
    NoForecast,

    #[error("localization degraded: {observed} usable landmark(s), need at least 2")]
    LocalizationDegraded { observed: usize },

    #[error("insufficient data: {found} lane-change events, need at least {required}")]
    InsufficientData { found: usize, required: usize },

    #[error("wire format error: {0}")]
    Wire(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
