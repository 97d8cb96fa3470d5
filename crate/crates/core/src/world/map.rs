use serde::{Deserialize, Serialize};

use super::signal::SignalHead;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Urban,
    Rural,
    Highway,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub kind: SegmentKind,
    /// m/s
    pub speed_limit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusStop {
    pub s: f64,
    /// Distance from the centre of lane 0 to the curb line at the stop.
    pub lateral_offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

fn default_lane_width() -> f64 {
    3.5
}

/// Unvalidated corridor description as it appears in a scenario file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorridorConfig {
    pub length: f64,
    pub lanes_per_direction: usize,
    #[serde(default = "default_lane_width")]
    pub lane_width: f64,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub signals: Vec<SignalHead>,
    #[serde(default)]
    pub bus_stops: Vec<BusStop>,
    #[serde(default)]
    pub landmarks: Vec<Landmark>,
}

/// A validated corridor. Segments tile `[0, length]` and signals are sorted
/// by position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorridorMap {
    pub length: f64,
    pub lanes: usize,
    pub lane_width: f64,
    pub segments: Vec<Segment>,
    pub signals: Vec<SignalHead>,
    pub bus_stops: Vec<BusStop>,
    pub landmarks: Vec<Landmark>,
}

const TILE_EPS: f64 = 1e-9;

pub fn build_corridor(config: &CorridorConfig) -> Result<CorridorMap> {
    if !(config.length > 0.0) || !config.length.is_finite() {
        return Err(Error::config(format!(
            "corridor length must be positive, got {}",
            config.length
        )));
    }
    if config.lanes_per_direction == 0 {
        return Err(Error::config("corridor needs at least one lane"));
    }
    if !(config.lane_width > 0.0) {
        return Err(Error::config("lane width must be positive"));
    }
    if config.segments.is_empty() {
        return Err(Error::config("segment list is empty"));
    }
    let mut segments = config.segments.clone();
    segments.sort_by(|a, b| a.start.total_cmp(&b.start));
    let mut cursor = 0.0;
    for seg in &segments {
        if !(seg.end > seg.start) {
            return Err(Error::config(format!(
                "segment [{}, {}] is empty or reversed",
                seg.start, seg.end
            )));
        }
        if !(seg.speed_limit > 0.0) {
            return Err(Error::config(format!(
                "segment at {} has non-positive speed limit",
                seg.start
            )));
        }
        if seg.start < cursor - TILE_EPS {
            return Err(Error::config(format!(
                "segment starting at {} overlaps its predecessor",
                seg.start
            )));
        }
        if seg.start > cursor + TILE_EPS {
            return Err(Error::config(format!(
                "gap in segments between {} and {}",
                cursor, seg.start
            )));
        }
        cursor = seg.end;
    }
    if (cursor - config.length).abs() > TILE_EPS {
        return Err(Error::config(format!(
            "segments end at {} but corridor length is {}",
            cursor, config.length
        )));
    }

    let mut signals = config.signals.clone();
    signals.sort_by(|a, b| a.s.total_cmp(&b.s).then(a.id.cmp(&b.id)));
    for head in &signals {
        if !(0.0..=config.length).contains(&head.s) {
            return Err(Error::config(format!(
                "signal {} at {} lies outside the corridor",
                head.id, head.s
            )));
        }
        head.validate()?;
    }
    for w in signals.windows(2) {
        if w[0].id == w[1].id {
            return Err(Error::config(format!("duplicate signal id {}", w[0].id)));
        }
    }
    for stop in &config.bus_stops {
        if !(0.0..=config.length).contains(&stop.s) {
            return Err(Error::config(format!(
                "bus stop at {} lies outside the corridor",
                stop.s
            )));
        }
    }

    Ok(CorridorMap {
        length: config.length,
        lanes: config.lanes_per_direction,
        lane_width: config.lane_width,
        segments,
        signals,
        bus_stops: config.bus_stops.clone(),
        landmarks: config.landmarks.clone(),
    })
}

impl CorridorMap {
    pub fn segment_at(&self, s: f64) -> &Segment {
        let s = s.clamp(0.0, self.length);
        self.segments
            .iter()
            .find(|seg| s < seg.end)
            .unwrap_or_else(|| self.segments.last().expect("validated map has segments"))
    }

    pub fn speed_limit_at(&self, s: f64) -> f64 {
        self.segment_at(s).speed_limit
    }

    pub fn max_speed_limit(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.speed_limit)
            .fold(0.0, f64::max)
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        lane as f64 * self.lane_width
    }

    /// Index of the first signal whose stop line is strictly ahead of `s`.
    pub fn next_signal(&self, s: f64) -> Option<usize> {
        self.signals.iter().position(|h| h.s > s)
    }
}
