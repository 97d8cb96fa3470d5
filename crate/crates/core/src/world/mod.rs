//! Ground-truth world: corridor geometry, microscopic traffic, traffic
//! signals and the simulation clock.

mod idm;
mod lane_change;
mod map;
mod mobil;
mod signal;
mod sim;

pub use idm::{idm_accel, idm_accel_gap, DriverDefaults, DriverParams, MAX_BRAKING};
pub use lane_change::{lane_change_execute, quintic_blend, LateralTrajectory};
pub use map::{
    build_corridor, BusStop, CorridorConfig, CorridorMap, Landmark, Segment, SegmentKind,
};
pub use mobil::{
    mobil_criterion, mobil_decide, mobil_terms, AdjacentLane, LaneDecision, LaneNeighbors,
    MobilTerms, Neighbor,
};
pub use signal::{
    signal_update, ActuatedState, FixedTimeline, GreenShift, LightState, PhaseStep,
    SignalController, SignalHead, SignalPlan,
};
pub use sim::{
    step_world, Commands, DemandConfig, ExitRecord, ManeuverKind, ManeuverRecord, ScriptedEvent,
    Vehicle, World, WorldConfig, WorldLog,
};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleClass {
    Car,
    Truck,
    Bus,
    Bicycle,
    Pedestrian,
}

impl VehicleClass {
    pub const ALL: [VehicleClass; 5] = [
        VehicleClass::Car,
        VehicleClass::Truck,
        VehicleClass::Bus,
        VehicleClass::Bicycle,
        VehicleClass::Pedestrian,
    ];

    /// Nominal body length and width in metres.
    pub fn dimensions(self) -> (f64, f64) {
        match self {
            VehicleClass::Car => (4.5, 1.8),
            VehicleClass::Truck => (12.0, 2.5),
            VehicleClass::Bus => (12.0, 2.55),
            VehicleClass::Bicycle => (1.8, 0.6),
            VehicleClass::Pedestrian => (0.5, 0.5),
        }
    }

    pub fn is_motorized(self) -> bool {
        matches!(
            self,
            VehicleClass::Car | VehicleClass::Truck | VehicleClass::Bus
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VehicleClass::Car => "car",
            VehicleClass::Truck => "truck",
            VehicleClass::Bus => "bus",
            VehicleClass::Bicycle => "bicycle",
            VehicleClass::Pedestrian => "pedestrian",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl std::str::FromStr for VehicleClass {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| crate::Error::config(format!("unknown vehicle class `{s}`")))
    }
}

/// Kinematic ground truth of one road user at one tick.
///
/// `s` is the longitudinal position of the front bumper; the body occupies
/// `[s - length, s]`. `lat` is the offset from the centre of `lane`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u64,
    pub class: VehicleClass,
    pub s: f64,
    pub lane: usize,
    pub lat: f64,
    pub v: f64,
    pub a: f64,
    pub length: f64,
    pub width: f64,
    pub t: f64,
}

impl VehicleState {
    pub fn new(id: u64, class: VehicleClass, s: f64, lane: usize, v: f64) -> Self {
        let (length, width) = class.dimensions();
        Self {
            id,
            class,
            s,
            lane,
            lat: 0.0,
            v,
            a: 0.0,
            length,
            width,
            t: 0.0,
        }
    }

    /// Longitudinal position of the body centre.
    pub fn center_s(&self) -> f64 {
        self.s - self.length / 2.0
    }

    pub fn rear(&self) -> f64 {
        self.s - self.length
    }

    /// Lateral position in corridor coordinates.
    pub fn y(&self, lane_width: f64) -> f64 {
        self.lane as f64 * lane_width + self.lat
    }
}
