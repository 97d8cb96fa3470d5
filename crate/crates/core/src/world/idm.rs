//! Intelligent-driver longitudinal model.

use serde::{Deserialize, Serialize};

use super::{VehicleClass, VehicleState};
use crate::{Error, Result};

/// Physical braking limit applied to every model output, m/s².
pub const MAX_BRAKING: f64 = 9.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverParams {
    /// Desired speed, m/s.
    pub v0: f64,
    /// Time headway, s.
    pub time_headway: f64,
    pub a_max: f64,
    /// Comfortable deceleration (positive number).
    pub b_comf: f64,
    /// Standstill gap, m.
    pub s0: f64,
    pub politeness: f64,
    /// Lane-change incentive threshold, m/s².
    pub lc_threshold: f64,
    /// Largest deceleration a lane change may impose on the new follower.
    pub b_safe: f64,
}

impl DriverParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.v0,
            self.time_headway,
            self.a_max,
            self.b_comf,
            self.s0,
            self.lc_threshold,
            self.b_safe,
        ];
        if positive.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::config("driver parameters must be positive"));
        }
        if !(0.0..=1.0).contains(&self.politeness) {
            return Err(Error::config("politeness must lie in [0, 1]"));
        }
        if self.b_safe < self.b_comf {
            return Err(Error::config("b_safe must not be below b_comf"));
        }
        Ok(())
    }
}

/// Class-independent behaviour parameters. Desired speed is derived per
/// vehicle from its class and the local speed limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriverDefaults {
    pub time_headway: f64,
    pub a_max: f64,
    pub b_comf: f64,
    pub s0: f64,
    pub politeness: f64,
    pub lc_threshold: f64,
    pub b_safe: f64,
    /// Desired-speed cap for trucks and buses, m/s.
    pub heavy_vehicle_speed: f64,
    pub bicycle_speed: f64,
}

impl Default for DriverDefaults {
    fn default() -> Self {
        Self {
            time_headway: 1.5,
            a_max: 1.5,
            b_comf: 2.0,
            s0: 2.0,
            politeness: 0.2,
            lc_threshold: 0.2,
            b_safe: 4.0,
            heavy_vehicle_speed: 22.22,
            bicycle_speed: 5.0,
        }
    }
}

impl DriverDefaults {
    pub fn desired_speed(&self, class: VehicleClass, speed_limit: f64) -> f64 {
        match class {
            VehicleClass::Car => speed_limit,
            VehicleClass::Truck | VehicleClass::Bus => speed_limit.min(self.heavy_vehicle_speed),
            VehicleClass::Bicycle => speed_limit.min(self.bicycle_speed),
            VehicleClass::Pedestrian => speed_limit.min(1.4),
        }
    }

    pub fn params_for(&self, class: VehicleClass, speed_limit: f64) -> DriverParams {
        DriverParams {
            v0: self.desired_speed(class, speed_limit),
            time_headway: self.time_headway,
            a_max: self.a_max,
            b_comf: self.b_comf,
            s0: self.s0,
            politeness: self.politeness,
            lc_threshold: self.lc_threshold,
            b_safe: self.b_safe,
        }
    }
}

/// Acceleration for speed `v` behind an object at bumper gap `gap` closing
/// at `dv = v - v_leader`. `gap = None` is free road.
pub fn idm_accel_gap(v: f64, gap_and_dv: Option<(f64, f64)>, p: &DriverParams) -> f64 {
    let free = 1.0 - (v / p.v0).powi(4);
    let interaction = match gap_and_dv {
        Some((gap, dv)) => {
            let s_star =
                p.s0 + (v * p.time_headway + v * dv / (2.0 * (p.a_max * p.b_comf).sqrt())).max(0.0);
            (s_star / gap).powi(2)
        }
        None => 0.0,
    };
    (p.a_max * (free - interaction)).clamp(-MAX_BRAKING, p.a_max)
}

/// Intelligent-driver acceleration of `ego` behind `leader`.
///
/// Fails with [`Error::CollisionState`] when the bumper gap is not positive.
pub fn idm_accel(
    ego: &VehicleState,
    leader: Option<&VehicleState>,
    params: &DriverParams,
) -> Result<f64> {
    let gap = match leader {
        Some(l) => {
            let gap = l.rear() - ego.s;
            if !(gap > 0.0) {
                return Err(Error::CollisionState {
                    ego: ego.id,
                    leader: l.id,
                    gap,
                });
            }
            Some((gap, ego.v - l.v))
        }
        None => None,
    };
    Ok(idm_accel_gap(ego.v, gap, params))
}
