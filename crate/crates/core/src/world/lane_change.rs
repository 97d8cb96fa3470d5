//! Lateral execution of a decided lane change.

use serde::{Deserialize, Serialize};

use super::LaneDecision;
use crate::{Error, Result};

/// Quintic rest-to-rest blend: 0 at 0, 1 at 1, zero velocity and
/// acceleration at both ends.
#[inline]
pub fn quintic_blend(tau: f64) -> f64 {
    let tau = tau.clamp(0.0, 1.0);
    tau * tau * tau * (10.0 + tau * (-15.0 + 6.0 * tau))
}

/// Lateral offsets relative to the centre of the origin lane, one per tick
/// after the maneuver starts. The last sample is the target lane centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LateralTrajectory {
    pub dt: f64,
    pub duration: f64,
    pub target_offset: f64,
    pub samples: Vec<f64>,
}

impl LateralTrajectory {
    /// Offset at time `t` after maneuver start.
    pub fn offset_at(&self, t: f64) -> f64 {
        self.target_offset * quintic_blend(t / self.duration)
    }
}

pub fn lane_change_execute(
    decision: LaneDecision,
    lane_width: f64,
    duration: f64,
    dt: f64,
) -> Result<LateralTrajectory> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::InvalidDuration(duration));
    }
    if !(dt > 0.0) {
        return Err(Error::config("lane-change tick must be positive"));
    }
    let sign = match decision {
        LaneDecision::ChangeLeft => 1.0,
        LaneDecision::ChangeRight => -1.0,
        LaneDecision::Stay => return Err(Error::config("cannot execute a stay decision")),
    };
    let target = sign * lane_width;
    let n = ((duration / dt).round() as usize).max(1);
    let samples = (1..=n)
        .map(|k| target * quintic_blend(k as f64 / n as f64))
        .collect();
    Ok(LateralTrajectory {
        dt,
        duration,
        target_offset: target,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{SMatrix, SVector};

    #[test]
    fn thirty_samples_with_exact_endpoints() {
        let tr = lane_change_execute(LaneDecision::ChangeLeft, 3.5, 3.0, 0.1).unwrap();
        assert_eq!(tr.samples.len(), 30);
        assert_eq!(*tr.samples.last().unwrap(), 3.5);
        assert_eq!(tr.offset_at(0.0), 0.0);
        assert_eq!(tr.offset_at(3.0), 3.5);
    }

    #[test]
    fn zero_duration_rejected() {
        assert!(matches!(
            lane_change_execute(LaneDecision::ChangeRight, 3.5, 0.0, 0.1),
            Err(Error::InvalidDuration(_))
        ));
    }

    #[test]
    fn monotone_progress() {
        let tr = lane_change_execute(LaneDecision::ChangeRight, 3.5, 3.0, 0.1).unwrap();
        let mut prev = 0.0;
        for &y in &tr.samples {
            assert!(y < prev);
            prev = y;
        }
    }

    #[test]
    fn matches_independent_quintic() {
        // Solve the six boundary conditions y(0)=0, y'(0)=0, y''(0)=0,
        // y(T)=W, y'(T)=0, y''(T)=0 for the coefficients and compare.
        let (w, t_end) = (3.5, 3.0);
        let row = |t: f64, d: usize| -> [f64; 6] {
            let mut r = [0.0; 6];
            for (i, c) in r.iter_mut().enumerate() {
                *c = match d {
                    0 => t.powi(i as i32),
                    1 if i >= 1 => i as f64 * t.powi(i as i32 - 1),
                    2 if i >= 2 => (i * (i - 1)) as f64 * t.powi(i as i32 - 2),
                    _ => 0.0,
                };
            }
            r
        };
        let rows = [
            row(0.0, 0),
            row(0.0, 1),
            row(0.0, 2),
            row(t_end, 0),
            row(t_end, 1),
            row(t_end, 2),
        ];
        let a = SMatrix::<f64, 6, 6>::from_fn(|i, j| rows[i][j]);
        let b = SVector::<f64, 6>::from_column_slice(&[0.0, 0.0, 0.0, w, 0.0, 0.0]);
        let c = a.lu().solve(&b).unwrap();
        let tr = lane_change_execute(LaneDecision::ChangeLeft, w, t_end, 0.1).unwrap();
        for (k, &y) in tr.samples.iter().enumerate() {
            let t = (k + 1) as f64 * 0.1;
            let oracle: f64 = (0..6).map(|i| c[i] * t.powi(i as i32)).sum();
            assert!((y - oracle).abs() < 1e-9, "k={k}: {y} vs {oracle}");
        }
    }
}
