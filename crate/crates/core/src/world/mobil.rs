//! Incentive-plus-safety lane-change decision on top of the car-following
//! model.

use serde::{Deserialize, Serialize};

use super::idm::{idm_accel, DriverParams};
use super::VehicleState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneDecision {
    Stay,
    ChangeLeft,
    ChangeRight,
}

/// A surrounding vehicle together with the parameters that drive it.
#[derive(Clone, Copy, Debug)]
pub struct Neighbor<'a> {
    pub state: &'a VehicleState,
    pub params: &'a DriverParams,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AdjacentLane<'a> {
    pub leader: Option<Neighbor<'a>>,
    pub follower: Option<Neighbor<'a>>,
}

/// Vehicles around the ego. `left`/`right` are `None` when that lane does not
/// exist.
#[derive(Clone, Copy, Debug, Default)]
pub struct LaneNeighbors<'a> {
    pub leader: Option<Neighbor<'a>>,
    pub follower: Option<Neighbor<'a>>,
    pub left: Option<AdjacentLane<'a>>,
    pub right: Option<AdjacentLane<'a>>,
}

/// Acceleration changes entering the decision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MobilTerms {
    pub ego_gain: f64,
    pub new_follower_gain: f64,
    pub old_follower_gain: f64,
    /// Acceleration the new follower would have behind the ego.
    pub new_follower_accel: f64,
}

/// Returns `(incentive_margin, safe)`; a change is wanted when the margin is
/// positive and `safe` holds.
pub fn mobil_criterion(terms: &MobilTerms, params: &DriverParams) -> (f64, bool) {
    let incentive =
        terms.ego_gain + params.politeness * (terms.new_follower_gain + terms.old_follower_gain);
    (
        incentive - params.lc_threshold,
        terms.new_follower_accel >= -params.b_safe,
    )
}

fn accel(ego: &VehicleState, leader: Option<&VehicleState>, p: &DriverParams) -> Option<f64> {
    idm_accel(ego, leader, p).ok()
}

/// Terms for moving into `target`, or `None` if the move is physically
/// impossible (a gap to the new leader or follower is not positive).
pub fn mobil_terms(
    ego: &VehicleState,
    ego_params: &DriverParams,
    current: (Option<Neighbor<'_>>, Option<Neighbor<'_>>),
    target: &AdjacentLane<'_>,
) -> Option<MobilTerms> {
    let (leader, follower) = current;
    let a_c = accel(ego, leader.map(|n| n.state), ego_params)?;
    let a_c_new = accel(ego, target.leader.map(|n| n.state), ego_params)?;

    let (nf_gain, nf_accel) = match target.follower {
        Some(n) => {
            let before = accel(n.state, target.leader.map(|l| l.state), n.params)?;
            let after = accel(n.state, Some(ego), n.params)?;
            (after - before, after)
        }
        None => (0.0, 0.0),
    };
    let of_gain = match follower {
        Some(o) => {
            let before = accel(o.state, Some(ego), o.params)?;
            let after = accel(o.state, leader.map(|l| l.state), o.params)?;
            after - before
        }
        None => 0.0,
    };
    Some(MobilTerms {
        ego_gain: a_c_new - a_c,
        new_follower_gain: nf_gain,
        old_follower_gain: of_gain,
        new_follower_accel: nf_accel,
    })
}

/// Lane decision for `ego`. Any change returned satisfies the safety
/// criterion; among two wanted changes the larger margin wins, left on ties.
pub fn mobil_decide(
    ego: &VehicleState,
    neighbors: &LaneNeighbors<'_>,
    params: &DriverParams,
) -> LaneDecision {
    let current = (neighbors.leader, neighbors.follower);
    let evaluate = |lane: &Option<AdjacentLane<'_>>| -> Option<f64> {
        let lane = lane.as_ref()?;
        let terms = mobil_terms(ego, params, current, lane)?;
        let (margin, safe) = mobil_criterion(&terms, params);
        (safe && margin > 0.0).then_some(margin)
    };
    match (evaluate(&neighbors.left), evaluate(&neighbors.right)) {
        (Some(l), Some(r)) if r > l => LaneDecision::ChangeRight,
        (Some(_), _) => LaneDecision::ChangeLeft,
        (None, Some(_)) => LaneDecision::ChangeRight,
        (None, None) => LaneDecision::Stay,
    }
}
