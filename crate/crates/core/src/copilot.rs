//! Green-light speed advisory for equipped vehicles.
//!
//! Planning is a scan over constant approach speeds. The controller then
//! turns a plan into an acceleration cap that the world applies on top of the
//! vehicle's own car-following response.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::world::LightState;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatPhase {
    pub state: LightState,
    pub start: f64,
    pub end: f64,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatForecast {
    pub signal_id: u32,
    pub msg_time: f64,
    pub phases: Vec<SpatPhase>,
}

impl SpatForecast {
    /// Checks ordering, contiguity and confidence range.
    pub fn validate(&self) -> Result<()> {
        for p in &self.phases {
            if !(p.start < p.end) {
                return Err(Error::config(format!(
                    "phase [{}, {}) is empty",
                    p.start, p.end
                )));
            }
            if !(0.0..=1.0).contains(&p.confidence) {
                return Err(Error::config("phase confidence outside [0, 1]"));
            }
        }
        for w in self.phases.windows(2) {
            if (w[1].start - w[0].end).abs() > 1e-9 {
                return Err(Error::config("forecast phases are not contiguous"));
            }
        }
        Ok(())
    }

    pub fn phase_at(&self, t: f64) -> Option<&SpatPhase> {
        self.phases.iter().find(|p| t >= p.start && t < p.end)
    }

    /// Start of the first green phase that begins after `t`.
    pub fn next_green_start(&self, t: f64) -> Option<f64> {
        self.phases
            .iter()
            .find(|p| p.state == LightState::Green && p.start > t)
            .map(|p| p.start)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PlanMode {
    Cruise,
    Adapt,
    Stop,
}

impl PlanMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanMode::Cruise => "CRUISE",
            PlanMode::Adapt => "ADAPT",
            PlanMode::Stop => "STOP",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedPlan {
    pub mode: PlanMode,
    /// Set for CRUISE and ADAPT.
    pub target_speed: Option<f64>,
    /// Distance ahead of the vehicle at `planned_at` where it should come to rest.
    pub stop_point: Option<f64>,
    pub resume_at: Option<f64>,
    pub planned_at: f64,
    /// Constant deceleration needed to reach the stop point (STOP only).
    pub required_decel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CopilotParams {
    pub v_min_adapt: f64,
    pub c_min: f64,
    pub b_emergency: f64,
    pub grid: f64,
    pub b_comf: f64,
    pub a_max: f64,
    /// Required slack between planned arrival and a future green start or any
    /// green end.
    pub arrival_margin: f64,
    /// Distance between the stop point and the stop line.
    pub stop_offset: f64,
    /// Speed-tracking gain, 1/s.
    pub speed_gain: f64,
    /// Deceleration used to shape the approach to a stop point.
    pub approach_decel: f64,
    /// Delay added by the controller to an ADAPT arrival, s.
    pub adapt_slack: f64,
    /// Accept arrivals early in an amber that follows a green, where a
    /// driver could no longer stop comfortably.
    pub amber_entry: bool,
    /// Amber time left unused at the end of an accepted amber arrival, s.
    pub amber_margin: f64,
}

impl Default for CopilotParams {
    fn default() -> Self {
        Self {
            v_min_adapt: 5.0,
            c_min: 0.7,
            b_emergency: 6.0,
            grid: 0.01,
            b_comf: 2.0,
            a_max: 1.5,
            arrival_margin: 0.0,
            stop_offset: 1.0,
            speed_gain: 1.0,
            approach_decel: 1.5,
            adapt_slack: 0.5,
            amber_entry: false,
            amber_margin: 1.0,
        }
    }
}

impl CopilotParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.v_min_adapt,
            self.b_emergency,
            self.grid,
            self.b_comf,
            self.a_max,
            self.speed_gain,
            self.approach_decel,
        ];
        if positive.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::config("co-pilot parameters must be positive"));
        }
        if !(0.0..=1.0).contains(&self.c_min) {
            return Err(Error::config("c_min must lie in [0, 1]"));
        }
        if self.arrival_margin < 0.0
            || self.stop_offset < 0.0
            || self.adapt_slack < 0.0
            || self.amber_margin < 0.0
        {
            return Err(Error::config("margins must be non-negative"));
        }
        Ok(())
    }
}

fn arrival_feasible(
    forecast: &SpatForecast,
    now: f64,
    ta: f64,
    speed: f64,
    params: &CopilotParams,
) -> bool {
    let phases = &forecast.phases;
    phases.iter().enumerate().any(|(i, p)| {
        if p.confidence < params.c_min {
            return false;
        }
        match p.state {
            LightState::Green => {
                let start = if p.start <= now {
                    p.start
                } else {
                    p.start + params.arrival_margin
                };
                ta >= start && ta < p.end - params.arrival_margin
            }
            LightState::Amber if params.amber_entry => {
                let after_green = i > 0
                    && phases[i - 1].state == LightState::Green
                    && phases[i - 1].confidence >= params.c_min;
                let usable =
                    (speed / (2.0 * params.b_comf)).min(p.end - p.start - params.amber_margin);
                after_green && ta >= p.start && ta < p.start + usable
            }
            _ => false,
        }
    })
}

fn stop_plan(
    now: f64,
    d: f64,
    v: f64,
    forecast: &SpatForecast,
    params: &CopilotParams,
) -> SpeedPlan {
    let stop_point = (d - params.stop_offset).max(0.0);
    let required_decel = if v <= 0.0 {
        0.0
    } else if stop_point > 0.0 {
        v * v / (2.0 * stop_point)
    } else {
        f64::INFINITY
    };
    SpeedPlan {
        mode: PlanMode::Stop,
        target_speed: None,
        stop_point: Some(stop_point),
        resume_at: forecast.next_green_start(now),
        planned_at: now,
        required_decel,
    }
}

/// Candidate approach speeds, fastest first: the limit itself, then the
/// grid values in `[v_min_adapt, v_limit)`.
fn candidates(v_limit: f64, params: &CopilotParams) -> impl Iterator<Item = f64> + '_ {
    let hi = (v_limit / params.grid).ceil() as i64;
    let lo = (params.v_min_adapt / params.grid).ceil() as i64;
    std::iter::once(v_limit).chain(
        (lo..=hi)
            .rev()
            .map(move |k| k as f64 * params.grid)
            .filter(move |c| *c < v_limit && *c >= params.v_min_adapt),
    )
}

/// Plans against the forecast's issue time. See [`plan_speed_at`].
pub fn plan_speed(
    d: f64,
    v: f64,
    v_limit: f64,
    forecast: &SpatForecast,
    params: &CopilotParams,
) -> Result<SpeedPlan> {
    plan_speed_at(forecast.msg_time, d, v, v_limit, forecast, params)
}

/// Fastest constant speed whose arrival at the stop line, `d` metres ahead,
/// falls inside a sufficiently confident green phase.
pub fn plan_speed_at(
    now: f64,
    d: f64,
    v: f64,
    v_limit: f64,
    forecast: &SpatForecast,
    params: &CopilotParams,
) -> Result<SpeedPlan> {
    if forecast.phases.is_empty() {
        return Err(Error::NoForecast);
    }
    if !(d >= 0.0) || !(v >= 0.0) || !(v_limit > 0.0) {
        return Err(Error::config(format!(
            "invalid planning input d={d} v={v} v_limit={v_limit}"
        )));
    }
    let cruise = |target: f64, mode: PlanMode| SpeedPlan {
        mode,
        target_speed: Some(target),
        stop_point: None,
        resume_at: None,
        planned_at: now,
        required_decel: 0.0,
    };
    if d <= 1e-9 {
        let green = forecast
            .phase_at(now)
            .is_some_and(|p| p.state == LightState::Green);
        return Ok(if green {
            cruise(v_limit, PlanMode::Cruise)
        } else {
            stop_plan(now, d, v, forecast, params)
        });
    }
    for c in candidates(v_limit, params) {
        if arrival_feasible(forecast, now, now + d / c, c, params) {
            let mode = if c == v_limit {
                PlanMode::Cruise
            } else {
                PlanMode::Adapt
            };
            return Ok(cruise(c, mode));
        }
    }
    Ok(stop_plan(now, d, v, forecast, params))
}

/// Current kinematics of the planning vehicle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApproachState {
    pub now: f64,
    pub d: f64,
    pub v: f64,
    pub v_limit: f64,
}

/// Replans after a forecast update. The flag reports a harsh reaction: the new
/// plan needs more than comfortable braking, or the requested speed can no
/// longer be reached before the line even at `b_emergency`, in which case the
/// plan degrades to STOP.
pub fn on_forecast_change(
    _plan: &SpeedPlan,
    forecast: &SpatForecast,
    st: ApproachState,
    params: &CopilotParams,
) -> Result<(SpeedPlan, bool)> {
    let new = plan_speed_at(st.now, st.d, st.v, st.v_limit, forecast, params)?;
    match new.mode {
        PlanMode::Stop => {
            let harsh = new.required_decel > params.b_comf;
            Ok((new, harsh))
        }
        PlanMode::Adapt | PlanMode::Cruise => {
            let target = new.target_speed.unwrap_or(st.v_limit);
            let needed = if st.v > target && st.d > 0.0 {
                (st.v * st.v - target * target) / (2.0 * st.d)
            } else {
                0.0
            };
            if needed > params.b_emergency {
                Ok((stop_plan(st.now, st.d, st.v, forecast, params), true))
            } else {
                Ok((new, needed > params.b_comf))
            }
        }
    }
}

/// Feasible arrival interval for a vehicle `d` metres from the line.
pub fn arrival_window(now: f64, d: f64, v_limit: f64, params: &CopilotParams) -> (f64, f64) {
    let hi_speed = v_limit.max(1e-9);
    let lo_speed = params.v_min_adapt.min(hi_speed);
    (now + d / hi_speed, now + d / lo_speed)
}

/// True iff every phase overlapping `window` has confidence at least `c_min`.
pub fn confidence_gate(forecast: &SpatForecast, c_min: f64, window: (f64, f64)) -> bool {
    if forecast.phases.is_empty() {
        return false;
    }
    let (lo, hi) = window;
    forecast
        .phases
        .iter()
        .filter(|p| p.end > lo && p.start <= hi)
        .all(|p| p.confidence >= c_min)
}

/// Inputs to one controller step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlInput {
    pub v: f64,
    pub v_limit: f64,
    /// Remaining distance to the stop line, if a signal is ahead.
    pub d_line: Option<f64>,
}

/// Acceleration that brings the vehicle to rest exactly `d` metres ahead.
///
/// Above the approach profile `sqrt(2 b d)` it brakes at the constant rate that
/// stops on the point; below it, it speeds up towards the profile.
pub fn stop_accel(v: f64, d: f64, v_limit: f64, dt: f64, params: &CopilotParams) -> f64 {
    if d <= 1e-3 {
        return if v > 0.0 { -params.b_emergency } else { 0.0 };
    }
    let v_ref = (2.0 * params.approach_decel * d).sqrt();
    if v >= v_ref {
        -(v * v) / (2.0 * d)
    } else {
        (params.speed_gain * (v_ref - v))
            .min(params.a_max)
            .min((v_limit - v) / dt)
    }
}

/// Tracks `target` with a proportional law, never exceeding `v_limit`.
pub fn speed_accel(v: f64, target: f64, v_limit: f64, dt: f64, params: &CopilotParams) -> f64 {
    let target = target.min(v_limit);
    (params.speed_gain * (target - v))
        .clamp(-params.b_comf, params.a_max)
        .min((v_limit - v) / dt)
}

/// ADAPT control towards an arrival `tau` seconds ahead, `d` metres away.
///
/// The profile brakes at `approach_decel` down to a speed `c` and holds it,
/// with `c` chosen so the line is reached exactly at `tau`. Below `c` the
/// speed is tracked normally.
pub fn adapt_accel(v: f64, d: f64, tau: f64, v_limit: f64, dt: f64, params: &CopilotParams) -> f64 {
    let b = params.approach_decel;
    let a = b * tau - v;
    let disc = a * a - v * v + 2.0 * b * d;
    let c = if disc >= 0.0 {
        -a + disc.sqrt()
    } else {
        f64::NAN
    };
    if !(c >= 0.0 && c <= v + 1e-9) {
        if v <= d / tau.max(1e-9) {
            return speed_accel(v, d / tau.max(1e-9), v_limit, dt, params);
        }
        let needed = 2.0 * (d - v * tau) / (tau * tau);
        return needed
            .clamp(-params.b_comf, params.a_max)
            .min((v_limit - v) / dt);
    }
    if v > c + 1e-9 {
        -b.min((v - c) / dt)
    } else {
        speed_accel(v, c, v_limit, dt, params)
    }
}

/// One control step for the current plan and the signal state at the line.
pub fn longitudinal_step(
    input: ControlInput,
    plan: &SpeedPlan,
    signal: Option<LightState>,
    dt: f64,
    params: &CopilotParams,
) -> f64 {
    match (plan.mode, input.d_line) {
        (PlanMode::Stop, Some(d)) if signal != Some(LightState::Green) => stop_accel(
            input.v,
            (d - params.stop_offset).max(0.0),
            input.v_limit,
            dt,
            params,
        ),
        (PlanMode::Stop, _) => speed_accel(input.v, input.v_limit, input.v_limit, dt, params),
        (PlanMode::Adapt, Some(d)) if d > 0.0 => {
            let c = plan.target_speed.unwrap_or(input.v_limit).max(1e-9);
            adapt_accel(
                input.v,
                d,
                d / c + params.adapt_slack,
                input.v_limit,
                dt,
                params,
            )
        }
        (_, _) => speed_accel(
            input.v,
            plan.target_speed.unwrap_or(input.v_limit),
            input.v_limit,
            dt,
            params,
        ),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub t: f64,
    pub vehicle_id: u64,
    pub mode: PlanMode,
    pub target_speed: f64,
    pub d_to_line: f64,
    pub signal_state: Option<LightState>,
    pub harsh: bool,
}

/// The co-pilot of one equipped vehicle.
#[derive(Clone, Debug)]
pub struct CopilotAgent {
    pub vehicle_id: u64,
    pub params: CopilotParams,
    forecasts: BTreeMap<u32, SpatForecast>,
    plan: Option<SpeedPlan>,
    pub telemetry: Vec<TelemetryRow>,
    pub harsh_events: usize,
}

/// What the vehicle knows about the next signal ahead.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignalAhead {
    pub id: u32,
    pub line_s: f64,
    /// State observed at the line this tick.
    pub state: LightState,
}

impl CopilotAgent {
    pub fn new(vehicle_id: u64, params: CopilotParams) -> Self {
        Self {
            vehicle_id,
            params,
            forecasts: BTreeMap::new(),
            plan: None,
            telemetry: Vec::new(),
            harsh_events: 0,
        }
    }

    /// Stores a forecast unless a newer one for the same signal is held.
    pub fn receive(&mut self, forecast: SpatForecast) {
        match self.forecasts.get(&forecast.signal_id) {
            Some(old) if old.msg_time >= forecast.msg_time => {}
            _ => {
                self.forecasts.insert(forecast.signal_id, forecast);
            }
        }
    }

    pub fn plan(&self) -> Option<&SpeedPlan> {
        self.plan.as_ref()
    }

    /// Replans and returns the acceleration cap for the next tick.
    pub fn step(
        &mut self,
        now: f64,
        s: f64,
        v: f64,
        v_limit: f64,
        ahead: Option<SignalAhead>,
        dt: f64,
    ) -> f64 {
        let p = self.params.clone();
        let Some(sig) = ahead else {
            let plan = SpeedPlan {
                mode: PlanMode::Cruise,
                target_speed: Some(v_limit),
                stop_point: None,
                resume_at: None,
                planned_at: now,
                required_decel: 0.0,
            };
            let a = speed_accel(v, v_limit, v_limit, dt, &p);
            self.record(now, &plan, f64::INFINITY, None, false);
            self.plan = Some(plan);
            return a;
        };
        let d = (sig.line_s - s).max(0.0);
        let st = ApproachState { now, d, v, v_limit };
        let forecast = self.forecasts.get(&sig.id);
        let usable = forecast
            .is_some_and(|f| confidence_gate(f, p.c_min, arrival_window(now, d, v_limit, &p)));
        let empty = SpatForecast {
            signal_id: sig.id,
            msg_time: now,
            phases: Vec::new(),
        };
        let (mut plan, mut harsh) = match (usable, forecast) {
            (true, Some(f)) => {
                let prev = self
                    .plan
                    .clone()
                    .unwrap_or_else(|| stop_plan(now, d, v, f, &p));
                match on_forecast_change(&prev, f, st, &p) {
                    Ok((plan, harsh)) => (plan, harsh && prev.mode != PlanMode::Stop),
                    Err(_) => (stop_plan(now, d, v, f, &p), false),
                }
            }
            _ => {
                // Reactive fallback: act on the observed light only.
                if sig.state == LightState::Green {
                    let plan = SpeedPlan {
                        mode: PlanMode::Cruise,
                        target_speed: Some(v_limit),
                        stop_point: None,
                        resume_at: None,
                        planned_at: now,
                        required_decel: 0.0,
                    };
                    (plan, false)
                } else {
                    (stop_plan(now, d, v, forecast.unwrap_or(&empty), &p), false)
                }
            }
        };

        // Backstop against the observed light: at the last point where a
        // comfortable stop is still possible, stop for a non-green line that
        // the current speed would reach before green.
        if sig.state != LightState::Green && plan.mode != PlanMode::Stop {
            let arrival = now + d / v.max(0.1);
            let next_green = forecast
                .and_then(|f| f.next_green_start(now))
                .unwrap_or(f64::INFINITY);
            let stop = stop_plan(now, d, v, forecast.unwrap_or(&empty), &p);
            let last_chance = stop.required_decel >= p.b_comf || d <= p.stop_offset + 1e-9;
            let limit = if sig.state == LightState::Amber && p.amber_entry {
                1.25 * p.b_comf
            } else {
                p.b_emergency
            };
            if arrival < next_green + 1e-9 && last_chance && stop.required_decel <= limit {
                harsh |= stop.required_decel > p.b_comf
                    && self.plan.as_ref().is_some_and(|q| q.mode != PlanMode::Stop);
                plan = stop;
            }
        }
        // A stop that cannot be made on green is abandoned, and so is one on
        // amber that is no longer comfortable while the line is still
        // cleared before red.
        let clears_amber = sig.state == LightState::Amber
            && forecast.and_then(|f| f.phase_at(now)).is_some_and(|ph| {
                ph.state == LightState::Amber && now + d / v.max(0.1) < ph.end - 0.1
            })
            && plan.required_decel > 1.25 * p.b_comf;
        if plan.mode == PlanMode::Stop
            && (clears_amber
                || (plan.required_decel > p.b_emergency && sig.state != LightState::Red))
        {
            harsh = false;
            plan = SpeedPlan {
                mode: PlanMode::Cruise,
                target_speed: Some(v.min(v_limit).max(p.v_min_adapt.min(v_limit))),
                stop_point: None,
                resume_at: None,
                planned_at: now,
                required_decel: 0.0,
            };
        }

        let a = longitudinal_step(
            ControlInput {
                v,
                v_limit,
                d_line: Some(d),
            },
            &plan,
            Some(sig.state),
            dt,
            &p,
        );
        if harsh {
            self.harsh_events += 1;
        }
        self.record(now, &plan, d, Some(sig.state), harsh);
        self.plan = Some(plan);
        a
    }

    fn record(&mut self, t: f64, plan: &SpeedPlan, d: f64, state: Option<LightState>, harsh: bool) {
        self.telemetry.push(TelemetryRow {
            t,
            vehicle_id: self.vehicle_id,
            mode: plan.mode,
            target_speed: plan.target_speed.unwrap_or(0.0),
            d_to_line: d,
            signal_state: state,
            harsh,
        });
    }
}

/// Writes co-pilot telemetry in the documented column order.
pub fn write_telemetry<W: std::io::Write>(rows: &[TelemetryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "t",
        "vehicle_id",
        "mode",
        "target_speed",
        "d_to_line",
        "signal_state",
        "harsh_flag",
    ])?;
    for r in rows {
        let d = if r.d_to_line.is_finite() {
            r.d_to_line.to_string()
        } else {
            String::new()
        };
        w.write_record([
            r.t.to_string(),
            r.vehicle_id.to_string(),
            r.mode.as_str().to_string(),
            r.target_speed.to_string(),
            d,
            r.signal_state
                .map(|s| s.as_str().to_string())
                .unwrap_or_default(),
            u8::from(r.harsh).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads telemetry written by [`write_telemetry`].
pub fn read_telemetry<R: std::io::Read>(input: R) -> Result<Vec<TelemetryRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let bad = |what: &str, v: &str| Error::config(format!("bad telemetry {what} `{v}`"));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let mode = match &rec[2] {
            "CRUISE" => PlanMode::Cruise,
            "ADAPT" => PlanMode::Adapt,
            "STOP" => PlanMode::Stop,
            m => return Err(bad("mode", m)),
        };
        let signal_state = match &rec[5] {
            "" => None,
            "RED" => Some(LightState::Red),
            "AMBER" => Some(LightState::Amber),
            "GREEN" => Some(LightState::Green),
            s => return Err(bad("signal_state", s)),
        };
        out.push(TelemetryRow {
            t: rec[0].parse().map_err(|_| bad("t", &rec[0]))?,
            vehicle_id: rec[1].parse().map_err(|_| bad("vehicle_id", &rec[1]))?,
            mode,
            target_speed: rec[3].parse().map_err(|_| bad("target_speed", &rec[3]))?,
            d_to_line: if rec[4].is_empty() {
                f64::INFINITY
            } else {
                rec[4].parse().map_err(|_| bad("d_to_line", &rec[4]))?
            },
            signal_state,
            harsh: &rec[6] == "1",
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phases(list: &[(LightState, f64, f64, f64)]) -> SpatForecast {
        SpatForecast {
            signal_id: 1,
            msg_time: 0.0,
            phases: list
                .iter()
                .map(|&(state, start, end, confidence)| SpatPhase {
                    state,
                    start,
                    end,
                    confidence,
                })
                .collect(),
        }
    }

    use LightState::{Amber, Green, Red};

    #[test]
    fn adapt_to_green_start() {
        let f = phases(&[
            (Red, 0.0, 20.0, 1.0),
            (Green, 20.0, 40.0, 1.0),
            (Red, 40.0, 80.0, 1.0),
        ]);
        let plan = plan_speed(200.0, 13.89, 13.89, &f, &CopilotParams::default()).unwrap();
        assert_eq!(plan.mode, PlanMode::Adapt);
        assert_eq!(plan.target_speed, Some(10.0));
    }

    #[test]
    fn cruise_when_green_holds() {
        let f = phases(&[
            (Green, 0.0, 10.0, 1.0),
            (Amber, 10.0, 13.0, 1.0),
            (Red, 13.0, 60.0, 1.0),
        ]);
        let plan = plan_speed(100.0, 13.89, 13.89, &f, &CopilotParams::default()).unwrap();
        assert_eq!(plan.mode, PlanMode::Cruise);
        assert_eq!(plan.target_speed, Some(13.89));
    }

    #[test]
    fn stop_below_min_adapt_speed() {
        let f = phases(&[(Red, 0.0, 30.0, 1.0), (Green, 30.0, 60.0, 1.0)]);
        let plan = plan_speed(50.0, 13.89, 13.89, &f, &CopilotParams::default()).unwrap();
        assert_eq!(plan.mode, PlanMode::Stop);
        assert_eq!(plan.resume_at, Some(30.0));
        let sp = plan.stop_point.unwrap();
        assert!(sp < 50.0 && sp >= 0.0);
    }

    #[test]
    fn zero_distance_in_green_passes() {
        let f = phases(&[(Green, 0.0, 10.0, 1.0)]);
        let plan = plan_speed(0.0, 5.0, 13.89, &f, &CopilotParams::default()).unwrap();
        assert_eq!(plan.mode, PlanMode::Cruise);
    }

    #[test]
    fn empty_forecast_errors() {
        let f = phases(&[]);
        assert!(matches!(
            plan_speed(10.0, 5.0, 13.89, &f, &CopilotParams::default()),
            Err(Error::NoForecast)
        ));
    }

    #[test]
    fn delayed_green_lowers_speed() {
        let p = CopilotParams::default();
        let f = phases(&[
            (Red, 0.0, 20.0, 1.0),
            (Green, 20.0, 40.0, 1.0),
            (Red, 40.0, 80.0, 1.0),
        ]);
        let plan = plan_speed(200.0, 12.0, 13.89, &f, &p).unwrap();
        let shifted = phases(&[
            (Red, 0.0, 25.0, 1.0),
            (Green, 25.0, 40.0, 1.0),
            (Red, 40.0, 80.0, 1.0),
        ]);
        let st = ApproachState {
            now: 0.0,
            d: 200.0,
            v: 12.0,
            v_limit: 13.89,
        };
        let (new, _) = on_forecast_change(&plan, &shifted, st, &p).unwrap();
        assert_eq!(new.mode, PlanMode::Adapt);
        assert!(new.target_speed.unwrap() < plan.target_speed.unwrap());
        assert_eq!(new.target_speed, Some(8.0));
    }

    #[test]
    fn extended_green_upgrades_to_cruise() {
        let p = CopilotParams::default();
        let f = phases(&[
            (Green, 0.0, 5.0, 1.0),
            (Red, 5.0, 20.0, 1.0),
            (Green, 20.0, 40.0, 1.0),
        ]);
        let st = ApproachState {
            now: 0.0,
            d: 100.0,
            v: 13.89,
            v_limit: 13.89,
        };
        let plan = plan_speed(100.0, 13.89, 13.89, &f, &p).unwrap();
        assert_eq!(plan.mode, PlanMode::Adapt);
        let longer = phases(&[
            (Green, 0.0, 10.0, 1.0),
            (Red, 10.0, 20.0, 1.0),
            (Green, 20.0, 40.0, 1.0),
        ]);
        let (new, _) = on_forecast_change(&plan, &longer, st, &p).unwrap();
        assert_eq!(new.mode, PlanMode::Cruise);
        let (same, _) = on_forecast_change(&plan, &f, st, &p).unwrap();
        assert_eq!(same, plan);
    }

    #[test]
    fn confidence_gate_looks_at_arrival_window_only() {
        let p = CopilotParams::default();
        let all = phases(&[(Green, 0.0, 30.0, 1.0), (Red, 30.0, 60.0, 1.0)]);
        let win = arrival_window(0.0, 100.0, 13.89, &p);
        assert!(confidence_gate(&all, 0.7, win));
        let low = phases(&[(Green, 0.0, 30.0, 0.4), (Red, 30.0, 60.0, 1.0)]);
        assert!(!confidence_gate(&low, 0.7, win));
        let far = phases(&[
            (Green, 0.0, 30.0, 1.0),
            (Red, 30.0, 60.0, 1.0),
            (Green, 60.0, 90.0, 0.3),
        ]);
        assert!(confidence_gate(&far, 0.7, win));
    }

    #[test]
    fn stop_controller_lands_on_point() {
        // Fine-step reference integration of the same law.
        let p = CopilotParams::default();
        let plan = SpeedPlan {
            mode: PlanMode::Stop,
            target_speed: None,
            stop_point: Some(99.0),
            resume_at: None,
            planned_at: 0.0,
            required_decel: 0.0,
        };
        for &dt in &[0.1, 0.001] {
            let (mut s, mut v) = (0.0f64, 13.89f64);
            for _ in 0..(60.0 / dt) as usize {
                let a = longitudinal_step(
                    ControlInput {
                        v,
                        v_limit: 13.89,
                        d_line: Some(100.0 - s),
                    },
                    &plan,
                    Some(Red),
                    dt,
                    &p,
                );
                if v + a * dt < 0.0 {
                    s += v * v / (-2.0 * a);
                    v = 0.0;
                } else {
                    s += v * dt + 0.5 * a * dt * dt;
                    v += a * dt;
                }
                assert!(v <= 13.89 + 1e-9);
                assert!(a >= -p.b_emergency - 1e-9);
            }
            assert!(v < 0.05, "v = {v}");
            assert!((s - 99.0).abs() < 0.5, "s = {s}");
        }
    }

    #[test]
    fn adapt_settles_monotonically() {
        let p = CopilotParams::default();
        let plan = SpeedPlan {
            mode: PlanMode::Adapt,
            target_speed: Some(10.0),
            stop_point: None,
            resume_at: None,
            planned_at: 0.0,
            required_decel: 0.0,
        };
        let mut v = 13.89;
        let mut prev = v;
        for _ in 0..200 {
            let a = longitudinal_step(
                ControlInput {
                    v,
                    v_limit: 13.89,
                    d_line: None,
                },
                &plan,
                None,
                0.1,
                &p,
            );
            v += a * 0.1;
            assert!(v <= prev + 1e-12);
            assert!(v >= 10.0 - 1e-12);
            prev = v;
        }
        assert!((v - 10.0).abs() < 0.1);
    }

    #[test]
    fn resumes_on_green() {
        let p = CopilotParams::default();
        let plan = SpeedPlan {
            mode: PlanMode::Stop,
            target_speed: None,
            stop_point: Some(0.0),
            resume_at: Some(10.0),
            planned_at: 0.0,
            required_decel: 0.0,
        };
        let input = ControlInput {
            v: 0.0,
            v_limit: 13.89,
            d_line: Some(1.0),
        };
        assert_eq!(longitudinal_step(input, &plan, Some(Red), 0.1, &p), 0.0);
        assert!(longitudinal_step(input, &plan, Some(Green), 0.1, &p) > 0.0);

        let mut agent = CopilotAgent::new(
            1,
            CopilotParams {
                arrival_margin: 1.0,
                ..p
            },
        );
        agent.receive(SpatForecast {
            signal_id: 1,
            msg_time: 10.0,
            phases: vec![SpatPhase {
                state: Green,
                start: 10.0,
                end: 40.0,
                confidence: 1.0,
            }],
        });
        let sig = SignalAhead {
            id: 1,
            line_s: 100.0,
            state: Green,
        };
        assert!(agent.step(10.0, 99.0, 0.0, 13.89, Some(sig), 0.1) > 0.0);
    }

    #[test]
    fn telemetry_header() {
        let mut buf = Vec::new();
        write_telemetry(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().trim(),
            "t,vehicle_id,mode,target_speed,d_to_line,signal_state,harsh_flag"
        );
    }
}
