//! Traffic signal heads: fixed-time plans with optional scheduled green-start
//! shifts, and actuated plans with gap-out and priority requests.

use serde::{Deserialize, Serialize};

use crate::copilot::{SpatForecast, SpatPhase};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LightState {
    Red,
    Amber,
    Green,
}

impl LightState {
    pub fn as_str(self) -> &'static str {
        match self {
            LightState::Red => "RED",
            LightState::Amber => "AMBER",
            LightState::Green => "GREEN",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            LightState::Red => 0,
            LightState::Amber => 1,
            LightState::Green => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(LightState::Red),
            1 => Some(LightState::Amber),
            2 => Some(LightState::Green),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseStep {
    pub state: LightState,
    pub duration: f64,
}

fn default_amber() -> f64 {
    3.0
}
fn default_red() -> f64 {
    30.0
}
fn default_detector() -> f64 {
    40.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SignalPlan {
    Fixed {
        cycle: Vec<PhaseStep>,
        #[serde(default)]
        offset: f64,
    },
    Actuated {
        min_green: f64,
        max_green: f64,
        gap_out: f64,
        #[serde(default = "default_amber")]
        amber: f64,
        /// Fixed service time of the conflicting approach.
        #[serde(default = "default_red")]
        red: f64,
        #[serde(default)]
        priority_request_hook: bool,
        /// Length of the presence detector upstream of the stop line.
        #[serde(default = "default_detector")]
        detector_length: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalHead {
    pub id: u32,
    /// Stop line position.
    pub s: f64,
    pub plan: SignalPlan,
}

impl SignalHead {
    pub fn validate(&self) -> Result<()> {
        match &self.plan {
            SignalPlan::Fixed { cycle, .. } => {
                if cycle.is_empty() {
                    return Err(Error::config(format!("signal {}: empty cycle", self.id)));
                }
                if cycle.iter().any(|p| !(p.duration > 0.0)) {
                    return Err(Error::config(format!(
                        "signal {}: cycle durations must be positive",
                        self.id
                    )));
                }
            }
            SignalPlan::Actuated {
                min_green,
                max_green,
                gap_out,
                amber,
                red,
                ..
            } => {
                if !(*min_green > 0.0) || !(*gap_out > 0.0) || !(*amber > 0.0) || !(*red > 0.0) {
                    return Err(Error::config(format!(
                        "signal {}: actuated timings must be positive",
                        self.id
                    )));
                }
                if min_green > max_green {
                    return Err(Error::config(format!(
                        "signal {}: min_green exceeds max_green",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Shift of the green start of fixed-plan cycle `cycle_index`. Positive
/// deltas extend the preceding red, negative ones start green early.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreenShift {
    pub cycle_index: i64,
    pub delta: f64,
    /// Time from which forecasts know about the shift.
    pub announced_at: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedTimeline {
    cycle: Vec<PhaseStep>,
    offset: f64,
    cycle_len: f64,
    /// Start of the green step that follows a non-green step, within a cycle.
    green_start: Option<f64>,
    green_len: f64,
    red_before_green: f64,
    shifts: Vec<GreenShift>,
}

impl FixedTimeline {
    pub fn new(cycle: Vec<PhaseStep>, offset: f64) -> Self {
        let cycle_len = cycle.iter().map(|p| p.duration).sum();
        let n = cycle.len();
        let mut green_start = None;
        let mut green_len = 0.0;
        let mut red_before_green = 0.0;
        let mut acc = 0.0;
        for (i, step) in cycle.iter().enumerate() {
            let prev = &cycle[(i + n - 1) % n];
            if step.state == LightState::Green
                && prev.state == LightState::Red
                && green_start.is_none()
            {
                green_start = Some(acc);
                green_len = step.duration;
                red_before_green = prev.duration;
            }
            acc += step.duration;
        }
        Self {
            cycle,
            offset,
            cycle_len,
            green_start,
            green_len,
            red_before_green,
            shifts: Vec::new(),
        }
    }

    pub fn cycle_len(&self) -> f64 {
        self.cycle_len
    }

    pub fn shifts(&self) -> &[GreenShift] {
        &self.shifts
    }

    fn green_start_time(&self, k: i64) -> Option<f64> {
        self.green_start
            .map(|g| self.offset + g + k as f64 * self.cycle_len)
    }

    fn base_state(&self, t: f64) -> LightState {
        let phase = (t - self.offset).rem_euclid(self.cycle_len);
        let mut acc = 0.0;
        for step in &self.cycle {
            acc += step.duration;
            if phase < acc {
                return step.state;
            }
        }
        self.cycle
            .last()
            .map(|s| s.state)
            .unwrap_or(LightState::Red)
    }

    fn shift_for(&self, k: i64, known: impl Fn(&GreenShift) -> bool) -> f64 {
        self.shifts
            .iter()
            .filter(|s| s.cycle_index == k && known(s))
            .map(|s| s.delta)
            .sum()
    }

    fn state_filtered(&self, t: f64, known: impl Fn(&GreenShift) -> bool + Copy) -> LightState {
        let base = self.base_state(t);
        let (Some(g0), false) = (self.green_start, self.shifts.is_empty()) else {
            return base;
        };
        let k = ((t - self.offset - g0) / self.cycle_len).floor() as i64;
        let gk = self.green_start_time(k).unwrap_or(f64::NAN);
        let dk = self.shift_for(k, known);
        if dk > 0.0 && t >= gk && t < gk + dk {
            return LightState::Red;
        }
        let gn = self.green_start_time(k + 1).unwrap_or(f64::NAN);
        let dn = self.shift_for(k + 1, known);
        if dn < 0.0 && t >= gn + dn && t < gn {
            return LightState::Green;
        }
        base
    }

    /// Actual signal state at `t`, with every scheduled shift applied.
    pub fn state_at(&self, t: f64) -> LightState {
        self.state_filtered(t, |_| true)
    }

    /// Schedules a green-start shift of `delta` on the first green start at
    /// least `min_lead` seconds after `now` whose cycle is not shifted yet.
    /// Returns `None` when the cycle layout cannot absorb the shift.
    pub fn schedule_shift(&mut self, now: f64, delta: f64, min_lead: f64) -> Option<GreenShift> {
        let g0 = self.green_start?;
        if delta.abs() >= self.green_len || delta.abs() >= self.red_before_green {
            return None;
        }
        let mut k = ((now + min_lead - self.offset - g0) / self.cycle_len).ceil() as i64;
        loop {
            let gk = self.green_start_time(k)?;
            let taken = self.shifts.iter().any(|s| s.cycle_index == k);
            // A negative shift must not pull green start to before `now + min_lead`
            // either, otherwise a vehicle committed to stopping could be surprised.
            if gk >= now + min_lead && !taken && gk + delta.min(0.0) >= now + min_lead {
                let shift = GreenShift {
                    cycle_index: k,
                    delta,
                    announced_at: now,
                };
                self.shifts.push(shift);
                return Some(shift);
            }
            k += 1;
            if k > 1_000_000 {
                return None;
            }
        }
    }

    /// Forecast as known at `now`: shifts announced later are not included.
    pub fn forecast(&self, signal_id: u32, now: f64, horizon: f64) -> SpatForecast {
        let end = now + horizon;
        let known = |s: &GreenShift| s.announced_at <= now;
        let mut cuts = vec![now, end];
        let k0 = ((now - self.offset) / self.cycle_len).floor() as i64 - 1;
        let k1 = ((end - self.offset) / self.cycle_len).ceil() as i64 + 1;
        for k in k0..=k1 {
            let mut acc = self.offset + k as f64 * self.cycle_len;
            for step in &self.cycle {
                cuts.push(acc);
                acc += step.duration;
            }
        }
        for s in self.shifts.iter().filter(|s| known(s)) {
            if let Some(g) = self.green_start_time(s.cycle_index) {
                cuts.push(g + s.delta);
            }
        }
        cuts.retain(|c| *c >= now && *c <= end);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut phases: Vec<SpatPhase> = Vec::new();
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let state = self.state_filtered(a, known);
            match phases.last_mut() {
                Some(last) if last.state == state => last.end = b,
                _ => phases.push(SpatPhase {
                    state,
                    start: a,
                    end: b,
                    confidence: 1.0,
                }),
            }
        }
        SpatForecast {
            signal_id,
            msg_time: now,
            phases,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActuatedState {
    pub phase: LightState,
    pub phase_start: f64,
    pub last_actuation: f64,
    pub priority_pending: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
enum Runtime {
    Fixed(FixedTimeline),
    Actuated(ActuatedState),
}

/// A signal head together with its run-time state.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalController {
    pub head: SignalHead,
    runtime: Runtime,
    current: LightState,
}

impl SignalController {
    pub fn new(head: SignalHead) -> Self {
        let (runtime, current) = match &head.plan {
            SignalPlan::Fixed { cycle, offset } => {
                let tl = FixedTimeline::new(cycle.clone(), *offset);
                let st = tl.state_at(0.0);
                (Runtime::Fixed(tl), st)
            }
            SignalPlan::Actuated { .. } => (
                Runtime::Actuated(ActuatedState {
                    phase: LightState::Green,
                    phase_start: 0.0,
                    last_actuation: 0.0,
                    priority_pending: None,
                }),
                LightState::Green,
            ),
        };
        Self {
            head,
            runtime,
            current,
        }
    }

    pub fn id(&self) -> u32 {
        self.head.id
    }

    /// State computed by the latest [`signal_update`].
    pub fn state(&self) -> LightState {
        self.current
    }

    pub fn is_actuated(&self) -> bool {
        matches!(self.runtime, Runtime::Actuated(_))
    }

    pub fn detector_length(&self) -> f64 {
        match self.head.plan {
            SignalPlan::Actuated {
                detector_length, ..
            } => detector_length,
            SignalPlan::Fixed { .. } => 0.0,
        }
    }

    pub fn fixed_timeline(&self) -> Option<&FixedTimeline> {
        match &self.runtime {
            Runtime::Fixed(tl) => Some(tl),
            Runtime::Actuated(_) => None,
        }
    }

    pub fn actuated_state(&self) -> Option<&ActuatedState> {
        match &self.runtime {
            Runtime::Actuated(st) => Some(st),
            Runtime::Fixed(_) => None,
        }
    }

    pub fn schedule_shift(&mut self, now: f64, delta: f64, min_lead: f64) -> Option<GreenShift> {
        match &mut self.runtime {
            Runtime::Fixed(tl) => tl.schedule_shift(now, delta, min_lead),
            Runtime::Actuated(_) => None,
        }
    }

    /// Phase forecast issued at `now`, covering `horizon` seconds.
    pub fn forecast(&self, now: f64, horizon: f64) -> SpatForecast {
        match (&self.runtime, &self.head.plan) {
            (Runtime::Fixed(tl), _) => tl.forecast(self.head.id, now, horizon),
            (
                Runtime::Actuated(st),
                SignalPlan::Actuated {
                    min_green,
                    max_green,
                    gap_out,
                    amber,
                    red,
                    priority_request_hook,
                    ..
                },
            ) => {
                let mut phases = Vec::new();
                let end = now + horizon;
                let min_step = 0.1;
                let (mut state, mut cursor, mut seg_end, mut conf) = match st.phase {
                    LightState::Green => {
                        let max_end = st.phase_start + max_green;
                        let pred = (st.phase_start + min_green)
                            .max(st.last_actuation + gap_out)
                            .min(max_end);
                        let c = if pred >= max_end - 1e-9 { 1.0 } else { 0.5 };
                        (LightState::Green, now, pred.max(now + min_step), c)
                    }
                    LightState::Amber => (
                        LightState::Amber,
                        now,
                        (st.phase_start + amber).max(now + min_step),
                        1.0,
                    ),
                    LightState::Red => {
                        let c = if *priority_request_hook { 0.8 } else { 1.0 };
                        (
                            LightState::Red,
                            now,
                            (st.phase_start + red).max(now + min_step),
                            c,
                        )
                    }
                };
                while cursor < end {
                    let e = seg_end.min(end);
                    phases.push(SpatPhase {
                        state,
                        start: cursor,
                        end: e,
                        confidence: conf,
                    });
                    cursor = e;
                    let (next, dur) = match state {
                        LightState::Green => (LightState::Amber, *amber),
                        LightState::Amber => (LightState::Red, *red),
                        LightState::Red => (LightState::Green, *min_green),
                    };
                    // Amber inherits the uncertainty of the green end it follows.
                    if state != LightState::Green {
                        conf = conf.min(0.5);
                    }
                    state = next;
                    seg_end = cursor + dur;
                }
                SpatForecast {
                    signal_id: self.head.id,
                    msg_time: now,
                    phases,
                }
            }
            (Runtime::Actuated(_), SignalPlan::Fixed { .. }) => {
                unreachable!("runtime mirrors plan")
            }
        }
    }
}

/// Advances `head` to time `t` and returns its state.
///
/// Fixed plans are a pure function of `t`. Actuated plans end green once
/// `min_green` has elapsed and no actuation was seen for `gap_out` seconds,
/// or at `max_green`. A priority request on a hooked head keeps green or cuts
/// the conflicting red short, so green is shown within `amber` of the request.
pub fn signal_update(
    head: &mut SignalController,
    t: f64,
    detector_occupancy: bool,
    priority_request: bool,
) -> LightState {
    let plan = head.head.plan.clone();
    let state = match (&mut head.runtime, plan) {
        (Runtime::Fixed(tl), _) => tl.state_at(t),
        (
            Runtime::Actuated(st),
            SignalPlan::Actuated {
                min_green,
                max_green,
                gap_out,
                amber,
                red,
                priority_request_hook,
                ..
            },
        ) => {
            if priority_request && priority_request_hook && st.priority_pending.is_none() {
                st.priority_pending = Some(t);
            }
            let elapsed = t - st.phase_start;
            let next = match st.phase {
                LightState::Green => {
                    if detector_occupancy {
                        st.last_actuation = t;
                    }
                    // A request during green is served by the green itself.
                    st.priority_pending = None;
                    let gapped = elapsed >= min_green && t - st.last_actuation >= gap_out;
                    (gapped || elapsed >= max_green).then_some(LightState::Amber)
                }
                LightState::Amber => (elapsed >= amber).then_some(LightState::Red),
                LightState::Red => {
                    (elapsed >= red || st.priority_pending.is_some()).then_some(LightState::Green)
                }
            };
            if let Some(n) = next {
                st.phase = n;
                st.phase_start = t;
                if n == LightState::Green {
                    st.last_actuation = t;
                    st.priority_pending = None;
                }
            }
            st.phase
        }
        (Runtime::Actuated(_), SignalPlan::Fixed { .. }) => unreachable!("runtime mirrors plan"),
    };
    head.current = state;
    state
}
