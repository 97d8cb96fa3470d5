//! Experiment runner: bundled presets, the per-tick wiring of all
//! subsystems, run directories and reports recomputed from them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::copilot::{
    read_telemetry, write_telemetry, CopilotAgent, CopilotParams, SignalAhead, TelemetryRow,
};
use crate::fusion::{
    eval_accuracy, percentile, AccuracyReport, FusionConfig, FusionServer, TruthFrame, TwinEntry,
    TwinFrame,
};
use crate::netlink::{
    read_latency_log, route_downlink, transmit, write_latency_log, Deduper, Destination,
    DownlinkMode, Endpoint, EventQueue, LatencyRecord, NetConfig, Payload,
};
use crate::rng::{stream, SimRng};
use crate::stations::{
    data_rate_report, ir_sense_tick, place_ir_stations, place_stations, sense_tick, truth_objects,
    Condition, DataRate, IrStationConfig, ObjectListMessage, SensorDefaults, StationConfig,
    TruthObject,
};
use crate::store::{
    config_hash, extract_events, extract_signal_passes, read_run, truth_rows, write_run,
    write_scenarios, CalibrationContext, EventThresholds, FusedRows, ScenarioRecord, Source,
    TrajectoryStore,
};
use crate::world::{
    build_corridor, BusStop, Commands, CorridorConfig, CorridorMap, DemandConfig, DriverDefaults,
    LightState, PhaseStep, Segment, SegmentKind, SignalHead, SignalPlan, VehicleClass, World,
    WorldConfig,
};
use crate::{grid_time, Error, Result};

/// Environment variable that overrides the output root.
pub const OUT_ENV: &str = "CORRIDOR_OUT";
/// Largest truth-to-track distance counted as a match in accuracy reports.
pub const ACCURACY_MAX_DIST: f64 = 3.0;
/// Frames a ground-truth object must exist before it counts as eligible.
pub const ACCURACY_WARMUP: u32 = 5;
/// A full stop counts when a signal line lies within this distance ahead.
pub const STOP_SIGNAL_RANGE: f64 = 100.0;
pub const STOP_SPEED: f64 = 0.1;

/// Output root: explicit path, else [`OUT_ENV`], else `runs`.
pub fn output_root(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Urban,
    Rural,
    Highway,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Urban, Preset::Rural, Preset::Highway];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Urban => "urban",
            Preset::Rural => "rural",
            Preset::Highway => "highway",
        }
    }

    pub fn scenario(self) -> ScenarioConfig {
        match self {
            Preset::Urban => urban(),
            Preset::Rural => rural(),
            Preset::Highway => highway(),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown preset `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialVehicle {
    pub class: VehicleClass,
    pub s: f64,
    pub lane: usize,
    pub v: f64,
    #[serde(default)]
    pub equipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrLayout {
    pub spacing: f64,
    pub mount_y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpatConfig {
    /// Period of the regular forecast broadcast, s.
    pub interval: f64,
    pub horizon: f64,
}

impl Default for SpatConfig {
    fn default() -> Self {
        Self {
            interval: 1.0,
            horizon: 120.0,
        }
    }
}

/// Green-start shifts injected into fixed-time signals at random times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShockConfig {
    pub count: usize,
    /// Magnitude of each shift; the sign is drawn.
    pub delta: f64,
    /// Minimum time between announcement and the shifted green start.
    pub min_lead: f64,
    pub earliest: f64,
}

impl Default for ShockConfig {
    fn default() -> Self {
        Self {
            count: 0,
            delta: 5.0,
            min_lead: 5.0,
            earliest: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub corridor: CorridorConfig,
    pub world: WorldConfig,
    pub driver: DriverDefaults,
    pub demand: DemandConfig,
    pub initial_vehicles: Vec<InitialVehicle>,
    pub sensors: SensorDefaults,
    pub station_spacing: f64,
    pub ir: Option<IrLayout>,
    pub condition: Condition,
    /// Miss probability of the optical sensors at night.
    pub night_optical_p_miss: f64,
    pub net: NetConfig,
    pub fusion: FusionConfig,
    pub copilot: CopilotParams,
    pub spat: SpatConfig,
    pub shocks: ShockConfig,
    pub events: EventThresholds,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        urban()
    }
}

fn fixed_signal(id: u32, s: f64, offset: f64) -> SignalHead {
    SignalHead {
        id,
        s,
        plan: SignalPlan::Fixed {
            cycle: vec![
                PhaseStep {
                    state: LightState::Green,
                    duration: 35.0,
                },
                PhaseStep {
                    state: LightState::Amber,
                    duration: 3.0,
                },
                PhaseStep {
                    state: LightState::Red,
                    duration: 22.0,
                },
            ],
            offset,
        },
    }
}

fn base(name: &str, corridor: CorridorConfig, rate: f64, spacing: f64) -> ScenarioConfig {
    ScenarioConfig {
        name: name.to_string(),
        corridor,
        world: WorldConfig::default(),
        driver: DriverDefaults::default(),
        demand: DemandConfig {
            rate,
            ..DemandConfig::default()
        },
        initial_vehicles: Vec::new(),
        sensors: SensorDefaults::default(),
        station_spacing: spacing,
        ir: None,
        condition: Condition::Day,
        night_optical_p_miss: 0.5,
        net: NetConfig::default(),
        fusion: FusionConfig::default(),
        copilot: CopilotParams::default(),
        spat: SpatConfig::default(),
        shocks: ShockConfig::default(),
        events: EventThresholds::default(),
    }
}

/// 1 km single-lane street at 50 km/h with three fixed-time signals.
pub fn urban() -> ScenarioConfig {
    let corridor = CorridorConfig {
        length: 1000.0,
        lanes_per_direction: 1,
        lane_width: 3.5,
        segments: vec![Segment {
            start: 0.0,
            end: 1000.0,
            kind: SegmentKind::Urban,
            speed_limit: 13.89,
        }],
        signals: vec![
            fixed_signal(1, 300.0, 0.0),
            fixed_signal(2, 600.0, 20.0),
            fixed_signal(3, 900.0, 40.0),
        ],
        bus_stops: vec![BusStop {
            s: 450.0,
            lateral_offset: 2.5,
        }],
        landmarks: Vec::new(),
    };
    base("urban", corridor, 0.17, 90.0)
}

/// 2 km two-lane road at 70 km/h with two actuated signals, the first one
/// accepting priority requests.
pub fn rural() -> ScenarioConfig {
    let actuated = |id: u32, s: f64, hook: bool| SignalHead {
        id,
        s,
        plan: SignalPlan::Actuated {
            min_green: 15.0,
            max_green: 45.0,
            gap_out: 3.0,
            amber: 4.0,
            red: 30.0,
            priority_request_hook: hook,
            detector_length: 40.0,
        },
    };
    let corridor = CorridorConfig {
        length: 2000.0,
        lanes_per_direction: 2,
        lane_width: 3.5,
        segments: vec![Segment {
            start: 0.0,
            end: 2000.0,
            kind: SegmentKind::Rural,
            speed_limit: 19.44,
        }],
        signals: vec![actuated(1, 700.0, true), actuated(2, 1400.0, false)],
        bus_stops: Vec::new(),
        landmarks: Vec::new(),
    };
    base("rural", corridor, 0.25, 100.0)
}

/// 2 km three-lane motorway at night with infrared stations.
pub fn highway() -> ScenarioConfig {
    let corridor = CorridorConfig {
        length: 2000.0,
        lanes_per_direction: 3,
        lane_width: 3.5,
        segments: vec![Segment {
            start: 0.0,
            end: 2000.0,
            kind: SegmentKind::Highway,
            speed_limit: 33.33,
        }],
        signals: Vec::new(),
        bus_stops: Vec::new(),
        landmarks: Vec::new(),
    };
    let mut sc = base("highway", corridor, 0.6, 100.0);
    sc.demand.mix = BTreeMap::from([(VehicleClass::Car, 0.85), (VehicleClass::Truck, 0.15)]);
    sc.ir = Some(IrLayout {
        spacing: 100.0,
        mount_y: -5.0,
    });
    sc.condition = Condition::Night;
    sc
}

/// Two-lane road with slow trucks, used to generate lane-change data.
pub fn lane_change_scenario(politeness: f64) -> ScenarioConfig {
    let corridor = CorridorConfig {
        length: 2000.0,
        lanes_per_direction: 2,
        lane_width: 3.5,
        segments: vec![Segment {
            start: 0.0,
            end: 2000.0,
            kind: SegmentKind::Highway,
            speed_limit: 30.0,
        }],
        signals: Vec::new(),
        bus_stops: Vec::new(),
        landmarks: Vec::new(),
    };
    let mut sc = base("lane_change", corridor, 0.5, 100.0);
    sc.driver.politeness = politeness;
    sc.demand.mix = BTreeMap::from([(VehicleClass::Car, 0.75), (VehicleClass::Truck, 0.25)]);
    sc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<serde_json::Value>,
}

fn parse_value(s: &str) -> serde_json::Value {
    serde_json::from_str(s).unwrap_or_else(|_| serde_json::Value::String(s.to_string()))
}

impl FromStr for SweepAxis {
    type Err = Error;

    /// `key=v1,v2,...`
    fn from_str(s: &str) -> Result<Self> {
        let (key, vals) = s
            .split_once('=')
            .ok_or_else(|| Error::config(format!("sweep `{s}` is not key=v1,v2")))?;
        let values: Vec<serde_json::Value> = vals
            .split(',')
            .filter(|v| !v.is_empty())
            .map(parse_value)
            .collect();
        if key.is_empty() || values.is_empty() {
            return Err(Error::config(format!(
                "sweep `{s}` needs a key and at least one value"
            )));
        }
        Ok(Self {
            key: key.to_string(),
            values,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub scenario: ScenarioConfig,
    pub seed: u64,
    pub duration: f64,
    /// Overrides the scenario's co-pilot penetration.
    pub penetration: Option<f64>,
    pub downlink: DownlinkMode,
    /// Run stations, uplink and fusion.
    pub sensing: bool,
    /// Seeds per sweep point, counting up from `seed`.
    pub replications: u32,
    pub sweep: Vec<SweepAxis>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Urban)
    }
}

fn merge(into: &mut serde_json::Value, from: serde_json::Value) {
    match (into, from) {
        (serde_json::Value::Object(a), serde_json::Value::Object(b)) => {
            for (k, v) in b {
                match a.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        a.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        Self {
            preset,
            scenario: preset.scenario(),
            seed: 1,
            duration: 600.0,
            penetration: None,
            downlink: DownlinkMode::Cv2x,
            sensing: true,
            replications: 1,
            sweep: Vec::new(),
        }
    }

    /// Parses a TOML experiment file. `preset` picks the base scenario; any
    /// other keys, including a partial `[scenario]` table, are merged over it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        let mut value = serde_json::to_value(&table)?;
        let preset = match value.get("preset") {
            Some(serde_json::Value::String(s)) => s.parse()?,
            Some(other) => {
                return Err(Error::config(format!(
                    "preset must be a string, got {other}"
                )))
            }
            None => Preset::Urban,
        };
        let mut merged = serde_json::to_value(Self::preset(preset))?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("preset");
        }
        merge(&mut merged, value);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Sets a dotted key such as `penetration` or `demand.rate`; keys that are
    /// not experiment fields are looked up inside `scenario`.
    pub fn set(&mut self, key: &str, value: serde_json::Value) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let top = key.split('.').next().unwrap_or_default();
        let path = if root.get(top).is_some() {
            key.to_string()
        } else {
            format!("scenario.{key}")
        };
        let mut slot = &mut root;
        for part in path.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::config(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(root).map_err(|e| Error::config(format!("`{key}`: {e}")))?;
        Ok(())
    }

    /// `key=value` form of [`Self::set`].
    pub fn set_str(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("`{assignment}` is not key=value")))?;
        self.set(k, parse_value(v))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::config("duration must be positive"));
        }
        if let Some(p) = self.penetration {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("penetration must lie in [0, 1]"));
            }
        }
        if self.replications == 0 {
            return Err(Error::config("replications must be at least 1"));
        }
        let sc = &self.scenario;
        build_corridor(&sc.corridor)?;
        if !(sc.station_spacing > 0.0) {
            return Err(Error::config("station spacing must be positive"));
        }
        if !(sc.spat.interval > 0.0) || !(sc.spat.horizon > 0.0) {
            return Err(Error::config("SPaT interval and horizon must be positive"));
        }
        if !(0.0..1.0).contains(&sc.night_optical_p_miss) {
            return Err(Error::config("night miss probability must lie in [0, 1)"));
        }
        sc.net.validate()?;
        sc.copilot.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UplinkRecord {
    pub station_id: u32,
    pub frame_time: f64,
    pub objects: usize,
    pub payload_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: u64,
    pub class: VehicleClass,
    pub equipped: bool,
    pub entered_at: f64,
    pub exited_at: Option<f64>,
}

/// Signal state governing motion during the tick starting at `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub t: f64,
    pub signal_id: u32,
    pub s: f64,
    pub state: LightState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRecord {
    pub signal_id: u32,
    pub cycle_index: i64,
    pub delta: f64,
    pub announced_at: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TwinRow {
    frame_time: f64,
    global_id: u64,
    class: VehicleClass,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    quality: f64,
    contributors: usize,
}

/// Everything a run produces. [`write_run_dir`] and [`load_run`] convert it
/// to and from a run directory without loss.
#[derive(Clone, Debug, PartialEq)]
pub struct RunData {
    pub config: ExperimentConfig,
    pub store: TrajectoryStore,
    /// Every fused frame, including empty ones.
    pub twin: Vec<TwinFrame>,
    pub latency: Vec<LatencyRecord>,
    pub uplink: Vec<UplinkRecord>,
    pub vehicles: Vec<VehicleRecord>,
    pub signals: Vec<SignalRecord>,
    pub shifts: Vec<ShiftRecord>,
    pub telemetry: Vec<TelemetryRow>,
}

fn optical_stations(sc: &ScenarioConfig, map: &CorridorMap) -> Result<Vec<StationConfig>> {
    let mut stations = place_stations(map, sc.station_spacing, &sc.sensors)?;
    if sc.condition == Condition::Night {
        for st in &mut stations {
            st.p_miss = st.p_miss.max(sc.night_optical_p_miss);
        }
    }
    Ok(stations)
}

fn frame_count(config: &ExperimentConfig) -> u64 {
    (config.duration * config.scenario.fusion.frame_rate + 1e-9).floor() as u64
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    world: World,
    stations: Vec<(StationConfig, SimRng)>,
    ir: Vec<(IrStationConfig, SimRng)>,
    uplink_rng: SimRng,
    downlink_rng: SimRng,
    queue: EventQueue,
    fusion: FusionServer,
    fused_rows: FusedRows,
    store: TrajectoryStore,
    twin: Vec<TwinFrame>,
    uplink: Vec<UplinkRecord>,
    signals: Vec<SignalRecord>,
    agents: BTreeMap<u64, CopilotAgent>,
    dedupers: BTreeMap<u64, Deduper>,
    telemetry: Vec<TelemetryRow>,
    vehicles: BTreeMap<u64, VehicleRecord>,
}

impl Runner<'_> {
    /// Records the current world state and senses it.
    fn observe(&mut self) {
        self.store.record(truth_rows(&self.world));
        for v in self.world.vehicles() {
            let id = v.state.id;
            self.vehicles.entry(id).or_insert_with(|| VehicleRecord {
                id,
                class: v.state.class,
                equipped: v.equipped,
                entered_at: v.entered_at,
                exited_at: None,
            });
            if v.equipped && !v.external {
                self.agents
                    .entry(id)
                    .or_insert_with(|| CopilotAgent::new(id, self.config.scenario.copilot.clone()));
            }
        }
        if !self.config.sensing {
            return;
        }
        let t = self.world.time();
        let truth = truth_objects(&self.world);
        let mut msgs: Vec<(ObjectListMessage, f64)> = Vec::new();
        for (st, rng) in &mut self.stations {
            msgs.push((sense_tick(st, &truth, t, rng), st.proc_latency));
        }
        for (st, rng) in &mut self.ir {
            msgs.push((
                ir_sense_tick(st, &truth, self.config.scenario.condition, t, rng),
                st.proc_latency,
            ));
        }
        for (msg, latency) in msgs {
            self.uplink.push(UplinkRecord {
                station_id: msg.station_id,
                frame_time: msg.frame_time,
                objects: msg.objects.len(),
                payload_bytes: msg.payload_bytes,
            });
            let seq = self.queue.next_seq();
            let src = msg.station_id;
            let env = transmit(
                &self.config.scenario.net.uplink,
                Arc::new(Payload::ObjectList(msg)),
                src,
                Destination::Server,
                t + latency,
                seq,
                &mut self.uplink_rng,
            );
            self.queue.submit(env);
        }
    }

    fn broadcast_spat(&mut self, t: f64) {
        let sc = &self.config.scenario;
        let station_eps: Vec<Endpoint> = self
            .stations
            .iter()
            .map(|(s, _)| Endpoint {
                id: s.id as u64,
                x: s.s,
                y: s.y,
            })
            .collect();
        let w = self.world.map.lane_width;
        let vehicle_eps: Vec<Endpoint> = self
            .world
            .vehicles()
            .iter()
            .filter(|v| v.equipped && !v.external)
            .map(|v| Endpoint {
                id: v.state.id,
                x: v.state.center_s(),
                y: v.state.y(w),
            })
            .collect();
        if vehicle_eps.is_empty() {
            return;
        }
        let forecasts: Vec<_> = self
            .world
            .signals()
            .iter()
            .map(|s| s.forecast(t, sc.spat.horizon))
            .collect();
        for f in forecasts {
            let seq = self.queue.next_seq();
            let (hops, out) = route_downlink(
                Arc::new(Payload::Spat(f)),
                self.config.downlink,
                &sc.net,
                &station_eps,
                &vehicle_eps,
                t,
                seq,
                &mut self.downlink_rng,
            );
            for env in hops.into_iter().chain(out) {
                self.queue.submit(env);
            }
        }
    }

    fn deliver(&mut self, now: f64) {
        for env in self.queue.poll_deliveries(now) {
            match &*env.payload {
                Payload::ObjectList(msg) => {
                    if self.config.sensing {
                        self.fusion.ingest(msg.clone(), env.rx_time.unwrap_or(now));
                    }
                }
                Payload::Spat(f) => {
                    if let Destination::Vehicle(id) = env.dst {
                        if self.dedupers.entry(id).or_default().accept(&env) {
                            if let Some(agent) = self.agents.get_mut(&id) {
                                agent.receive(f.clone());
                            }
                        }
                    }
                }
                Payload::Twin(_) => {}
            }
        }
    }

    fn fuse(&mut self, now: f64) {
        if !self.config.sensing {
            return;
        }
        let last = grid_time(
            frame_count(self.config),
            self.config.scenario.fusion.frame_rate,
        );
        let w = self.world.map.lane_width;
        let lanes = self.world.map.lanes;
        for frame in self.fusion.process_ready(now) {
            if frame.frame_time > last + 1e-9 {
                continue;
            }
            self.store.record(self.fused_rows.rows(&frame, w, lanes));
            self.twin.push(frame);
        }
    }

    fn copilot_commands(&mut self, t: f64, dt: f64) -> Commands {
        let mut cmds = Commands::default();
        let map = &self.world.map;
        for v in self.world.vehicles() {
            let Some(agent) = self.agents.get_mut(&v.state.id) else {
                continue;
            };
            let s = v.state.s;
            let ahead = map.next_signal(s).map(|k| {
                let sig = &self.world.signals()[k];
                let state = sig
                    .fixed_timeline()
                    .map_or(sig.state(), |tl| tl.state_at(t));
                SignalAhead {
                    id: sig.id(),
                    line_s: sig.head.s,
                    state,
                }
            });
            let cap = agent.step(t, s, v.state.v, map.speed_limit_at(s), ahead, dt);
            cmds.accel_caps.insert(v.state.id, cap);
        }
        cmds
    }

    fn retire(&mut self, from: usize) {
        for e in &self.world.log.exits[from..] {
            if let Some(a) = self.agents.remove(&e.id) {
                self.telemetry.extend(a.telemetry);
            }
            self.dedupers.remove(&e.id);
        }
    }
}

fn draw_shocks(config: &ExperimentConfig) -> Vec<f64> {
    let sh = &config.scenario.shocks;
    let mut rng = stream(config.seed, "harness/shocks");
    let hi = (config.duration - sh.min_lead).max(sh.earliest);
    let mut times: Vec<f64> = (0..sh.count)
        .map(|_| sh.earliest + rng.random::<f64>() * (hi - sh.earliest))
        .collect();
    times.sort_by(f64::total_cmp);
    times
}

/// Runs one seeded experiment in memory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunData> {
    config.validate()?;
    let sc = &config.scenario;
    let seed = config.seed;
    let map = build_corridor(&sc.corridor)?;
    let mut demand = sc.demand.clone();
    if let Some(p) = config.penetration {
        demand.penetration = p;
    }
    let mut world = World::new(
        map.clone(),
        sc.world.clone(),
        sc.driver.clone(),
        demand,
        seed,
    )?;
    for iv in &sc.initial_vehicles {
        world.insert_vehicle(iv.class, iv.s, iv.lane, iv.v, iv.equipped, false)?;
    }
    let optical = optical_stations(sc, &map)?;
    let first_ir = optical.iter().map(|s| s.id).max().map_or(1, |m| m + 1);
    let ir = match &sc.ir {
        Some(l) => place_ir_stations(&map, l.spacing, first_ir, l.mount_y)?,
        None => Vec::new(),
    };
    let mut runner = Runner {
        config,
        world,
        stations: optical
            .into_iter()
            .map(|s| {
                let rng = stream(seed, &format!("station/{}", s.id));
                (s, rng)
            })
            .collect(),
        ir: ir
            .into_iter()
            .map(|s| {
                let rng = stream(seed, &format!("ir/{}", s.id));
                (s, rng)
            })
            .collect(),
        uplink_rng: stream(seed, "net/uplink"),
        downlink_rng: stream(seed, "net/downlink"),
        queue: EventQueue::new(),
        fusion: FusionServer::new(sc.fusion.clone()),
        fused_rows: FusedRows::default(),
        store: TrajectoryStore::new(),
        twin: Vec::new(),
        uplink: Vec::new(),
        signals: Vec::new(),
        agents: BTreeMap::new(),
        dedupers: BTreeMap::new(),
        telemetry: Vec::new(),
        vehicles: BTreeMap::new(),
    };
    let shocks = draw_shocks(config);
    let mut shock_rng = stream(seed, "harness/shock-target");
    let mut next_shock = 0;
    let dt = runner.world.dt();
    let n_ticks = (config.duration * sc.world.tick_hz).round() as u64;
    let spat_ticks = ((sc.spat.interval * sc.world.tick_hz).round() as u64).max(1);

    runner.observe();
    for k in 0..n_ticks {
        let t = runner.world.time();
        let mut shocked = false;
        while next_shock < shocks.len() && shocks[next_shock] < t + dt - 1e-9 {
            next_shock += 1;
            let fixed: Vec<usize> = (0..runner.world.signals().len())
                .filter(|&i| runner.world.signals()[i].fixed_timeline().is_some())
                .collect();
            let pick = shock_rng.random_range(0..fixed.len().max(1));
            let sign = if shock_rng.random::<bool>() {
                1.0
            } else {
                -1.0
            };
            if let Some(&i) = fixed.get(pick) {
                shocked |= runner.world.signals_mut()[i]
                    .schedule_shift(t, sign * sc.shocks.delta, sc.shocks.min_lead)
                    .is_some();
            }
        }
        if k % spat_ticks == 0 || shocked {
            runner.broadcast_spat(t);
        }
        runner.deliver(t);
        runner.fuse(t);
        let cmds = runner.copilot_commands(t, dt);
        let exits_before = runner.world.log.exits.len();
        runner.world.step(&cmds)?;
        for sig in runner.world.signals() {
            runner.signals.push(SignalRecord {
                t,
                signal_id: sig.id(),
                s: sig.head.s,
                state: sig.state(),
            });
        }
        runner.retire(exits_before);
        runner.observe();
    }
    if config.sensing {
        let end = grid_time(frame_count(config), sc.fusion.frame_rate) + sc.fusion.fusion_wait;
        runner.deliver(end);
        runner.fuse(end);
    }

    let Runner {
        world,
        store,
        twin,
        queue,
        uplink,
        signals,
        agents,
        mut telemetry,
        mut vehicles,
        ..
    } = runner;
    for a in agents.into_values() {
        telemetry.extend(a.telemetry);
    }
    telemetry.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.vehicle_id.cmp(&b.vehicle_id)));
    for e in &world.log.exits {
        if let Some(v) = vehicles.get_mut(&e.id) {
            v.exited_at = Some(e.exited_at);
        }
    }
    let shifts = world
        .signals()
        .iter()
        .flat_map(|s| {
            s.fixed_timeline().into_iter().flat_map(move |tl| {
                tl.shifts().iter().map(move |sh| ShiftRecord {
                    signal_id: s.id(),
                    cycle_index: sh.cycle_index,
                    delta: sh.delta,
                    announced_at: sh.announced_at,
                })
            })
        })
        .collect();
    Ok(RunData {
        config: config.clone(),
        store,
        twin,
        latency: queue.latency_log().to_vec(),
        uplink,
        vehicles: vehicles.into_values().collect(),
        signals,
        shifts,
        telemetry,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub channel: String,
    pub msg_type: String,
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub p50_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub max_ms: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub preset: String,
    pub seed: u64,
    pub duration: f64,
    pub vehicles_seen: u64,
    pub vehicles_exited: u64,
    pub equipped: u64,
    pub accuracy: Option<AccuracyReport>,
    pub full_stops: u64,
    pub full_stops_copilot: u64,
    pub full_stops_conventional: u64,
    pub stops_per_vehicle: f64,
    /// Mean of travel time minus free-flow time over exited vehicles, s.
    pub mean_delay: Option<f64>,
    pub mean_delay_copilot: Option<f64>,
    pub mean_delay_conventional: Option<f64>,
    pub red_crossings_copilot: u64,
    pub red_crossings_conventional: u64,
    pub speed_violations_copilot: u64,
    pub collisions: u64,
    pub harsh_events: u64,
    pub shifts: u64,
    pub latency: Vec<LatencySummary>,
    pub data_rates: Vec<DataRate>,
    pub min_reduction_factor: Option<f64>,
    pub events: BTreeMap<String, u64>,
}

/// Harsh reactions counted once per run of consecutive flagged rows of a vehicle.
pub fn harsh_onsets(rows: &[TelemetryRow]) -> u64 {
    let mut last: BTreeMap<u64, bool> = BTreeMap::new();
    let mut n = 0;
    for r in rows {
        let prev = last.insert(r.vehicle_id, r.harsh).unwrap_or(false);
        if r.harsh && !prev {
            n += 1;
        }
    }
    n
}

fn free_flow_time(map: &CorridorMap, driver: &DriverDefaults, class: VehicleClass) -> f64 {
    map.segments
        .iter()
        .map(|seg| (seg.end - seg.start) / driver.desired_speed(class, seg.speed_limit))
        .sum()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn truth_frames(store: &TrajectoryStore) -> Vec<TruthFrame> {
    store
        .frames(Source::GroundTruth)
        .into_iter()
        .map(|(k, rows)| TruthFrame {
            t: k as f64 / 1000.0,
            objects: rows
                .into_iter()
                .map(|r| {
                    let (length, width) = r.class.dimensions();
                    TruthObject {
                        id: r.id,
                        class: r.class,
                        x: r.x,
                        y: r.y,
                        vx: r.v,
                        vy: 0.0,
                        length,
                        width,
                    }
                })
                .collect(),
        })
        .collect()
}

/// Scenario records of a run: ground-truth events plus signal passes.
pub fn run_events(data: &RunData) -> Result<Vec<ScenarioRecord>> {
    let map = build_corridor(&data.config.scenario.corridor)?;
    let mut events = extract_events(
        &data.store,
        Source::GroundTruth,
        &data.config.scenario.events,
    );
    let lines: Vec<(u32, f64)> = map.signals.iter().map(|h| (h.id, h.s)).collect();
    events.extend(extract_signal_passes(
        &data.store,
        Source::GroundTruth,
        &lines,
    ));
    events.sort_by(|a, b| {
        a.t_start
            .total_cmp(&b.t_start)
            .then(a.kind.cmp(&b.kind))
            .then(a.ids.cmp(&b.ids))
    });
    Ok(events)
}

/// Metrics of a run. A pure function of [`RunData`], so it gives the same
/// answer on a reloaded run directory.
pub fn report(data: &RunData) -> Result<MetricsReport> {
    let cfg = &data.config;
    let sc = &cfg.scenario;
    let map = build_corridor(&sc.corridor)?;
    let equipped: BTreeMap<u64, bool> = data.vehicles.iter().map(|v| (v.id, v.equipped)).collect();
    let is_eq = |id: u64| equipped.get(&id).copied().unwrap_or(false);
    let signal_at: BTreeMap<(i64, u32), LightState> = data
        .signals
        .iter()
        .map(|r| (((r.t * 1000.0).round() as i64, r.signal_id), r.state))
        .collect();

    let mut rep = MetricsReport {
        preset: sc.name.clone(),
        seed: cfg.seed,
        duration: cfg.duration,
        vehicles_seen: data.vehicles.len() as u64,
        vehicles_exited: data
            .vehicles
            .iter()
            .filter(|v| v.exited_at.is_some())
            .count() as u64,
        equipped: data.vehicles.iter().filter(|v| v.equipped).count() as u64,
        shifts: data.shifts.len() as u64,
        harsh_events: harsh_onsets(&data.telemetry),
        ..MetricsReport::default()
    };

    for id in data.store.ids(Source::GroundTruth) {
        let rows = data.store.by_id(Source::GroundTruth, id);
        let eq = is_eq(id);
        for r in &rows {
            let front = r.x + r.class.dimensions().0 / 2.0;
            if eq && r.v > map.speed_limit_at(front) + 1e-9 {
                rep.speed_violations_copilot += 1;
            }
        }
        for w in rows.windows(2) {
            let half = w[0].class.dimensions().0 / 2.0;
            let (f0, f1) = (w[0].x + half, w[1].x + half);
            for head in &map.signals {
                if f0 <= head.s && f1 > head.s {
                    let key = ((w[0].t * 1000.0).round() as i64, head.id);
                    if signal_at.get(&key) == Some(&LightState::Red) {
                        if eq {
                            rep.red_crossings_copilot += 1;
                        } else {
                            rep.red_crossings_conventional += 1;
                        }
                    }
                }
            }
            if w[0].v >= STOP_SPEED && w[1].v < STOP_SPEED {
                let near = map
                    .signals
                    .iter()
                    .any(|h| (0.0..=STOP_SIGNAL_RANGE).contains(&(h.s - f1)));
                if near {
                    rep.full_stops += 1;
                    if eq {
                        rep.full_stops_copilot += 1;
                    } else {
                        rep.full_stops_conventional += 1;
                    }
                }
            }
        }
    }
    rep.stops_per_vehicle = if rep.vehicles_seen > 0 {
        rep.full_stops as f64 / rep.vehicles_seen as f64
    } else {
        0.0
    };

    for rows in data.store.frames(Source::GroundTruth).values() {
        let mut by_lane: BTreeMap<usize, Vec<_>> = BTreeMap::new();
        for r in rows {
            by_lane.entry(r.lane).or_default().push(*r);
        }
        for lane in by_lane.values_mut() {
            lane.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.id.cmp(&b.id)));
            for w in lane.windows(2) {
                let gap = (w[1].x - w[1].class.dimensions().0 / 2.0)
                    - (w[0].x + w[0].class.dimensions().0 / 2.0);
                if gap < 0.0 {
                    rep.collisions += 1;
                }
            }
        }
    }

    let (mut all, mut co, mut conv) = (Vec::new(), Vec::new(), Vec::new());
    for v in &data.vehicles {
        if let Some(out) = v.exited_at {
            let d = out - v.entered_at - free_flow_time(&map, &sc.driver, v.class);
            all.push(d);
            if v.equipped {
                co.push(d)
            } else {
                conv.push(d)
            }
        }
    }
    rep.mean_delay = mean(&all);
    rep.mean_delay_copilot = mean(&co);
    rep.mean_delay_conventional = mean(&conv);

    if cfg.sensing {
        rep.accuracy = Some(eval_accuracy(
            &data.twin,
            &truth_frames(&data.store),
            ACCURACY_MAX_DIST,
            ACCURACY_WARMUP,
        ));
        let mut ids: Vec<u32> = data.uplink.iter().map(|u| u.station_id).collect();
        ids.sort_unstable();
        ids.dedup();
        let msgs: Vec<ObjectListMessage> = data
            .uplink
            .iter()
            .map(|u| ObjectListMessage {
                station_id: u.station_id,
                frame_time: u.frame_time,
                objects: Vec::new(),
                payload_bytes: u.payload_bytes,
            })
            .collect();
        rep.data_rates = data_rate_report(&ids, &msgs, cfg.duration);
        rep.min_reduction_factor = rep
            .data_rates
            .iter()
            .map(|r| r.reduction_factor)
            .filter(|f| f.is_finite())
            .reduce(f64::min);
    }

    let mut groups: BTreeMap<(String, String), Vec<&LatencyRecord>> = BTreeMap::new();
    for r in &data.latency {
        groups
            .entry((r.channel.as_str().to_string(), r.msg_type.clone()))
            .or_default()
            .push(r);
    }
    for ((channel, msg_type), recs) in groups {
        let ms: Vec<f64> = recs
            .iter()
            .filter_map(|r| r.rx_time.map(|rx| (rx - r.tx_time) * 1000.0))
            .collect();
        let pct = |p: f64| (!ms.is_empty()).then(|| percentile(&ms, p));
        rep.latency.push(LatencySummary {
            channel,
            msg_type,
            sent: recs.len() as u64,
            delivered: ms.len() as u64,
            dropped: (recs.len() - ms.len()) as u64,
            p50_ms: pct(50.0),
            p95_ms: pct(95.0),
            p99_ms: pct(99.0),
            max_ms: ms.iter().copied().reduce(f64::max),
        });
    }

    for e in run_events(data)? {
        *rep.events.entry(e.kind.as_str().to_string()).or_default() += 1;
    }
    Ok(rep)
}

/// Named threshold checks used by `--check`.
pub fn acceptance_checks(rep: &MetricsReport) -> Vec<(String, bool)> {
    let mut out = vec![
        (
            "red_crossings_copilot == 0".to_string(),
            rep.red_crossings_copilot == 0,
        ),
        (
            "speed_violations_copilot == 0".to_string(),
            rep.speed_violations_copilot == 0,
        ),
        ("collisions == 0".to_string(), rep.collisions == 0),
    ];
    if let Some(f) = rep.min_reduction_factor {
        out.push(("min_reduction_factor > 100".to_string(), f > 100.0));
    }
    if let Some(a) = &rep.accuracy {
        out.push(("fused p95 error < 0.10 m".to_string(), a.p95_error < 0.10));
    }
    out
}

fn write_csv<T: Serialize, P: AsRef<Path>>(path: P, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const SCENARIOS_FILE: &str = "scenarios.csv";
const TWIN_FILE: &str = "twin.csv";
const LATENCY_FILE: &str = "latency.csv";
const UPLINK_FILE: &str = "uplink.csv";
const VEHICLES_FILE: &str = "vehicles.csv";
const SIGNALS_FILE: &str = "signals.csv";
const SHIFTS_FILE: &str = "shifts.csv";
const TELEMETRY_FILE: &str = "copilot_telemetry.csv";

/// Writes a run directory; the manifest is written last and seals it.
pub fn write_run_dir(dir: &Path, data: &RunData, rep: &MetricsReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(&data.config)? + "\n",
    )?;
    let twin_rows: Vec<TwinRow> = data
        .twin
        .iter()
        .flat_map(|f| {
            f.tracks.iter().map(move |e| TwinRow {
                frame_time: f.frame_time,
                global_id: e.global_id,
                class: e.class,
                x: e.x,
                y: e.y,
                vx: e.vx,
                vy: e.vy,
                quality: e.quality,
                contributors: e.contributors,
            })
        })
        .collect();
    write_csv(
        dir.join(TWIN_FILE),
        &twin_rows,
        &[
            "frame_time",
            "global_id",
            "class",
            "x",
            "y",
            "vx",
            "vy",
            "quality",
            "contributors",
        ],
    )?;
    write_latency_log(
        &data.latency,
        std::io::BufWriter::new(fs::File::create(dir.join(LATENCY_FILE))?),
    )?;
    write_csv(
        dir.join(UPLINK_FILE),
        &data.uplink,
        &["station_id", "frame_time", "objects", "payload_bytes"],
    )?;
    write_csv(
        dir.join(VEHICLES_FILE),
        &data.vehicles,
        &["id", "class", "equipped", "entered_at", "exited_at"],
    )?;
    write_csv(
        dir.join(SIGNALS_FILE),
        &data.signals,
        &["t", "signal_id", "s", "state"],
    )?;
    write_csv(
        dir.join(SHIFTS_FILE),
        &data.shifts,
        &["signal_id", "cycle_index", "delta", "announced_at"],
    )?;
    write_telemetry(
        &data.telemetry,
        std::io::BufWriter::new(fs::File::create(dir.join(TELEMETRY_FILE))?),
    )?;
    write_scenarios(
        &run_events(data)?,
        std::io::BufWriter::new(fs::File::create(dir.join(SCENARIOS_FILE))?),
    )?;
    fs::write(
        dir.join(REPORT_FILE),
        serde_json::to_string_pretty(rep)? + "\n",
    )?;
    let extra: Vec<String> = [
        CONFIG_FILE,
        TWIN_FILE,
        LATENCY_FILE,
        UPLINK_FILE,
        VEHICLES_FILE,
        SIGNALS_FILE,
        SHIFTS_FILE,
        TELEMETRY_FILE,
        SCENARIOS_FILE,
        REPORT_FILE,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    write_run(
        dir,
        &data.store,
        &config_hash(&data.config)?,
        data.config.seed,
        &extra,
    )?;
    Ok(())
}

/// Reads a sealed run directory back into memory.
pub fn load_run(dir: &Path) -> Result<RunData> {
    let (store, _) = read_run(dir)?;
    let config: ExperimentConfig = serde_json::from_slice(&fs::read(dir.join(CONFIG_FILE))?)?;
    let rows: Vec<TwinRow> = read_csv(&dir.join(TWIN_FILE))?;
    let mut by_frame: BTreeMap<i64, Vec<TwinEntry>> = BTreeMap::new();
    for r in rows {
        by_frame
            .entry((r.frame_time * 1000.0).round() as i64)
            .or_default()
            .push(TwinEntry {
                global_id: r.global_id,
                class: r.class,
                x: r.x,
                y: r.y,
                vx: r.vx,
                vy: r.vy,
                quality: r.quality,
                contributors: r.contributors,
            });
    }
    let fr = config.scenario.fusion.frame_rate;
    let twin = if config.sensing {
        (0..=frame_count(&config))
            .map(|k| {
                let frame_time = grid_time(k, fr);
                let tracks = by_frame
                    .remove(&((frame_time * 1000.0).round() as i64))
                    .unwrap_or_default();
                TwinFrame { frame_time, tracks }
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(RunData {
        store,
        twin,
        latency: read_latency_log(std::io::BufReader::new(fs::File::open(
            dir.join(LATENCY_FILE),
        )?))?,
        uplink: read_csv(&dir.join(UPLINK_FILE))?,
        vehicles: read_csv(&dir.join(VEHICLES_FILE))?,
        signals: read_csv(&dir.join(SIGNALS_FILE))?,
        shifts: read_csv(&dir.join(SHIFTS_FILE))?,
        telemetry: read_telemetry(std::io::BufReader::new(fs::File::open(
            dir.join(TELEMETRY_FILE),
        )?))?,
        config,
    })
}

/// Runs one experiment and writes its directory.
pub fn run_to_dir(config: &ExperimentConfig, dir: &Path) -> Result<(RunData, MetricsReport)> {
    let data = run_experiment(config)?;
    let rep = report(&data)?;
    write_run_dir(dir, &data, &rep)?;
    Ok((data, rep))
}

/// One replication of a sweep.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub label: String,
    pub settings: Vec<(String, serde_json::Value)>,
    pub config: ExperimentConfig,
    /// Directory relative to the sweep root.
    pub dir: PathBuf,
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '=' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Cartesian product of the sweep axes times the replication seeds.
pub fn expand_sweep(config: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    let mut combos: Vec<Vec<(String, serde_json::Value)>> = vec![Vec::new()];
    for axis in &config.sweep {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                axis.values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    let mut out = Vec::new();
    for settings in combos {
        let label = if settings.is_empty() {
            "base".to_string()
        } else {
            settings
                .iter()
                .map(|(k, v)| format!("{k}={}", v.to_string().trim_matches('"')))
                .collect::<Vec<_>>()
                .join(",")
        };
        for r in 0..config.replications {
            let mut cfg = config.clone();
            cfg.sweep.clear();
            cfg.replications = 1;
            for (k, v) in &settings {
                cfg.set(k, v.clone())?;
            }
            cfg.seed = config.seed + r as u64;
            cfg.validate()?;
            let dir = PathBuf::from(sanitize(&label)).join(format!("seed_{}", cfg.seed));
            out.push(SweepPoint {
                label: label.clone(),
                settings: settings.clone(),
                config: cfg,
                dir,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub label: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub report: MetricsReport,
}

pub const SWEEP_INDEX: &str = "sweep_index.csv";

/// Runs every sweep point in parallel, each into its own directory, then
/// writes an index at the root.
pub fn run_sweep(config: &ExperimentConfig, root: &Path) -> Result<Vec<SweepRow>> {
    let points = expand_sweep(config)?;
    let rows: Vec<SweepRow> = points
        .par_iter()
        .map(|p| {
            let (_, rep) = run_to_dir(&p.config, &root.join(&p.dir))?;
            Ok(SweepRow {
                label: p.label.clone(),
                seed: p.config.seed,
                dir: p.dir.clone(),
                report: rep,
            })
        })
        .collect::<Result<_>>()?;
    let mut w = csv::Writer::from_path(root.join(SWEEP_INDEX))?;
    w.write_record([
        "label",
        "seed",
        "dir",
        "mean_delay",
        "full_stops",
        "stops_per_vehicle",
        "p95_error",
        "red_crossings_copilot",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &rows {
        w.write_record([
            r.label.clone(),
            r.seed.to_string(),
            r.dir.display().to_string(),
            opt(r.report.mean_delay),
            r.report.full_stops.to_string(),
            r.report.stops_per_vehicle.to_string(),
            opt(r.report.accuracy.as_ref().map(|a| a.p95_error)),
            r.report.red_crossings_copilot.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}

/// Calibration inputs derived from the run's own scenario.
pub fn calibration_inputs(config: &ExperimentConfig) -> Result<(CorridorMap, DriverDefaults, f64)> {
    Ok((
        build_corridor(&config.scenario.corridor)?,
        config.scenario.driver.clone(),
        config.scenario.world.decision_interval,
    ))
}

pub fn calibration_context<'a>(
    map: &'a CorridorMap,
    driver: &DriverDefaults,
    decision_interval: f64,
) -> CalibrationContext<'a> {
    CalibrationContext {
        map,
        driver: driver.clone(),
        decision_interval,
        min_events: 20,
    }
}
