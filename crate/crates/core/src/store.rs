//! Trajectory persistence, scenario extraction and lane-change calibration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fusion::TwinFrame;
use crate::mover::{MoverPhase, MoverTelemetry};
use crate::world::{
    mobil_criterion, mobil_terms, AdjacentLane, CorridorMap, DriverDefaults, DriverParams,
    MobilTerms, Neighbor, VehicleClass, VehicleState, World,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    GroundTruth,
    Fused,
    Station(u32),
    VehicleLog,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::GroundTruth => f.write_str("ground_truth"),
            Source::Fused => f.write_str("fused"),
            Source::Station(k) => write!(f, "station_{k}"),
            Source::VehicleLog => f.write_str("vehicle_log"),
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground_truth" => Ok(Source::GroundTruth),
            "fused" => Ok(Source::Fused),
            "vehicle_log" => Ok(Source::VehicleLog),
            _ => s
                .strip_prefix("station_")
                .and_then(|k| k.parse().ok())
                .map(Source::Station)
                .ok_or_else(|| Error::config(format!("unknown trajectory source `{s}`"))),
        }
    }
}

impl Serialize for Source {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One row of the trajectory schema. `x` is the body centre along the
/// corridor, `y` the lateral position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub id: u64,
    pub class: VehicleClass,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub a: f64,
    pub lane: usize,
    pub source: Source,
}

pub const TRAJECTORY_HEADER: [&str; 9] = ["t", "id", "class", "x", "y", "v", "a", "lane", "source"];

fn t_key(t: f64) -> i64 {
    (t * 1000.0).round() as i64
}

/// Append-only trajectory store keyed by `(source, id, t)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryStore {
    series: BTreeMap<(Source, u64), BTreeMap<i64, TrajectoryRow>>,
    len: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowFilter {
    pub source: Option<Source>,
    pub ids: Option<BTreeSet<u64>>,
    /// Inclusive time window.
    pub window: Option<(f64, f64)>,
}

impl RowFilter {
    fn keeps(&self, r: &TrajectoryRow) -> bool {
        self.source.is_none_or(|s| s == r.source)
            && self.ids.as_ref().is_none_or(|ids| ids.contains(&r.id))
            && self
                .window
                .is_none_or(|(a, b)| t_key(r.t) >= t_key(a) && t_key(r.t) <= t_key(b))
    }
}

impl TrajectoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds rows; a row whose `(source, id, t)` is already stored is ignored.
    /// Returns the number of rows added.
    pub fn record<I: IntoIterator<Item = TrajectoryRow>>(&mut self, rows: I) -> usize {
        let mut added = 0;
        for r in rows {
            let series = self.series.entry((r.source, r.id)).or_default();
            if let std::collections::btree_map::Entry::Vacant(e) = series.entry(t_key(r.t)) {
                e.insert(r);
                added += 1;
            }
        }
        self.len += added;
        added
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sources(&self) -> BTreeSet<Source> {
        self.series.keys().map(|k| k.0).collect()
    }

    pub fn ids(&self, source: Source) -> Vec<u64> {
        self.series
            .keys()
            .filter(|k| k.0 == source)
            .map(|k| k.1)
            .collect()
    }

    /// Time-sorted rows of one object.
    pub fn by_id(&self, source: Source, id: u64) -> Vec<&TrajectoryRow> {
        self.series
            .get(&(source, id))
            .map(|s| s.values().collect())
            .unwrap_or_default()
    }

    /// Rows inside an inclusive time window, ordered by `(t, id)`.
    pub fn window(&self, source: Source, t0: f64, t1: f64) -> Vec<&TrajectoryRow> {
        self.select(&RowFilter {
            source: Some(source),
            ids: None,
            window: Some((t0, t1)),
        })
    }

    /// Rows passing `filter`, ordered by `(t, source, id)`.
    pub fn select(&self, filter: &RowFilter) -> Vec<&TrajectoryRow> {
        let mut out: Vec<&TrajectoryRow> = self
            .series
            .iter()
            .filter(|((s, _), _)| filter.source.is_none_or(|f| f == *s))
            .flat_map(|(_, rows)| rows.values())
            .filter(|r| filter.keeps(r))
            .collect();
        out.sort_by(|a, b| {
            t_key(a.t)
                .cmp(&t_key(b.t))
                .then(a.source.cmp(&b.source))
                .then(a.id.cmp(&b.id))
        });
        out
    }

    /// Rows of one source grouped per time step.
    pub fn frames(&self, source: Source) -> BTreeMap<i64, Vec<&TrajectoryRow>> {
        let mut out: BTreeMap<i64, Vec<&TrajectoryRow>> = BTreeMap::new();
        for ((s, _), rows) in &self.series {
            if *s != source {
                continue;
            }
            for (k, r) in rows {
                out.entry(*k).or_default().push(r);
            }
        }
        for rows in out.values_mut() {
            rows.sort_by_key(|r| r.id);
        }
        out
    }

    pub fn count(&self, source: Source) -> usize {
        self.series
            .iter()
            .filter(|(k, _)| k.0 == source)
            .map(|(_, s)| s.len())
            .sum()
    }

    pub fn export_csv<W: std::io::Write>(&self, filter: &RowFilter, out: W) -> Result<usize> {
        write_rows(self.select(filter), out)
    }

    pub fn import_csv<R: std::io::Read>(&mut self, input: R) -> Result<usize> {
        Ok(self.record(read_rows(input)?))
    }
}

pub fn write_rows<'a, W: std::io::Write>(
    rows: impl IntoIterator<Item = &'a TrajectoryRow>,
    out: W,
) -> Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAJECTORY_HEADER)?;
    let mut n = 0;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            r.id.to_string(),
            r.class.as_str().to_string(),
            r.x.to_string(),
            r.y.to_string(),
            r.v.to_string(),
            r.a.to_string(),
            r.lane.to_string(),
            r.source.to_string(),
        ])?;
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

pub fn read_rows<R: std::io::Read>(input: R) -> Result<Vec<TrajectoryRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != TRAJECTORY_HEADER {
        return Err(Error::config(format!(
            "unexpected trajectory header {header:?}"
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::config(format!("bad number `{}`", &rec[i])))
        };
        rows.push(TrajectoryRow {
            t: num(0)?,
            id: rec[1]
                .parse()
                .map_err(|_| Error::config(format!("bad id `{}`", &rec[1])))?,
            class: rec[2].parse()?,
            x: num(3)?,
            y: num(4)?,
            v: num(5)?,
            a: num(6)?,
            lane: rec[7]
                .parse()
                .map_err(|_| Error::config(format!("bad lane `{}`", &rec[7])))?,
            source: rec[8].parse()?,
        });
    }
    Ok(rows)
}

/// Ground-truth rows for every vehicle in the world at its current time.
pub fn truth_rows(world: &World) -> Vec<TrajectoryRow> {
    let w = world.map.lane_width;
    world
        .vehicles()
        .iter()
        .map(|v| TrajectoryRow {
            t: world.time(),
            id: v.state.id,
            class: v.state.class,
            x: v.state.center_s(),
            y: v.state.y(w),
            v: v.state.v,
            a: v.state.a,
            lane: v.state.lane,
            source: Source::GroundTruth,
        })
        .collect()
}

/// Turns twin frames into `fused` rows. Acceleration is the backward
/// difference of speed between consecutive frames of the same track.
#[derive(Clone, Debug, Default)]
pub struct FusedRows {
    last: BTreeMap<u64, (f64, f64)>,
}

impl FusedRows {
    pub fn rows(&mut self, frame: &TwinFrame, lane_width: f64, lanes: usize) -> Vec<TrajectoryRow> {
        let mut out = Vec::with_capacity(frame.tracks.len());
        for e in &frame.tracks {
            let v = e.vx.hypot(e.vy);
            let a = match self.last.get(&e.global_id) {
                Some(&(t, v_prev)) if frame.frame_time > t => (v - v_prev) / (frame.frame_time - t),
                _ => 0.0,
            };
            self.last.insert(e.global_id, (frame.frame_time, v));
            let lane = ((e.y / lane_width).round().max(0.0) as usize).min(lanes.saturating_sub(1));
            out.push(TrajectoryRow {
                t: frame.frame_time,
                id: e.global_id,
                class: e.class,
                x: e.x,
                y: e.y,
                v,
                a,
                lane,
                source: Source::Fused,
            });
        }
        out
    }
}

/// Pairs every fused row with the nearest ground-truth row of the same time.
pub fn join_fused_truth(store: &TrajectoryStore, max_dist: f64) -> Vec<(f64, u64, u64, f64)> {
    let truth = store.frames(Source::GroundTruth);
    let fused = store.frames(Source::Fused);
    let mut out = Vec::new();
    for (k, rows) in &fused {
        let Some(tr) = truth.get(k) else { continue };
        for f in rows {
            let best = tr
                .iter()
                .map(|g| (g.id, (g.x - f.x).hypot(g.y - f.y)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            if let Some((gid, d)) = best.filter(|b| b.1 <= max_dist) {
                out.push((*k as f64 / 1000.0, gid, f.id, d));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub row_counts: BTreeMap<String, u64>,
    pub files: Vec<String>,
    pub sealed: bool,
}

/// Hex SHA-256 of the JSON form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn shard_name(source: Source) -> String {
    format!("trajectories_{source}.csv")
}

/// Writes one CSV shard per source and seals the run with a manifest.
pub fn write_run(
    dir: &Path,
    store: &TrajectoryStore,
    config_hash: &str,
    seed: u64,
    extra_files: &[String],
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut row_counts = BTreeMap::new();
    let mut files = Vec::new();
    for source in store.sources() {
        let name = shard_name(source);
        let f = fs::File::create(dir.join(&name))?;
        let n = store.export_csv(
            &RowFilter {
                source: Some(source),
                ..Default::default()
            },
            std::io::BufWriter::new(f),
        )?;
        row_counts.insert(source.to_string(), n as u64);
        files.push(name);
    }
    files.extend(extra_files.iter().cloned());
    files.sort();
    let manifest = Manifest {
        config_hash: config_hash.to_string(),
        seed,
        row_counts,
        files,
        sealed: true,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

/// Loads a sealed run written by [`write_run`].
pub fn read_run(dir: &Path) -> Result<(TrajectoryStore, Manifest)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if !manifest.sealed {
        return Err(Error::config(format!(
            "run in {} is not sealed",
            dir.display()
        )));
    }
    let mut store = TrajectoryStore::new();
    for source in manifest.row_counts.keys() {
        let src: Source = source.parse()?;
        let path: PathBuf = dir.join(shard_name(src));
        store.import_csv(std::io::BufReader::new(fs::File::open(path)?))?;
    }
    Ok((store, manifest))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    LaneChange,
    HardBrake,
    LowTtc,
    SignalPass,
    BusStop,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::LaneChange => "lane_change",
            ScenarioKind::HardBrake => "hard_brake",
            ScenarioKind::LowTtc => "low_ttc",
            ScenarioKind::SignalPass => "signal_pass",
            ScenarioKind::BusStop => "bus_stop",
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            ScenarioKind::LaneChange,
            ScenarioKind::HardBrake,
            ScenarioKind::LowTtc,
            ScenarioKind::SignalPass,
            ScenarioKind::BusStop,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| Error::config(format!("unknown scenario kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub kind: ScenarioKind,
    pub t_start: f64,
    pub t_end: f64,
    pub ids: Vec<u64>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventThresholds {
    pub a_brake_th: f64,
    pub ttc_th: f64,
    /// Lateral speed that counts as sweeping, m/s.
    pub lateral_speed_th: f64,
    /// Frame period of the stored rows, s.
    pub frame_dt: f64,
}

impl Default for EventThresholds {
    fn default() -> Self {
        Self {
            a_brake_th: -3.0,
            ttc_th: 2.5,
            lateral_speed_th: 0.05,
            frame_dt: 0.1,
        }
    }
}

/// Splits sorted frame keys into runs of consecutive frames.
fn runs(keys: &[i64], step_ms: i64) -> Vec<(i64, i64)> {
    let mut out: Vec<(i64, i64)> = Vec::new();
    for &k in keys {
        match out.last_mut() {
            Some(last) if k - last.1 <= step_ms => last.1 = k,
            _ => out.push((k, k)),
        }
    }
    out
}

/// Constant-velocity time to collision between a follower and its leader in
/// the same lane; `None` when not closing.
pub fn time_to_collision(follower: &TrajectoryRow, leader: &TrajectoryRow) -> Option<f64> {
    let gap = (leader.x - leader.class.dimensions().0 / 2.0)
        - (follower.x + follower.class.dimensions().0 / 2.0);
    let closing = follower.v - leader.v;
    (closing > 0.0 && gap > 0.0).then(|| gap / closing)
}

/// Hard-brake, low-TTC and lane-change records found in one source.
pub fn extract_events(
    store: &TrajectoryStore,
    source: Source,
    th: &EventThresholds,
) -> Vec<ScenarioRecord> {
    let step_ms = t_key(th.frame_dt);
    let mut out = Vec::new();

    for id in store.ids(source) {
        let rows = store.by_id(source, id);

        let braking: Vec<i64> = rows
            .iter()
            .filter(|r| r.a < th.a_brake_th)
            .map(|r| t_key(r.t))
            .collect();
        for (a, b) in runs(&braking, step_ms) {
            let min_a = rows
                .iter()
                .filter(|r| (a..=b).contains(&t_key(r.t)))
                .map(|r| r.a)
                .fold(f64::INFINITY, f64::min);
            out.push(ScenarioRecord {
                kind: ScenarioKind::HardBrake,
                t_start: a as f64 / 1000.0,
                t_end: (b + step_ms) as f64 / 1000.0,
                ids: vec![id],
                metrics: BTreeMap::from([("min_a".to_string(), min_a)]),
            });
        }

        // Lane changes: a lane index switch inside a contiguous lateral sweep.
        let moving: Vec<bool> = rows
            .windows(2)
            .map(|w| (w[1].y - w[0].y).abs() > th.lateral_speed_th * (w[1].t - w[0].t).max(1e-9))
            .collect();
        for i in 1..rows.len() {
            if rows[i].lane == rows[i - 1].lane {
                continue;
            }
            let seg = i - 1;
            if !moving[seg] {
                continue;
            }
            let mut lo = seg;
            while lo > 0 && moving[lo - 1] {
                lo -= 1;
            }
            let mut hi = seg;
            while hi + 1 < moving.len() && moving[hi + 1] {
                hi += 1;
            }
            let (start, end) = (rows[lo].t, rows[hi + 1].t);
            out.push(ScenarioRecord {
                kind: ScenarioKind::LaneChange,
                t_start: start,
                t_end: end,
                ids: vec![id],
                metrics: BTreeMap::from([
                    ("from_lane".to_string(), rows[i - 1].lane as f64),
                    ("to_lane".to_string(), rows[i].lane as f64),
                    ("lateral_shift".to_string(), rows[hi + 1].y - rows[lo].y),
                ]),
            });
        }
    }

    // Low TTC per (follower, leader) pair.
    let mut flagged: BTreeMap<(u64, u64), Vec<(i64, f64)>> = BTreeMap::new();
    for (k, rows) in store.frames(source) {
        let mut by_lane: BTreeMap<usize, Vec<&TrajectoryRow>> = BTreeMap::new();
        for r in rows {
            by_lane.entry(r.lane).or_default().push(r);
        }
        for lane in by_lane.values_mut() {
            lane.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.id.cmp(&b.id)));
            for w in lane.windows(2) {
                if let Some(ttc) = time_to_collision(w[0], w[1]) {
                    if ttc < th.ttc_th {
                        flagged
                            .entry((w[0].id, w[1].id))
                            .or_default()
                            .push((k, ttc));
                    }
                }
            }
        }
    }
    for ((f, l), hits) in flagged {
        let keys: Vec<i64> = hits.iter().map(|h| h.0).collect();
        for (a, b) in runs(&keys, step_ms) {
            let min_ttc = hits
                .iter()
                .filter(|h| (a..=b).contains(&h.0))
                .map(|h| h.1)
                .fold(f64::INFINITY, f64::min);
            out.push(ScenarioRecord {
                kind: ScenarioKind::LowTtc,
                t_start: a as f64 / 1000.0,
                t_end: (b + step_ms) as f64 / 1000.0,
                ids: vec![f, l],
                metrics: BTreeMap::from([("min_ttc".to_string(), min_ttc)]),
            });
        }
    }
    sort_records(&mut out);
    out
}

fn sort_records(out: &mut [ScenarioRecord]) {
    out.sort_by(|a, b| {
        a.t_start
            .total_cmp(&b.t_start)
            .then(a.kind.cmp(&b.kind))
            .then(a.ids.cmp(&b.ids))
    });
}

/// One record per vehicle front crossing a stop line, with the crossing speed.
pub fn extract_signal_passes(
    store: &TrajectoryStore,
    source: Source,
    stop_lines: &[(u32, f64)],
) -> Vec<ScenarioRecord> {
    let mut out = Vec::new();
    for id in store.ids(source) {
        let rows = store.by_id(source, id);
        for w in rows.windows(2) {
            let half = w[0].class.dimensions().0 / 2.0;
            for &(sig, s) in stop_lines {
                if w[0].x + half <= s && w[1].x + half > s {
                    out.push(ScenarioRecord {
                        kind: ScenarioKind::SignalPass,
                        t_start: w[0].t,
                        t_end: w[1].t,
                        ids: vec![id],
                        metrics: BTreeMap::from([
                            ("signal".to_string(), sig as f64),
                            ("speed".to_string(), w[1].v),
                        ]),
                    });
                }
            }
        }
    }
    sort_records(&mut out);
    out
}

/// Dwell periods of the mover as bus-stop records.
pub fn bus_stop_events(telemetry: &[MoverTelemetry], mover_id: u64) -> Vec<ScenarioRecord> {
    let mut out = Vec::new();
    let mut start: Option<&MoverTelemetry> = None;
    for (i, r) in telemetry.iter().enumerate() {
        let dwelling = r.phase == MoverPhase::Dwell;
        match (start, dwelling) {
            (None, true) => start = Some(r),
            (Some(s), false) => {
                let prev = &telemetry[i - 1];
                out.push(ScenarioRecord {
                    kind: ScenarioKind::BusStop,
                    t_start: s.t,
                    t_end: r.t,
                    ids: vec![mover_id],
                    metrics: BTreeMap::from([
                        ("lateral_gap".to_string(), prev.lateral_gap),
                        ("x".to_string(), prev.x),
                    ]),
                });
                start = None;
            }
            _ => {}
        }
    }
    out
}

pub fn write_scenarios<W: std::io::Write>(records: &[ScenarioRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "kind",
        "t_start",
        "t_end",
        "ids",
        "metric_keys",
        "metric_values",
    ])?;
    for r in records {
        let ids: Vec<String> = r.ids.iter().map(u64::to_string).collect();
        let keys: Vec<&str> = r.metrics.keys().map(String::as_str).collect();
        let vals: Vec<String> = r.metrics.values().map(f64::to_string).collect();
        w.write_record([
            r.kind.as_str().to_string(),
            r.t_start.to_string(),
            r.t_end.to_string(),
            ids.join(";"),
            keys.join(";"),
            vals.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scenarios<R: std::io::Read>(input: R) -> Result<Vec<ScenarioRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    let bad = |what: &str| Error::config(format!("bad scenario field {what}"));
    for rec in rdr.records() {
        let rec = rec?;
        let split = |s: &str| -> Vec<String> {
            if s.is_empty() {
                Vec::new()
            } else {
                s.split(';').map(str::to_string).collect()
            }
        };
        let ids = split(&rec[3])
            .iter()
            .map(|s| s.parse().map_err(|_| bad("ids")))
            .collect::<Result<Vec<u64>>>()?;
        let keys = split(&rec[4]);
        let vals = split(&rec[5])
            .iter()
            .map(|s| s.parse().map_err(|_| bad("metric_values")))
            .collect::<Result<Vec<f64>>>()?;
        if keys.len() != vals.len() {
            return Err(bad("metric arity"));
        }
        out.push(ScenarioRecord {
            kind: rec[0].parse()?,
            t_start: rec[1].parse().map_err(|_| bad("t_start"))?,
            t_end: rec[2].parse().map_err(|_| bad("t_end"))?,
            ids,
            metrics: keys.into_iter().zip(vals).collect(),
        });
    }
    Ok(out)
}

/// Lane-change model parameters searched by [`calibrate_lane_change`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationGrid {
    pub politeness: Vec<f64>,
    pub lc_threshold: Vec<f64>,
    pub b_safe: Vec<f64>,
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        Self {
            politeness: (0..=20).map(|i| i as f64 * 0.05).collect(),
            lc_threshold: (1..=10).map(|i| i as f64 * 0.05).collect(),
            b_safe: (2..=8).map(|i| i as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub politeness: f64,
    pub lc_threshold: f64,
    pub b_safe: f64,
    pub balanced_accuracy: f64,
    pub decision_points: usize,
    pub observed_changes: usize,
    pub lane_change_events: usize,
    pub candidates: usize,
}

/// Scene facts the lane-change model needs beyond the stored rows.
#[derive(Clone, Debug)]
pub struct CalibrationContext<'a> {
    pub map: &'a CorridorMap,
    pub driver: DriverDefaults,
    pub decision_interval: f64,
    pub min_events: usize,
}

/// MOBIL terms for one candidate direction at one decision point.
#[derive(Clone, Copy, Debug)]
struct Option2 {
    left: Option<MobilTerms>,
    right: Option<MobilTerms>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Observed {
    Stay,
    Left,
    Right,
}

struct Scene {
    states: Vec<VehicleState>,
    params: Vec<DriverParams>,
    /// Second lane occupied during a lane change.
    other_lane: Vec<Option<usize>>,
}

fn leader_idx(scene: &Scene, occ: &[usize], s: f64, exclude: u64) -> Option<usize> {
    occ.iter()
        .copied()
        .filter(|&j| scene.states[j].id != exclude && scene.states[j].s >= s)
        .min_by(|&a, &b| {
            scene.states[a]
                .s
                .total_cmp(&scene.states[b].s)
                .then(scene.states[a].id.cmp(&scene.states[b].id))
        })
}

fn follower_idx(scene: &Scene, occ: &[usize], s: f64, exclude: u64) -> Option<usize> {
    occ.iter()
        .copied()
        .filter(|&j| scene.states[j].id != exclude && scene.states[j].s < s)
        .max_by(|&a, &b| {
            scene.states[a]
                .s
                .total_cmp(&scene.states[b].s)
                .then(scene.states[b].id.cmp(&scene.states[a].id))
        })
}

fn occupancy(scene: &Scene, lanes: usize) -> Vec<Vec<usize>> {
    let mut occ = vec![Vec::new(); lanes];
    for (i, st) in scene.states.iter().enumerate() {
        occ[st.lane].push(i);
        if let Some(o) = scene.other_lane[i] {
            occ[o].push(i);
        }
    }
    occ
}

/// Rebuilds decision points from ground-truth rows and precomputes the
/// parameter-independent MOBIL terms at each.
fn decision_points(
    store: &TrajectoryStore,
    ctx: &CalibrationContext<'_>,
) -> Result<Vec<(Option2, Observed)>> {
    let frames = store.frames(Source::GroundTruth);
    let w = ctx.map.lane_width;
    let lanes = ctx.map.lanes;
    let step_ms = t_key(ctx.decision_interval);
    let mut out = Vec::new();
    for (&k, rows) in &frames {
        if step_ms <= 0 || k % step_ms != 0 {
            continue;
        }
        let next = frames.range(k + 1..).next().map(|(_, r)| r);
        let mut scene = Scene {
            states: Vec::new(),
            params: Vec::new(),
            other_lane: Vec::new(),
        };
        for r in rows {
            let (len, _) = r.class.dimensions();
            let mut st = VehicleState::new(r.id, r.class, r.x + len / 2.0, r.lane, r.v);
            st.lat = r.y - r.lane as f64 * w;
            st.a = r.a;
            st.t = r.t;
            let other = if st.lat.abs() > 1e-12 {
                let o = r.lane as i64 + st.lat.signum() as i64;
                (0..lanes as i64).contains(&o).then_some(o as usize)
            } else {
                None
            };
            scene
                .params
                .push(ctx.driver.params_for(r.class, ctx.map.speed_limit_at(st.s)));
            scene.states.push(st);
            scene.other_lane.push(other);
        }
        let mut occ = occupancy(&scene, lanes);
        for i in 0..scene.states.len() {
            let st = &scene.states[i];
            if scene.other_lane[i].is_some() || !st.class.is_motorized() {
                continue;
            }
            let observed = next
                .and_then(|n| n.iter().find(|r| r.id == st.id))
                .map(|r| {
                    let y0 = st.lane as f64 * w;
                    if r.y > y0 + 1e-12 {
                        Observed::Left
                    } else if r.y < y0 - 1e-12 {
                        Observed::Right
                    } else {
                        Observed::Stay
                    }
                })
                .unwrap_or(Observed::Stay);
            let nb = |idx: Option<usize>| {
                idx.map(|j| Neighbor {
                    state: &scene.states[j],
                    params: &scene.params[j],
                })
            };
            let lane = st.lane;
            let current = (
                nb(leader_idx(&scene, &occ[lane], st.s, st.id)),
                nb(follower_idx(&scene, &occ[lane], st.s, st.id)),
            );
            let adj = |l: usize| AdjacentLane {
                leader: nb(leader_idx(&scene, &occ[l], st.s, st.id)),
                follower: nb(follower_idx(&scene, &occ[l], st.s, st.id)),
            };
            let terms = Option2 {
                left: (lane + 1 < lanes)
                    .then(|| adj(lane + 1))
                    .and_then(|a| mobil_terms(st, &scene.params[i], current, &a)),
                right: (lane > 0)
                    .then(|| adj(lane - 1))
                    .and_then(|a| mobil_terms(st, &scene.params[i], current, &a)),
            };
            out.push((terms, observed));
            if observed != Observed::Stay {
                // Later vehicles in the same tick see the ego in both lanes.
                let o = if observed == Observed::Left {
                    lane + 1
                } else {
                    lane - 1
                };
                if o < lanes {
                    scene.other_lane[i] = Some(o);
                    occ = occupancy(&scene, lanes);
                }
            }
        }
    }
    Ok(out)
}

fn predict(terms: &Option2, params: &DriverParams) -> Observed {
    let eval = |t: &Option<MobilTerms>| -> Option<f64> {
        let t = t.as_ref()?;
        let (margin, safe) = mobil_criterion(t, params);
        (safe && margin > 0.0).then_some(margin)
    };
    match (eval(&terms.left), eval(&terms.right)) {
        (Some(l), Some(r)) if r > l => Observed::Right,
        (Some(_), _) => Observed::Left,
        (None, Some(_)) => Observed::Right,
        (None, None) => Observed::Stay,
    }
}

/// Grid search for the lane-change parameters that best reproduce the
/// observed change/stay decisions, scored by balanced accuracy. Ties go to
/// the lexicographically smallest `(politeness, lc_threshold, b_safe)`.
pub fn calibrate_lane_change(
    store: &TrajectoryStore,
    ctx: &CalibrationContext<'_>,
    grid: &CalibrationGrid,
) -> Result<CalibrationReport> {
    let events = extract_events(store, Source::GroundTruth, &EventThresholds::default())
        .iter()
        .filter(|e| e.kind == ScenarioKind::LaneChange)
        .count();
    if events < ctx.min_events {
        return Err(Error::InsufficientData {
            found: events,
            required: ctx.min_events,
        });
    }
    if grid.politeness.is_empty() || grid.lc_threshold.is_empty() || grid.b_safe.is_empty() {
        return Err(Error::config("calibration grid has an empty axis"));
    }
    let points = decision_points(store, ctx)?;
    let positives = points.iter().filter(|p| p.1 != Observed::Stay).count();
    let negatives = points.len() - positives;
    let sorted = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let (ps, ths, bs) = (
        sorted(&grid.politeness),
        sorted(&grid.lc_threshold),
        sorted(&grid.b_safe),
    );
    let base = ctx
        .driver
        .params_for(VehicleClass::Car, ctx.map.max_speed_limit());
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for &p in &ps {
        for &th in &ths {
            for &b in &bs {
                let params = DriverParams {
                    politeness: p,
                    lc_threshold: th,
                    b_safe: b,
                    ..base.clone()
                };
                let (mut tp, mut tn) = (0usize, 0usize);
                for (terms, obs) in &points {
                    let pred = predict(terms, &params);
                    match obs {
                        Observed::Stay if pred == Observed::Stay => tn += 1,
                        Observed::Stay => {}
                        o if pred == *o => tp += 1,
                        _ => {}
                    }
                }
                let tpr = if positives > 0 {
                    tp as f64 / positives as f64
                } else {
                    1.0
                };
                let tnr = if negatives > 0 {
                    tn as f64 / negatives as f64
                } else {
                    1.0
                };
                let score = 0.5 * (tpr + tnr);
                if best.is_none_or(|bst| score > bst.3) {
                    best = Some((p, th, b, score));
                }
            }
        }
    }
    let (p, th, b, score) = best.expect("non-empty grid");
    Ok(CalibrationReport {
        politeness: p,
        lc_threshold: th,
        b_safe: b,
        balanced_accuracy: score,
        decision_points: points.len(),
        observed_changes: positives,
        lane_change_events: events,
        candidates: ps.len() * ths.len() * bs.len(),
    })
}
