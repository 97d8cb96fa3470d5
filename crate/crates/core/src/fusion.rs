//! Central fusion server: frame buffering, association, constant-velocity
//! Kalman filtering, track management and accuracy evaluation.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::stations::{DetectedObject, ObjectListMessage, Sensor, TruthObject};
use crate::world::VehicleClass;
use crate::{grid_time, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Mahalanobis gate.
    pub gate: f64,
    pub confirm_hits: u32,
    pub max_misses: u32,
    /// Messages older than this on arrival are discarded, s.
    pub staleness: f64,
    /// Process-noise acceleration spectral density, m²/s³.
    pub q: f64,
    /// Time a frame stays open for late station messages, s.
    pub fusion_wait: f64,
    pub frame_rate: f64,
    /// Velocity variance of a freshly initialised track, (m/s)².
    pub init_velocity_var: f64,
    /// Position variance at which twin quality drops to one half, m².
    pub quality_ref: f64,
    /// Added to the innovation covariance when gating, m².
    pub gate_floor: f64,
    /// Motorized tracks closer than this are duplicates whatever their covariance, m.
    pub merge_distance: f64,
    /// Greedy association. Fast but not cost-minimal.
    pub greedy: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            gate: 3.0,
            confirm_hits: 3,
            max_misses: 10,
            staleness: 0.5,
            q: 0.5,
            fusion_wait: 0.3,
            frame_rate: 10.0,
            init_velocity_var: 1.0,
            quality_ref: 0.0025,
            gate_floor: 1e-4,
            merge_distance: 1.0,
            greedy: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    /// Assigned at confirmation.
    pub global_id: Option<u64>,
    pub state: Vector4<f64>,
    pub cov: Matrix4<f64>,
    pub last_update: f64,
    /// Stations that contributed in the latest update.
    pub contributors: BTreeSet<u32>,
    pub age: u32,
    pub hits: u32,
    pub misses: u32,
    class_votes: BTreeMap<VehicleClass, u32>,
}

impl Track {
    pub fn new(det: &DetectedObject, t: f64, init_velocity_var: f64) -> Self {
        let mut cov = Matrix4::zeros();
        cov[(0, 0)] = det.cov[0];
        cov[(0, 1)] = det.cov[1];
        cov[(1, 0)] = det.cov[1];
        cov[(1, 1)] = det.cov[2];
        cov[(2, 2)] = init_velocity_var;
        cov[(3, 3)] = init_velocity_var;
        Self {
            global_id: None,
            state: Vector4::new(det.x, det.y, det.vx, det.vy),
            cov,
            last_update: t,
            contributors: BTreeSet::from([det.station_id]),
            age: 1,
            hits: 1,
            misses: 0,
            class_votes: BTreeMap::from([(det.class, 1)]),
        }
    }

    pub fn confirmed(&self) -> bool {
        self.global_id.is_some()
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.state[0], self.state[1])
    }

    pub fn position_cov(&self) -> Matrix2<f64> {
        self.cov.fixed_view::<2, 2>(0, 0).into_owned()
    }

    /// Majority class, ties broken by class order.
    pub fn class(&self) -> VehicleClass {
        self.class_votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(c, _)| *c)
            .unwrap_or(VehicleClass::Car)
    }

    /// Constant-velocity prediction to `t`.
    pub fn predict(&mut self, t: f64, q: f64) {
        let dt = t - self.last_update;
        if dt <= 0.0 {
            return;
        }
        let f = transition(dt);
        self.state = f * self.state;
        self.cov = f * self.cov * f.transpose() + process_noise(dt, q);
        self.last_update = t;
    }
}

fn transition(dt: f64) -> Matrix4<f64> {
    let mut f = Matrix4::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    f
}

/// Discrete white-noise-acceleration covariance for one step of `dt`.
pub fn process_noise(dt: f64, q: f64) -> Matrix4<f64> {
    let (a, b, c) = (dt.powi(3) / 3.0, dt.powi(2) / 2.0, dt);
    let mut m = Matrix4::zeros();
    for i in 0..2 {
        m[(i, i)] = a * q;
        m[(i, i + 2)] = b * q;
        m[(i + 2, i)] = b * q;
        m[(i + 2, i + 2)] = c * q;
    }
    m
}

fn meas(det: &DetectedObject) -> (Vector2<f64>, Matrix2<f64>) {
    (
        Vector2::new(det.x, det.y),
        Matrix2::new(det.cov[0], det.cov[1], det.cov[1], det.cov[2]),
    )
}

fn h() -> Matrix2x4<f64> {
    Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)
}

/// Squared Mahalanobis distance between a track's predicted position and a detection.
pub fn mahalanobis2(track: &Track, det: &DetectedObject, floor: f64) -> f64 {
    let (z, r) = meas(det);
    let s = track.position_cov() + r + Matrix2::identity() * floor;
    let d = z - track.position();
    match s.try_inverse() {
        Some(si) => (d.transpose() * si * d)[(0, 0)],
        None => f64::INFINITY,
    }
}

/// Sequential Kalman updates with every detection matched this frame.
///
/// The track must already be predicted to the frame time. A detection with
/// zero covariance pins the position to the measurement.
pub fn filter_update(track: &mut Track, detections: &[&DetectedObject]) {
    let h = h();
    for det in detections {
        let (z, r) = meas(det);
        let s = h * track.cov * h.transpose() + r;
        match s.try_inverse() {
            Some(si) => {
                let k = track.cov * h.transpose() * si;
                let innov = z - h * track.state;
                track.state += k * innov;
                let ikh = Matrix4::identity() - k * h;
                track.cov = ikh * track.cov * ikh.transpose() + k * r * k.transpose();
            }
            None => {}
        }
        if r == Matrix2::zeros() {
            track.state[0] = z[0];
            track.state[1] = z[1];
            for i in 0..4 {
                for j in 0..2 {
                    track.cov[(i, j)] = 0.0;
                    track.cov[(j, i)] = 0.0;
                }
            }
        }
        track.cov = 0.5 * (track.cov + track.cov.transpose());
        *track.class_votes.entry(det.class).or_default() += 1;
    }
    track.contributors = detections.iter().map(|d| d.station_id).collect();
}

/// Optimal assignment for a rectangular cost matrix with `rows <= cols`.
/// Returns the column assigned to every row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows <= cols");
    // Shortest augmenting path with potentials; 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assignment {
    /// (track index, detection index)
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
    /// Sum of squared Mahalanobis distances plus `gate² / 2` per unmatched item.
    pub cost: f64,
}

/// Cost of leaving one track or one detection unmatched.
pub fn unmatched_cost(gate: f64) -> f64 {
    gate * gate / 2.0
}

/// Gated minimum-cost assignment of detections to tracks.
///
/// Each detection is assigned to at most one track. Leaving a track and a
/// detection both unmatched costs exactly the gate, so any gated pair is
/// preferred to no pair.
pub fn associate(
    tracks: &[Track],
    detections: &[&DetectedObject],
    config: &FusionConfig,
) -> Assignment {
    let n = tracks.len();
    let m = detections.len();
    let tau = unmatched_cost(config.gate);
    let gate2 = config.gate * config.gate;
    let d2: Vec<Vec<f64>> = tracks
        .iter()
        .map(|t| {
            detections
                .iter()
                .map(|d| mahalanobis2(t, d, config.gate_floor))
                .collect()
        })
        .collect();
    let mut pairs = Vec::new();
    if config.greedy {
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for (i, row) in d2.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c <= gate2 {
                    cand.push((c, i, j));
                }
            }
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut tu = vec![false; n];
        let mut du = vec![false; m];
        for (_, i, j) in cand {
            if !tu[i] && !du[j] {
                tu[i] = true;
                du[j] = true;
                pairs.push((i, j));
            }
        }
    } else if n > 0 && m > 0 {
        // Rows or columns without any gated partner always go to their dummy,
        // so the square problem is built over the remaining ones only.
        let rows: Vec<usize> = (0..n)
            .filter(|&i| d2[i].iter().any(|&c| c <= gate2))
            .collect();
        let cols: Vec<usize> = (0..m)
            .filter(|&j| d2.iter().any(|r| r[j] <= gate2))
            .collect();
        let (nr, mc) = (rows.len(), cols.len());
        if nr > 0 && mc > 0 {
            // Square (nr+mc) matrix: real pairs, track->dummy, dummy->detection.
            let big = 1e12;
            let size = nr + mc;
            let mut cost = vec![vec![0.0; size]; size];
            for (a, &i) in rows.iter().enumerate() {
                for (b, &j) in cols.iter().enumerate() {
                    cost[a][b] = if d2[i][j] <= gate2 { d2[i][j] } else { big };
                }
                for k in 0..nr {
                    cost[a][mc + k] = if k == a { tau } else { big };
                }
            }
            for k in 0..mc {
                for b in 0..mc {
                    cost[nr + k][b] = if k == b { tau } else { big };
                }
            }
            let assign = hungarian(&cost);
            for (a, &b) in assign.iter().enumerate().take(nr) {
                if b < mc && d2[rows[a]][cols[b]] <= gate2 {
                    pairs.push((rows[a], cols[b]));
                }
            }
        }
    }
    pairs.sort_unstable();
    let matched_t: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    let matched_d: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
    let unmatched_tracks: Vec<usize> = (0..n).filter(|i| !matched_t.contains(i)).collect();
    let unmatched_detections: Vec<usize> = (0..m).filter(|j| !matched_d.contains(j)).collect();
    let cost = pairs.iter().map(|&(i, j)| d2[i][j]).sum::<f64>()
        + tau * (unmatched_tracks.len() + unmatched_detections.len()) as f64;
    Assignment {
        pairs,
        unmatched_tracks,
        unmatched_detections,
        cost,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinEntry {
    pub global_id: u64,
    pub class: VehicleClass,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub quality: f64,
    pub contributors: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TwinFrame {
    pub frame_time: f64,
    pub tracks: Vec<TwinEntry>,
}

/// Quality in (0, 1], strictly decreasing in the position covariance trace.
pub fn quality(cov_trace: f64, reference: f64) -> f64 {
    1.0 / (1.0 + cov_trace.max(0.0) / reference)
}

/// Snapshot of the confirmed tracks, ordered by global id.
pub fn emit_twin_frame(tracks: &[Track], t: f64, config: &FusionConfig) -> TwinFrame {
    let mut entries: Vec<TwinEntry> = tracks
        .iter()
        .filter_map(|tr| {
            tr.global_id.map(|gid| TwinEntry {
                global_id: gid,
                class: tr.class(),
                x: tr.state[0],
                y: tr.state[1],
                vx: tr.state[2],
                vy: tr.state[3],
                quality: quality(tr.position_cov().trace(), config.quality_ref),
                contributors: tr.contributors.len(),
            })
        })
        .collect();
    entries.sort_by_key(|e| e.global_id);
    TwinFrame {
        frame_time: t,
        tracks: entries,
    }
}

/// Applies one frame of association results to the track list.
///
/// `hit[i]` tells whether track `i` received a detection this frame. New
/// candidates are appended by the caller before this runs and carry `hits = 1`.
pub fn lifecycle(
    tracks: &mut Vec<Track>,
    hit: &[bool],
    next_global: &mut u64,
    config: &FusionConfig,
) {
    let mut keep = Vec::with_capacity(tracks.len());
    for (mut tr, &h) in tracks.drain(..).zip(hit) {
        if h {
            tr.misses = 0;
            if tr.global_id.is_none() && tr.hits >= config.confirm_hits {
                *next_global += 1;
                tr.global_id = Some(*next_global);
            }
            keep.push(tr);
        } else if tr.confirmed() {
            tr.misses += 1;
            tr.contributors.clear();
            if tr.misses < config.max_misses {
                keep.push(tr);
            }
        }
        // Tentative tracks need consecutive hits and are dropped on a miss.
    }
    *tracks = keep;
}

/// Folds tracks that describe the same object into the oldest of them.
///
/// Two tracks are duplicates when their positions lie within the gate under
/// the sum of their position covariances, or when both are motorized and
/// closer than `merge_distance`. The survivor is the confirmed track
/// with the smallest global id, else the earliest one in the list.
pub fn merge_duplicates(tracks: &mut Vec<Track>, hit: &mut Vec<bool>, config: &FusionConfig) {
    let gate2 = config.gate * config.gate;
    let rank = |i: usize, t: &Track| (t.global_id.is_none(), t.global_id, i);
    let mut gone = vec![false; tracks.len()];
    for i in 0..tracks.len() {
        for j in i + 1..tracks.len() {
            if gone[i] || gone[j] {
                continue;
            }
            let s = tracks[i].position_cov()
                + tracks[j].position_cov()
                + Matrix2::identity() * config.gate_floor;
            let d = tracks[i].position() - tracks[j].position();
            let d2 = s
                .try_inverse()
                .map_or(f64::INFINITY, |si| (d.transpose() * si * d)[(0, 0)]);
            let close = tracks[i].class().is_motorized()
                && tracks[j].class().is_motorized()
                && d.norm() < config.merge_distance;
            if d2 > gate2 && !close {
                continue;
            }
            let (win, lose) = if rank(i, &tracks[i]) <= rank(j, &tracks[j]) {
                (i, j)
            } else {
                (j, i)
            };
            gone[lose] = true;
            hit[win] |= hit[lose];
            let extra = tracks[lose].contributors.clone();
            let hits = tracks[lose].hits;
            let w = &mut tracks[win];
            w.contributors.extend(extra);
            w.hits = w.hits.max(hits);
        }
    }
    let mut k = 0;
    tracks.retain(|_| {
        k += 1;
        !gone[k - 1]
    });
    let mut k = 0;
    hit.retain(|_| {
        k += 1;
        !gone[k - 1]
    });
}

/// Object lists grouped by frame.
#[derive(Clone, Debug, Default)]
pub struct FrameBuffer {
    buckets: BTreeMap<i64, BTreeMap<u32, ObjectListMessage>>,
    pub discarded: u64,
    pub duplicates: u64,
    /// Frames up to and including this index are closed.
    closed_through: Option<i64>,
}

impl FrameBuffer {
    fn key(t: f64, rate: f64) -> i64 {
        (t * rate).round() as i64
    }

    /// Buckets one station message received at `rx_time`.
    pub fn ingest(&mut self, msg: ObjectListMessage, rx_time: f64, config: &FusionConfig) {
        let k = Self::key(msg.frame_time, config.frame_rate);
        if rx_time - msg.frame_time > config.staleness + 1e-9
            || self.closed_through.is_some_and(|c| k <= c)
        {
            self.discarded += 1;
            return;
        }
        let bucket = self.buckets.entry(k).or_default();
        if bucket.contains_key(&msg.station_id) {
            self.duplicates += 1;
            return;
        }
        bucket.insert(msg.station_id, msg);
    }

    pub fn bucket(&self, k: i64) -> Option<&BTreeMap<u32, ObjectListMessage>> {
        self.buckets.get(&k)
    }

    fn close(&mut self, k: i64) -> BTreeMap<u32, ObjectListMessage> {
        self.closed_through = Some(k);
        self.buckets.remove(&k).unwrap_or_default()
    }
}

/// The fusion server state machine.
#[derive(Clone, Debug)]
pub struct FusionServer {
    pub config: FusionConfig,
    pub buffer: FrameBuffer,
    tracks: Vec<Track>,
    next_global: u64,
    next_frame: i64,
}

impl FusionServer {
    pub fn new(config: FusionConfig) -> Self {
        Self {
            config,
            buffer: FrameBuffer::default(),
            tracks: Vec::new(),
            next_global: 0,
            next_frame: 0,
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn ingest(&mut self, msg: ObjectListMessage, rx_time: f64) {
        self.buffer.ingest(msg, rx_time, &self.config);
    }

    /// Fuses every frame whose waiting time has elapsed by `now`.
    pub fn process_ready(&mut self, now: f64) -> Vec<TwinFrame> {
        let mut out = Vec::new();
        loop {
            let t = grid_time(self.next_frame as u64, self.config.frame_rate);
            if t + self.config.fusion_wait > now + 1e-9 {
                break;
            }
            let lists = self.buffer.close(self.next_frame);
            out.push(self.process_frame(t, &lists));
            self.next_frame += 1;
        }
        out
    }

    /// Predict, associate per (station, sensor) group, update, manage tracks.
    pub fn process_frame(&mut self, t: f64, lists: &BTreeMap<u32, ObjectListMessage>) -> TwinFrame {
        let cfg = self.config.clone();
        for tr in &mut self.tracks {
            tr.predict(t, cfg.q);
        }
        let mut groups: BTreeMap<(Sensor, u32), Vec<&DetectedObject>> = BTreeMap::new();
        for (sid, msg) in lists {
            for d in &msg.objects {
                groups.entry((d.sensor, *sid)).or_default().push(d);
            }
        }
        let n_existing = self.tracks.len();
        let mut matched: Vec<Vec<&DetectedObject>> = vec![Vec::new(); n_existing];
        let mut leftovers: Vec<&DetectedObject> = Vec::new();
        for dets in groups.values() {
            let a = associate(&self.tracks, dets, &cfg);
            for (i, j) in a.pairs {
                matched[i].push(dets[j]);
            }
            leftovers.extend(a.unmatched_detections.iter().map(|&j| dets[j]));
        }
        for (tr, dets) in self.tracks.iter_mut().zip(&matched) {
            if !dets.is_empty() {
                filter_update(tr, dets);
                tr.hits += 1;
            }
            tr.age += 1;
        }
        let mut hit: Vec<bool> = matched.iter().map(|d| !d.is_empty()).collect();

        // Unmatched detections seen by several sensors become one candidate.
        let mut candidates: Vec<(Track, Vec<(Sensor, u32)>)> = Vec::new();
        for d in leftovers {
            let key = (d.sensor, d.station_id);
            let mut best: Option<(f64, usize)> = None;
            for (ci, (c, keys)) in candidates.iter().enumerate() {
                if keys.contains(&key) {
                    continue;
                }
                let m2 = mahalanobis2(c, d, cfg.gate_floor);
                if m2 <= cfg.gate * cfg.gate && best.is_none_or(|b| m2 < b.0) {
                    best = Some((m2, ci));
                }
            }
            match best {
                Some((_, ci)) => {
                    let (c, keys) = &mut candidates[ci];
                    let mut all: Vec<&DetectedObject> = Vec::new();
                    all.push(d);
                    filter_update(c, &all);
                    c.contributors.insert(d.station_id);
                    keys.push(key);
                }
                None => candidates.push((Track::new(d, t, cfg.init_velocity_var), vec![key])),
            }
        }
        for (c, _) in candidates {
            self.tracks.push(c);
            hit.push(true);
        }
        merge_duplicates(&mut self.tracks, &mut hit, &cfg);
        lifecycle(&mut self.tracks, &hit, &mut self.next_global, &cfg);
        emit_twin_frame(&self.tracks, t, &cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub rmse: f64,
    pub p95_error: f64,
    pub matched_fraction: f64,
    pub id_switches: u64,
    pub matched: u64,
    pub eligible: u64,
    /// p95 of matched errors for tracks with one contributing station.
    pub p95_single: Option<f64>,
    /// p95 of matched errors for tracks with two or more contributing stations.
    pub p95_multi: Option<f64>,
    pub n_single: u64,
    pub n_multi: u64,
}

/// Ground truth at one frame time.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthFrame {
    pub t: f64,
    pub objects: Vec<TruthObject>,
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Matches each frame's tracks to ground truth, nearest pairs first, within
/// `max_dist`. A truth object counts as eligible once it has existed for
/// `warmup` frames; unmatched eligible objects lower the matched fraction.
pub fn eval_accuracy(
    frames: &[TwinFrame],
    truth: &[TruthFrame],
    max_dist: f64,
    warmup: u32,
) -> AccuracyReport {
    let by_time: BTreeMap<i64, &TruthFrame> = truth
        .iter()
        .map(|f| ((f.t * 1000.0).round() as i64, f))
        .collect();
    let mut seen_frames: BTreeMap<u64, u32> = BTreeMap::new();
    let mut last_gid: BTreeMap<u64, u64> = BTreeMap::new();
    let mut errors = Vec::new();
    let mut single = Vec::new();
    let mut multi = Vec::new();
    let mut id_switches = 0u64;
    let mut eligible = 0u64;
    let mut matched_eligible = 0u64;
    for frame in frames {
        let Some(tf) = by_time.get(&((frame.frame_time * 1000.0).round() as i64)) else {
            continue;
        };
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for (i, o) in tf.objects.iter().enumerate() {
            for (j, e) in frame.tracks.iter().enumerate() {
                let d = (e.x - o.x).hypot(e.y - o.y);
                if d <= max_dist {
                    cand.push((d, i, j));
                }
            }
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used_o = vec![false; tf.objects.len()];
        let mut used_e = vec![false; frame.tracks.len()];
        let mut matched_o = vec![None; tf.objects.len()];
        for (d, i, j) in cand {
            if !used_o[i] && !used_e[j] {
                used_o[i] = true;
                used_e[j] = true;
                matched_o[i] = Some((d, j));
            }
        }
        for (i, o) in tf.objects.iter().enumerate() {
            let age = seen_frames.entry(o.id).or_insert(0);
            *age += 1;
            let is_eligible = *age >= warmup;
            if let Some((d, j)) = matched_o[i] {
                let e = &frame.tracks[j];
                errors.push(d);
                if e.contributors >= 2 {
                    multi.push(d);
                } else {
                    single.push(d);
                }
                if let Some(prev) = last_gid.insert(o.id, e.global_id) {
                    if prev != e.global_id {
                        id_switches += 1;
                    }
                }
                if is_eligible {
                    eligible += 1;
                    matched_eligible += 1;
                }
            } else if is_eligible {
                eligible += 1;
            }
        }
    }
    let rmse = if errors.is_empty() {
        0.0
    } else {
        (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
    };
    AccuracyReport {
        rmse,
        p95_error: percentile(&errors, 95.0),
        matched_fraction: if eligible == 0 {
            1.0
        } else {
            matched_eligible as f64 / eligible as f64
        },
        id_switches,
        matched: errors.len() as u64,
        eligible,
        p95_single: (!single.is_empty()).then(|| percentile(&single, 95.0)),
        p95_multi: (!multi.is_empty()).then(|| percentile(&multi, 95.0)),
        n_single: single.len() as u64,
        n_multi: multi.len() as u64,
    }
}

/// Collects the twin frames of a run together with the message bookkeeping.
pub fn run_fusion(
    server: &mut FusionServer,
    arrivals: Vec<(f64, ObjectListMessage)>,
    until: f64,
) -> Result<Vec<TwinFrame>> {
    let mut out = Vec::new();
    let mut arrivals = arrivals;
    arrivals.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.station_id.cmp(&b.1.station_id))
    });
    for (rx, msg) in arrivals {
        out.extend(server.process_ready(rx - 1e-12));
        server.ingest(msg, rx);
    }
    out.extend(server.process_ready(until));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(station: u32, sensor: Sensor, x: f64, y: f64, var: f64) -> DetectedObject {
        DetectedObject {
            station_id: station,
            local_id: 0,
            class: VehicleClass::Car,
            sensor,
            x,
            y,
            vx: 0.0,
            vy: 0.0,
            cov: [var, 0.0, var],
            confidence: 1.0,
        }
    }

    #[test]
    fn close_detection_is_gated_in() {
        let cfg = FusionConfig::default();
        let tr = Track::new(&det(1, Sensor::Lidar, 10.0, 2.0, 0.0025), 0.0, 1.0);
        let d = det(1, Sensor::Lidar, 10.1, 2.0, 0.0025);
        // Mahalanobis with S = 2 * 0.0025 + floor on each axis.
        let expect = 0.01 / (0.005 + cfg.gate_floor);
        assert!((mahalanobis2(&tr, &d, cfg.gate_floor) - expect).abs() < 1e-9);
        let a = associate(&[tr.clone()], &[&d], &cfg);
        assert_eq!(a.pairs, vec![(0, 0)]);
        let far = det(1, Sensor::Lidar, 60.0, 2.0, 0.0025);
        let a = associate(&[tr], &[&far], &cfg);
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_detections, vec![0]);
    }

    #[test]
    fn hungarian_small() {
        let c = vec![
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ];
        let a = hungarian(&c);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn symmetric_detections_average() {
        let mut tr = Track::new(&det(1, Sensor::Lidar, 10.0, 0.0, 0.0025), 0.0, 1.0);
        tr.cov = Matrix4::identity() * 1e6;
        tr.state = Vector4::new(0.0, 0.0, 0.0, 0.0);
        let a = det(1, Sensor::Lidar, 10.04, 0.0, 0.0025);
        let b = det(2, Sensor::Lidar, 9.96, 0.0, 0.0025);
        filter_update(&mut tr, &[&a, &b]);
        assert!((tr.state[0] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn noiseless_update_is_exact() {
        let mut tr = Track::new(&det(1, Sensor::Lidar, 10.0, 0.0, 0.0), 0.0, 1.0);
        tr.predict(0.1, 0.0);
        let d = det(1, Sensor::Lidar, 10.37, 0.21, 0.0);
        filter_update(&mut tr, &[&d]);
        assert_eq!(tr.state[0], 10.37);
        assert_eq!(tr.state[1], 0.21);
    }

    #[test]
    fn trace_never_grows_on_update() {
        let mut tr = Track::new(&det(1, Sensor::Lidar, 0.0, 0.0, 0.01), 0.0, 1.0);
        tr.predict(0.1, 0.5);
        let before = tr.cov.trace();
        let a = det(1, Sensor::Lidar, 0.1, 0.0, 0.01);
        let b = det(2, Sensor::Camera, 0.0, 0.1, 0.25);
        filter_update(&mut tr, &[&a, &b]);
        assert!(tr.cov.trace() <= before);
    }

    #[test]
    fn confirmation_and_deletion() {
        let cfg = FusionConfig {
            fusion_wait: 0.0,
            ..Default::default()
        };
        let mut server = FusionServer::new(cfg);
        let msg = |t: f64, dets: Vec<DetectedObject>| {
            BTreeMap::from([(1u32, ObjectListMessage::new(1, t, dets))])
        };
        let f1 = server.process_frame(
            0.0,
            &msg(0.0, vec![det(1, Sensor::Lidar, 0.0, 0.0, 0.0025)]),
        );
        let f2 = server.process_frame(
            0.1,
            &msg(0.1, vec![det(1, Sensor::Lidar, 0.0, 0.0, 0.0025)]),
        );
        assert!(f1.tracks.is_empty() && f2.tracks.is_empty());
        let f3 = server.process_frame(
            0.2,
            &msg(0.2, vec![det(1, Sensor::Lidar, 0.0, 0.0, 0.0025)]),
        );
        assert_eq!(f3.tracks.len(), 1);
        assert_eq!(f3.tracks[0].global_id, 1);
        for k in 3..12 {
            let f = server.process_frame(k as f64 / 10.0, &msg(k as f64 / 10.0, vec![]));
            assert_eq!(f.tracks.len(), 1, "frame {k}");
        }
        let f = server.process_frame(1.2, &msg(1.2, vec![]));
        assert!(f.tracks.is_empty());
    }

    #[test]
    fn flicker_never_confirms() {
        let mut server = FusionServer::new(FusionConfig::default());
        for k in 0..40 {
            let t = k as f64 / 10.0;
            let dets = if k % 2 == 0 {
                vec![det(1, Sensor::Lidar, 5.0, 0.0, 0.0025)]
            } else {
                vec![]
            };
            let f = server.process_frame(
                t,
                &BTreeMap::from([(1u32, ObjectListMessage::new(1, t, dets))]),
            );
            assert!(f.tracks.is_empty());
        }
    }

    #[test]
    fn ingest_policies() {
        let cfg = FusionConfig::default();
        let mut buf = FrameBuffer::default();
        buf.ingest(ObjectListMessage::new(1, 1.0, vec![]), 1.6, &cfg);
        assert_eq!(buf.discarded, 1);
        buf.ingest(ObjectListMessage::new(1, 1.0, vec![]), 1.1, &cfg);
        buf.ingest(ObjectListMessage::new(2, 1.0, vec![]), 1.1, &cfg);
        assert_eq!(buf.bucket(10).unwrap().len(), 2);
        buf.ingest(ObjectListMessage::new(2, 1.0, vec![]), 1.2, &cfg);
        assert_eq!(buf.duplicates, 1);
        assert_eq!(buf.bucket(10).unwrap().len(), 2);
    }

    #[test]
    fn twin_quality_follows_trace() {
        let cfg = FusionConfig::default();
        let mut a = Track::new(&det(1, Sensor::Lidar, 0.0, 0.0, 0.01), 0.0, 1.0);
        let mut b = Track::new(&det(1, Sensor::Lidar, 10.0, 0.0, 0.04), 0.0, 1.0);
        a.global_id = Some(1);
        b.global_id = Some(2);
        assert!(emit_twin_frame(&[], 0.0, &cfg).tracks.is_empty());
        let f = emit_twin_frame(&[a, b], 0.0, &cfg);
        assert_eq!(f.tracks.len(), 2);
        assert!(f.tracks[0].quality > f.tracks[1].quality);
    }

    #[test]
    fn accuracy_examples() {
        let truth = TruthFrame {
            t: 0.0,
            objects: vec![TruthObject {
                id: 1,
                class: VehicleClass::Car,
                x: 5.0,
                y: 0.0,
                vx: 0.0,
                vy: 0.0,
                length: 4.5,
                width: 1.8,
            }],
        };
        let entry = |x: f64| TwinEntry {
            global_id: 1,
            class: VehicleClass::Car,
            x,
            y: 0.0,
            vx: 0.0,
            vy: 0.0,
            quality: 1.0,
            contributors: 1,
        };
        let exact = TwinFrame {
            frame_time: 0.0,
            tracks: vec![entry(5.0)],
        };
        let r = eval_accuracy(&[exact], &[truth.clone()], 1.0, 1);
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.matched_fraction, 1.0);
        let off = TwinFrame {
            frame_time: 0.0,
            tracks: vec![entry(5.05)],
        };
        let r = eval_accuracy(&[off], &[truth], 1.0, 1);
        assert!((r.rmse - 0.05).abs() < 1e-12);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(|x| x as f64).collect();
        assert_eq!(percentile(&v, 95.0), 95.0);
        assert_eq!(percentile(&[], 95.0), 0.0);
    }
}
