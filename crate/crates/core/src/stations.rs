//! Roadside sensing stations: placement, coverage and object-list generation.
//!
//! Stations sit beside lane 0 at a fixed lateral offset. LiDAR coverage is a
//! longitudinal interval of `lidar_radius` around the mount point; the camera
//! watches the section around an adjacent station.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::world::{CorridorMap, VehicleClass, World};
use crate::{Error, Result};

/// Raw sensor data rate of one station, bytes per second.
pub const RAW_BYTES_PER_S: f64 = 1e8;
pub const HEADER_BYTES: usize = 16;
pub const OBJECT_BYTES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sensor {
    Lidar,
    Camera,
    Infrared,
}

impl Sensor {
    pub fn code(self) -> u8 {
        match self {
            Sensor::Lidar => 0,
            Sensor::Camera => 1,
            Sensor::Infrared => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [Sensor::Lidar, Sensor::Camera, Sensor::Infrared]
            .into_iter()
            .find(|s| s.code() == c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Day,
    Night,
    Rain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationConfig {
    pub id: u32,
    pub s: f64,
    /// Lateral mount position; lane 0 is centred on y = 0.
    pub y: f64,
    pub lidar_radius: f64,
    pub camera_target: (f64, f64),
    pub proc_latency: f64,
    pub sigma_lidar: f64,
    pub sigma_cam_lat: f64,
    pub sigma_cam_range: f64,
    /// Per-axis velocity noise, m/s.
    pub sigma_velocity: f64,
    pub p_miss: f64,
    pub p_false: f64,
    pub frame_rate: f64,
}

/// Sensor settings shared by all stations of a layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorDefaults {
    pub mount_y: f64,
    pub lidar_radius: f64,
    pub proc_latency: f64,
    pub sigma_lidar: f64,
    pub sigma_cam_lat: f64,
    pub sigma_cam_range: f64,
    pub sigma_velocity: f64,
    pub p_miss: f64,
    pub p_false: f64,
    pub frame_rate: f64,
    /// The camera watches the upstream neighbour instead of the downstream one.
    pub camera_upstream: bool,
}

impl Default for SensorDefaults {
    fn default() -> Self {
        Self {
            mount_y: -4.0,
            lidar_radius: 50.0,
            proc_latency: 0.05,
            sigma_lidar: 0.05,
            sigma_cam_lat: 0.10,
            sigma_cam_range: 0.50,
            sigma_velocity: 0.2,
            p_miss: 0.05,
            p_false: 0.01,
            frame_rate: 10.0,
            camera_upstream: false,
        }
    }
}

impl SensorDefaults {
    /// Zero noise, no misses, no false alarms, no processing delay.
    pub fn noiseless() -> Self {
        Self {
            proc_latency: 0.0,
            sigma_lidar: 0.0,
            sigma_cam_lat: 0.0,
            sigma_cam_range: 0.0,
            sigma_velocity: 0.0,
            p_miss: 0.0,
            p_false: 0.0,
            ..Self::default()
        }
    }
}

impl StationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lidar_radius > 0.0) {
            return Err(Error::config(format!(
                "station {}: lidar_radius must be positive",
                self.id
            )));
        }
        if !(0.0..1.0).contains(&self.p_miss) || !(0.0..1.0).contains(&self.p_false) {
            return Err(Error::config(format!(
                "station {}: probabilities must lie in [0, 1)",
                self.id
            )));
        }
        if self.sigma_cam_range < self.sigma_cam_lat
            || self.sigma_lidar < 0.0
            || self.sigma_cam_lat < 0.0
        {
            return Err(Error::config(format!(
                "station {}: invalid noise levels",
                self.id
            )));
        }
        if !(self.frame_rate > 0.0) || self.proc_latency < 0.0 || self.sigma_velocity < 0.0 {
            return Err(Error::config(format!(
                "station {}: invalid timing",
                self.id
            )));
        }
        Ok(())
    }
}

/// Places stations every `spacing` metres from the corridor entry, adding one
/// at the far end if the last LiDAR interval falls short of it.
pub fn place_stations(
    corridor: &CorridorMap,
    spacing: f64,
    defaults: &SensorDefaults,
) -> Result<Vec<StationConfig>> {
    if !(60.0..=100.0).contains(&spacing) {
        return Err(Error::Placement(format!(
            "spacing {spacing} m outside [60, 100] m"
        )));
    }
    let length = corridor.length;
    let mut positions = Vec::new();
    let mut k = 0u32;
    while k as f64 * spacing <= length + 1e-9 {
        positions.push(k as f64 * spacing);
        k += 1;
    }
    if let Some(&last) = positions.last() {
        if last + defaults.lidar_radius < length {
            positions.push(length);
        }
    }
    let n = positions.len();
    let stations = positions
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let half = spacing / 2.0;
            // Each camera looks from its own post to halfway past the next one,
            // so together the cameras cover the whole corridor.
            let target = if n == 1 {
                (
                    (s - defaults.lidar_radius).max(0.0),
                    (s + defaults.lidar_radius).min(length),
                )
            } else if defaults.camera_upstream {
                if i == 0 {
                    (s, (positions[1] + half).min(length))
                } else {
                    ((positions[i - 1] - half).max(0.0), s)
                }
            } else if i + 1 < n {
                (s, (positions[i + 1] + half).min(length))
            } else {
                ((positions[i - 1] - half).max(0.0), s)
            };
            StationConfig {
                id: i as u32 + 1,
                s,
                y: defaults.mount_y,
                lidar_radius: defaults.lidar_radius,
                camera_target: target,
                proc_latency: defaults.proc_latency,
                sigma_lidar: defaults.sigma_lidar,
                sigma_cam_lat: defaults.sigma_cam_lat,
                sigma_cam_range: defaults.sigma_cam_range,
                sigma_velocity: defaults.sigma_velocity,
                p_miss: defaults.p_miss,
                p_false: defaults.p_false,
                frame_rate: defaults.frame_rate,
            }
        })
        .collect::<Vec<_>>();
    for st in &stations {
        st.validate()?;
    }
    Ok(stations)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub covered: bool,
    pub gaps: Vec<(f64, f64)>,
    /// Smallest number of LiDAR intervals containing any point of the corridor.
    pub redundancy: usize,
}

/// Number of LiDAR intervals containing `x`.
pub fn redundancy_at(stations: &[StationConfig], x: f64) -> usize {
    stations
        .iter()
        .filter(|st| (x - st.s).abs() <= st.lidar_radius)
        .count()
}

pub fn coverage_check(stations: &[StationConfig], length: f64) -> CoverageReport {
    let mut intervals: Vec<(f64, f64)> = stations
        .iter()
        .map(|st| (st.s - st.lidar_radius, st.s + st.lidar_radius))
        .collect();
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut gaps = Vec::new();
    let mut reach = 0.0f64;
    for &(lo, hi) in &intervals {
        if lo > reach && reach < length {
            gaps.push((reach, lo.min(length)));
        }
        reach = reach.max(hi);
    }
    if reach < length {
        gaps.push((reach, length));
    }
    let mut points: Vec<f64> = vec![0.0, length];
    for &(lo, hi) in &intervals {
        points.extend([lo, hi].into_iter().filter(|p| (0.0..=length).contains(p)));
    }
    points.sort_by(f64::total_cmp);
    points.dedup();
    let mut probes = points.clone();
    probes.extend(points.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    let redundancy = probes
        .iter()
        .map(|&x| redundancy_at(stations, x))
        .min()
        .unwrap_or(0);
    CoverageReport {
        covered: gaps.is_empty(),
        gaps,
        redundancy,
    }
}

/// Ground-truth object as seen by the sensors: body centre and footprint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthObject {
    pub id: u64,
    pub class: VehicleClass,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub length: f64,
    pub width: f64,
}

/// Snapshot of every road user in `world`, in id order.
pub fn truth_objects(world: &World) -> Vec<TruthObject> {
    let w = world.map.lane_width;
    world
        .vehicles()
        .iter()
        .map(|v| TruthObject {
            id: v.state.id,
            class: v.state.class,
            x: v.state.center_s(),
            y: v.state.y(w),
            vx: v.state.v,
            vy: 0.0,
            length: v.state.length,
            width: v.state.width,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    pub station_id: u32,
    /// Per-frame index; carries no identity across frames.
    pub local_id: u16,
    pub class: VehicleClass,
    pub sensor: Sensor,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    /// Position covariance (xx, xy, yy).
    pub cov: [f64; 3],
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectListMessage {
    pub station_id: u32,
    pub frame_time: f64,
    pub objects: Vec<DetectedObject>,
    pub payload_bytes: usize,
}

impl ObjectListMessage {
    pub fn new(station_id: u32, frame_time: f64, objects: Vec<DetectedObject>) -> Self {
        let payload_bytes = HEADER_BYTES + OBJECT_BYTES * objects.len();
        Self {
            station_id,
            frame_time,
            objects,
            payload_bytes,
        }
    }
}

/// Bearing interval `[lo, hi]` of an object's footprint seen from `(sx, sy)`.
fn bearing_band(o: &TruthObject, sx: f64, sy: f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (dx, dy) in [(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)] {
        let cx = o.x + dx * o.length - sx;
        let cy = o.y + dy * o.width - sy;
        let ang = cy.atan2(cx);
        lo = lo.min(ang);
        hi = hi.max(ang);
    }
    if hi - lo > PI {
        // Footprint straddles the branch cut behind the station.
        let shifted = |a: f64| if a < 0.0 { a + 2.0 * PI } else { a };
        lo = f64::INFINITY;
        hi = f64::NEG_INFINITY;
        for (dx, dy) in [(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)] {
            let a = shifted((o.y + dy * o.width - sy).atan2(o.x + dx * o.length - sx));
            lo = lo.min(a);
            hi = hi.max(a);
        }
    }
    (lo, hi)
}

/// True if a nearer object covers at least half of `target`'s bearing band.
pub fn lidar_occluded(target: &TruthObject, others: &[TruthObject], sx: f64, sy: f64) -> bool {
    let range = (target.x - sx).hypot(target.y - sy);
    let (lo, hi) = bearing_band(target, sx, sy);
    let width = hi - lo;
    if width <= 0.0 {
        return false;
    }
    others.iter().filter(|o| o.id != target.id).any(|o| {
        if (o.x - sx).hypot(o.y - sy) >= range {
            return false;
        }
        let (olo, ohi) = bearing_band(o, sx, sy);
        let overlap = ohi.min(hi) - olo.max(lo);
        overlap >= 0.5 * width
    })
}

fn normal2<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    (StandardNormal.sample(rng), StandardNormal.sample(rng))
}

/// Isotropic detection.
fn lidar_detection<R: Rng + ?Sized>(
    st: &StationConfig,
    o: &TruthObject,
    rng: &mut R,
) -> DetectedObject {
    let (n1, n2) = normal2(rng);
    let (v1, v2) = normal2(rng);
    let s2 = st.sigma_lidar * st.sigma_lidar;
    DetectedObject {
        station_id: st.id,
        local_id: 0,
        class: o.class,
        sensor: Sensor::Lidar,
        x: o.x + st.sigma_lidar * n1,
        y: o.y + st.sigma_lidar * n2,
        vx: o.vx + st.sigma_velocity * v1,
        vy: o.vy + st.sigma_velocity * v2,
        cov: [s2, 0.0, s2],
        confidence: 0.95,
    }
}

/// Detection with range noise along the line of sight and lateral noise across it.
fn camera_detection<R: Rng + ?Sized>(
    st: &StationConfig,
    o: &TruthObject,
    rng: &mut R,
) -> DetectedObject {
    let (dx, dy) = (o.x - st.s, o.y - st.y);
    let r = dx.hypot(dy);
    let (ux, uy) = if r > 0.0 {
        (dx / r, dy / r)
    } else {
        (1.0, 0.0)
    };
    let (nx, ny) = (-uy, ux);
    let (e_r, e_l) = normal2(rng);
    let (v1, v2) = normal2(rng);
    let (sr, sl) = (st.sigma_cam_range, st.sigma_cam_lat);
    let ex = sr * e_r * ux + sl * e_l * nx;
    let ey = sr * e_r * uy + sl * e_l * ny;
    let (r2, l2) = (sr * sr, sl * sl);
    DetectedObject {
        station_id: st.id,
        local_id: 0,
        class: o.class,
        sensor: Sensor::Camera,
        x: o.x + ex,
        y: o.y + ey,
        vx: o.vx + st.sigma_velocity * v1,
        vy: o.vy + st.sigma_velocity * v2,
        cov: [
            r2 * ux * ux + l2 * nx * nx,
            r2 * ux * uy + l2 * nx * ny,
            r2 * uy * uy + l2 * ny * ny,
        ],
        confidence: 0.8,
    }
}

fn false_alarm<R: Rng + ?Sized>(
    st_id: u32,
    sensor: Sensor,
    x_range: (f64, f64),
    sigma: f64,
    rng: &mut R,
) -> DetectedObject {
    let x = rng.random_range(x_range.0..=x_range.1);
    let y = rng.random_range(-1.75..=5.25);
    let s2 = sigma * sigma;
    DetectedObject {
        station_id: st_id,
        local_id: 0,
        class: VehicleClass::Car,
        sensor,
        x,
        y,
        vx: rng.random_range(0.0..15.0),
        vy: 0.0,
        cov: [s2, 0.0, s2],
        confidence: 0.3,
    }
}

/// Shuffles local ids so they carry nothing across frames.
fn assign_local_ids<R: Rng + ?Sized>(objects: &mut [DetectedObject], rng: &mut R) {
    let mut ids: Vec<u16> = (0..objects.len() as u16).collect();
    ids.shuffle(rng);
    for (o, id) in objects.iter_mut().zip(ids) {
        o.local_id = id;
    }
}

/// One frame of LiDAR and camera detections for `station`.
pub fn sense_tick<R: Rng + ?Sized>(
    station: &StationConfig,
    truth: &[TruthObject],
    t: f64,
    rng: &mut R,
) -> ObjectListMessage {
    debug_assert!(
        ((t * station.frame_rate) - (t * station.frame_rate).round()).abs() < 1e-6,
        "frame time {t} off grid"
    );
    let mut objects = Vec::new();
    for o in truth {
        if (o.x - station.s).abs() <= station.lidar_radius
            && !lidar_occluded(o, truth, station.s, station.y)
        {
            let miss = rng.random::<f64>() < station.p_miss;
            if !miss {
                objects.push(lidar_detection(station, o, rng));
            }
        }
    }
    for o in truth {
        let (lo, hi) = station.camera_target;
        if o.x >= lo && o.x <= hi {
            let miss = rng.random::<f64>() < station.p_miss;
            if !miss {
                objects.push(camera_detection(station, o, rng));
            }
        }
    }
    if rng.random::<f64>() < station.p_false {
        let range = (
            station.s - station.lidar_radius,
            station.s + station.lidar_radius,
        );
        objects.push(false_alarm(
            station.id,
            Sensor::Lidar,
            range,
            station.sigma_lidar,
            rng,
        ));
    }
    assign_local_ids(&mut objects, rng);
    ObjectListMessage::new(station.id, t, objects)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrQuality {
    pub p_miss: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrStationConfig {
    pub id: u32,
    pub s: f64,
    pub y: f64,
    pub spacing: f64,
    pub range: f64,
    /// Electrical budget, metadata only.
    pub power_budget_w: f64,
    pub quality_by_condition: BTreeMap<Condition, IrQuality>,
    pub proc_latency: f64,
    pub p_false: f64,
    pub frame_rate: f64,
}

impl IrStationConfig {
    pub fn default_quality() -> BTreeMap<Condition, IrQuality> {
        BTreeMap::from([
            (
                Condition::Day,
                IrQuality {
                    p_miss: 0.02,
                    sigma: 0.15,
                },
            ),
            (
                Condition::Night,
                IrQuality {
                    p_miss: 0.02,
                    sigma: 0.15,
                },
            ),
            (
                Condition::Rain,
                IrQuality {
                    p_miss: 0.04,
                    sigma: 0.20,
                },
            ),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        if self.power_budget_w > 100.0 {
            return Err(Error::config(format!(
                "IR station {}: power budget {} W exceeds 100 W",
                self.id, self.power_budget_w
            )));
        }
        if !(self.range > 0.0) {
            return Err(Error::config(format!(
                "IR station {}: range must be positive",
                self.id
            )));
        }
        for q in self.quality_by_condition.values() {
            if !(0.0..1.0).contains(&q.p_miss) || q.sigma < 0.0 {
                return Err(Error::config(format!(
                    "IR station {}: invalid quality entry",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Whether the night miss rate is no worse than the daytime miss rate of
    /// the optical stations it complements.
    pub fn helps_at_night(&self, optical_day_p_miss: f64) -> bool {
        self.quality_by_condition
            .get(&Condition::Night)
            .is_some_and(|q| q.p_miss <= optical_day_p_miss)
    }
}

/// IR stations every `spacing` metres.
pub fn place_ir_stations(
    corridor: &CorridorMap,
    spacing: f64,
    first_id: u32,
    mount_y: f64,
) -> Result<Vec<IrStationConfig>> {
    if !(spacing > 0.0) {
        return Err(Error::Placement("IR spacing must be positive".into()));
    }
    let mut out = Vec::new();
    let mut k = 0u32;
    while k as f64 * spacing <= corridor.length + 1e-9 {
        let st = IrStationConfig {
            id: first_id + k,
            s: k as f64 * spacing,
            y: mount_y,
            spacing,
            range: 60.0,
            power_budget_w: 100.0,
            quality_by_condition: IrStationConfig::default_quality(),
            proc_latency: 0.05,
            p_false: 0.01,
            frame_rate: 10.0,
        };
        st.validate()?;
        out.push(st);
        k += 1;
    }
    Ok(out)
}

/// One frame from an infrared camera under `condition`.
pub fn ir_sense_tick<R: Rng + ?Sized>(
    station: &IrStationConfig,
    truth: &[TruthObject],
    condition: Condition,
    t: f64,
    rng: &mut R,
) -> ObjectListMessage {
    let q = station
        .quality_by_condition
        .get(&condition)
        .copied()
        .unwrap_or(IrQuality {
            p_miss: 0.0,
            sigma: 0.0,
        });
    let s2 = q.sigma * q.sigma;
    let mut objects = Vec::new();
    for o in truth {
        if (o.x - station.s).abs() > station.range {
            continue;
        }
        if rng.random::<f64>() < q.p_miss {
            continue;
        }
        let (n1, n2) = normal2(rng);
        objects.push(DetectedObject {
            station_id: station.id,
            local_id: 0,
            class: o.class,
            sensor: Sensor::Infrared,
            x: o.x + q.sigma * n1,
            y: o.y + q.sigma * n2,
            vx: o.vx,
            vy: o.vy,
            cov: [s2, 0.0, s2],
            confidence: 0.85,
        });
    }
    if rng.random::<f64>() < station.p_false {
        let range = (station.s - station.range, station.s + station.range);
        objects.push(false_alarm(
            station.id,
            Sensor::Infrared,
            range,
            q.sigma,
            rng,
        ));
    }
    assign_local_ids(&mut objects, rng);
    ObjectListMessage::new(station.id, t, objects)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRate {
    pub station_id: u32,
    pub raw_bytes_per_s: f64,
    pub objectlist_bytes_per_s: f64,
    pub reduction_factor: f64,
}

/// Object-list bytes per second for a constant object count.
pub fn nominal_objectlist_rate(objects_per_frame: usize, frame_rate: f64) -> f64 {
    (HEADER_BYTES + OBJECT_BYTES * objects_per_frame) as f64 * frame_rate
}

/// Per-station uplink rate over `duration` seconds of emitted messages.
pub fn data_rate_report(
    station_ids: &[u32],
    messages: &[ObjectListMessage],
    duration: f64,
) -> Vec<DataRate> {
    let mut bytes: BTreeMap<u32, usize> = station_ids.iter().map(|&id| (id, 0)).collect();
    for m in messages {
        *bytes.entry(m.station_id).or_default() += m.payload_bytes;
    }
    bytes
        .into_iter()
        .map(|(station_id, b)| {
            let rate = if duration > 0.0 {
                b as f64 / duration
            } else {
                0.0
            };
            DataRate {
                station_id,
                raw_bytes_per_s: RAW_BYTES_PER_S,
                objectlist_bytes_per_s: rate,
                reduction_factor: if rate > 0.0 {
                    RAW_BYTES_PER_S / rate
                } else {
                    f64::INFINITY
                },
            }
        })
        .collect()
}

/// Station layout CSV.
pub fn write_layout<W: std::io::Write>(stations: &[StationConfig], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "station_id",
        "s",
        "lidar_radius",
        "camera_target_start",
        "camera_target_end",
    ])?;
    for st in stations {
        w.write_record([
            st.id.to_string(),
            st.s.to_string(),
            st.lidar_radius.to_string(),
            st.camera_target.0.to_string(),
            st.camera_target.1.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
