//! Automated people mover operating a bus stop: landmark localization, the
//! pull-in stop trajectory, path tracking and yielding to crossing actors.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::stream;
use crate::world::{quintic_blend, BusStop, Landmark};
use crate::{grid_time, Error, Result, TICK_HZ};

/// Chi-square 95% quantile with two degrees of freedom.
pub const CHI2_2_95: f64 = 5.991;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub cov: Matrix3<f64>,
}

impl PoseEstimate {
    pub fn exact(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading,
            cov: Matrix3::zeros(),
        }
    }

    /// Radius of the 95% position confidence circle.
    pub fn radius95(&self) -> f64 {
        let p = self.cov.fixed_view::<2, 2>(0, 0).into_owned();
        let eig = p.symmetric_eigenvalues();
        (CHI2_2_95 * eig.max().max(0.0)).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkObs {
    pub id: u32,
    pub range: f64,
    /// Relative to the vehicle heading.
    pub bearing: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizationNoise {
    pub sigma_range: f64,
    pub sigma_bearing: f64,
    /// Landmarks farther away are not observed.
    pub max_range: f64,
}

impl Default for LocalizationNoise {
    fn default() -> Self {
        Self {
            sigma_range: 0.05,
            sigma_bearing: 0.002,
            max_range: 40.0,
        }
    }
}

fn wrap(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a < -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Range and bearing observations of every landmark within range.
pub fn observe_landmarks<R: Rng + ?Sized>(
    x: f64,
    y: f64,
    heading: f64,
    map: &[Landmark],
    noise: &LocalizationNoise,
    rng: &mut R,
) -> Vec<LandmarkObs> {
    let mut out = Vec::new();
    for lm in map {
        let (dx, dy) = (lm.x - x, lm.y - y);
        let r = dx.hypot(dy);
        if r > noise.max_range || r < 1e-6 {
            continue;
        }
        let nr: f64 = StandardNormal.sample(rng);
        let nb: f64 = StandardNormal.sample(rng);
        out.push(LandmarkObs {
            id: lm.id,
            range: r + noise.sigma_range * nr,
            bearing: wrap(dy.atan2(dx) - heading + noise.sigma_bearing * nb),
        });
    }
    out
}

/// Least-squares pose from range/bearing landmark observations.
///
/// A closed-form rigid alignment seeds a weighted Gauss-Newton refinement. The
/// covariance is the inverse information scaled up by the reduced chi-square
/// when the residuals exceed the stated noise.
pub fn localize(
    obs: &[LandmarkObs],
    map: &[Landmark],
    noise: &LocalizationNoise,
) -> Result<PoseEstimate> {
    let pairs: Vec<(&LandmarkObs, &Landmark)> = obs
        .iter()
        .filter_map(|o| map.iter().find(|l| l.id == o.id).map(|l| (o, l)))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::LocalizationDegraded {
            observed: pairs.len(),
        });
    }
    let n = pairs.len() as f64;
    let local: Vec<(f64, f64)> = pairs
        .iter()
        .map(|(o, _)| (o.range * o.bearing.cos(), o.range * o.bearing.sin()))
        .collect();
    let (pcx, pcy) = local
        .iter()
        .fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let (lcx, lcy) = pairs
        .iter()
        .fold((0.0, 0.0), |a, (_, l)| (a.0 + l.x / n, a.1 + l.y / n));
    let (mut dot, mut cross) = (0.0, 0.0);
    for (p, (_, l)) in local.iter().zip(&pairs) {
        let (px, py) = (p.0 - pcx, p.1 - pcy);
        let (qx, qy) = (l.x - lcx, l.y - lcy);
        dot += px * qx + py * qy;
        cross += px * qy - py * qx;
    }
    let th = cross.atan2(dot);
    let (c, s) = (th.cos(), th.sin());
    let mut pose = Vector3::new(lcx - (c * pcx - s * pcy), lcy - (s * pcx + c * pcy), th);

    let wr = 1.0 / noise.sigma_range.max(1e-6).powi(2);
    let wb = 1.0 / noise.sigma_bearing.max(1e-6).powi(2);
    let mut info = Matrix3::zeros();
    let mut chi2 = 0.0;
    for _ in 0..20 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        chi2 = 0.0;
        for (o, l) in &pairs {
            let (dx, dy) = (l.x - pose[0], l.y - pose[1]);
            let rho2 = dx * dx + dy * dy;
            let rho = rho2.sqrt();
            let res_r = rho - o.range;
            let res_b = wrap(dy.atan2(dx) - pose[2] - o.bearing);
            let jr = Vector3::new(-dx / rho, -dy / rho, 0.0);
            let jb = Vector3::new(dy / rho2, -dx / rho2, -1.0);
            jtj += jr * jr.transpose() * wr + jb * jb.transpose() * wb;
            jtr += jr * (res_r * wr) + jb * (res_b * wb);
            chi2 += res_r * res_r * wr + res_b * res_b * wb;
        }
        info = jtj;
        let Some(inv) = jtj.try_inverse() else { break };
        let step = inv * jtr;
        pose -= step;
        pose[2] = wrap(pose[2]);
        if step.norm() < 1e-12 {
            break;
        }
    }
    let dof = 2.0 * n - 3.0;
    let scale = if dof > 0.0 {
        (chi2 / dof).max(1.0)
    } else {
        1.0
    };
    let cov = info
        .try_inverse()
        .map(|m| m * scale)
        .unwrap_or_else(|| Matrix3::identity() * 1e6);
    let cov = 0.5 * (cov + cov.transpose());
    Ok(PoseEstimate {
        x: pose[0],
        y: pose[1],
        heading: pose[2],
        cov,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoverParams {
    pub gap_target: f64,
    pub gap_tol: f64,
    pub long_tol: f64,
    pub length: f64,
    pub width: f64,
    pub wheelbase: f64,
    /// Body overhang behind the rear axle.
    pub rear_overhang: f64,
    /// Comfort acceleration bound for planning, m/s².
    pub a_comf: f64,
    /// Braking used while holding for an actor, m/s².
    pub b_hold: f64,
    pub a_max: f64,
    pub b_max: f64,
    pub max_steer: f64,
    /// Distance over which the lateral pull-in happens, m.
    pub pull_in_length: f64,
    pub cruise_speed: f64,
    /// Yield horizon, s.
    pub t_h: f64,
    pub yield_margin: f64,
    /// Closed-loop lateral pole, rad/s.
    pub lateral_pole: f64,
    /// Integral pole as a fraction of the lateral pole. Zero disables integral action.
    pub integral_ratio: f64,
    /// Integral action only inside this error band, m.
    pub integral_band: f64,
    pub k_s: f64,
    pub k_v: f64,
    /// Weight of a fresh landmark fix against dead reckoning.
    pub fix_gain: f64,
}

impl Default for MoverParams {
    fn default() -> Self {
        Self {
            gap_target: 0.10,
            gap_tol: 0.05,
            long_tol: 0.15,
            length: 6.0,
            width: 2.1,
            wheelbase: 3.5,
            rear_overhang: 1.25,
            a_comf: 1.5,
            b_hold: 3.0,
            a_max: 1.5,
            b_max: 4.0,
            max_steer: 0.6,
            pull_in_length: 25.0,
            cruise_speed: 5.0,
            t_h: 4.0,
            yield_margin: 0.5,
            lateral_pole: 0.8,
            integral_ratio: 0.4,
            integral_band: 0.2,
            k_s: 0.25,
            k_v: 1.0,
            fix_gain: 0.3,
        }
    }
}

impl MoverParams {
    pub fn validate(&self) -> Result<()> {
        if self.gap_target < 0.0 {
            return Err(Error::config(format!(
                "gap_target must be non-negative, got {}",
                self.gap_target
            )));
        }
        if self.gap_tol < 0.0 || self.long_tol < 0.0 {
            return Err(Error::config("tolerances must be non-negative"));
        }
        if !(self.width > 0.0 && self.length > 0.0 && self.wheelbase > 0.0) {
            return Err(Error::config("mover dimensions must be positive"));
        }
        if !(self.a_comf > 0.0 && self.b_hold > 0.0 && self.t_h > 0.0) {
            return Err(Error::config("mover dynamics bounds must be positive"));
        }
        Ok(())
    }

    /// Body centre relative to the rear axle along the heading.
    pub fn center_offset(&self) -> f64 {
        self.length / 2.0 - self.rear_overhang
    }
}

/// Curb line of a bus stop in corridor coordinates; the curb lies on the
/// station side of lane 0.
pub fn curb_line(stop: &BusStop) -> f64 {
    -stop.lateral_offset
}

/// Body corners of a vehicle whose rear axle is at `(x, y)`.
pub fn body_corners(x: f64, y: f64, heading: f64, p: &MoverParams) -> [(f64, f64); 4] {
    let (c, s) = (heading.cos(), heading.sin());
    let back = -p.rear_overhang;
    let front = p.length - p.rear_overhang;
    let hw = p.width / 2.0;
    [(back, -hw), (front, -hw), (front, hw), (back, hw)]
        .map(|(lx, ly)| (x + c * lx - s * ly, y + s * lx + c * ly))
}

/// Smallest distance from the body to the curb line; negative once crossed.
pub fn lateral_gap(x: f64, y: f64, heading: f64, curb_y: f64, p: &MoverParams) -> f64 {
    body_corners(x, y, heading, p)
        .iter()
        .map(|c| c.1)
        .fold(f64::INFINITY, f64::min)
        - curb_y
}

/// Lateral reference as a function of longitudinal position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LateralPath {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl LateralPath {
    /// `(y, dy/dx, d²y/dx²)` at `x`.
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let len = self.x1 - self.x0;
        if len <= 1e-9 || x >= self.x1 {
            return (self.y1, 0.0, 0.0);
        }
        if x <= self.x0 {
            return (self.y0, 0.0, 0.0);
        }
        let u = (x - self.x0) / len;
        let dy = self.y1 - self.y0;
        let q1 = 30.0 * u * u * (1.0 - u) * (1.0 - u);
        let q2 = 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u);
        (
            self.y0 + dy * quintic_blend(u),
            dy * q1 / len,
            dy * q2 / (len * len),
        )
    }

    pub fn heading(&self, x: f64) -> f64 {
        self.eval(x).1.atan()
    }

    pub fn curvature(&self, x: f64) -> f64 {
        let (_, d1, d2) = self.eval(x);
        d2 / (1.0 + d1 * d1).powf(1.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LongProfile {
    /// Smooth braking from `v0` to rest over `distance`.
    Decel {
        x0: f64,
        distance: f64,
        v0: f64,
        duration: f64,
    },
    /// Rest-to-rest quintic move over `distance`.
    RestToRest {
        x0: f64,
        distance: f64,
        duration: f64,
    },
    /// Smooth acceleration from rest to `v1`, then constant speed.
    Launch { x0: f64, v1: f64, duration: f64 },
}

impl LongProfile {
    pub fn duration(&self) -> f64 {
        match *self {
            LongProfile::Decel { duration, .. }
            | LongProfile::RestToRest { duration, .. }
            | LongProfile::Launch { duration, .. } => duration,
        }
    }

    /// `(x, v, a)` at time `t` after the profile starts.
    pub fn sample(&self, t: f64) -> (f64, f64, f64) {
        match *self {
            LongProfile::Decel {
                x0,
                distance,
                v0,
                duration,
            } => {
                if t >= duration {
                    return (x0 + distance, 0.0, 0.0);
                }
                let u = (t / duration).max(0.0);
                let phi = u * u * (3.0 - 2.0 * u);
                let big_phi = u * u * u - u * u * u * u / 2.0;
                (
                    x0 + v0 * (t - duration * big_phi),
                    v0 * (1.0 - phi),
                    -v0 * 6.0 * u * (1.0 - u) / duration,
                )
            }
            LongProfile::RestToRest {
                x0,
                distance,
                duration,
            } => {
                if t >= duration || duration <= 0.0 {
                    return (x0 + distance, 0.0, 0.0);
                }
                let u = (t / duration).max(0.0);
                let v = distance * 30.0 * u * u * (1.0 - u) * (1.0 - u) / duration;
                let a = distance * 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u) / (duration * duration);
                (x0 + distance * quintic_blend(u), v, a)
            }
            LongProfile::Launch { x0, v1, duration } => {
                if t >= duration {
                    return (x0 + v1 * duration / 2.0 + v1 * (t - duration), v1, 0.0);
                }
                let u = (t / duration).max(0.0);
                let phi = u * u * (3.0 - 2.0 * u);
                let big_phi = u * u * u - u * u * u * u / 2.0;
                (
                    x0 + v1 * duration * big_phi,
                    v1 * phi,
                    v1 * 6.0 * u * (1.0 - u) / duration,
                )
            }
        }
    }

    /// Profile that brings the vehicle from `(x, v)` to rest at `stop_s`.
    pub fn to_stop(x: f64, v: f64, stop_s: f64, a_comf: f64) -> Self {
        let distance = (stop_s - x).max(0.0);
        if v >= 0.5 && distance > 0.0 {
            LongProfile::Decel {
                x0: x,
                distance,
                v0: v,
                duration: 2.0 * distance / v,
            }
        } else {
            // Peak of the quintic's second derivative is 10/sqrt(3).
            let duration = (10.0 / 3f64.sqrt() * distance / a_comf).sqrt();
            LongProfile::RestToRest {
                x0: x,
                distance,
                duration,
            }
        }
    }

    /// Largest deceleration magnitude along the profile.
    pub fn peak_decel(&self) -> f64 {
        match *self {
            LongProfile::Decel { v0, duration, .. } if duration > 0.0 => 1.5 * v0 / duration,
            LongProfile::RestToRest {
                distance, duration, ..
            } if duration > 0.0 => 10.0 / 3f64.sqrt() * distance / (duration * duration),
            _ => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub v: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Terminal {
    pub stop_s: f64,
    pub lateral_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopTrajectory {
    pub samples: Vec<TrajSample>,
    pub terminal: Terminal,
    pub path: LateralPath,
    pub profile: LongProfile,
    pub curb_y: f64,
}

impl StopTrajectory {
    /// Smallest curb gap over the planned samples, using the path heading.
    pub fn min_gap(&self, p: &MoverParams) -> f64 {
        self.samples
            .iter()
            .map(|s| lateral_gap(s.x, s.y, self.path.heading(s.x), self.curb_y, p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_curvature(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| self.path.curvature(s.x).abs())
            .fold(0.0, f64::max)
    }
}

fn path_min_gap(path: &LateralPath, curb_y: f64, p: &MoverParams) -> f64 {
    (0..=400)
        .map(|k| path.x0 + (path.x1 - path.x0) * k as f64 / 400.0)
        .map(|x| lateral_gap(x, path.eval(x).0, path.heading(x), curb_y, p))
        .fold(f64::INFINITY, f64::min)
}

/// Plans the pull-in to `stop` from `pose` at speed `v0`.
///
/// The lateral path ends with the body `gap_target` from the curb; the speed
/// profile brings the rear axle to rest at `stop.s`.
pub fn plan_bus_stop(
    pose: &PoseEstimate,
    v0: f64,
    stop: &BusStop,
    p: &MoverParams,
) -> Result<StopTrajectory> {
    p.validate()?;
    let curb_y = curb_line(stop);
    let y_target = curb_y + p.width / 2.0 + p.gap_target;
    let distance = stop.s - pose.x;
    if distance < -1e-9 {
        return Err(Error::config(format!(
            "bus stop at {} lies behind the mover at {}",
            stop.s, pose.x
        )));
    }
    let terminal = Terminal {
        stop_s: stop.s,
        lateral_gap: y_target - p.width / 2.0 - curb_y,
    };
    // Lengthen the pull-in until the front corner keeps half the target gap.
    let mut path = LateralPath {
        x0: (stop.s - p.pull_in_length).max(pose.x),
        x1: stop.s,
        y0: pose.y,
        y1: y_target,
    };
    while path.x0 > pose.x && path_min_gap(&path, curb_y, p) < p.gap_target / 2.0 {
        path.x0 = (path.x0 - 5.0).max(pose.x);
    }
    if path_min_gap(&path, curb_y, p) < 0.0 {
        return Err(Error::config(format!(
            "no curb-safe pull-in within {distance:.1} m of the stop"
        )));
    }
    if distance.abs() < 1e-6 && (pose.y - y_target).abs() < 1e-6 && v0.abs() < 1e-6 {
        let profile = LongProfile::RestToRest {
            x0: pose.x,
            distance: 0.0,
            duration: 0.0,
        };
        let samples = vec![TrajSample {
            t: 0.0,
            x: pose.x,
            y: pose.y,
            v: 0.0,
        }];
        return Ok(StopTrajectory {
            samples,
            terminal,
            path,
            profile,
            curb_y,
        });
    }
    let profile = LongProfile::to_stop(pose.x, v0, stop.s, p.a_comf);
    let dt = 1.0 / TICK_HZ;
    let n = (profile.duration() * TICK_HZ).ceil() as u64;
    let samples = (0..=n)
        .map(|k| {
            let t = grid_time(k, TICK_HZ).min(profile.duration());
            let (x, v, _) = profile.sample(t);
            TrajSample {
                t: k as f64 * dt,
                x,
                y: path.eval(x).0,
                v,
            }
        })
        .collect();
    Ok(StopTrajectory {
        samples,
        terminal,
        path,
        profile,
        curb_y,
    })
}

/// True vehicle state of the mover; the pose refers to the rear axle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoverState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub steer: f64,
    pub accel: f64,
}

impl MoverState {
    /// Kinematic bicycle step. `slip` is a side-slip angle standing in for
    /// side wind and cross slope.
    pub fn step(&mut self, cmd: Command, slip: f64, wheelbase: f64, dt: f64) {
        const SUB: u32 = 10;
        let h = dt / SUB as f64;
        for _ in 0..SUB {
            let v = self.v;
            self.x += v * (self.heading + slip).cos() * h;
            self.y += v * (self.heading + slip).sin() * h;
            self.heading += v * cmd.steer.tan() / wheelbase * h;
            self.v = (v + cmd.accel * h).max(0.0);
        }
    }

    pub fn center(&self, p: &MoverParams) -> (f64, f64) {
        let off = p.center_offset();
        (
            self.x + off * self.heading.cos(),
            self.y + off * self.heading.sin(),
        )
    }
}

/// Feed-forward plus closed-loop tracker.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tracker {
    pub integral: f64,
}

impl Tracker {
    /// Steering and acceleration for the estimated state against the lateral
    /// path and the longitudinal reference `(x_ref, v_ref, a_ref)`.
    pub fn track_step(
        &mut self,
        est: &MoverState,
        path: &LateralPath,
        long_ref: (f64, f64, f64),
        p: &MoverParams,
        dt: f64,
    ) -> Command {
        let (y_ref, _, _) = path.eval(est.x);
        // Error of the right-hand body edge, not of the reference point.
        let edge = body_corners(0.0, 0.0, est.heading, p)
            .iter()
            .map(|c| c.1)
            .fold(f64::INFINITY, f64::min)
            + p.width / 2.0;
        let e = est.y + edge - y_ref;
        let e_psi = wrap(est.heading - path.heading(est.x));
        let v = est.v.max(1.0);
        let (pole, c) = (p.lateral_pole, p.lateral_pole * p.integral_ratio);
        let l = p.wheelbase;
        let k_y = (pole * pole + 2.0 * pole * c) * l / (v * v);
        let k_psi = (2.0 * pole + c) * l / v;
        let k_i = pole * pole * c * l / (v * v);
        if c > 0.0 && est.v > 0.5 && e.abs() < p.integral_band {
            self.integral += e * dt;
        }
        let ff = (l * path.curvature(est.x)).atan();
        let steer =
            (ff - k_y * e - k_psi * e_psi - k_i * self.integral).clamp(-p.max_steer, p.max_steer);
        let (x_ref, v_ref, a_ref) = long_ref;
        let accel =
            (a_ref + p.k_v * (v_ref - est.v) + p.k_s * (x_ref - est.x)).clamp(-p.b_max, p.a_max);
        Command { steer, accel }
    }
}

/// A scripted pedestrian or cyclist moving at constant velocity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingActor {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub radius: f64,
    /// Time the actor enters the scene at `(x, y)`.
    pub appear: f64,
    /// Time the actor leaves.
    pub vanish: f64,
}

impl CrossingActor {
    pub fn position(&self, t: f64) -> Option<(f64, f64)> {
        (t >= self.appear && t <= self.vanish).then(|| {
            (
                self.x + self.vx * (t - self.appear),
                self.y + self.vy * (t - self.appear),
            )
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YieldDecision {
    Proceed,
    Hold,
}

/// Does segment `a -> b` meet the rectangle centred at `c` with the given half
/// extents along and across `heading`?
fn segment_hits_box(
    a: (f64, f64),
    b: (f64, f64),
    c: (f64, f64),
    heading: f64,
    half_len: f64,
    half_w: f64,
) -> bool {
    let (cs, sn) = (heading.cos(), heading.sin());
    let to_local = |p: (f64, f64)| {
        let (dx, dy) = (p.0 - c.0, p.1 - c.1);
        (cs * dx + sn * dy, -sn * dx + cs * dy)
    };
    let (p0, p1) = (to_local(a), to_local(b));
    let d = (p1.0 - p0.0, p1.1 - p0.1);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    // Liang-Barsky clip of p + t*dp against [-h, h] on both axes.
    for (p, dp, h) in [(p0.0, d.0, half_len), (p0.1, d.1, half_w)] {
        if dp == 0.0 {
            if p.abs() > h {
                return false;
            }
            continue;
        }
        let (ta, tb) = ((-h - p) / dp, (h - p) / dp);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    t0 <= t1
}

/// Holds iff an actor's constant-velocity path over the horizon meets the area
/// the mover sweeps while following `plan` over the same horizon.
///
/// `plan` samples are relative to `now`; the current body is always part of
/// the swept area.
pub fn yield_check(
    pose: &MoverState,
    plan: &[TrajSample],
    plan_path: &LateralPath,
    actors: &[CrossingActor],
    now: f64,
    p: &MoverParams,
) -> YieldDecision {
    let off = p.center_offset();
    let mut boxes: Vec<((f64, f64), f64)> = vec![(pose.center(p), pose.heading)];
    for s in plan.iter().filter(|s| s.t <= p.t_h + 1e-9) {
        let h = plan_path.heading(s.x);
        boxes.push(((s.x + off * h.cos(), s.y + off * h.sin()), h));
    }
    for a in actors {
        let Some(start) = a.position(now) else {
            continue;
        };
        let end_t = (now + p.t_h).min(a.vanish);
        let end = (
            start.0 + a.vx * (end_t - now),
            start.1 + a.vy * (end_t - now),
        );
        let inflate = p.yield_margin + a.radius;
        for &(c, h) in &boxes {
            if segment_hits_box(
                start,
                end,
                c,
                h,
                p.length / 2.0 + inflate,
                p.width / 2.0 + inflate,
            ) {
                return YieldDecision::Hold;
            }
        }
    }
    YieldDecision::Proceed
}

/// Distance between the body and a disc; negative when they overlap.
pub fn body_clearance(state: &MoverState, p: &MoverParams, point: (f64, f64), radius: f64) -> f64 {
    let c = state.center(p);
    let (cs, sn) = (state.heading.cos(), state.heading.sin());
    let (dx, dy) = (point.0 - c.0, point.1 - c.1);
    let (lx, ly) = (cs * dx + sn * dy, -sn * dx + cs * dy);
    let ox = (lx.abs() - p.length / 2.0).max(0.0);
    let oy = (ly.abs() - p.width / 2.0).max(0.0);
    let outside = ox.hypot(oy);
    let inside = if ox == 0.0 && oy == 0.0 {
        -(p.length / 2.0 - lx.abs()).min(p.width / 2.0 - ly.abs())
    } else {
        0.0
    };
    outside + inside - radius
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoverPhase {
    Approach,
    PullIn,
    Dwell,
    Depart,
}

impl MoverPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            MoverPhase::Approach => "approach",
            MoverPhase::PullIn => "pull_in",
            MoverPhase::Dwell => "dwell",
            MoverPhase::Depart => "depart",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoverTelemetry {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
    pub lateral_gap: f64,
    pub phase: MoverPhase,
    pub hold_flag: bool,
}

/// Logged pose estimate next to the truth, for validation against the twin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseLogRow {
    pub t: f64,
    /// Estimated body centre.
    pub x: f64,
    pub y: f64,
    pub radius95: f64,
    pub truth: MoverState,
}

pub fn write_mover_telemetry<W: std::io::Write>(rows: &[MoverTelemetry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "t",
        "x",
        "y",
        "heading",
        "v",
        "lateral_gap",
        "phase",
        "hold_flag",
    ])?;
    for r in rows {
        w.write_record([
            format!("{:.3}", r.t),
            format!("{:.4}", r.x),
            format!("{:.4}", r.y),
            format!("{:.5}", r.heading),
            format!("{:.4}", r.v),
            format!("{:.4}", r.lateral_gap),
            r.phase.as_str().to_string(),
            (r.hold_flag as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BusStopScenario {
    pub stop: BusStop,
    /// Start distance before the stop, m.
    pub approach: f64,
    pub v0: f64,
    pub landmarks: Vec<Landmark>,
    pub actors: Vec<CrossingActor>,
    pub dwell: f64,
    /// Distance driven after departing, m.
    pub depart_distance: f64,
    pub noise: LocalizationNoise,
    /// Side-slip drawn uniformly from `[-slip_range, slip_range]` per run, rad.
    pub slip_range: f64,
    pub max_time: f64,
}

impl Default for BusStopScenario {
    fn default() -> Self {
        let stop = BusStop {
            s: 100.0,
            lateral_offset: 2.5,
        };
        Self {
            landmarks: default_landmarks(stop.s - 80.0, stop.s + 60.0),
            stop,
            approach: 60.0,
            v0: 5.0,
            actors: Vec::new(),
            dwell: 5.0,
            depart_distance: 30.0,
            noise: LocalizationNoise::default(),
            slip_range: 0.01,
            max_time: 120.0,
        }
    }
}

/// Poles every 10 m on both sides of the road between `from` and `to`.
pub fn default_landmarks(from: f64, to: f64) -> Vec<Landmark> {
    let mut out = Vec::new();
    let mut x = from;
    let mut id = 1;
    while x <= to + 1e-9 {
        out.push(Landmark { id, x, y: -6.0 });
        out.push(Landmark {
            id: id + 1,
            x: x + 5.0,
            y: 8.0,
        });
        id += 2;
        x += 10.0;
    }
    out
}

/// A pedestrian stepping off the curb at `cross_x` so that it would meet a
/// non-yielding mover.
pub fn crossing_pedestrian(
    scn: &BusStopScenario,
    id: u32,
    cross_x: f64,
    appear: f64,
) -> CrossingActor {
    let speed = 1.4;
    let y0 = curb_line(&scn.stop) - 2.0;
    CrossingActor {
        id,
        x: cross_x,
        y: y0,
        vx: 0.0,
        vy: speed,
        radius: 0.3,
        appear,
        vanish: appear + 12.0 / speed,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusStopOutcome {
    pub completed: bool,
    /// Rear axle at rest minus the stop position.
    pub stop_error: f64,
    pub final_gap: f64,
    pub min_gap: f64,
    pub curb_crossings: u64,
    pub hold_events: u64,
    pub min_actor_clearance: Option<f64>,
    pub contacts: u64,
    pub degraded_ticks: u64,
    pub slip: f64,
    pub telemetry: Vec<MoverTelemetry>,
    pub pose_log: Vec<PoseLogRow>,
}

/// Closed-loop bus-stop maneuver with noisy localization.
pub fn run_bus_stop(scn: &BusStopScenario, p: &MoverParams, seed: u64) -> Result<BusStopOutcome> {
    p.validate()?;
    let mut rng = stream(seed, "mover/landmarks");
    let slip = if scn.slip_range > 0.0 {
        stream(seed, "mover/slip").random_range(-scn.slip_range..=scn.slip_range)
    } else {
        0.0
    };
    let dt = 1.0 / TICK_HZ;
    let curb_y = curb_line(&scn.stop);
    let mut truth = MoverState {
        x: scn.stop.s - scn.approach,
        y: 0.0,
        heading: 0.0,
        v: scn.v0,
    };
    let mut est = truth;
    let mut est_cov = Matrix3::zeros();
    let mut tracker = Tracker::default();
    let plan = plan_bus_stop(
        &PoseEstimate::exact(truth.x, truth.y, 0.0),
        truth.v,
        &scn.stop,
        p,
    )?;
    let mut path = plan.path;
    let mut profile = plan.profile;
    let mut profile_start = 0.0;
    let mut phase = MoverPhase::Approach;
    let mut holding = false;
    let mut dwell_until = f64::INFINITY;
    let mut out = BusStopOutcome {
        completed: false,
        stop_error: f64::NAN,
        final_gap: f64::NAN,
        min_gap: f64::INFINITY,
        curb_crossings: 0,
        hold_events: 0,
        min_actor_clearance: None,
        contacts: 0,
        degraded_ticks: 0,
        slip,
        telemetry: Vec::new(),
        pose_log: Vec::new(),
    };
    let max_ticks = (scn.max_time * TICK_HZ).round() as u64;
    for k in 0..=max_ticks {
        let now = grid_time(k, TICK_HZ);

        // Localize and blend with dead reckoning.
        let obs = observe_landmarks(
            truth.x,
            truth.y,
            truth.heading,
            &scn.landmarks,
            &scn.noise,
            &mut rng,
        );
        match localize(&obs, &scn.landmarks, &scn.noise) {
            Ok(fix) => {
                let g = p.fix_gain;
                est.x += g * (fix.x - est.x);
                est.y += g * (fix.y - est.y);
                est.heading += g * wrap(fix.heading - est.heading);
                est_cov = fix.cov * (g / (2.0 - g));
            }
            Err(Error::LocalizationDegraded { .. }) => out.degraded_ticks += 1,
            Err(e) => return Err(e),
        }
        est.v = truth.v;
        let est_pose = PoseEstimate {
            x: est.x,
            y: est.y,
            heading: est.heading,
            cov: est_cov,
        };
        let (cx, cy) = est.center(p);
        out.pose_log.push(PoseLogRow {
            t: now,
            x: cx,
            y: cy,
            radius95: est_pose.radius95(),
            truth,
        });

        let gap = lateral_gap(truth.x, truth.y, truth.heading, curb_y, p);
        if gap < 0.0 {
            out.curb_crossings += 1;
        }
        for a in &scn.actors {
            if let Some(pos) = a.position(now) {
                let c = body_clearance(&truth, p, pos, a.radius);
                out.min_actor_clearance =
                    Some(out.min_actor_clearance.map_or(c, |m: f64| m.min(c)));
                if c <= 0.0 {
                    out.contacts += 1;
                }
            }
        }

        // Phase transitions.
        let moving_phase = matches!(
            phase,
            MoverPhase::Approach | MoverPhase::PullIn | MoverPhase::Depart
        );
        if matches!(phase, MoverPhase::Approach) && est.x >= path.x0 {
            phase = MoverPhase::PullIn;
        }
        let t_rel = now - profile_start;
        if matches!(phase, MoverPhase::Approach | MoverPhase::PullIn)
            && !holding
            && t_rel >= profile.duration()
            && truth.v < 0.05
        {
            truth.v = 0.0;
            phase = MoverPhase::Dwell;
            out.stop_error = truth.x - scn.stop.s;
            out.final_gap = gap;
            dwell_until = now + scn.dwell;
        }
        if matches!(phase, MoverPhase::Dwell) && now >= dwell_until - 1e-9 {
            phase = MoverPhase::Depart;
            path = LateralPath {
                x0: est.x + 5.0,
                x1: est.x + 5.0 + p.pull_in_length,
                y0: path.y1,
                y1: 0.0,
            };
            profile = LongProfile::Launch {
                x0: est.x,
                v1: p.cruise_speed,
                duration: 1.5 * p.cruise_speed / p.a_comf,
            };
            profile_start = now;
            tracker.integral = 0.0;
        }
        if matches!(phase, MoverPhase::Depart) && truth.x >= scn.stop.s + scn.depart_distance {
            out.completed = true;
            out.min_gap = out.min_gap.min(gap);
            out.telemetry.push(MoverTelemetry {
                t: now,
                x: truth.x,
                y: truth.y,
                heading: truth.heading,
                v: truth.v,
                lateral_gap: gap,
                phase,
                hold_flag: holding,
            });
            break;
        }

        // Yield check against the plan ahead.
        if moving_phase && !scn.actors.is_empty() {
            let ahead: Vec<TrajSample> = if holding {
                let resume = LongProfile::to_stop(est.x, est.v, target_end(&phase, scn), p.a_comf);
                preview(&resume, &path, p.cruise_speed, &phase)
            } else {
                let t0 = now - profile_start;
                preview_from(&profile, &path, t0)
            };
            let decision = yield_check(&est, &ahead, &path, &scn.actors, now, p);
            match (holding, decision) {
                (false, YieldDecision::Hold) => {
                    holding = true;
                    out.hold_events += 1;
                }
                (true, YieldDecision::Proceed) => {
                    holding = false;
                    profile = match phase {
                        MoverPhase::Depart => LongProfile::Launch {
                            x0: est.x,
                            v1: p.cruise_speed,
                            duration: 1.5 * p.cruise_speed / p.a_comf,
                        },
                        _ => LongProfile::to_stop(est.x, est.v, scn.stop.s, p.a_comf),
                    };
                    profile_start = now;
                }
                _ => {}
            }
        }

        out.min_gap = out.min_gap.min(gap);
        out.telemetry.push(MoverTelemetry {
            t: now,
            x: truth.x,
            y: truth.y,
            heading: truth.heading,
            v: truth.v,
            lateral_gap: gap,
            phase,
            hold_flag: holding,
        });

        let long_ref = profile.sample(now - profile_start);
        let mut cmd = if matches!(phase, MoverPhase::Dwell) {
            Command {
                steer: 0.0,
                accel: -p.b_max,
            }
        } else {
            tracker.track_step(&est, &path, long_ref, p, dt)
        };
        if holding {
            cmd.accel = -p.b_hold;
        }
        if out.degraded_ticks > 0 && obs.len() < 2 {
            cmd.accel = cmd.accel.min(-p.a_comf);
        }
        truth.step(cmd, slip, p.wheelbase, dt);
        est.step(cmd, 0.0, p.wheelbase, dt);
    }
    Ok(out)
}

fn target_end(phase: &MoverPhase, scn: &BusStopScenario) -> f64 {
    match phase {
        MoverPhase::Depart => scn.stop.s + scn.depart_distance,
        _ => scn.stop.s,
    }
}

fn preview(
    profile: &LongProfile,
    path: &LateralPath,
    cruise: f64,
    phase: &MoverPhase,
) -> Vec<TrajSample> {
    let profile = match (phase, profile) {
        (
            MoverPhase::Depart,
            LongProfile::RestToRest { x0, .. } | LongProfile::Decel { x0, .. },
        ) => LongProfile::Launch {
            x0: *x0,
            v1: cruise,
            duration: 1.5 * cruise / 1.5,
        },
        _ => *profile,
    };
    preview_from(&profile, path, 0.0)
}

fn preview_from(profile: &LongProfile, path: &LateralPath, t0: f64) -> Vec<TrajSample> {
    (0..=40)
        .map(|k| {
            let t = k as f64 / TICK_HZ;
            let (x, v, _) = profile.sample(t0 + t);
            TrajSample {
                t,
                x,
                y: path.eval(x).0,
                v,
            }
        })
        .collect()
}

/// Fraction of common frames where two position streams agree within the sum
/// of their 95% radii.
pub fn parity_fraction(a: &[(f64, f64, f64, f64)], b: &[(f64, f64, f64, f64)]) -> Option<f64> {
    let key = |t: f64| (t * 1000.0).round() as i64;
    let index: std::collections::BTreeMap<i64, (f64, f64, f64)> =
        b.iter().map(|r| (key(r.0), (r.1, r.2, r.3))).collect();
    let mut n = 0u64;
    let mut ok = 0u64;
    for r in a {
        if let Some(&(x, y, rb)) = index.get(&key(r.0)) {
            n += 1;
            if (r.1 - x).hypot(r.2 - y) < r.3 + rb {
                ok += 1;
            }
        }
    }
    (n > 0).then(|| ok as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(id: u32, x: f64, y: f64) -> Landmark {
        Landmark { id, x, y }
    }

    #[test]
    fn exact_pose_from_three_landmarks() {
        let map = vec![lm(1, 10.0, 5.0), lm(2, 20.0, -6.0), lm(3, -3.0, 7.0)];
        let noise = LocalizationNoise {
            sigma_range: 0.0,
            sigma_bearing: 0.0,
            max_range: 100.0,
        };
        let mut rng = stream(1, "t");
        let obs = observe_landmarks(2.0, 1.0, 0.3, &map, &noise, &mut rng);
        let pose = localize(&obs, &map, &noise).unwrap();
        assert!(
            (pose.x - 2.0).abs() < 1e-9
                && (pose.y - 1.0).abs() < 1e-9
                && (pose.heading - 0.3).abs() < 1e-9
        );
    }

    #[test]
    fn one_landmark_degrades() {
        let map = vec![lm(1, 10.0, 5.0)];
        let obs = vec![LandmarkObs {
            id: 1,
            range: 11.0,
            bearing: 0.4,
        }];
        assert!(matches!(
            localize(&obs, &map, &LocalizationNoise::default()),
            Err(Error::LocalizationDegraded { observed: 1 })
        ));
    }

    #[test]
    fn plan_terminal_matches_targets() {
        let p = MoverParams::default();
        let stop = BusStop {
            s: 100.0,
            lateral_offset: 2.5,
        };
        let plan = plan_bus_stop(&PoseEstimate::exact(70.0, 0.0, 0.0), 5.0, &stop, &p).unwrap();
        let last = plan.samples.last().unwrap();
        assert!((last.x - 100.0).abs() <= 0.15);
        assert_eq!(last.v, 0.0);
        let gap = lateral_gap(last.x, last.y, 0.0, plan.curb_y, &p);
        assert!((gap - 0.10).abs() <= 0.05);
        assert!(
            plan.min_gap(&p) >= 0.0,
            "{} {:?}",
            plan.min_gap(&p),
            plan.samples
                .iter()
                .map(|s| (
                    s.x,
                    lateral_gap(s.x, s.y, plan.path.heading(s.x), plan.curb_y, &p)
                ))
                .filter(|g| g.1 < 0.1)
                .collect::<Vec<_>>()
        );
        assert!(plan.samples.iter().all(|s| s.v >= 0.0));
        assert!(plan.profile.peak_decel() <= p.a_comf);
    }

    #[test]
    fn plan_trivial_and_invalid() {
        let p = MoverParams::default();
        let stop = BusStop {
            s: 100.0,
            lateral_offset: 2.5,
        };
        let y = curb_line(&stop) + p.width / 2.0 + p.gap_target;
        let plan = plan_bus_stop(&PoseEstimate::exact(100.0, y, 0.0), 0.0, &stop, &p).unwrap();
        assert_eq!(plan.samples.len(), 1);
        let bad = MoverParams {
            gap_target: -0.1,
            ..p
        };
        assert!(matches!(
            plan_bus_stop(&PoseEstimate::exact(70.0, 0.0, 0.0), 5.0, &stop, &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn profiles_are_continuous() {
        for prof in [
            LongProfile::to_stop(0.0, 5.0, 30.0, 1.5),
            LongProfile::to_stop(0.0, 0.0, 10.0, 1.5),
            LongProfile::Launch {
                x0: 0.0,
                v1: 5.0,
                duration: 5.0,
            },
        ] {
            let n = 1000;
            let tt = prof.duration() * 1.2;
            for k in 0..n {
                let (t0, t1) = (tt * k as f64 / n as f64, tt * (k + 1) as f64 / n as f64);
                let (a, b) = (prof.sample(t0), prof.sample(t1));
                let mid_v = prof.sample(0.5 * (t0 + t1)).1;
                assert!(
                    (b.0 - a.0 - mid_v * (t1 - t0)).abs() < 1e-4,
                    "{prof:?} at {t0}"
                );
            }
        }
    }

    #[test]
    fn yield_examples() {
        let p = MoverParams::default();
        let path = LateralPath {
            x0: 0.0,
            x1: 0.0,
            y0: 0.0,
            y1: 0.0,
        };
        let pose = MoverState {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            v: 5.0,
        };
        let plan: Vec<TrajSample> = (0..=40)
            .map(|k| TrajSample {
                t: k as f64 * 0.1,
                x: 5.0 * k as f64 * 0.1,
                y: 0.0,
                v: 5.0,
            })
            .collect();
        assert_eq!(
            yield_check(&pose, &plan, &path, &[], 0.0, &p),
            YieldDecision::Proceed
        );
        // Pedestrian stepping into the lane 1 m ahead of the front within 2 s.
        let front = p.length - p.rear_overhang;
        let ped = CrossingActor {
            id: 1,
            x: front + 1.0,
            y: -3.0,
            vx: 0.0,
            vy: 1.4,
            radius: 0.3,
            appear: 0.0,
            vanish: 100.0,
        };
        assert_eq!(
            yield_check(&pose, &plan, &path, &[ped], 0.0, &p),
            YieldDecision::Hold
        );
        let away = CrossingActor {
            vy: -1.4,
            y: -4.0,
            ..ped
        };
        assert_eq!(
            yield_check(&pose, &plan, &path, &[away], 0.0, &p),
            YieldDecision::Proceed
        );
    }

    #[test]
    fn clearance_signs() {
        let p = MoverParams::default();
        let st = MoverState {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            v: 0.0,
        };
        let c = st.center(&p);
        assert!(body_clearance(&st, &p, c, 0.3) < 0.0);
        let side = (c.0, c.1 + p.width / 2.0 + 1.0);
        assert!((body_clearance(&st, &p, side, 0.3) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn nominal_run_stops_at_the_curb() {
        let out = run_bus_stop(&BusStopScenario::default(), &MoverParams::default(), 3).unwrap();
        assert!(out.completed);
        assert!(out.stop_error.abs() <= 0.15, "{}", out.stop_error);
        assert!((0.05..=0.15).contains(&out.final_gap), "{}", out.final_gap);
        assert_eq!(out.curb_crossings, 0);
    }
}
