use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use corridor_core::fusion::{associate, mahalanobis2, unmatched_cost, FusionConfig, Track};
use corridor_core::harness::{
    calibration_context, calibration_inputs, lane_change_scenario, report, run_experiment,
    run_to_dir, ExperimentConfig, InitialVehicle, MetricsReport, Preset,
};
use corridor_core::mover::{crossing_pedestrian, run_bus_stop, BusStopScenario, MoverParams};
use corridor_core::netlink::{
    in_itsg5_range, route_downlink, ChannelKind, Destination, DownlinkMode, Endpoint, NetConfig,
    Payload,
};
use corridor_core::rng::stream;
use corridor_core::stations::{
    coverage_check, data_rate_report, place_stations, DetectedObject, ObjectListMessage, Sensor,
    SensorDefaults,
};
use corridor_core::store::{calibrate_lane_change, CalibrationGrid};
use corridor_core::world::{build_corridor, VehicleClass};
use rand::Rng;
use rayon::prelude::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn percentile(mut v: Vec<f64>, p: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

fn urban_run(seed: u64, penetration: f64, shocks: usize) -> MetricsReport {
    let mut cfg = ExperimentConfig::preset(Preset::Urban);
    cfg.seed = seed;
    cfg.penetration = Some(penetration);
    cfg.sensing = false;
    cfg.scenario.shocks.count = shocks;
    let data = run_experiment(&cfg).expect("run");
    report(&data).expect("report")
}

fn c01_coverage() -> Outcome {
    let mut cfg = ExperimentConfig::preset(Preset::Urban);
    cfg.scenario.corridor.signals.clear();
    let map = build_corridor(&cfg.scenario.corridor).unwrap();
    let mut detail = Vec::new();
    let mut pass = map.length == 1000.0;
    for spacing in [60.0, 80.0, 100.0] {
        let st = place_stations(&map, spacing, &SensorDefaults::default()).unwrap();
        pass &= st.iter().all(|s| s.lidar_radius == 50.0);
        let cov = coverage_check(&st, map.length);
        pass &= cov.covered && cov.gaps.is_empty();
        detail.push(format!(
            "{spacing} m: {} stations, {} gaps",
            st.len(),
            cov.gaps.len()
        ));
    }
    outcome(pass, detail.join("; "))
}

fn c02_noiseless() -> Outcome {
    let mut cfg = ExperimentConfig::preset(Preset::Urban);
    cfg.duration = 60.0;
    cfg.penetration = Some(0.0);
    cfg.scenario.sensors = SensorDefaults::noiseless();
    cfg.scenario.net = NetConfig::ideal();
    cfg.scenario.demand.rate = 0.0;
    cfg.scenario.initial_vehicles = (0..20)
        .map(|i| InitialVehicle {
            class: VehicleClass::Car,
            s: 20.0 + 45.0 * i as f64,
            lane: 0,
            v: 10.0,
            equipped: false,
        })
        .collect();
    let start = Instant::now();
    let data = run_experiment(&cfg).unwrap();
    let rep = report(&data).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let acc = rep.accuracy.unwrap();
    outcome(
        acc.rmse == 0.0
            && acc.matched_fraction == 1.0
            && acc.id_switches == 0
            && acc.eligible > 0
            && rep.vehicles_seen == 20
            && elapsed < 10.0,
        format!(
            "rmse {} matched fraction {} over {} eligible, id switches {}, {elapsed:.2} s",
            acc.rmse, acc.matched_fraction, acc.eligible, acc.id_switches
        ),
    )
}

fn c03_accuracy() -> Outcome {
    let cfg = ExperimentConfig::preset(Preset::Urban);
    let start = Instant::now();
    let data = run_experiment(&cfg).unwrap();
    let rep = report(&data).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let acc = rep.accuracy.unwrap();
    let stations = rep.data_rates.len();
    let (single, multi) = (acc.p95_single.unwrap(), acc.p95_multi.unwrap());
    outcome(
        acc.p95_error < 0.10 && multi < single && elapsed < 60.0,
        format!(
            "p95 {:.4} m (single {single:.4}, multi {multi:.4}), {stations} stations, \
             {} vehicles, id switches {}, {elapsed:.1} s",
            acc.p95_error, rep.vehicles_seen, acc.id_switches
        ),
    )
}

fn c04_reduction() -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for p in Preset::ALL {
        let mut cfg = ExperimentConfig::preset(p);
        cfg.duration = 120.0;
        let data = run_experiment(&cfg).unwrap();
        let ids: Vec<u32> = {
            let mut v: Vec<u32> = data.uplink.iter().map(|u| u.station_id).collect();
            v.sort();
            v.dedup();
            v
        };
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
        let rates = data_rate_report(&ids, &msgs, cfg.duration);
        let min = rates
            .iter()
            .map(|r| r.reduction_factor)
            .fold(f64::INFINITY, f64::min);
        pass &= !rates.is_empty() && min > 100.0;
        detail.push(format!("{}: min {min:.0}", p.as_str()));
    }
    outcome(pass, detail.join("; "))
}

fn c05_red_light() -> Outcome {
    let reps: Vec<MetricsReport> = (1..=50u64)
        .into_par_iter()
        .map(|s| urban_run(s, 0.5, 0))
        .collect();
    let red: u64 = reps.iter().map(|r| r.red_crossings_copilot).sum();
    let speed: u64 = reps.iter().map(|r| r.speed_violations_copilot).sum();
    let equipped: u64 = reps.iter().map(|r| r.equipped).sum();
    let conv: u64 = reps.iter().map(|r| r.red_crossings_conventional).sum();
    outcome(
        red == 0 && speed == 0 && equipped > 0,
        format!(
            "co-pilot red crossings {red}, speed violations {speed}, \
             {equipped} co-pilot vehicles; conventional red crossings {conv}"
        ),
    )
}

fn c06_benefit() -> Outcome {
    let pairs: Vec<(MetricsReport, MetricsReport)> = (1..=50u64)
        .into_par_iter()
        .map(|s| (urban_run(s, 1.0, 0), urban_run(s, 0.0, 0)))
        .collect();
    let wins = pairs
        .iter()
        .filter(|(on, off)| {
            on.full_stops < off.full_stops && on.mean_delay.unwrap() < off.mean_delay.unwrap()
        })
        .count();
    let stops = |f: fn(&(MetricsReport, MetricsReport)) -> &MetricsReport| -> u64 {
        pairs.iter().map(|p| f(p).full_stops).sum()
    };
    outcome(
        wins >= 45,
        format!(
            "{wins}/50 seeds; stops {} vs {}",
            stops(|p| &p.0),
            stops(|p| &p.1)
        ),
    )
}

fn c07_shocks() -> Outcome {
    let reps: Vec<MetricsReport> = (1..=50u64)
        .into_par_iter()
        .map(|s| urban_run(s, 0.5, 10))
        .collect();
    let red: u64 = reps.iter().map(|r| r.red_crossings_copilot).sum();
    let collisions: u64 = reps.iter().map(|r| r.collisions).sum();
    let harsh: u64 = reps.iter().map(|r| r.harsh_events).sum();
    let all_shifted = reps.iter().all(|r| r.shifts == 10);
    outcome(
        red == 0 && collisions == 0 && all_shifted,
        format!("red crossings {red}, collisions {collisions}, harsh {harsh}, 10 shifts per run: {all_shifted}"),
    )
}

fn c08_channels() -> Outcome {
    let mut rng = stream(8, "acceptance/channels");
    let stations: Vec<Endpoint> = (0..12)
        .map(|i| Endpoint {
            id: i + 1,
            x: 90.0 * i as f64,
            y: -1.0,
        })
        .collect();
    let mut pass = true;
    let mut compared = 0usize;
    let mut out_of_range = 0usize;
    for (trial, hop) in [0.05, 0.08, 0.2].into_iter().enumerate() {
        let mut net = NetConfig::default();
        net.cv2x.latency_base = hop;
        net.itsg5_hop.latency_base = hop;
        let range = net.itsg5_broadcast.range.unwrap();
        for frame in 0..200u64 {
            let t = frame as f64 / 10.0;
            let vehicles: Vec<Endpoint> = (0..15)
                .map(|i| Endpoint {
                    id: 100 + i,
                    x: rng.random_range(-600.0..1600.0),
                    y: if rng.random_bool(0.5) { 0.0 } else { 3.5 },
                })
                .collect();
            let payload = Arc::new(Payload::Twin(Default::default()));
            let seq = trial as u64 * 1000 + frame;
            let (_, cv) = route_downlink(
                payload.clone(),
                DownlinkMode::Cv2x,
                &net,
                &stations,
                &vehicles,
                t,
                seq,
                &mut rng,
            );
            let (_, g5) = route_downlink(
                payload,
                DownlinkMode::Itsg5,
                &net,
                &stations,
                &vehicles,
                t,
                seq,
                &mut rng,
            );
            let cv_at: BTreeMap<_, f64> = cv.iter().map(|e| (e.dst, e.rx_time.unwrap())).collect();
            let mut g5_first: BTreeMap<_, f64> = BTreeMap::new();
            let mut copies: BTreeMap<_, usize> = BTreeMap::new();
            for e in &g5 {
                pass &= e.channel == ChannelKind::Itsg5;
                let at = e.rx_time.unwrap();
                let first = g5_first.entry(e.dst).or_insert(at);
                *first = first.min(at);
                *copies.entry(e.dst).or_default() += 1;
            }
            for (dst, at) in &g5_first {
                pass &= *at > cv_at[dst];
                compared += 1;
            }
            for v in &vehicles {
                let dst = Destination::Vehicle(v.id);
                let expected = stations
                    .iter()
                    .filter(|s| (v.x - s.x).hypot(v.y - s.y) <= range)
                    .count();
                pass &= copies.get(&dst).copied().unwrap_or(0) == expected;
                pass &= in_itsg5_range(*v, &stations, range) == (expected > 0);
                pass &= cv_at.contains_key(&dst);
                if expected == 0 {
                    out_of_range += 1;
                }
            }
        }
    }
    outcome(
        pass && compared > 0 && out_of_range > 0,
        format!("{compared} recipient frames compared, {out_of_range} out-of-range recipients"),
    )
}

fn random_detection<R: Rng>(rng: &mut R, local_id: u16) -> DetectedObject {
    let sx = rng.random_range(0.02..0.5);
    let sy = rng.random_range(0.02..0.5);
    let rho = rng.random_range(-0.8..0.8);
    DetectedObject {
        station_id: 1,
        local_id,
        class: VehicleClass::Car,
        sensor: Sensor::Lidar,
        x: rng.random_range(0.0..2.0),
        y: rng.random_range(0.0..2.0),
        vx: 0.0,
        vy: 0.0,
        cov: [sx * sx, rho * sx * sy, sy * sy],
        confidence: 1.0,
    }
}

/// Minimum over every partial injective map from tracks to detections.
fn brute_force(d2: &[Vec<f64>], m: usize, gate2: f64, tau: f64) -> f64 {
    fn rec(i: usize, d2: &[Vec<f64>], used: &mut Vec<bool>, gate2: f64, tau: f64) -> f64 {
        if i == d2.len() {
            return tau * used.iter().filter(|u| !**u).count() as f64;
        }
        let mut best = tau + rec(i + 1, d2, used, gate2, tau);
        for j in 0..used.len() {
            if !used[j] && d2[i][j] <= gate2 {
                used[j] = true;
                best = best.min(d2[i][j] + rec(i + 1, d2, used, gate2, tau));
                used[j] = false;
            }
        }
        best
    }
    rec(0, d2, &mut vec![false; m], gate2, tau)
}

fn c09_association() -> Outcome {
    let cfg = FusionConfig::default();
    let tau = unmatched_cost(cfg.gate);
    let gate2 = cfg.gate * cfg.gate;
    let mut rng = stream(9, "acceptance/association");
    let mut mismatches = 0;
    let mut pairs = 0usize;
    for _ in 0..10_000 {
        let n = rng.random_range(0..=6);
        let m = rng.random_range(0..=6);
        let tracks: Vec<Track> = (0..n)
            .map(|i| Track::new(&random_detection(&mut rng, i as u16), 0.0, 1.0))
            .collect();
        let dets: Vec<DetectedObject> = (0..m)
            .map(|j| random_detection(&mut rng, j as u16))
            .collect();
        let refs: Vec<&DetectedObject> = dets.iter().collect();
        let a = associate(&tracks, &refs, &cfg);
        let d2: Vec<Vec<f64>> = tracks
            .iter()
            .map(|t| {
                dets.iter()
                    .map(|d| mahalanobis2(t, d, cfg.gate_floor))
                    .collect()
            })
            .collect();
        let oracle = brute_force(&d2, m, gate2, tau);
        let own: f64 = a.pairs.iter().map(|&(i, j)| d2[i][j]).sum::<f64>()
            + tau * (a.unmatched_tracks.len() + a.unmatched_detections.len()) as f64;
        pairs += a.pairs.len();
        let tol = 1e-9 * (1.0 + oracle.abs());
        if (a.cost - oracle).abs() > tol || (own - oracle).abs() > tol {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} of 10000 frames differ, {pairs} pairs assigned"),
    )
}

fn c10_mover() -> Outcome {
    let scn = BusStopScenario::default();
    let p = MoverParams::default();
    let outs: Vec<_> = (0..100u64)
        .into_par_iter()
        .map(|s| run_bus_stop(&scn, &p, s).unwrap())
        .collect();
    let p95 = percentile(outs.iter().map(|o| o.stop_error.abs()).collect(), 95.0);
    let gaps_ok = outs
        .iter()
        .all(|o| o.completed && (0.05..=0.15).contains(&o.final_gap));
    let curb: u64 = outs.iter().map(|o| o.curb_crossings).sum();
    let crossings: Vec<(f64, f64)> = vec![
        (70.0, 0.5),
        (80.0, 2.0),
        (90.0, 4.0),
        (60.0, 0.0),
        (75.0, 1.0),
        (85.0, 3.0),
    ];
    let mut actors_ok = true;
    for (i, (x, appear)) in crossings.iter().enumerate() {
        let mut s = BusStopScenario::default();
        s.actors = vec![crossing_pedestrian(&s, 1, *x, *appear)];
        let o = run_bus_stop(&s, &p, 1000 + i as u64).unwrap();
        actors_ok &= o.contacts == 0 && o.hold_events >= 1;
    }
    outcome(
        p95 <= 0.15 && gaps_ok && curb == 0 && actors_ok,
        format!(
            "stop p95 {p95:.3} m, gaps in band {gaps_ok}, curb crossings {curb}, \
             crossing scenarios ok {actors_ok}"
        ),
    )
}

fn c11_calibration() -> Outcome {
    let p_true = 0.3;
    let results: Vec<Result<(f64, bool), String>> = (1..=20u64)
        .into_par_iter()
        .map(|seed| {
            let mut cfg = ExperimentConfig::default();
            cfg.scenario = lane_change_scenario(p_true);
            cfg.seed = seed;
            cfg.sensing = false;
            let data = run_experiment(&cfg).map_err(|e| e.to_string())?;
            let (map, driver, interval) = calibration_inputs(&cfg).map_err(|e| e.to_string())?;
            let ctx = calibration_context(&map, &driver, interval);
            let mut grid = CalibrationGrid::default();
            grid.lc_threshold = vec![driver.lc_threshold];
            grid.b_safe = vec![driver.b_safe];
            let fit = calibrate_lane_change(&data.store, &ctx, &grid).map_err(|e| e.to_string())?;
            // Independent search: score each grid point alone, keep the first best.
            let mut best: Option<(f64, f64)> = None;
            for &p in &grid.politeness {
                let single = CalibrationGrid {
                    politeness: vec![p],
                    ..grid.clone()
                };
                let r =
                    calibrate_lane_change(&data.store, &ctx, &single).map_err(|e| e.to_string())?;
                if best.is_none_or(|b| r.balanced_accuracy > b.1) {
                    best = Some((p, r.balanced_accuracy));
                }
            }
            let agrees = best.unwrap().0 == fit.politeness;
            Ok((fit.politeness, agrees))
        })
        .collect();
    let fitted: Vec<String> = results
        .iter()
        .map(|r| match r {
            Ok((p, _)) => format!("{p:.2}"),
            Err(e) => e.clone(),
        })
        .collect();
    let within = results
        .iter()
        .filter(|r| matches!(r, Ok((p, _)) if (p - p_true).abs() <= 0.10 + 1e-9))
        .count();
    let oracle_ok = results.iter().all(|r| matches!(r, Ok((_, true))));
    outcome(
        within >= 18 && oracle_ok,
        format!(
            "{within}/20 within 0.10 of {p_true}, oracle agrees {oracle_ok}; fitted [{}]",
            fitted.join(" ")
        ),
    )
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn c12_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for p in Preset::ALL {
        let mut cfg = ExperimentConfig::preset(p);
        cfg.duration = 60.0;
        cfg.penetration = Some(0.5);
        cfg.seed = 12;
        let a = tmp.path().join(format!("{}_a", p.as_str()));
        let b = tmp.path().join(format!("{}_b", p.as_str()));
        run_to_dir(&cfg, &a).unwrap();
        run_to_dir(&cfg, &b).unwrap();
        let (fa, fb) = (files(&a), files(&b));
        let same_names = fa
            .iter()
            .map(|f| f.strip_prefix(&a).unwrap())
            .eq(fb.iter().map(|f| f.strip_prefix(&b).unwrap()));
        let identical = same_names
            && fa
                .iter()
                .zip(&fb)
                .all(|(x, y)| fs::read(x).unwrap() == fs::read(y).unwrap());
        pass &= identical && !fa.is_empty();
        detail.push(format!(
            "{}: {} files identical {identical}",
            p.as_str(),
            fa.len()
        ));
    }
    outcome(pass, detail.join("; "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("01 station coverage", c01_coverage),
        ("02 noiseless identity", c02_noiseless),
        ("03 fused accuracy", c03_accuracy),
        ("04 data reduction", c04_reduction),
        ("05 red-light safety", c05_red_light),
        ("06 co-pilot benefit", c06_benefit),
        ("07 forecast shocks", c07_shocks),
        ("08 channel paths", c08_channels),
        ("09 association optimality", c09_association),
        ("10 bus-stop maneuver", c10_mover),
        ("11 calibration recovery", c11_calibration),
        ("12 determinism", c12_determinism),
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        println!(
            "{} criterion {name}: {} ({:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
