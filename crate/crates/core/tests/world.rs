use corridor_core::world::*;
use proptest::prelude::*;

fn corridor(lanes: usize, length: f64, limit: f64, signals: Vec<SignalHead>) -> CorridorMap {
    build_corridor(&CorridorConfig {
        length,
        lanes_per_direction: lanes,
        lane_width: 3.5,
        segments: vec![Segment {
            start: 0.0,
            end: length,
            kind: SegmentKind::Urban,
            speed_limit: limit,
        }],
        signals,
        bus_stops: vec![],
        landmarks: vec![],
    })
    .unwrap()
}

fn world(map: CorridorMap, demand: DemandConfig, seed: u64) -> World {
    World::new(
        map,
        WorldConfig::default(),
        DriverDefaults::default(),
        demand,
        seed,
    )
    .unwrap()
}

fn car_params(limit: f64) -> DriverParams {
    DriverDefaults::default().params_for(VehicleClass::Car, limit)
}

/// Leader brakes at 4 m/s² for 3 s, both otherwise follow IDM; explicit Euler at 1 ms.
fn fine_step_reference(s_l: f64, s_f: f64, v0: f64, brake: (f64, f64, f64)) -> (f64, f64) {
    let p = car_params(13.89);
    let len = VehicleClass::Car.dimensions().0;
    let (mut sl, mut vl, mut sf, mut vf) = (s_l, v0, s_f, v0);
    let h = 1e-3;
    let mut min_gap = f64::INFINITY;
    for k in 0..60_000 {
        let t = k as f64 * h;
        let mut al = idm_accel_gap(vl, None, &p);
        if t >= brake.0 && t < brake.0 + brake.1 {
            al = al.min(-brake.2);
        }
        let gap = sl - len - sf;
        min_gap = min_gap.min(gap);
        let af = idm_accel_gap(vf, Some((gap, vf - vl)), &p);
        sl += vl * h;
        vl = (vl + al * h).max(0.0);
        sf += vf * h;
        vf = (vf + af * h).max(0.0);
    }
    (min_gap, sf)
}

#[test]
fn braking_leader_matches_fine_step_reference() {
    let mut w = world(
        corridor(1, 5000.0, 13.89, vec![]),
        DemandConfig::default(),
        1,
    );
    let leader = w
        .insert_vehicle(VehicleClass::Car, 80.0, 0, 12.0, false, false)
        .unwrap();
    let follower = w
        .insert_vehicle(VehicleClass::Car, 40.0, 0, 12.0, false, false)
        .unwrap();
    w.add_scripted([ScriptedEvent::HardBrake {
        vehicle: leader,
        at: 5.0,
        decel: 4.0,
        duration: 3.0,
    }]);
    let mut min_gap = f64::INFINITY;
    let mut min_follower_accel: f64 = 0.0;
    for _ in 0..600 {
        w.step(&Commands::default()).unwrap();
        min_gap = min_gap.min(w.min_gap().unwrap());
        min_follower_accel = min_follower_accel.min(w.vehicle(follower).unwrap().state.a);
    }
    let (ref_gap, ref_s) = fine_step_reference(80.0, 40.0, 12.0, (5.0, 3.0, 4.0));
    assert!(min_gap > 0.0 && ref_gap > 0.0);
    assert!(min_follower_accel < -1.0, "{min_follower_accel}");
    assert!((min_gap - ref_gap).abs() < 0.5, "{min_gap} vs {ref_gap}");
    let s = w.vehicle(follower).unwrap().state.s;
    assert!((s - ref_s).abs() < 2.0, "{s} vs {ref_s}");
}

#[test]
fn poisson_spawn_count() {
    // 600 s at 0.2 veh/s: mean 120, sd sqrt(120).
    let mut counts = Vec::new();
    for seed in 0..30 {
        let mut w = world(
            corridor(2, 1000.0, 13.89, vec![]),
            DemandConfig {
                rate: 0.2,
                ..Default::default()
            },
            seed,
        );
        for _ in 0..6000 {
            w.step(&Commands::default()).unwrap();
        }
        assert_eq!(w.log.spawned + w.queue_len(), w.log.arrivals);
        counts.push(w.log.arrivals as f64);
    }
    let sd = 120f64.sqrt();
    for c in &counts {
        assert!((c - 120.0).abs() <= 3.0 * sd + 1.0, "{c}");
    }
    let mean = counts.iter().sum::<f64>() / counts.len() as f64;
    assert!(
        (mean - 120.0).abs() < 3.0 * sd / (counts.len() as f64).sqrt(),
        "{mean}"
    );
}

fn trace(seed: u64) -> Vec<(u64, u64, usize, f64, f64)> {
    let mut w = world(
        corridor(2, 1000.0, 13.89, vec![]),
        DemandConfig {
            rate: 0.4,
            ..Default::default()
        },
        seed,
    );
    let mut out = Vec::new();
    for _ in 0..1200 {
        w.step(&Commands::default()).unwrap();
        out.extend(
            w.vehicles()
                .iter()
                .map(|v| (w.tick(), v.state.id, v.state.lane, v.state.s, v.state.v)),
        );
    }
    out
}

#[test]
fn same_seed_same_trajectories() {
    let (a, b) = (trace(9), trace(9));
    assert!(!a.is_empty());
    assert!(a
        .iter()
        .zip(&b)
        .all(|(x, y)| x.0 == y.0 && x.1 == y.1 && x.2 == y.2 && x.3.to_bits() == y.3.to_bits()));
    assert_ne!(a, trace(10));
}

fn fixed_head(cycle: &[(LightState, f64)], offset: f64) -> SignalHead {
    SignalHead {
        id: 1,
        s: 500.0,
        plan: SignalPlan::Fixed {
            cycle: cycle
                .iter()
                .map(|&(state, duration)| PhaseStep { state, duration })
                .collect(),
            offset,
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn default_drivers_never_collide(seed in 0u64..10_000, rate in 0.1..0.6f64, lanes in 1usize..=3) {
        let heads = vec![fixed_head(
            &[(LightState::Green, 30.0), (LightState::Amber, 3.0), (LightState::Red, 27.0)],
            0.0,
        )];
        let mut w = world(
            corridor(lanes, 1000.0, 13.89, heads),
            DemandConfig { rate, ..Default::default() },
            seed,
        );
        for _ in 0..6000 {
            w.step(&Commands::default()).unwrap();
            if let Some(g) = w.min_gap() {
                prop_assert!(g > 0.0, "gap {} at t {}", g, w.time());
            }
        }
        for m in &w.log.maneuvers {
            if m.kind == ManeuverKind::LaneChange && !m.scripted {
                let a = m.follower_accel.unwrap_or(0.0);
                prop_assert!(a >= -DriverDefaults::default().b_safe - 1e-12, "{}", a);
            }
        }
    }

    #[test]
    fn fixed_signal_is_periodic(
        g in 5.0..60.0f64,
        a in 2.0..5.0f64,
        r in 5.0..60.0f64,
        offset in 0.0..100.0f64,
        t in 0.0..1000.0f64,
    ) {
        let tl = FixedTimeline::new(
            vec![
                PhaseStep { state: LightState::Green, duration: g },
                PhaseStep { state: LightState::Amber, duration: a },
                PhaseStep { state: LightState::Red, duration: r },
            ],
            offset,
        );
        let c = tl.cycle_len();
        prop_assert!((c - (g + a + r)).abs() < 1e-9);
        // Stay clear of phase boundaries where rounding may pick either side.
        let phase = (t - offset).rem_euclid(c);
        let edges = [0.0, g, g + a, c];
        prop_assume!(edges.iter().all(|e| (phase - e).abs() > 1e-6));
        prop_assert_eq!(tl.state_at(t), tl.state_at(t + c));
        prop_assert_eq!(tl.state_at(t), tl.state_at(t + 7.0 * c));
    }
}
