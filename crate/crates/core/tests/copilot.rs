use corridor_core::copilot::*;
use corridor_core::world::LightState;
use proptest::prelude::*;

fn red_green_red(green_start: f64, green_len: f64) -> SpatForecast {
    let phase = |state, start, end| SpatPhase {
        state,
        start,
        end,
        confidence: 1.0,
    };
    SpatForecast {
        signal_id: 1,
        msg_time: 0.0,
        phases: vec![
            phase(LightState::Red, 0.0, green_start),
            phase(LightState::Green, green_start, green_start + green_len),
            phase(
                LightState::Red,
                green_start + green_len,
                green_start + green_len + 60.0,
            ),
        ],
    }
}

fn planned_speed(plan: &SpeedPlan) -> f64 {
    match plan.mode {
        PlanMode::Stop => 0.0,
        _ => plan.target_speed.unwrap(),
    }
}

/// Scan of candidate speeds on the 0.01 m/s grid, fastest first.
fn scan_oracle(d: f64, v_limit: f64, g: f64, len: f64, v_min: f64) -> Option<f64> {
    if d / v_limit >= g && d / v_limit < g + len {
        return Some(v_limit);
    }
    let mut k = (v_limit / 0.01).floor() as i64;
    while k as f64 * 0.01 >= v_min - 1e-9 {
        let v = k as f64 * 0.01;
        let ta = d / v;
        if ta >= g && ta < g + len {
            return Some(v);
        }
        k -= 1;
    }
    None
}

proptest! {
    #[test]
    fn delaying_green_never_raises_target(
        d in 20.0..400.0f64,
        v in 0.0..13.89f64,
        g in 0.5..40.0f64,
        delay in 0.0..10.0f64,
        len in 5.0..40.0f64,
    ) {
        let p = CopilotParams::default();
        let a = plan_speed(d, v, 13.89, &red_green_red(g, len), &p).unwrap();
        // A green that cannot be reached at all may become reachable once delayed.
        prop_assume!(a.mode != PlanMode::Stop);
        let b = plan_speed(d, v, 13.89, &red_green_red(g + delay, len), &p).unwrap();
        prop_assert!(planned_speed(&b) <= planned_speed(&a) + 1e-9, "{:?} -> {:?}", a, b);
    }

    #[test]
    fn plan_matches_speed_scan(d in 50.0..400.0f64, g in 1.0..40.0f64, len in 5.0..40.0f64) {
        let p = CopilotParams::default();
        let plan = plan_speed(d, 13.89, 13.89, &red_green_red(g, len), &p).unwrap();
        match scan_oracle(d, 13.89, g, len, p.v_min_adapt) {
            Some(v) => {
                prop_assert!(plan.mode != PlanMode::Stop, "{:?}", plan);
                prop_assert!((plan.target_speed.unwrap() - v).abs() <= 0.01 + 1e-9, "{:?} vs {}", plan, v);
            }
            None => {
                prop_assert_eq!(plan.mode, PlanMode::Stop);
                let sp = plan.stop_point.unwrap();
                prop_assert!(sp < d && sp >= 0.0);
            }
        }
    }

    #[test]
    fn commanded_speed_stays_legal(
        d in 0.0..300.0f64,
        v in 0.0..1.0f64,
        v_limit in 5.0..33.0f64,
        g in 0.5..40.0f64,
        len in 5.0..40.0f64,
        green_now in any::<bool>(),
    ) {
        let p = CopilotParams::default();
        let v = v * v_limit;
        let plan = plan_speed(d, v, v_limit, &red_green_red(g, len), &p).unwrap();
        if let Some(t) = plan.target_speed {
            prop_assert!(t > 0.0 && t <= v_limit + 1e-9);
        }
        let signal = Some(if green_now { LightState::Green } else { LightState::Red });
        let input = ControlInput { v, v_limit, d_line: Some(d) };
        let a = longitudinal_step(input, &plan, signal, 0.1, &p);
        prop_assert!(v + a * 0.1 <= v_limit + 1e-9, "v {} a {}", v, a);
    }
}
