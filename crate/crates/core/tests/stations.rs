use corridor_core::harness::urban;
use corridor_core::rng::stream;
use corridor_core::stations::*;
use corridor_core::world::{build_corridor, VehicleClass};
use proptest::prelude::*;

fn layout(defaults: &SensorDefaults) -> Vec<StationConfig> {
    let map = build_corridor(&urban().corridor).unwrap();
    place_stations(&map, 90.0, defaults).unwrap()
}

fn car(id: u64, x: f64, lane: usize) -> TruthObject {
    let (length, width) = VehicleClass::Car.dimensions();
    TruthObject {
        id,
        class: VehicleClass::Car,
        x,
        y: lane as f64 * 3.5,
        vx: 10.0,
        vy: 0.0,
        length,
        width,
    }
}

#[test]
fn camera_covariance_matches_its_samples() {
    let mut st = layout(&SensorDefaults::default())[2].clone();
    st.p_miss = 0.0;
    st.p_false = 0.0;
    st.lidar_radius = 1.0;
    let target = car(1, st.camera_target.0 + 10.0, 0);
    let mut rng = stream(5, "camera-cov");
    let mut sum = [0.0; 3];
    let mut reported = None;
    let n = 20_000;
    for _ in 0..n {
        let msg = sense_tick(&st, std::slice::from_ref(&target), 0.0, &mut rng);
        let d = msg
            .objects
            .iter()
            .find(|d| d.sensor == Sensor::Camera)
            .unwrap();
        let (ex, ey) = (d.x - target.x, d.y - target.y);
        sum[0] += ex * ex;
        sum[1] += ex * ey;
        sum[2] += ey * ey;
        reported = Some(d.cov);
    }
    let cov = reported.unwrap();
    for k in 0..3 {
        let emp = sum[k] / n as f64;
        let scale = cov[0].max(cov[2]);
        assert!(
            (emp - cov[k]).abs() < 0.05 * scale,
            "{k}: {emp} vs {}",
            cov[k]
        );
    }
}

#[test]
fn local_ids_are_a_fresh_permutation_each_frame() {
    let st = layout(&SensorDefaults::noiseless())[3].clone();
    let truth: Vec<TruthObject> = (0..6)
        .map(|i| car(i, st.s - 40.0 + 15.0 * i as f64, (i % 2) as usize))
        .collect();
    let mut rng = stream(6, "ids");
    let mut orders = std::collections::BTreeSet::new();
    for f in 0..20 {
        let msg = sense_tick(&st, &truth, f as f64 / 10.0, &mut rng);
        let mut ids: Vec<u16> = msg.objects.iter().map(|d| d.local_id).collect();
        let order: Vec<(u16, u64)> = msg
            .objects
            .iter()
            .map(|d| (d.local_id, (d.x * 1000.0) as u64))
            .collect();
        orders.insert(order);
        ids.sort();
        assert_eq!(ids, (0..msg.objects.len() as u16).collect::<Vec<_>>());
    }
    assert!(orders.len() > 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn occluded_objects_still_reported(
        cars in prop::collection::vec((20.0..980.0f64, 0usize..1), 2..25),
        trucks in prop::collection::vec(20.0..980.0f64, 0..8),
    ) {
        let stations = layout(&SensorDefaults::noiseless());
        let mut truth: Vec<TruthObject> = cars
            .iter()
            .enumerate()
            .map(|(i, &(x, lane))| car(i as u64 + 1, x, lane))
            .collect();
        for (k, &x) in trucks.iter().enumerate() {
            let (length, width) = VehicleClass::Truck.dimensions();
            truth.push(TruthObject {
                id: 100 + k as u64,
                class: VehicleClass::Truck,
                x,
                y: 0.0,
                vx: 8.0,
                vy: 0.0,
                length,
                width,
            });
        }
        let mut rng = stream(7, "occlusion");
        let msgs: Vec<ObjectListMessage> =
            stations.iter().map(|st| sense_tick(st, &truth, 0.0, &mut rng)).collect();
        for (i, st) in stations.iter().enumerate() {
            for o in &truth {
                let in_lidar = (o.x - st.s).abs() <= st.lidar_radius;
                if !(in_lidar && lidar_occluded(o, &truth, st.s, st.y)) {
                    continue;
                }
                let watched = stations
                    .iter()
                    .enumerate()
                    .any(|(j, s2)| j != i && o.x >= s2.camera_target.0 && o.x <= s2.camera_target.1);
                if watched {
                    let seen = msgs
                        .iter()
                        .flat_map(|m| &m.objects)
                        .any(|d| d.x == o.x && d.y == o.y);
                    prop_assert!(seen, "object {} at {} lost", o.id, o.x);
                }
            }
        }
        for m in &msgs {
            prop_assert_eq!(m.payload_bytes, HEADER_BYTES + OBJECT_BYTES * m.objects.len());
        }
    }
}
