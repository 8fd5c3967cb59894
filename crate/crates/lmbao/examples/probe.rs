use lmbao::config::OdometryConfig;
use lmbao::pipeline::{list_dataset, synthesize_dataset, OdometryEngine};
use lmbao::scan_io::{read_scan_file, read_trajectory, BeamModel, SyntheticWorld, Trajectory, Twist};
use nalgebra::Vector3;

fn main() {
    let moving = std::env::var("MOVING").is_ok();
    let dir = tempfile::tempdir().unwrap();
    let (world, trajectory, scans) = if moving {
        (
            SyntheticWorld::corridor(40.0, 4.0, 3.0),
            Trajectory::constant_twist(
                Twist {
                    linear: Vector3::new(1.0, 0.0, 0.0),
                    angular: Vector3::zeros(),
                },
                5.0,
            ),
            30,
        )
    } else {
        (SyntheticWorld::courtyard(12.0), Trajectory::stationary(3.0), 20)
    };
    let columns: usize = std::env::var("COLS").map(|v| v.parse().unwrap()).unwrap_or(360);
    let rings: usize = std::env::var("RINGS").map(|v| v.parse().unwrap()).unwrap_or(16);
    let beam = BeamModel {
        columns,
        rings,
        ..BeamModel::default()
    };
    synthesize_dataset(&world, &trajectory, scans, 0.1, &beam, 0.0, 1, dir.path()).unwrap();
    let files = list_dataset(dir.path()).unwrap();
    let gt = read_trajectory(&dir.path().join("groundtruth.txt")).unwrap();

    let mut cfg = OdometryConfig::default();
    cfg.feature.alpha = columns as f64 * 10.0;
    cfg.feature.rings = rings;
    cfg.plane_stride = std::env::var("STRIDE").map(|v| v.parse().unwrap()).unwrap_or(2);
    if let Ok(r) = std::env::var("RMAX") {
        cfg.landmark.radius_max = r.parse().unwrap();
    }
    if let Ok(s) = std::env::var("SPREAD") {
        cfg.landmark.max_shape_spread = s.parse().unwrap();
    }
    if let Ok(s) = std::env::var("ASSOC") {
        cfg.landmark.assoc_spread = s.parse().unwrap();
    }
    if let Ok(s) = std::env::var("ITERS") {
        cfg.solver.max_iterations = s.parse().unwrap();
    }

    let mut engine = OdometryEngine::new(cfg);
    for (i, f) in files.iter().enumerate() {
        let mut s = read_scan_file(f).unwrap();
        s.index = i;
        engine.process_scan(&s).unwrap();
        let r = engine.records.last().unwrap();
        let traj = engine.trajectory();
        let last = &traj.last().unwrap().1;
        let err = (last.translation - gt[i].1.translation).norm();
        let d = last.translation - gt[i].1.translation;
        let v = engine.window.entries.last().unwrap().state.linear_velocity;
        let sol_states: Vec<_> = engine.window.entries.iter().map(|e| e.state).collect();
        let true_states: Vec<_> = engine
            .window
            .entries
            .iter()
            .map(|e| lmbao::motion_model::MotionState {
                transform: gt[e.scan_index].1,
                linear_velocity: if moving {
                    Vector3::new(1.0, 0.0, 0.0)
                } else {
                    Vector3::zeros()
                },
                angular_velocity: Vector3::zeros(),
                start_time: e.state.start_time,
            })
            .collect();
        let cfg2 = engine.config.solver.clone();
        let c_sol = lmbao::ba_core::solver::window_cost(&engine.map, &engine.window, &sol_states, &cfg2);
        if std::env::var("BREAKDOWN").map_or(false, |v| v == i.to_string()) {
            let bd_states = if std::env::var("AT_TRUTH").is_ok() { &true_states } else { &sol_states };
            let mut terms = lmbao::ba_core::solver::landmark_cost_breakdown(
                &engine.map, &engine.window, bd_states, &cfg2);
            terms.sort_by(|a, b| b.4.total_cmp(&a.4));
            let lm_total: f64 = terms.iter().map(|t| t.4).sum();
            println!("  scan {i} landmark cost total {lm_total:9.3e} over {} terms", terms.len());
            for (id, cat, n, ns, c) in terms.iter().take(12) {
                let lm = &engine.map.landmarks[id];
                println!(
                    "    {:?} n={n:3} scans={ns} cost={c:9.3e} gc=({:6.2},{:6.2},{:6.2}) dir=({:5.2},{:5.2},{:5.2}) r={:.2}",
                    cat, lm.global_center.x, lm.global_center.y, lm.global_center.z,
                    lm.shape_dir.x, lm.shape_dir.y, lm.shape_dir.z, lm.radius
                );
            }
            let multi = terms.iter().filter(|t| t.3 > 1).count();
            println!("  terms spanning >1 scan: {multi}");
        }
        let c_true = lmbao::ba_core::solver::window_cost(&engine.map, &engine.window, &true_states, &cfg2);
        let horiz = engine
            .map
            .landmarks
            .values()
            .filter(|l| {
                l.category == lmbao::feature_extract::FeatureCategory::Plane
                    && l.shape_dir.z.abs() > 0.8
            })
            .count();
        // Horizontal planes tracked across scans: created earlier, observed now.
        let horiz_tracked = engine
            .map
            .landmarks
            .values()
            .filter(|l| {
                l.category == lmbao::feature_extract::FeatureCategory::Plane
                    && l.shape_dir.z.abs() > 0.8
                    && l.creation_scan < i
                    && l.points_by_scan.contains_key(&i)
            })
            .count();
        let tracked_any = engine
            .map
            .landmarks
            .values()
            .filter(|l| l.creation_scan < i && l.points_by_scan.contains_key(&i))
            .count();
        println!(
            "scan {i:2}: lm={:3} horiz={:3}/{:2} trk={:3} created={:3} deleted={:3} cost={:9.3e} iters={:2} err={:.5} d=({:7.4},{:7.4},{:7.4}) v=({:6.3},{:6.3},{:6.3}) c_sol={:9.3e} c_true={:9.3e}",
            r.landmarks_active, horiz, horiz_tracked, tracked_any, r.created, r.deleted, r.cost_final, r.lm_iters, err,
            d.x, d.y, d.z, v.x, v.y, v.z, c_sol, c_true
        );
    }
    // Final trajectory error per pose.
    let traj = engine.trajectory();
    let worst = traj
        .iter()
        .zip(gt.iter())
        .map(|((_, p), (_, g))| (p.translation - g.translation).norm())
        .fold(0.0f64, f64::max);
    println!("worst pose err {worst:.5}");
}
