use lmbao::ba_core::moments::{landmark_covariance, MomentAccumulator};
use lmbao::config::OdometryConfig;
use lmbao::feature_extract::FeatureCategory;
use lmbao::pipeline::{list_dataset, synthesize_dataset, OdometryEngine};
use lmbao::scan_io::{read_scan_file, BeamModel, SyntheticWorld, Trajectory, Twist};
use nalgebra::Vector3;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let world = SyntheticWorld::corridor(40.0, 4.0, 3.0);
    let trajectory = Trajectory::constant_twist(
        Twist {
            linear: Vector3::new(1.0, 0.0, 0.0),
            angular: Vector3::zeros(),
        },
        5.0,
    );
    let columns: usize = std::env::var("COLS").map(|v| v.parse().unwrap()).unwrap_or(1800);
    let rings: usize = std::env::var("RINGS").map(|v| v.parse().unwrap()).unwrap_or(64);
    let beam = BeamModel {
        columns,
        rings,
        ..BeamModel::default()
    };
    synthesize_dataset(&world, &trajectory, 2, 0.1, &beam, 0.0, 1, dir.path()).unwrap();
    let files = list_dataset(dir.path()).unwrap();

    let mut cfg = OdometryConfig::default();
    cfg.feature.alpha = columns as f64 * 10.0;
    cfg.feature.rings = rings;

    let mut engine = OdometryEngine::new(cfg);
    let mut s = read_scan_file(&files[0]).unwrap();
    s.index = 0;
    engine.process_scan(&s).unwrap();

    // Per-landmark residual at the (identity, zero velocity) scan-0 state.
    let mut rows = Vec::new();
    for lm in engine.map.landmarks.values() {
        let pts: Vec<Vector3<f64>> = lm
            .points_by_scan
            .values()
            .flatten()
            .map(|o| o.raw_position)
            .collect();
        let Some(cov) = landmark_covariance(&MomentAccumulator::new(), &pts) else {
            continue;
        };
        let eps = match lm.category {
            FeatureCategory::Plane => cov.eigenvalues[0].max(0.0).sqrt(),
            FeatureCategory::Edge => (cov.eigenvalues[0].max(0.0) + cov.eigenvalues[1].max(0.0)).sqrt(),
        };
        let scaled = (pts.len() as f64).sqrt() * eps;
        rows.push((scaled * scaled, eps, pts.len(), lm.category, lm.center, lm.radius));
    }
    rows.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Dump the points of the worst landmark.
    if let Some(worst) = engine.map.landmarks.values().max_by(|a, b| {
        let f = |l: &&lmbao::landmark_map::Landmark| {
            let pts: Vec<Vector3<f64>> = l
                .points_by_scan
                .values()
                .flatten()
                .map(|o| o.raw_position)
                .collect();
            landmark_covariance(&MomentAccumulator::new(), &pts)
                .map(|c| match l.category {
                    FeatureCategory::Plane => c.eigenvalues[0],
                    FeatureCategory::Edge => c.eigenvalues[0] + c.eigenvalues[1],
                })
                .unwrap_or(0.0)
                * pts.len() as f64
        };
        f(a).total_cmp(&f(b))
    }) {
        println!("worst landmark {:?} points:", worst.category);
        for o in worst.points_by_scan.values().flatten() {
            let p = o.raw_position;
            println!("  ({:8.4},{:8.4},{:8.4}) t={:.6}", p.x, p.y, p.z, o.timestamp);
        }
    }
    let total: f64 = rows.iter().map(|r| r.0.min(2.0 * r.0.sqrt() - 1.0).max(r.0.min(1.0))).sum();
    println!("landmarks={} sum_sq={total:9.3e}", rows.len());
    for (c, eps, n, cat, center, r) in rows.iter().take(15) {
        println!(
            "cost={c:9.3e} eps={eps:8.5} n={n:3} {:?} r={r:5.2} center=({:6.2},{:6.2},{:6.2})",
            cat, center.x, center.y, center.z
        );
    }
}
