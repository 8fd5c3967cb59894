use lmbao::ba_core::moments::{landmark_covariance, MomentAccumulator};
use lmbao::config::OdometryConfig;
use lmbao::feature_extract::{extract_features, FeatureCategory};
use lmbao::motion_model::MotionState;
use lmbao::pipeline::{list_dataset, synthesize_dataset};
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
    let columns: usize = std::env::var("COLS").map(|v| v.parse().unwrap()).unwrap_or(360);
    let rings: usize = std::env::var("RINGS").map(|v| v.parse().unwrap()).unwrap_or(16);
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

    let mut scan = read_scan_file(&files[0]).unwrap();
    scan.index = 0;
    println!("points={}", scan.points.len());
    let state = MotionState::identity(scan.start_time);
    let mut clusters = extract_features(&scan, &state, &cfg.feature);
    println!("clusters={}", clusters.len());
    let stride = cfg.plane_stride;
    for c in &mut clusters {
        if c.category == FeatureCategory::Plane {
            c.members = c.members.iter().step_by(stride).cloned().collect();
        }
    }
    clusters.retain(|c| c.members.len() >= cfg.feature.min_cluster);
    for c in &clusters {
        let n = c.members.len();
        let pos: Vec<Vector3<f64>> =
            c.members.iter().map(|m| m.compensated_position).collect();
        let centroid = pos.iter().sum::<Vector3<f64>>() / n as f64;
        let lo = pos.iter().fold(Vector3::repeat(f64::MAX), |a, p| a.inf(p));
        let hi = pos.iter().fold(Vector3::repeat(f64::MIN), |a, p| a.sup(p));
        println!(
            "{:?} n={:5} centroid=({:6.2},{:6.2},{:6.2}) bbox=({:5.2},{:5.2},{:5.2})..({:5.2},{:5.2},{:5.2})",
            c.category, n, centroid.x, centroid.y, centroid.z, lo.x, lo.y, lo.z, hi.x, hi.y, hi.z
        );
        // Replicate the greedy ball split with trim and report per-ball eigen
        // spreads to see which creation gates fire.
        let mut remaining: Vec<Vector3<f64>> = pos;
        while let Some(seed) = remaining.first().copied() {
            let (mut ball, rest): (Vec<_>, Vec<_>) = remaining
                .into_iter()
                .partition(|q| (q - seed).norm() <= cfg.landmark.radius_max);
            remaining = rest;
            for _ in 0..4 {
                let Some(cov) = landmark_covariance(&MomentAccumulator::new(), &ball) else {
                    break;
                };
                let normal = cov.eigenvectors.column(0).into_owned();
                let axis = cov.eigenvectors.column(2).into_owned();
                let before = ball.len();
                ball.retain(|p| {
                    let d = p - cov.mean;
                    let off = match c.category {
                        FeatureCategory::Plane => d.dot(&normal).abs(),
                        FeatureCategory::Edge => (d - axis * d.dot(&axis)).norm(),
                    };
                    off <= cfg.landmark.max_shape_spread
                });
                if ball.len() == before {
                    break;
                }
            }
            if let Some(cov) = landmark_covariance(&MomentAccumulator::new(), &ball) {
                println!(
                    "    ball n={:4} center=({:6.2},{:6.2},{:6.2}) sqrt_eig=({:7.4},{:7.4},{:7.4})",
                    ball.len(),
                    cov.mean.x,
                    cov.mean.y,
                    cov.mean.z,
                    cov.eigenvalues[0].max(0.0).sqrt(),
                    cov.eigenvalues[1].max(0.0).sqrt(),
                    cov.eigenvalues[2].max(0.0).sqrt()
                );
            }
        }
    }
}
