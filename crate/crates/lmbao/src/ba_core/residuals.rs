//! Eigenvalue plane/edge residuals, the scan-to-scan continuity residual,
//! and Huber robustification.

use thiserror::Error;

use crate::ba_core::moments::LandmarkCovariance;
use crate::geom::{log_so3_raw, exp_so3_raw};
use crate::motion_model::MotionState;

#[derive(Debug, Error)]
pub enum ResidualError {
    #[error("huber argument {0} is negative")]
    NegativeArgument(f64),
}

/// Plane residual: root of the smallest covariance eigenvalue. Zero exactly
/// when the points are coplanar.
pub fn plane_residual(c: &LandmarkCovariance) -> f64 {
    c.eigenvalues[0].max(0.0).sqrt()
}

/// Edge residual: root of the sum of the two smallest eigenvalues. Zero
/// exactly when the points are collinear.
pub fn edge_residual(c: &LandmarkCovariance) -> f64 {
    (c.eigenvalues[0].max(0.0) + c.eigenvalues[1].max(0.0)).sqrt()
}

/// Weights for the four blocks of the continuity residual.
#[derive(Debug, Clone, Copy)]
pub struct ContinuityWeights {
    pub position: f64,
    pub rotation: f64,
    pub angular: f64,
    pub velocity: f64,
}

impl Default for ContinuityWeights {
    fn default() -> Self {
        Self {
            position: 1.0,
            rotation: 1.0,
            angular: 0.1,
            velocity: 0.1,
        }
    }
}

/// Consistency of consecutive scan states under the constant velocity model,
/// a 12-vector that vanishes when `b` equals the prediction from `a`.
///
/// Rows 0-2: `w_p (R_a Δt v_a + p_a − p_b)`.
/// Rows 3-5: `w_R log(R_a exp(Δt ω_a) R_bᵀ)`.
/// Rows 6-8: `w_ω (R_a ω_a − R_b ω_b)` (world-frame angular velocity match).
/// Rows 9-11: `w_v (R_a v_a − R_b v_b)` (world-frame linear velocity match).
///
/// The last block is what makes the newest scan's linear velocity observable:
/// that velocity enters no landmark term of any earlier scan, and the firing
/// times inside one scan cover too small a span to pin it down on their own.
pub fn continuity_residual(
    a: &MotionState,
    b: &MotionState,
    w: &ContinuityWeights,
) -> nalgebra::SVector<f64, 12> {
    let dt = b.start_time - a.start_time;
    let ra = a.transform.rotation.matrix();
    let rb = b.transform.rotation.matrix();
    let trans = ra * (dt * a.linear_velocity) + a.transform.translation - b.transform.translation;
    let rot = log_so3_raw(&(ra * exp_so3_raw(&(dt * a.angular_velocity)) * rb.transpose()));
    let ang = ra * a.angular_velocity - rb * b.angular_velocity;
    let vel = ra * a.linear_velocity - rb * b.linear_velocity;
    let mut out = nalgebra::SVector::<f64, 12>::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&(w.position * trans));
    out.fixed_rows_mut::<3>(3).copy_from(&(w.rotation * rot));
    out.fixed_rows_mut::<3>(6).copy_from(&(w.angular * ang));
    out.fixed_rows_mut::<3>(9).copy_from(&(w.velocity * vel));
    out
}

/// Huber loss on a squared residual: identity below the knee at 1, then
/// `2 sqrt(s) − 1`.
pub fn huber(s: f64) -> Result<f64, ResidualError> {
    if s < 0.0 {
        return Err(ResidualError::NegativeArgument(s));
    }
    Ok(if s <= 1.0 { s } else { 2.0 * s.sqrt() - 1.0 })
}

/// Derivative of the Huber loss, used as the IRLS weight.
pub fn huber_weight(s: f64) -> f64 {
    if s <= 1.0 {
        1.0
    } else {
        1.0 / s.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ba_core::moments::{landmark_covariance, MomentAccumulator};
    use crate::geom::{exp_so3, RigidTransform, RotationVector};
    use crate::motion_model::predict_next_state;
    use nalgebra::{Matrix3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cov_of(points: &[Vector3<f64>]) -> crate::ba_core::moments::LandmarkCovariance {
        landmark_covariance(&MomentAccumulator::new(), points).unwrap()
    }

    #[test]
    fn coplanar_points_have_zero_plane_residual() {
        let points: Vec<Vector3<f64>> = (0..20)
            .map(|i| Vector3::new((i % 5) as f64, (i / 5) as f64, 2.0))
            .collect();
        assert!(plane_residual(&cov_of(&points)) < 1e-9);
    }

    #[test]
    fn collinear_points_have_zero_edge_residual() {
        let d = Vector3::new(1.0, 2.0, -0.5).normalize();
        let points: Vec<Vector3<f64>> = (0..15).map(|i| d * (0.3 * i as f64)).collect();
        let c = cov_of(&points);
        assert!(edge_residual(&c) < 1e-7);
        assert!(plane_residual(&c) < 1e-7);
    }

    #[test]
    fn unit_cube_residuals() {
        let mut points = Vec::new();
        for &x in &[-0.5, 0.5] {
            for &y in &[-0.5, 0.5] {
                for &z in &[-0.5, 0.5] {
                    points.push(Vector3::new(x, y, z));
                }
            }
        }
        let c = cov_of(&points);
        assert!((plane_residual(&c) - 0.5).abs() < 1e-12);
        assert!((edge_residual(&c) - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn residuals_invariant_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let points: Vec<Vector3<f64>> = (0..30)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                    )
                })
                .collect();
            let rot = exp_so3(&RotationVector(Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            )))
            .unwrap();
            let t = RigidTransform::new(
                rot,
                Vector3::new(
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                ),
            );
            let moved: Vec<Vector3<f64>> = points.iter().map(|p| t.apply(p)).collect();
            let (a, b) = (cov_of(&points), cov_of(&moved));
            assert!((plane_residual(&a) - plane_residual(&b)).abs() < 1e-9);
            assert!((edge_residual(&a) - edge_residual(&b)).abs() < 1e-9);
        }
    }

    /// Brute-force least-squares plane fit: mean squared point-plane distance
    /// minimized over the unit normal, which for a fixed centroid is the
    /// smallest covariance eigenvalue; here sampled over many normals to stay
    /// independent of the eigen code.
    #[test]
    fn plane_residual_bounds_any_sampled_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let points: Vec<Vector3<f64>> = (0..60)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-0.3..0.3),
                )
            })
            .collect();
        let c = cov_of(&points);
        let eps2 = plane_residual(&c).powi(2);
        let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
        let mut best = f64::MAX;
        for _ in 0..5000 {
            let n = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if n.norm() < 1e-6 {
                continue;
            }
            let n = n.normalize();
            let ms = points
                .iter()
                .map(|p| (n.dot(&(p - mean))).powi(2))
                .sum::<f64>()
                / points.len() as f64;
            best = best.min(ms);
        }
        // eps2 is the true minimum; the sampled minimum can only be above it.
        assert!(eps2 <= best + 1e-12);
        assert!(best - eps2 < 0.05 * (1.0 + eps2));
    }

    #[test]
    fn continuity_zero_at_prediction() {
        let w = ContinuityWeights::default();
        let a = MotionState {
            transform: RigidTransform::new(
                exp_so3(&RotationVector(Vector3::new(0.2, -0.1, 0.4))).unwrap(),
                Vector3::new(1.0, -2.0, 0.5),
            ),
            linear_velocity: Vector3::new(0.8, 0.1, -0.2),
            angular_velocity: Vector3::new(0.05, 0.2, -0.1),
            start_time: 1.0,
        };
        let b = predict_next_state(&a, 1.1).unwrap();
        assert!(continuity_residual(&a, &b, &w).norm() < 1e-10);
    }

    #[test]
    fn continuity_zero_for_identical_static_states() {
        let w = ContinuityWeights::default();
        let a = MotionState::identity(2.0);
        assert!(continuity_residual(&a, &a, &w).norm() < 1e-15);
    }

    #[test]
    fn continuity_translation_block_is_linear() {
        let w = ContinuityWeights {
            position: 2.0,
            ..Default::default()
        };
        let a = MotionState {
            linear_velocity: Vector3::new(0.5, 0.0, 0.0),
            angular_velocity: Vector3::new(0.0, 0.1, 0.0),
            ..MotionState::identity(0.0)
        };
        let mut b = predict_next_state(&a, 0.1).unwrap();
        b.transform.translation += Vector3::new(0.1, 0.0, 0.0);
        let r = continuity_residual(&a, &b, &w);
        let expected = Vector3::new(-0.1, 0.0, 0.0) * 2.0;
        assert!((r.fixed_rows::<3>(0) - expected).norm() < 1e-10);
        assert!(r.fixed_rows::<3>(3).norm() < 1e-10);
        assert!(r.fixed_rows::<3>(6).norm() < 1e-10);
    }

    #[test]
    fn continuity_angular_block_weights() {
        let w = ContinuityWeights::default();
        let a = MotionState {
            angular_velocity: Vector3::new(0.0, 0.0, 0.3),
            ..MotionState::identity(0.0)
        };
        let b = MotionState {
            angular_velocity: Vector3::new(0.0, 0.0, 0.1),
            ..MotionState::identity(0.1)
        };
        let r = continuity_residual(&a, &b, &w);
        assert!((r[8] - 0.1 * 0.2).abs() < 1e-12);
    }

    #[test]
    fn huber_values() {
        assert_eq!(huber(0.5).unwrap(), 0.5);
        assert_eq!(huber(1.0).unwrap(), 1.0);
        assert_eq!(huber(4.0).unwrap(), 3.0);
        assert!(huber(-0.1).is_err());
    }

    #[test]
    fn huber_continuous_and_monotone() {
        let mut prev = -1.0;
        for i in 0..=4000 {
            let s = i as f64 * 0.002;
            let v = huber(s).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        let knee = huber(1.0).unwrap();
        assert!((huber(1.0 + 1e-12).unwrap() - knee).abs() < 1e-9);
    }

    #[test]
    fn huber_weight_is_derivative() {
        for &s in &[0.2, 0.9, 1.5, 9.0] {
            let h = 1e-7;
            let fd = (huber(s + h).unwrap() - huber(s - h).unwrap()) / (2.0 * h);
            assert!((huber_weight(s) - fd).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_covariance_gives_zero_residuals() {
        let c = crate::ba_core::moments::LandmarkCovariance {
            mean: Vector3::zeros(),
            cov: Matrix3::zeros(),
            eigenvalues: Vector3::new(-1e-12, 0.0, 0.0),
            eigenvectors: Matrix3::identity(),
            count: 5,
        };
        assert_eq!(plane_residual(&c), 0.0);
        assert_eq!(edge_residual(&c), 0.0);
    }
}
