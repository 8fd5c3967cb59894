//! Point-cloud moment accumulators and the landmark covariance built from
//! them.
//!
//! A landmark's covariance over all of its observed points decomposes into a
//! marginal part (scans whose poses are fixed) and a window part that is
//! recomputed every solver iteration. Both parts are plain sums of `p pᵀ` and
//! `p`, so folding a scan into the marginal side is exact, not an
//! approximation.

use nalgebra::{Matrix3, Vector3};

/// Running sums `O = Σ p pᵀ`, `S = Σ p` over a set of 3D points.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MomentAccumulator {
    pub second_moment: Matrix3<f64>,
    pub first_moment: Vector3<f64>,
    pub count: usize,
}

impl MomentAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_point(&mut self, p: &Vector3<f64>) {
        self.second_moment += p * p.transpose();
        self.first_moment += p;
        self.count += 1;
    }

    pub fn add(&mut self, other: &MomentAccumulator) {
        self.second_moment += other.second_moment;
        self.first_moment += other.first_moment;
        self.count += other.count;
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Sums the moments of a list of world-frame points.
pub fn scan_moments(points: &[Vector3<f64>]) -> MomentAccumulator {
    let mut acc = MomentAccumulator::new();
    for p in points {
        acc.add_point(p);
    }
    acc
}

/// Covariance of a landmark's point set with its eigen-decomposition.
///
/// Eigenvalues are sorted ascending; `eigenvectors` columns correspond to
/// them in order, so column 0 is the plane normal direction and column 2 the
/// edge direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkCovariance {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    /// Ascending: `eigenvalues[0] <= eigenvalues[1] <= eigenvalues[2]`.
    pub eigenvalues: Vector3<f64>,
    pub eigenvectors: Matrix3<f64>,
    pub count: usize,
}

/// Combines the marginal accumulator with the current window points:
/// `Cov = (O_marg + O_win)/N − (S_marg + S_win)(S_marg + S_win)ᵀ/N²`.
///
/// Returns `None` when the combined count is zero.
pub fn landmark_covariance(
    marginal: &MomentAccumulator,
    window_points: &[Vector3<f64>],
) -> Option<LandmarkCovariance> {
    let mut total = *marginal;
    for p in window_points {
        total.add_point(p);
    }
    covariance_of(&total)
}

/// Covariance and eigen-decomposition of a single accumulator.
pub fn covariance_of(total: &MomentAccumulator) -> Option<LandmarkCovariance> {
    if total.count == 0 {
        return None;
    }
    let n = total.count as f64;
    let mean = total.first_moment / n;
    let cov_raw = total.second_moment / n - mean * mean.transpose();
    // Re-symmetrize so the eigen solver sees an exactly symmetric input.
    let cov = (cov_raw + cov_raw.transpose()) * 0.5;
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = Vector3::new(
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    let eigenvectors = Matrix3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    Some(LandmarkCovariance {
        mean,
        cov,
        eigenvalues,
        eigenvectors,
        count: total.count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                )
            })
            .collect()
    }

    /// Textbook two-pass covariance: mean first, then averaged outer products
    /// of the centered points.
    fn two_pass_covariance(points: &[Vector3<f64>]) -> (Vector3<f64>, Matrix3<f64>) {
        let n = points.len() as f64;
        let mean = points.iter().sum::<Vector3<f64>>() / n;
        let mut cov = Matrix3::zeros();
        for p in points {
            let d = p - mean;
            cov += d * d.transpose();
        }
        (mean, cov / n)
    }

    #[test]
    fn empty_and_single_point() {
        let acc = scan_moments(&[]);
        assert_eq!(acc.count, 0);
        assert_eq!(acc.second_moment, Matrix3::zeros());
        assert!(landmark_covariance(&acc, &[]).is_none());

        let p = Vector3::new(1.0, 0.0, 0.0);
        let acc = scan_moments(&[p]);
        assert_eq!(acc.first_moment, p);
        assert_eq!(acc.second_moment, p * p.transpose());
        let c = landmark_covariance(&acc, &[]).unwrap();
        assert!(c.cov.norm() < 1e-15);
    }

    #[test]
    fn matches_two_pass_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points = random_points(&mut rng, 1000);
        let acc = scan_moments(&points);
        let c = covariance_of(&acc).unwrap();
        let (mean, cov) = two_pass_covariance(&points);
        assert!((c.mean - mean).norm() < 1e-12);
        assert!((c.cov - cov).norm() / cov.norm() < 1e-10);
    }

    #[test]
    fn split_equals_unsplit() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let points = random_points(&mut rng, 120);
            let cut = rng.gen_range(0..=points.len());
            let marg = scan_moments(&points[..cut]);
            let split = landmark_covariance(&marg, &points[cut..]).unwrap();
            let whole = landmark_covariance(&MomentAccumulator::new(), &points).unwrap();
            assert!((split.cov - whole.cov).norm() <= 1e-10 * (1.0 + whole.cov.norm()));
            assert!((split.mean - whole.mean).norm() < 1e-10);
        }
    }

    #[test]
    fn eigenvalues_sorted_and_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let points = random_points(&mut rng, 40);
            let c = landmark_covariance(&MomentAccumulator::new(), &points).unwrap();
            assert!(c.eigenvalues[0] <= c.eigenvalues[1]);
            assert!(c.eigenvalues[1] <= c.eigenvalues[2]);
            assert!(c.eigenvalues[0] >= -1e-9);
            for i in 0..3 {
                let u = c.eigenvectors.column(i);
                let resid = c.cov * u - c.eigenvalues[i] * u;
                assert!(resid.norm() < 1e-8 * (1.0 + c.cov.norm()));
            }
            // Orthonormality.
            let gram = c.eigenvectors.transpose() * c.eigenvectors;
            assert!((gram - Matrix3::identity()).norm() < 1e-9);
        }
    }

    #[test]
    fn identical_points_have_zero_covariance() {
        let p = Vector3::new(2.0, -1.0, 0.5);
        let c = landmark_covariance(&MomentAccumulator::new(), &[p; 9]).unwrap();
        assert!(c.cov.norm() < 1e-12);
        assert!(c.eigenvalues.amax() < 1e-12);
    }

    #[test]
    fn unit_cube_corners() {
        let mut points = Vec::new();
        for &x in &[-0.5, 0.5] {
            for &y in &[-0.5, 0.5] {
                for &z in &[-0.5, 0.5] {
                    points.push(Vector3::new(x, y, z));
                }
            }
        }
        let c = landmark_covariance(&MomentAccumulator::new(), &points).unwrap();
        assert!((c.cov - Matrix3::identity() * 0.25).norm() < 1e-12);
    }
}
