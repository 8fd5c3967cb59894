//! Levenberg-Marquardt optimization of the sliding-window scan states
//! against landmark eigenvalue residuals and scan-to-scan continuity.
//!
//! Each window state contributes a 12-dof block (δθ, δp, δv, δω); rotation
//! increments are applied on the right and retracted through the exponential
//! map, so iterates stay on the manifold. Landmark residuals are
//! Huber-robustified through iteratively reweighted least squares; raw points
//! are re-compensated from the current state estimates on every evaluation.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};

use crate::ba_core::moments::landmark_covariance;
use crate::ba_core::residuals::{
    continuity_residual, edge_residual, huber, huber_weight, plane_residual, ContinuityWeights,
};
use crate::ba_core::window::SlidingWindow;
use crate::feature_extract::FeatureCategory;
use crate::geom::{exp_so3_raw, right_jacobian, right_jacobian_inv, skew, RotationMatrix};
use crate::landmark_map::LandmarkMap;
use crate::motion_model::MotionState;

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub weights: ContinuityWeights,
    /// Minimum combined point count to evaluate a plane residual.
    pub min_plane_eval: usize,
    /// Minimum combined point count to evaluate an edge residual.
    pub min_edge_eval: usize,
    /// Weight each landmark residual by sqrt of its point count.
    pub scale_by_count: bool,
    /// Central-difference step for the fallback jacobian.
    pub fd_step: f64,
    /// Stop when the relative cost decrease drops below this.
    pub min_relative_decrease: f64,
    /// Treat costs below this as already converged (numerical noise floor).
    pub cost_floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 15,
            initial_damping: 1e-4,
            weights: ContinuityWeights::default(),
            min_plane_eval: 5,
            min_edge_eval: 4,
            scale_by_count: true,
            fd_step: 1e-6,
            min_relative_decrease: 1e-6,
            cost_floor: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    /// Total robust cost after each accepted iteration, starting with the
    /// initial cost.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    /// False when the iteration cap was reached while still improving.
    pub converged: bool,
}

/// One landmark's optimization view: its marginal moments plus the raw
/// window observations, flattened as (window entry index, raw position,
/// offset from that scan's start).
struct LandmarkProblem {
    id: u64,
    category: FeatureCategory,
    marginal: crate::ba_core::moments::MomentAccumulator,
    points: Vec<(usize, Vector3<f64>, f64)>,
    total_count: usize,
    scale: f64,
}

const BLOCK: usize = 12;

fn gather_landmarks(
    map: &LandmarkMap,
    window: &SlidingWindow,
    cfg: &SolverConfig,
) -> Vec<LandmarkProblem> {
    let mut problems = Vec::new();
    for lm in map.landmarks.values() {
        let mut points = Vec::new();
        for (e, entry) in window.entries.iter().enumerate() {
            if let Some(obs) = lm.points_by_scan.get(&entry.scan_index) {
                for o in obs {
                    points.push((e, o.raw_position, o.timestamp - entry.state.start_time));
                }
            }
        }
        if points.is_empty() {
            continue;
        }
        let total = lm.marginal.count + points.len();
        let min = match lm.category {
            FeatureCategory::Plane => cfg.min_plane_eval,
            FeatureCategory::Edge => cfg.min_edge_eval,
        };
        if total < min {
            continue;
        }
        problems.push(LandmarkProblem {
            id: lm.id,
            category: lm.category,
            marginal: lm.marginal,
            points,
            total_count: total,
            scale: if cfg.scale_by_count {
                (total as f64).sqrt()
            } else {
                1.0
            },
        });
    }
    problems
}

fn world_points(problem: &LandmarkProblem, states: &[MotionState]) -> Vec<Vector3<f64>> {
    problem
        .points
        .iter()
        .map(|&(e, raw, dt)| {
            let s = &states[e];
            let comp = exp_so3_raw(&(dt * s.angular_velocity)) * raw + dt * s.linear_velocity;
            s.transform.apply(&comp)
        })
        .collect()
}

/// Scaled residual of one landmark at the given states, if evaluable.
fn landmark_residual(problem: &LandmarkProblem, states: &[MotionState]) -> Option<f64> {
    let pts = world_points(problem, states);
    let cov = landmark_covariance(&problem.marginal, &pts)?;
    let eps = match problem.category {
        FeatureCategory::Plane => plane_residual(&cov),
        FeatureCategory::Edge => edge_residual(&cov),
    };
    Some(problem.scale * eps)
}

/// World point and its 3x12 derivative with respect to the owning state
/// block (δθ, δp, δv, δω).
fn point_jacobian(state: &MotionState, raw: &Vector3<f64>, dt: f64) -> SMatrix<f64, 3, 12> {
    let rot_dt = exp_so3_raw(&(dt * state.angular_velocity));
    let comp = rot_dt * raw + dt * state.linear_velocity;
    let r = state.transform.rotation.matrix();
    let mut j = SMatrix::<f64, 3, 12>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r * skew(&comp)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, 6).copy_from(&(dt * r));
    j.fixed_view_mut::<3, 3>(0, 9)
        .copy_from(&(-(r * rot_dt) * skew(raw) * right_jacobian(&(dt * state.angular_velocity)) * dt));
    j
}

/// Analytic row of one landmark's scaled residual, or `None` when the
/// eigenvalue structure is too degenerate for the eigen-perturbation formula.
fn landmark_jacobian_analytic(
    problem: &LandmarkProblem,
    states: &[MotionState],
    n_vars: usize,
) -> Option<(f64, DVector<f64>)> {
    let pts = world_points(problem, states);
    let cov = landmark_covariance(&problem.marginal, &pts)?;
    let trace = cov.eigenvalues.iter().sum::<f64>().max(1e-300);
    let eps = match problem.category {
        FeatureCategory::Plane => {
            if cov.eigenvalues[1] - cov.eigenvalues[0] < 1e-8 * trace {
                return None;
            }
            plane_residual(&cov)
        }
        FeatureCategory::Edge => {
            if cov.eigenvalues[2] - cov.eigenvalues[1] < 1e-8 * trace {
                return None;
            }
            edge_residual(&cov)
        }
    };
    let mut row = DVector::zeros(n_vars);
    if eps <= 0.0 {
        return Some((0.0, row));
    }
    let n = problem.total_count as f64;
    let dirs: &[usize] = match problem.category {
        FeatureCategory::Plane => &[0],
        FeatureCategory::Edge => &[0, 1],
    };
    for (k, &(e, raw, dt)) in problem.points.iter().enumerate() {
        let pw = pts[k];
        // d(eps)/d(p_k) from the eigenvalue perturbation
        // dλ_i/dp = (2/N) u_i u_iᵀ (p − mean), chained through sqrt.
        let mut deps = Vector3::zeros();
        for &i in dirs {
            let u = cov.eigenvectors.column(i).into_owned();
            deps += u * (u.dot(&(pw - cov.mean)) / (n * eps));
        }
        let jp = point_jacobian(&states[e], &raw, dt);
        let contrib = deps.transpose() * jp;
        for c in 0..BLOCK {
            row[e * BLOCK + c] += problem.scale * contrib[(0, c)];
        }
    }
    Some((problem.scale * eps, row))
}

fn retract_state(state: &MotionState, d: &[f64]) -> MotionState {
    let dtheta = Vector3::new(d[0], d[1], d[2]);
    let rot = state.transform.rotation.matrix() * exp_so3_raw(&dtheta);
    MotionState {
        transform: crate::geom::RigidTransform::new(
            RotationMatrix::from_matrix_unchecked(rot),
            state.transform.translation + Vector3::new(d[3], d[4], d[5]),
        ),
        linear_velocity: state.linear_velocity + Vector3::new(d[6], d[7], d[8]),
        angular_velocity: state.angular_velocity + Vector3::new(d[9], d[10], d[11]),
        start_time: state.start_time,
    }
}

/// Central-difference row for one landmark over every involved state block.
fn landmark_jacobian_fd(
    problem: &LandmarkProblem,
    states: &[MotionState],
    n_vars: usize,
    h: f64,
) -> Option<(f64, DVector<f64>)> {
    let base = landmark_residual(problem, states)?;
    let mut row = DVector::zeros(n_vars);
    let mut involved: Vec<usize> = problem.points.iter().map(|&(e, _, _)| e).collect();
    involved.sort_unstable();
    involved.dedup();
    let mut scratch = states.to_vec();
    for &e in &involved {
        for c in 0..BLOCK {
            let mut d = [0.0; BLOCK];
            d[c] = h;
            scratch[e] = retract_state(&states[e], &d);
            let plus = landmark_residual(problem, &scratch)?;
            d[c] = -h;
            scratch[e] = retract_state(&states[e], &d);
            let minus = landmark_residual(problem, &scratch)?;
            scratch[e] = states[e];
            row[e * BLOCK + c] = (plus - minus) / (2.0 * h);
        }
    }
    Some((base, row))
}

/// Analytic jacobians of the continuity residual with respect to the two
/// state blocks. Returns (residual, d/d(block a), d/d(block b)).
pub(crate) fn continuity_jacobians(
    a: &MotionState,
    b: &MotionState,
    w: &ContinuityWeights,
) -> (SMatrix<f64, 12, 1>, SMatrix<f64, 12, 12>, SMatrix<f64, 12, 12>) {
    let dt = b.start_time - a.start_time;
    let ra = a.transform.rotation.matrix();
    let rb = b.transform.rotation.matrix();
    let rot_dt = exp_so3_raw(&(dt * a.angular_velocity));
    let r = continuity_residual(a, b, w);
    let r0 = Vector3::new(r[3], r[4], r[5]) / w.rotation.max(1e-300);
    let jr_inv = right_jacobian_inv(&r0);

    let mut ja = SMatrix::<f64, 12, 12>::zeros();
    let mut jb = SMatrix::<f64, 12, 12>::zeros();

    // Translation block.
    ja.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-w.position * ra * skew(&(dt * a.linear_velocity))));
    ja.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(w.position * Matrix3::identity()));
    ja.fixed_view_mut::<3, 3>(0, 6)
        .copy_from(&(w.position * dt * ra));
    jb.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-w.position * Matrix3::identity()));

    // Rotation block: r = log(Ra exp(dt ω̂a) Rbᵀ).
    ja.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(w.rotation * jr_inv * rb * rot_dt.transpose()));
    ja.fixed_view_mut::<3, 3>(3, 9)
        .copy_from(&(w.rotation * jr_inv * rb * right_jacobian(&(dt * a.angular_velocity)) * dt));
    jb.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-w.rotation * jr_inv * rb));

    // World angular velocity block.
    ja.fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&(-w.angular * ra * skew(&a.angular_velocity)));
    ja.fixed_view_mut::<3, 3>(6, 9).copy_from(&(w.angular * ra));
    jb.fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&(w.angular * rb * skew(&b.angular_velocity)));
    jb.fixed_view_mut::<3, 3>(6, 9).copy_from(&(-w.angular * rb));

    // World linear velocity block.
    ja.fixed_view_mut::<3, 3>(9, 0)
        .copy_from(&(-w.velocity * ra * skew(&a.linear_velocity)));
    ja.fixed_view_mut::<3, 3>(9, 6).copy_from(&(w.velocity * ra));
    jb.fixed_view_mut::<3, 3>(9, 0)
        .copy_from(&(w.velocity * rb * skew(&b.linear_velocity)));
    jb.fixed_view_mut::<3, 3>(9, 6).copy_from(&(-w.velocity * rb));

    (r, ja, jb)
}

fn total_cost(
    problems: &[LandmarkProblem],
    states: &[MotionState],
    boundary: Option<&MotionState>,
    cfg: &SolverConfig,
) -> f64 {
    let mut cost = 0.0;
    for p in problems {
        if let Some(r) = landmark_residual(p, states) {
            cost += huber(r * r).expect("squared residual is non-negative");
        }
    }
    if let Some(prev) = boundary {
        cost += continuity_residual(prev, &states[0], &cfg.weights).norm_squared();
    }
    for pair in states.windows(2) {
        cost += continuity_residual(&pair[0], &pair[1], &cfg.weights).norm_squared();
    }
    cost
}

/// Robust cost of the window evaluated at `states` (one per window entry,
/// in order), using exactly the terms `optimize_window` minimizes.
pub fn window_cost(
    map: &LandmarkMap,
    window: &SlidingWindow,
    states: &[MotionState],
    cfg: &SolverConfig,
) -> f64 {
    let problems = gather_landmarks(map, window, cfg);
    let boundary: Option<MotionState> = window
        .fixed_poses
        .iter()
        .filter(|(k, _)| !window.entries.is_empty() && **k < window.entries[0].scan_index)
        .next_back()
        .map(|(_, s)| *s);
    total_cost(&problems, states, boundary.as_ref(), cfg)
}

/// Per-landmark robust cost terms at `states`, for diagnostics: (category,
/// combined point count, number of window scans involved, cost).
pub fn landmark_cost_breakdown(
    map: &LandmarkMap,
    window: &SlidingWindow,
    states: &[MotionState],
    cfg: &SolverConfig,
) -> Vec<(u64, FeatureCategory, usize, usize, f64)> {
    gather_landmarks(map, window, cfg)
        .iter()
        .filter_map(|p| {
            let r = landmark_residual(p, states)?;
            let mut scans: Vec<usize> = p.points.iter().map(|&(e, _, _)| e).collect();
            scans.sort_unstable();
            scans.dedup();
            Some((
                p.id,
                p.category,
                p.total_count,
                scans.len(),
                huber(r * r).expect("squared residual is non-negative"),
            ))
        })
        .collect()
}

/// Jointly optimizes the in-window states. Fixed poses and marginal
/// accumulators are read-only; the gauge is pinned by freezing the oldest
/// window pose until any scan has been marginalized.
pub fn optimize_window(
    map: &LandmarkMap,
    window: &mut SlidingWindow,
    cfg: &SolverConfig,
) -> OptimizeOutcome {
    let n_states = window.entries.len();
    let mut states: Vec<MotionState> = window.entries.iter().map(|e| e.state).collect();
    let problems = gather_landmarks(map, window, cfg);

    // Continuity against the most recently fixed scan, when one exists.
    let boundary: Option<MotionState> = window
        .fixed_poses
        .iter()
        .filter(|(k, _)| n_states > 0 && **k < window.entries[0].scan_index)
        .next_back()
        .map(|(_, s)| *s);

    let mut outcome = OptimizeOutcome {
        cost_trace: Vec::new(),
        iterations: 0,
        converged: true,
    };
    if n_states < 2 {
        if n_states == 1 {
            outcome
                .cost_trace
                .push(total_cost(&problems, &states, boundary.as_ref(), cfg));
        }
        return outcome;
    }

    let n_vars = n_states * BLOCK;
    // Without marginalized history nothing pins the world frame; freeze the
    // oldest pose (its velocities stay free so its scan can still deskew).
    let masked: Vec<usize> = if window.fixed_poses.is_empty() {
        (0..6).collect()
    } else {
        Vec::new()
    };

    let mut cost = total_cost(&problems, &states, boundary.as_ref(), cfg);
    outcome.cost_trace.push(cost);
    if cost < cfg.cost_floor {
        return outcome;
    }
    let mut damping = cfg.initial_damping;

    for _ in 0..cfg.max_iterations {
        outcome.iterations += 1;
        let mut h = DMatrix::<f64>::zeros(n_vars, n_vars);
        let mut g = DVector::<f64>::zeros(n_vars);

        for p in &problems {
            let Some((r, row)) = landmark_jacobian_analytic(p, &states, n_vars)
                .or_else(|| landmark_jacobian_fd(p, &states, n_vars, cfg.fd_step))
            else {
                continue;
            };
            let w = huber_weight(r * r);
            h.syger(w, &row, &row, 1.0);
            g.axpy(w * r, &row, 1.0);
        }

        let add_pair =
            |h: &mut DMatrix<f64>, g: &mut DVector<f64>, ia: Option<usize>, ib: usize| {
                let a_state = match ia {
                    Some(i) => states[i],
                    None => *boundary.as_ref().unwrap(),
                };
                let (r, ja, jb) = continuity_jacobians(&a_state, &states[ib], &cfg.weights);
                let blocks: Vec<(usize, SMatrix<f64, 12, 12>)> = match ia {
                    Some(i) => vec![(i, ja), (ib, jb)],
                    None => vec![(ib, jb)],
                };
                for &(bi, ref jm) in &blocks {
                    for &(bj, ref jn) in &blocks {
                        let hij = jm.transpose() * *jn;
                        for r_ in 0..BLOCK {
                            for c_ in 0..BLOCK {
                                h[(bi * BLOCK + r_, bj * BLOCK + c_)] += hij[(r_, c_)];
                            }
                        }
                    }
                    let gi = jm.transpose() * r;
                    for r_ in 0..BLOCK {
                        g[bi * BLOCK + r_] += gi[r_];
                    }
                }
            };
        if boundary.is_some() {
            add_pair(&mut h, &mut g, None, 0);
        }
        for i in 0..n_states - 1 {
            add_pair(&mut h, &mut g, Some(i), i + 1);
        }

        for &m in &masked {
            for k in 0..n_vars {
                h[(m, k)] = 0.0;
                h[(k, m)] = 0.0;
            }
            h[(m, m)] = 1.0;
            g[m] = 0.0;
        }

        // Damped step, retrying with heavier damping on failure/rejection.
        let mut accepted = false;
        for _ in 0..12 {
            let mut damped = h.clone();
            for k in 0..n_vars {
                damped[(k, k)] += damping;
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-&g))) else {
                damping *= 10.0;
                continue;
            };
            let candidate: Vec<MotionState> = states
                .iter()
                .enumerate()
                .map(|(i, s)| retract_state(s, step.rows(i * BLOCK, BLOCK).as_slice()))
                .collect();
            let new_cost = total_cost(&problems, &candidate, boundary.as_ref(), cfg);
            if new_cost.is_finite() && new_cost < cost {
                let rel = (cost - new_cost) / cost.max(1e-300);
                states = candidate;
                cost = new_cost;
                outcome.cost_trace.push(cost);
                damping = (damping / 3.0).max(1e-12);
                accepted = true;
                if rel < cfg.min_relative_decrease || cost < cfg.cost_floor {
                    for (entry, s) in window.entries.iter_mut().zip(&states) {
                        entry.state = *s;
                    }
                    return outcome;
                }
                break;
            }
            damping *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    outcome.converged = outcome.iterations < cfg.max_iterations
        || outcome
            .cost_trace
            .last()
            .zip(outcome.cost_trace.iter().rev().nth(1))
            .map_or(true, |(a, b)| (b - a) / b.max(1e-300) < cfg.min_relative_decrease);
    for (entry, s) in window.entries.iter_mut().zip(&states) {
        entry.state = *s;
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ba_core::moments::MomentAccumulator;
    use crate::feature_extract::{FeatureCategory, FeatureCluster, FeaturePoint};
    use crate::geom::{exp_so3, log_so3, RigidTransform, RotationVector};
    use crate::landmark_map::LandmarkConfig;
    use crate::motion_model::predict_next_state;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng, t: f64) -> MotionState {
        MotionState {
            transform: RigidTransform::new(
                exp_so3(&RotationVector(Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )))
                .unwrap(),
                Vector3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                ),
            ),
            linear_velocity: Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ),
            angular_velocity: Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
            start_time: t,
        }
    }

    #[test]
    fn continuity_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = ContinuityWeights::default();
        let h = 1e-6;
        for _ in 0..50 {
            let a = random_state(&mut rng, 0.0);
            let b = random_state(&mut rng, 0.1);
            let (_, ja, jb) = continuity_jacobians(&a, &b, &w);
            for c in 0..BLOCK {
                let mut d = [0.0; BLOCK];
                d[c] = h;
                let ap = retract_state(&a, &d);
                d[c] = -h;
                let am = retract_state(&a, &d);
                let fd_a =
                    (continuity_residual(&ap, &b, &w) - continuity_residual(&am, &b, &w)) / (2.0 * h);
                d[c] = h;
                let bp = retract_state(&b, &d);
                d[c] = -h;
                let bm = retract_state(&b, &d);
                let fd_b =
                    (continuity_residual(&a, &bp, &w) - continuity_residual(&a, &bm, &w)) / (2.0 * h);
                for r in 0..9 {
                    let scale = 1.0 + fd_a[r].abs().max(fd_b[r].abs());
                    assert!(
                        (ja[(r, c)] - fd_a[r]).abs() / scale < 1e-4,
                        "ja mismatch r={r} c={c}: {} vs {}",
                        ja[(r, c)],
                        fd_a[r]
                    );
                    assert!(
                        (jb[(r, c)] - fd_b[r]).abs() / scale < 1e-4,
                        "jb mismatch r={r} c={c}: {} vs {}",
                        jb[(r, c)],
                        fd_b[r]
                    );
                }
            }
        }
    }

    fn make_problem(
        rng: &mut ChaCha8Rng,
        category: FeatureCategory,
        n_states: usize,
    ) -> (LandmarkProblem, Vec<MotionState>) {
        let states: Vec<MotionState> = (0..n_states)
            .map(|i| random_state(rng, i as f64 * 0.1))
            .collect();
        let n_pts = rng.gen_range(8..20);
        let points: Vec<(usize, Vector3<f64>, f64)> = (0..n_pts)
            .map(|_| {
                (
                    rng.gen_range(0..n_states),
                    Vector3::new(
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                    ),
                    rng.gen_range(0.0..0.1),
                )
            })
            .collect();
        let mut marginal = MomentAccumulator::new();
        for _ in 0..rng.gen_range(0..10) {
            marginal.add_point(&Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ));
        }
        let total = marginal.count + points.len();
        (
            LandmarkProblem {
                category,
                marginal,
                points,
                total_count: total,
                scale: (total as f64).sqrt(),
            },
            states,
        )
    }

    #[test]
    fn landmark_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut tested = 0;
        while tested < 100 {
            let category = if tested % 2 == 0 {
                FeatureCategory::Plane
            } else {
                FeatureCategory::Edge
            };
            let (p, states) = make_problem(&mut rng, category, 3);
            let n_vars = states.len() * BLOCK;
            let Some((r_a, row_a)) = landmark_jacobian_analytic(&p, &states, n_vars) else {
                continue; // degenerate draw; fallback path covered elsewhere
            };
            let (r_f, row_f) = landmark_jacobian_fd(&p, &states, n_vars, 1e-6).unwrap();
            assert!((r_a - r_f).abs() < 1e-9);
            for k in 0..n_vars {
                let scale = 1.0 + row_f[k].abs();
                assert!(
                    (row_a[k] - row_f[k]).abs() / scale < 1e-4,
                    "k={k}: {} vs {}",
                    row_a[k],
                    row_f[k]
                );
            }
            tested += 1;
        }
    }

    #[test]
    fn jacobian_zero_for_uninvolved_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut p, states) = make_problem(&mut rng, FeatureCategory::Plane, 3);
        // Restrict every point to block 1; blocks 0 and 2 must get zeros.
        for pt in &mut p.points {
            pt.0 = 1;
        }
        let n_vars = states.len() * BLOCK;
        let (_, row) = landmark_jacobian_analytic(&p, &states, n_vars)
            .or_else(|| landmark_jacobian_fd(&p, &states, n_vars, 1e-6))
            .unwrap();
        for k in 0..BLOCK {
            assert_eq!(row[k], 0.0);
            assert_eq!(row[2 * BLOCK + k], 0.0);
        }
    }

    /// Builds a map and window whose landmarks are perfectly consistent with
    /// the given ground-truth states: world points are sampled on ideal
    /// planes/edges and converted to raw per-scan observations.
    fn consistent_scene(
        states: &[MotionState],
    ) -> (LandmarkMap, SlidingWindow) {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut map = LandmarkMap::new();
        let cfg = LandmarkConfig::default();
        let mut window = SlidingWindow::new(states.len().max(4));

        // Three planes and two edges, all visible to every scan.
        let mut world_sets: Vec<(FeatureCategory, Vec<Vector3<f64>>)> = Vec::new();
        for (normal, offset) in [
            (Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, -1.5)),
            (Vector3::new(0.0, 1.0, 0.0), Vector3::new(0.0, 6.0, 0.0)),
            (Vector3::new(1.0, 0.0, 0.0), Vector3::new(7.0, 0.0, 0.0)),
        ] {
            let u = normal.cross(&Vector3::new(0.3, 0.7, 0.64)).normalize();
            let v = normal.cross(&u);
            let pts: Vec<Vector3<f64>> = (0..12)
                .map(|_| {
                    offset
                        + u * rng.gen_range(-1.2..1.2)
                        + v * rng.gen_range(-1.2..1.2)
                })
                .collect();
            world_sets.push((FeatureCategory::Plane, pts));
        }
        for (dir, base) in [
            (Vector3::new(0.0, 0.0, 1.0), Vector3::new(3.0, -4.0, 0.0)),
            (Vector3::new(0.2, 0.1, 0.97), Vector3::new(-5.0, 2.0, 0.0)),
        ] {
            let d = dir.normalize();
            let pts: Vec<Vector3<f64>> = (0..10)
                .map(|_| base + d * rng.gen_range(-1.4..1.4))
                .collect();
            world_sets.push((FeatureCategory::Edge, pts));
        }

        for (scan, state) in states.iter().enumerate() {
            let mut clusters = Vec::new();
            for (category, pts) in &world_sets {
                let members: Vec<FeaturePoint> = pts
                    .iter()
                    .enumerate()
                    .map(|(i, pw)| {
                        let dt = 0.001 * (i % 10) as f64;
                        let comp = state.transform.inverse_apply(pw);
                        // Invert the compensation so the raw point maps back
                        // onto the world point under this exact state.
                        let raw = exp_so3_raw(&(-dt * state.angular_velocity))
                            * (comp - dt * state.linear_velocity);
                        FeaturePoint {
                            raw_position: raw,
                            compensated_position: comp,
                            timestamp: state.start_time + dt,
                            cluster_id: 0,
                            category: *category,
                        }
                    })
                    .collect();
                let centroid = members
                    .iter()
                    .map(|m| m.compensated_position)
                    .sum::<Vector3<f64>>()
                    / members.len() as f64;
                clusters.push(FeatureCluster {
                    cluster_id: 0,
                    category: *category,
                    members,
                    centroid,
                });
            }
            map.associate(&clusters, state, scan, &cfg);
            window.push(scan, *state);
        }
        (map, window)
    }

    fn constant_twist_states(n: usize) -> Vec<MotionState> {
        let mut s = MotionState {
            linear_velocity: Vector3::new(0.8, 0.1, 0.0),
            angular_velocity: Vector3::new(0.0, 0.0, 0.15),
            ..MotionState::identity(0.0)
        };
        let mut out = vec![s];
        for i in 1..n {
            s = predict_next_state(&s, i as f64 * 0.1).unwrap();
            out.push(s);
        }
        out
    }

    #[test]
    fn consistent_input_is_a_fixed_point() {
        let states = constant_twist_states(4);
        let (map, mut window) = consistent_scene(&states);
        let before = window.entries.clone();
        let cfg = SolverConfig::default();
        let outcome = optimize_window(&map, &mut window, &cfg);
        assert!(outcome.cost_trace[0] < 1e-10);
        assert!(outcome.iterations <= 2);
        for (b, a) in before.iter().zip(&window.entries) {
            assert!((b.state.transform.translation - a.state.transform.translation).norm() < 1e-8);
            assert!(
                (b.state.transform.rotation.matrix() - a.state.transform.rotation.matrix()).norm()
                    < 1e-8
            );
        }
    }

    #[test]
    fn perturbed_pose_is_recovered() {
        let states = constant_twist_states(4);
        let (map, mut window) = consistent_scene(&states);
        let truth = window.entries[2].state;
        window.entries[2].state.transform.translation += Vector3::new(0.12, -0.15, 0.08);
        let rot_nudge = exp_so3_raw(&Vector3::new(0.02, -0.01, 0.03));
        window.entries[2].state.transform = RigidTransform::new(
            RotationMatrix::from_matrix_unchecked(
                window.entries[2].state.transform.rotation.matrix() * rot_nudge,
            ),
            window.entries[2].state.transform.translation,
        );
        let cfg = SolverConfig::default();
        let outcome = optimize_window(&map, &mut window, &cfg);
        let got = window.entries[2].state;
        assert!(
            (got.transform.translation - truth.transform.translation).norm() < 1e-3,
            "translation error {}",
            (got.transform.translation - truth.transform.translation).norm()
        );
        let rot_err = log_so3(&RotationMatrix::from_matrix_unchecked(
            got.transform.rotation.matrix() * truth.transform.rotation.matrix().transpose(),
        ))
        .unwrap()
        .0
        .norm();
        assert!(rot_err < 2e-3, "rotation error {rot_err}");
        assert!(*outcome.cost_trace.last().unwrap() < 1e-6);
    }

    #[test]
    fn single_plane_perturbation_flattens() {
        // One plane seen by 4 scans; a 0.2 m out-of-plane pose error must be
        // optimized back to a near-zero plane residual.
        let states: Vec<MotionState> = (0..4)
            .map(|i| MotionState::identity(i as f64 * 0.1))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut map = LandmarkMap::new();
        let lm_cfg = LandmarkConfig::default();
        let mut window = SlidingWindow::new(4);
        for (scan, state) in states.iter().enumerate() {
            let members: Vec<FeaturePoint> = (0..14)
                .map(|_| {
                    let p = Vector3::new(
                        rng.gen_range(-1.5..1.5),
                        rng.gen_range(-1.5..1.5),
                        -1.2,
                    );
                    FeaturePoint {
                        raw_position: p,
                        compensated_position: p,
                        timestamp: state.start_time,
                        cluster_id: 0,
                        category: FeatureCategory::Plane,
                    }
                })
                .collect();
            let centroid = members
                .iter()
                .map(|m| m.compensated_position)
                .sum::<Vector3<f64>>()
                / members.len() as f64;
            map.associate(
                &[FeatureCluster {
                    cluster_id: 0,
                    category: FeatureCategory::Plane,
                    members,
                    centroid,
                }],
                state,
                scan,
                &lm_cfg,
            );
            window.push(scan, *state);
        }
        window.entries[2].state.transform.translation += Vector3::new(0.0, 0.0, 0.2);
        let cfg = SolverConfig::default();
        optimize_window(&map, &mut window, &cfg);
        let problems = gather_landmarks(&map, &window, &cfg);
        let states_now: Vec<MotionState> = window.entries.iter().map(|e| e.state).collect();
        let eps = landmark_residual(&problems[0], &states_now).unwrap() / problems[0].scale;
        assert!(eps < 1e-4, "plane residual {eps}");
        assert!(
            (window.entries[2].state.transform.translation.z).abs() < 1e-3,
            "z error {}",
            window.entries[2].state.transform.translation.z
        );
    }

    #[test]
    fn accepted_costs_are_non_increasing() {
        let states = constant_twist_states(4);
        let (map, mut window) = consistent_scene(&states);
        // Uneven perturbations so the initial cost is genuinely nonzero.
        for (i, e) in window.entries.iter_mut().enumerate().skip(1) {
            let s = 0.04 * i as f64;
            e.state.transform.translation += Vector3::new(s, -s, 0.5 * s);
        }
        let cfg = SolverConfig::default();
        let outcome = optimize_window(&map, &mut window, &cfg);
        for pair in outcome.cost_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-15);
        }
        assert!(outcome.cost_trace.len() >= 2);
    }

    #[test]
    fn fixed_data_is_untouched() {
        let states = constant_twist_states(5);
        let (mut map, mut window) = consistent_scene(&states[..5]);
        // Marginalize the oldest so fixed_poses and marginal moments exist.
        window.marginalize_oldest(&mut map);
        let poses_before = window.fixed_poses.clone();
        let marg_before: Vec<_> = map.landmarks.values().map(|l| l.marginal).collect();
        window.entries[1].state.transform.translation += Vector3::new(0.03, 0.0, -0.02);
        let cfg = SolverConfig::default();
        optimize_window(&map, &mut window, &cfg);
        let marg_after: Vec<_> = map.landmarks.values().map(|l| l.marginal).collect();
        assert_eq!(marg_before, marg_after);
        assert_eq!(poses_before.len(), window.fixed_poses.len());
        for (k, v) in &poses_before {
            let w = &window.fixed_poses[k];
            assert_eq!(v.transform.translation, w.transform.translation);
            assert_eq!(
                v.transform.rotation.matrix(),
                w.transform.rotation.matrix()
            );
        }
        assert!(window.entries.len() <= window.capacity);
    }

    #[test]
    fn single_state_window_is_a_noop() {
        let states = constant_twist_states(1);
        let (map, mut window) = consistent_scene(&states);
        let before = window.entries[0].state;
        let outcome = optimize_window(&map, &mut window, &SolverConfig::default());
        assert_eq!(outcome.iterations, 0);
        assert_eq!(
            before.transform.translation,
            window.entries[0].state.transform.translation
        );
    }
}
