//! Global landmark map: construction, cross-scan association, and the
//! maintenance policy that decouples landmark lifetime from the sliding
//! window.
//!
//! A landmark is a ball (center, radius) of one feature category. Feature
//! points of a new scan are tested point-by-point against landmark centers
//! projected into the scan frame; untracked points spawn new landmarks.
//! Lifetime is governed by an observation count, a center-drift check after
//! optimization, and pruning of persistently small plane landmarks.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::Vector3;

use crate::ba_core::moments::MomentAccumulator;
use crate::feature_extract::{FeatureCategory, FeatureCluster, FeaturePoint};
use crate::motion_model::MotionState;

#[derive(Debug, Clone)]
pub struct LandmarkConfig {
    /// Observation count assigned to new landmarks.
    pub obs_count_init: u32,
    /// Drift deletion threshold as a multiple of the landmark radius.
    pub drift_factor: f64,
    /// Plane landmarks with fewer total points than this are pruned once old
    /// enough.
    pub min_plane_points: usize,
    /// Minimum age in scans before the small-plane rule applies.
    pub min_plane_age: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Minimum untracked points required to spawn a landmark.
    pub min_cluster: usize,
    /// Cap on stored points per landmark per scan; excess points still count
    /// as tracked but are not stored.
    pub max_points_per_scan: usize,
    /// Shape gate for newly split balls: points farther than this (meters)
    /// from the ball's principal plane (edges: principal axis) are trimmed
    /// before the ball may become a landmark.
    pub max_shape_spread: f64,
    /// Shape gate during association: a point may join a landmark only when
    /// it lies within this distance of the landmark's plane (edges: axis).
    /// Looser than `max_shape_spread` so tracking survives prediction error.
    pub assoc_spread: f64,
    /// A plane ball must extend at least this far (meters, root of the
    /// second-smallest scatter eigenvalue) along its second principal
    /// direction to become a landmark. A near-degenerate sliver, a single
    /// scan-line arc most commonly, fits a continuum of planes and would let
    /// the optimizer tilt the state freely.
    pub min_plane_extent: f64,
}

impl Default for LandmarkConfig {
    fn default() -> Self {
        Self {
            obs_count_init: 4,
            drift_factor: 3.0,
            min_plane_points: 86,
            min_plane_age: 5,
            radius_min: 0.3,
            radius_max: 3.0,
            min_cluster: 5,
            max_points_per_scan: 40,
            max_shape_spread: 0.02,
            assoc_spread: 0.02,
            min_plane_extent: 0.1,
        }
    }
}

/// A feature point as stored by a landmark: raw sensor-frame position plus
/// its firing time, so it can be re-compensated whenever the scan state
/// moves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawObservation {
    pub raw_position: Vector3<f64>,
    pub timestamp: f64,
}

#[derive(Debug, Clone)]
pub struct Landmark {
    pub id: u64,
    pub category: FeatureCategory,
    /// Ball center in the creation scan's frame.
    pub center: Vector3<f64>,
    pub radius: f64,
    /// World-frame center at creation time, under the predicted pose.
    pub initial_global_center: Vector3<f64>,
    /// World-frame surface direction at creation: the plane normal for plane
    /// landmarks, the line axis for edge landmarks. Association only accepts
    /// points consistent with this direction, which keeps landmarks from
    /// thickening across surface creases.
    pub shape_dir: Vector3<f64>,
    /// Current world-frame center estimate, refreshed by the drift check.
    pub global_center: Vector3<f64>,
    pub observation_count: u32,
    pub points_by_scan: BTreeMap<usize, Vec<RawObservation>>,
    pub creation_scan: usize,
    /// Total stored points across all scans.
    pub total_points: usize,
    /// Moments of points from marginalized scans, world frame.
    pub marginal: MomentAccumulator,
}

#[derive(Debug, Clone, Default)]
pub struct AssociationReport {
    pub scan_index: usize,
    /// Landmarks that received at least one point this scan.
    pub tracked: BTreeSet<u64>,
    /// Landmarks created from untracked points this scan.
    pub created: Vec<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct LandmarkMap {
    pub landmarks: BTreeMap<u64, Landmark>,
    next_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftDecision {
    Keep,
    Delete,
}

/// Trims a candidate ball to the shape its category claims: for planes only
/// points within `max_shape_spread` of the ball's principal plane are kept,
/// for edges only points within that distance of the principal axis. Balls
/// that straddle surface creases or corners are thereby reduced to their
/// dominant surface instead of seeding a thick, biased landmark.
fn shape_trim<'a>(
    mut ball: Vec<&'a FeaturePoint>,
    category: FeatureCategory,
    cfg: &LandmarkConfig,
) -> Vec<&'a FeaturePoint> {
    // Refit and trim with a gradually tightening threshold. A one-shot trim
    // at the final tolerance is wrong for point sets straddling a surface
    // crease (an L-shaped corner, say): the first fit splits the difference
    // between both arms, and cutting straight to the tolerance would keep a
    // thin diagonal slab mixing both surfaces. Shaving only the worst
    // offenders each pass lets successive refits drift toward the dominant
    // arm, while a genuinely ambiguous half-and-half corner shrinks to a
    // sliver that the extent gate rejects.
    for _ in 0..16 {
        let positions: Vec<Vector3<f64>> = ball.iter().map(|p| p.compensated_position).collect();
        let Some(cov) =
            crate::ba_core::moments::landmark_covariance(&MomentAccumulator::new(), &positions)
        else {
            return Vec::new();
        };
        let normal = cov.eigenvectors.column(0).into_owned();
        let axis = cov.eigenvectors.column(2).into_owned();
        let offsets: Vec<f64> = ball
            .iter()
            .map(|p| {
                let d = p.compensated_position - cov.mean;
                match category {
                    FeatureCategory::Plane => d.dot(&normal).abs(),
                    FeatureCategory::Edge => (d - axis * d.dot(&axis)).norm(),
                }
            })
            .collect();
        let worst = offsets.iter().cloned().fold(0.0f64, f64::max);
        if worst <= cfg.max_shape_spread {
            break;
        }
        let cut = (worst * 0.5).max(cfg.max_shape_spread);
        let mut keep = offsets.iter().map(|&o| o <= cut);
        ball.retain(|_| keep.next().unwrap());
    }
    ball
}

/// Extra creation gates for plane balls; edges pass unconditionally.
///
/// A plane ball must be populous enough to survive the small-plane prune
/// (`min_plane_points` stored within `min_plane_age` scans), and must extend
/// far enough along its second principal direction to pin down a plane: a
/// near-degenerate sliver fits a continuum of planes and would let the
/// optimizer tilt the state freely.
fn plane_gate_ok(ball: &[&FeaturePoint], category: FeatureCategory, cfg: &LandmarkConfig) -> bool {
    if category != FeatureCategory::Plane {
        return true;
    }
    let per_scan_floor = cfg.min_plane_points / cfg.min_plane_age.max(1);
    if ball.len() < per_scan_floor.max(cfg.min_cluster) {
        return false;
    }
    let positions: Vec<Vector3<f64>> = ball.iter().map(|p| p.compensated_position).collect();
    crate::ba_core::moments::landmark_covariance(&MomentAccumulator::new(), &positions)
        .is_some_and(|cov| cov.eigenvalues[1].max(0.0).sqrt() >= cfg.min_plane_extent)
}

/// At most `cap` elements spread evenly over the input, preserving order.
fn subsample<T: Clone>(items: &[T], cap: usize) -> Vec<T> {
    if items.len() <= cap {
        return items.to_vec();
    }
    (0..cap)
        .map(|i| items[i * items.len() / cap].clone())
        .collect()
}

fn hash_cell(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

impl LandmarkMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    /// Read-only preview of `associate`: the fraction of feature points that
    /// would join some landmark under the given config. Used to detect a bad
    /// predicted pose before committing to an association.
    pub fn trackable_fraction(
        &self,
        clusters: &[FeatureCluster],
        predicted: &MotionState,
        cfg: &LandmarkConfig,
    ) -> f64 {
        let mut total = 0usize;
        let mut tracked = 0usize;
        let rot_t = predicted.transform.rotation.matrix().transpose();
        let projected: Vec<(Vector3<f64>, f64, FeatureCategory, Vector3<f64>)> = self
            .landmarks
            .values()
            .map(|lm| {
                (
                    predicted.transform.inverse_apply(&lm.global_center),
                    lm.radius,
                    lm.category,
                    rot_t * lm.shape_dir,
                )
            })
            .collect();
        for cluster in clusters {
            for point in &cluster.members {
                total += 1;
                let p = point.compensated_position;
                let hit = projected.iter().any(|(center, radius, category, dir)| {
                    if *category != point.category {
                        return false;
                    }
                    let offset = p - center;
                    if offset.norm() > *radius {
                        return false;
                    }
                    let off = match category {
                        FeatureCategory::Plane => offset.dot(dir).abs(),
                        FeatureCategory::Edge => (offset - dir * offset.dot(dir)).norm(),
                    };
                    off <= cfg.assoc_spread
                });
                if hit {
                    tracked += 1;
                }
            }
        }
        if total == 0 {
            return 1.0;
        }
        tracked as f64 / total as f64
    }

    /// Associates the feature clusters of a new scan with the map.
    ///
    /// Landmark centers are projected into the scan frame through the inverse
    /// of the predicted pose. Each feature point joins the nearest landmark
    /// of its own category whose projected center lies within that landmark's
    /// radius, ties broken by (distance, id). Untracked points are split into
    /// balls of at most `radius_max` and each sufficiently large ball becomes
    /// a new landmark.
    pub fn associate(
        &mut self,
        clusters: &[FeatureCluster],
        predicted: &MotionState,
        scan_index: usize,
        cfg: &LandmarkConfig,
    ) -> AssociationReport {
        let mut report = AssociationReport {
            scan_index,
            ..Default::default()
        };

        // Spatial hash over projected centers; one cell spans the maximum
        // landmark radius, so candidates for a point live in the 27
        // surrounding cells.
        let cell = cfg.radius_max.max(1e-6);
        struct Candidate {
            id: u64,
            center: Vector3<f64>,
            radius: f64,
            category: FeatureCategory,
            dir: Vector3<f64>,
        }
        let mut grid: HashMap<(i64, i64, i64), Vec<Candidate>> = HashMap::new();
        let rot_t = predicted.transform.rotation.matrix().transpose();
        for (id, lm) in &self.landmarks {
            let projected = predicted.transform.inverse_apply(&lm.global_center);
            grid.entry(hash_cell(&projected, cell)).or_default().push(Candidate {
                id: *id,
                center: projected,
                radius: lm.radius,
                category: lm.category,
                dir: rot_t * lm.shape_dir,
            });
        }

        // Tracked points are collected first and committed once the whole
        // scan is processed, so the stored subset can be spread evenly over
        // the scan. Keeping only a leading run of points would concentrate
        // the stored firing times and make the velocity unobservable from
        // this landmark.
        let mut hits: BTreeMap<u64, Vec<RawObservation>> = BTreeMap::new();
        for cluster in clusters {
            let mut untracked: Vec<&FeaturePoint> = Vec::new();
            for point in &cluster.members {
                let p = point.compensated_position;
                let (cx, cy, cz) = hash_cell(&p, cell);
                let mut best: Option<(f64, u64)> = None;
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                                continue;
                            };
                            for c in bucket {
                                if c.category != point.category {
                                    continue;
                                }
                                let offset = p - c.center;
                                let d = offset.norm();
                                if d > c.radius {
                                    continue;
                                }
                                // Shape consistency: stay within the slab of
                                // a plane landmark or the cylinder of an edge
                                // landmark.
                                let off = match c.category {
                                    FeatureCategory::Plane => offset.dot(&c.dir).abs(),
                                    FeatureCategory::Edge => {
                                        (offset - c.dir * offset.dot(&c.dir)).norm()
                                    }
                                };
                                if off > cfg.assoc_spread {
                                    continue;
                                }
                                let key = (d, c.id);
                                if best.map_or(true, |b| key < b) {
                                    best = Some(key);
                                }
                            }
                        }
                    }
                }
                match best {
                    Some((_, id)) => {
                        hits.entry(id).or_default().push(RawObservation {
                            raw_position: point.raw_position,
                            timestamp: point.timestamp,
                        });
                        report.tracked.insert(id);
                    }
                    None => untracked.push(point),
                }
            }

            // Greedy ball split over the untracked points, in member order.
            let mut remaining = untracked;
            while let Some(seed) = remaining.first().copied() {
                let seed_pos = seed.compensated_position;
                let (ball, rest): (Vec<_>, Vec<_>) = remaining
                    .into_iter()
                    .partition(|q| (q.compensated_position - seed_pos).norm() <= cfg.radius_max);
                remaining = rest;
                let ball = shape_trim(ball, cluster.category, cfg);
                if ball.len() >= cfg.min_cluster
                    && plane_gate_ok(&ball, cluster.category, cfg)
                {
                    if let Some(id) =
                        self.create_landmark(&ball, cluster.category, predicted, scan_index, cfg)
                    {
                        report.created.push(id);
                    }
                }
            }
        }
        for (id, points) in hits {
            let lm = self.landmarks.get_mut(&id).expect("id from grid");
            let stored = lm.points_by_scan.entry(scan_index).or_default();
            let keep = subsample(&points, cfg.max_points_per_scan);
            lm.total_points += keep.len();
            stored.extend(keep);
        }
        report
    }

    /// Creates a landmark from a set of same-category feature points.
    ///
    /// Returns `None` for degenerate input (all points coincident).
    pub fn create_landmark(
        &mut self,
        points: &[&FeaturePoint],
        category: FeatureCategory,
        predicted: &MotionState,
        scan_index: usize,
        cfg: &LandmarkConfig,
    ) -> Option<u64> {
        if points.is_empty() {
            return None;
        }
        let centroid = points
            .iter()
            .map(|p| p.compensated_position)
            .sum::<Vector3<f64>>()
            / points.len() as f64;
        let spread = points
            .iter()
            .map(|p| (p.compensated_position - centroid).norm())
            .fold(0.0f64, f64::max);
        if spread < 1e-12 {
            return None;
        }
        let radius = spread.clamp(cfg.radius_min, cfg.radius_max);
        let positions: Vec<Vector3<f64>> = points.iter().map(|p| p.compensated_position).collect();
        let cov = crate::ba_core::moments::landmark_covariance(
            &MomentAccumulator::new(),
            &positions,
        )?;
        let dir_scan = match category {
            FeatureCategory::Plane => cov.eigenvectors.column(0).into_owned(),
            FeatureCategory::Edge => cov.eigenvectors.column(2).into_owned(),
        };
        let shape_dir = predicted.transform.rotation.rotate(&dir_scan);
        let global = predicted.transform.apply(&centroid);
        let id = self.next_id;
        self.next_id += 1;
        let observations: Vec<RawObservation> = points
            .iter()
            .map(|p| RawObservation {
                raw_position: p.raw_position,
                timestamp: p.timestamp,
            })
            .collect();
        let stored = subsample(&observations, cfg.max_points_per_scan);
        let total = stored.len();
        self.landmarks.insert(
            id,
            Landmark {
                id,
                category,
                center: centroid,
                radius,
                initial_global_center: global,
                shape_dir,
                global_center: global,
                observation_count: cfg.obs_count_init,
                points_by_scan: BTreeMap::from([(scan_index, stored)]),
                creation_scan: scan_index,
                total_points: total,
                marginal: MomentAccumulator::new(),
            },
        );
        Some(id)
    }

    /// Applies the per-scan observation count update: tracked landmarks gain
    /// one, all others (except those created this scan) lose one; landmarks
    /// hitting zero are deleted. Returns the deleted ids.
    pub fn update_observation_counts(&mut self, report: &AssociationReport) -> Vec<u64> {
        let created: BTreeSet<u64> = report.created.iter().copied().collect();
        let mut deleted = Vec::new();
        self.landmarks.retain(|id, lm| {
            if report.tracked.contains(id) {
                lm.observation_count += 1;
                true
            } else if created.contains(id) {
                true
            } else {
                lm.observation_count -= 1;
                if lm.observation_count == 0 {
                    deleted.push(*id);
                    false
                } else {
                    true
                }
            }
        });
        deleted
    }

    /// Re-evaluates a landmark's global center against the newly optimized
    /// pose of its creation scan. Deletes the landmark when the center moved
    /// strictly more than `drift_factor * radius` from where it was first
    /// placed; otherwise refreshes the stored global center.
    pub fn check_center_drift(
        &mut self,
        id: u64,
        optimized_creation_state: &MotionState,
        cfg: &LandmarkConfig,
    ) -> DriftDecision {
        let Some(lm) = self.landmarks.get_mut(&id) else {
            return DriftDecision::Delete;
        };
        let current = optimized_creation_state.transform.apply(&lm.center);
        if (current - lm.initial_global_center).norm() > cfg.drift_factor * lm.radius {
            self.landmarks.remove(&id);
            DriftDecision::Delete
        } else {
            lm.global_center = current;
            DriftDecision::Keep
        }
    }

    /// Deletes plane landmarks that remain small after enough scans. Edge
    /// landmarks are exempt. Returns the deleted ids.
    pub fn prune_small_planes(&mut self, current_scan: usize, cfg: &LandmarkConfig) -> Vec<u64> {
        let mut deleted = Vec::new();
        self.landmarks.retain(|id, lm| {
            let old_enough = current_scan.saturating_sub(lm.creation_scan) >= cfg.min_plane_age;
            if lm.category == FeatureCategory::Plane
                && old_enough
                && lm.total_points < cfg.min_plane_points
            {
                deleted.push(*id);
                false
            } else {
                true
            }
        });
        deleted
    }
}
