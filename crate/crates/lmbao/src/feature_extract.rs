//! Spherical projection of a compensated scan, smoothness scoring,
//! plane/edge classification, and BFS clustering into feature groups.

use nalgebra::Vector3;

use crate::motion_model::{compensate_point_raw, MotionState};
use crate::scan_io::Scan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureCategory {
    Plane,
    Edge,
}

#[derive(Debug, Clone)]
pub struct FeatureConfig {
    /// Columns per second; column index is `alpha * (t_i - t_k)`.
    pub alpha: f64,
    /// Image height: number of laser rings.
    pub rings: usize,
    pub elev_min: f64,
    pub elev_max: f64,
    /// Scores below this are plane candidates.
    pub plane_threshold: f64,
    /// Scores above this are edge candidates.
    pub edge_threshold: f64,
    /// Half-width of the same-row smoothness neighborhood, in columns.
    pub smooth_window: usize,
    /// Range gap above which BFS refuses to connect edge neighbors, meters.
    pub depth_gap: f64,
    /// Range gap for linking plane neighbors. Smooth surfaces seen at a
    /// grazing angle (the ground, most of all) step through large range
    /// changes between adjacent rings, and a plane cluster must bridge those
    /// steps: a single-ring arc does not pin down a plane's orientation.
    pub plane_depth_gap: f64,
    /// Clusters smaller than this are discarded.
    pub min_cluster: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            alpha: 18_000.0,
            rings: 64,
            elev_min: -15.0_f64.to_radians(),
            elev_max: 15.0_f64.to_radians(),
            plane_threshold: 0.05,
            edge_threshold: 0.5,
            smooth_window: 5,
            depth_gap: 0.3,
            plane_depth_gap: 1.5,
            min_cluster: 5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub point_index: usize,
    pub range: f64,
    pub position: Vector3<f64>,
    pub timestamp: f64,
}

/// Raster of one sweep: columns indexed by firing time, rows by ring.
#[derive(Debug, Clone)]
pub struct SphericalImage {
    pub width: usize,
    pub height: usize,
    cells: Vec<Option<Cell>>,
}

impl SphericalImage {
    pub fn cell(&self, column: usize, row: usize) -> Option<&Cell> {
        self.cells[row * self.width + column].as_ref()
    }

    pub fn occupied(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    fn idx(&self, column: usize, row: usize) -> usize {
        row * self.width + column
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturePoint {
    /// Sensor frame, uncompensated; this is what landmarks store.
    pub raw_position: Vector3<f64>,
    pub compensated_position: Vector3<f64>,
    pub timestamp: f64,
    pub cluster_id: usize,
    pub category: FeatureCategory,
    /// Local surface normal estimated from the four raster neighbors,
    /// oriented toward the sensor; `None` for edge points and for cells whose
    /// neighborhood is incomplete or degenerate (a thin structure seen
    /// edge-on has no meaningful normal). Plane association requires it: a
    /// point within tolerance of a plane landmark's infinite plane but lying
    /// on a crossing surface is betrayed by its normal.
    pub normal: Option<Vector3<f64>>,
}

#[derive(Debug, Clone)]
pub struct FeatureCluster {
    pub cluster_id: usize,
    pub category: FeatureCategory,
    pub members: Vec<FeaturePoint>,
    /// Mean of compensated positions, scan frame.
    pub centroid: Vector3<f64>,
}

/// Projects each compensated point to `(column, row)` where the column is the
/// firing time scaled by `alpha` and the row is the ring index recovered from
/// elevation. On collision the nearer point wins.
pub fn project_spherical(scan: &Scan, state: &MotionState, cfg: &FeatureConfig) -> SphericalImage {
    let width = ((cfg.alpha * scan.sweep_duration).ceil() as usize).max(1);
    let height = cfg.rings.max(1);
    let mut img = SphericalImage {
        width,
        height,
        cells: vec![None; width * height],
    };
    let elev_span = (cfg.elev_max - cfg.elev_min).max(1e-9);
    for (i, p) in scan.points.iter().enumerate() {
        let dt = p.timestamp - scan.start_time;
        if dt < 0.0 {
            continue;
        }
        let compensated = compensate_point_raw(&p.position, dt, state);
        let range = compensated.norm();
        if range < 1e-9 {
            continue;
        }
        // Nudge so timestamps sitting just below a column boundary (float
        // noise, or file timestamps quantized to 1e-6 s) still land in the
        // intended column; 0.02 columns exceeds alpha * 5e-7 at any
        // realistic alpha.
        let column = ((cfg.alpha * dt + 0.02) as usize).min(width - 1);
        let elev = (compensated.z / range).asin();
        let row_f = (elev - cfg.elev_min) / elev_span * (height.saturating_sub(1)) as f64;
        let row = (row_f.round().max(0.0) as usize).min(height - 1);
        let idx = img.idx(column, row);
        let keep = match &img.cells[idx] {
            Some(existing) => range < existing.range,
            None => true,
        };
        if keep {
            img.cells[idx] = Some(Cell {
                point_index: i,
                range,
                position: compensated,
                timestamp: p.timestamp,
            });
        }
    }
    img
}

/// Range-normalized curvature over same-row neighbors:
/// `c(i) = |Σ_j (r_j - r_i)| / (|N| r_i)`. Cells whose full neighborhood is
/// not occupied get no score.
pub fn smoothness_scores(img: &SphericalImage, window: usize) -> Vec<Option<f64>> {
    let mut scores = vec![None; img.width * img.height];
    if window == 0 {
        return scores;
    }
    for row in 0..img.height {
        for column in 0..img.width {
            let center = match img.cell(column, row) {
                Some(c) => c,
                None => continue,
            };
            let lo = column.checked_sub(window);
            let hi = column + window;
            if lo.is_none() || hi >= img.width {
                continue;
            }
            let lo = lo.unwrap();
            let mut sum = 0.0;
            let mut count = 0usize;
            let mut complete = true;
            for c in lo..=hi {
                if c == column {
                    continue;
                }
                match img.cell(c, row) {
                    Some(n) => {
                        sum += n.range - center.range;
                        count += 1;
                    }
                    None => {
                        complete = false;
                        break;
                    }
                }
            }
            if complete && count == 2 * window {
                scores[row * img.width + column] =
                    Some(sum.abs() / (count as f64 * center.range));
            }
        }
    }
    scores
}

/// Rejects edge candidates whose high smoothness score is an artifact of a
/// depth discontinuity in the neighborhood rather than a sharp free-standing
/// structure at the cell itself.
///
/// Cells with a *closer* neighbor sit on the far side of an occlusion
/// boundary; their positions slide along the background as the viewpoint
/// moves. Cells with a *farther* jump on only one side are the rim of a
/// surface (the last column of a wall panel, say): the rim's apparent
/// position quantizes to the column grid and jitters by a column width from
/// scan to scan, so it makes a poor landmark. What survives is either a
/// free-standing thin structure, occluding the background on both sides
/// within the window, or a genuine curvature spike with no depth jump at all
/// (a concave corner).
fn edge_candidate_valid(
    img: &SphericalImage,
    column: usize,
    row: usize,
    cfg: &FeatureConfig,
) -> bool {
    let center = match img.cell(column, row) {
        Some(c) => c,
        None => return false,
    };
    let lo = column.saturating_sub(cfg.smooth_window);
    let hi = (column + cfg.smooth_window).min(img.width - 1);
    let mut jump_left = false;
    let mut jump_right = false;
    for c in lo..=hi {
        if c == column {
            continue;
        }
        let Some(n) = img.cell(c, row) else { continue };
        if center.range - n.range > cfg.depth_gap {
            return false;
        }
        if n.range - center.range > cfg.depth_gap {
            if c < column {
                jump_left = true;
            } else {
                jump_right = true;
            }
        }
    }
    jump_left == jump_right
}

/// Local surface normal of an occupied cell from central differences over
/// its four raster neighbors. Returns `None` when the neighborhood is
/// incomplete or the two difference vectors are near-parallel (collinear
/// structure), and orients the result toward the sensor.
fn cell_normal(img: &SphericalImage, column: usize, row: usize) -> Option<Vector3<f64>> {
    if column == 0 || column + 1 >= img.width || row == 0 || row + 1 >= img.height {
        return None;
    }
    let center = img.cell(column, row)?;
    let left = img.cell(column - 1, row)?;
    let right = img.cell(column + 1, row)?;
    let down = img.cell(column, row - 1)?;
    let up = img.cell(column, row + 1)?;
    let a = right.position - left.position;
    let b = up.position - down.position;
    let n = a.cross(&b);
    let len = n.norm();
    // Relative threshold: reject when the spanned parallelogram is thinner
    // than ~3 degrees, which catches collinear point rows.
    if len < 0.05 * a.norm() * b.norm() {
        return None;
    }
    let mut n = n / len;
    if n.dot(&center.position) > 0.0 {
        n = -n;
    }
    Some(n)
}

/// Classifies scored cells into plane/edge candidates and connects
/// same-category candidates with a 4-neighborhood BFS, refusing links across
/// range gaps larger than `depth_gap`. Clusters below `min_cluster` are
/// discarded; surviving cluster ids are dense from 0.
pub fn classify_and_cluster(
    img: &SphericalImage,
    scores: &[Option<f64>],
    scan: &Scan,
    cfg: &FeatureConfig,
) -> Vec<FeatureCluster> {
    assert!(cfg.edge_threshold > cfg.plane_threshold);
    let n = img.width * img.height;
    let mut category = vec![None::<FeatureCategory>; n];
    for i in 0..n {
        let Some(s) = scores[i] else { continue };
        if s < cfg.plane_threshold {
            category[i] = Some(FeatureCategory::Plane);
        } else if s > cfg.edge_threshold {
            let row = i / img.width;
            let column = i % img.width;
            if edge_candidate_valid(img, column, row, cfg) {
                category[i] = Some(FeatureCategory::Edge);
            }
        }
    }

    let mut visited = vec![false; n];
    let mut clusters = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for start in 0..n {
        if visited[start] || category[start].is_none() {
            continue;
        }
        let cat = category[start].unwrap();
        visited[start] = true;
        queue.push_back(start);
        let mut member_cells = Vec::new();
        while let Some(idx) = queue.pop_front() {
            member_cells.push(idx);
            let row = idx / img.width;
            let column = idx % img.width;
            let here = img.cell(column, row).expect("candidate cell occupied");
            let try_neighbor = |c: usize, r: usize, queue: &mut std::collections::VecDeque<usize>, visited: &mut Vec<bool>| {
                let nidx = r * img.width + c;
                if visited[nidx] || category[nidx] != Some(cat) {
                    return;
                }
                let there = img.cell(c, r).expect("candidate cell occupied");
                let gap = match cat {
                    FeatureCategory::Plane => cfg.plane_depth_gap,
                    FeatureCategory::Edge => cfg.depth_gap,
                };
                if (there.range - here.range).abs() >= gap {
                    return;
                }
                visited[nidx] = true;
                queue.push_back(nidx);
            };
            if column > 0 {
                try_neighbor(column - 1, row, &mut queue, &mut visited);
            }
            if column + 1 < img.width {
                try_neighbor(column + 1, row, &mut queue, &mut visited);
            }
            if row > 0 {
                try_neighbor(column, row - 1, &mut queue, &mut visited);
            }
            if row + 1 < img.height {
                try_neighbor(column, row + 1, &mut queue, &mut visited);
            }
        }
        if member_cells.len() < cfg.min_cluster {
            continue;
        }
        let cluster_id = clusters.len();
        let mut members = Vec::with_capacity(member_cells.len());
        let mut centroid = Vector3::zeros();
        for idx in member_cells {
            let cell = img.cells_ref()[idx].as_ref().unwrap();
            let raw = scan.points[cell.point_index].position;
            centroid += cell.position;
            let normal = match cat {
                FeatureCategory::Plane => cell_normal(img, idx % img.width, idx / img.width),
                FeatureCategory::Edge => None,
            };
            members.push(FeaturePoint {
                raw_position: raw,
                compensated_position: cell.position,
                timestamp: cell.timestamp,
                cluster_id,
                category: cat,
                normal,
            });
        }
        centroid /= members.len() as f64;
        clusters.push(FeatureCluster {
            cluster_id,
            category: cat,
            members,
            centroid,
        });
    }
    clusters
}

impl SphericalImage {
    fn cells_ref(&self) -> &[Option<Cell>] {
        &self.cells
    }
}

/// Full extraction for one scan: project, score, classify, cluster.
pub fn extract_features(
    scan: &Scan,
    state: &MotionState,
    cfg: &FeatureConfig,
) -> Vec<FeatureCluster> {
    let img = project_spherical(scan, state, cfg);
    let scores = smoothness_scores(&img, cfg.smooth_window);
    classify_and_cluster(&img, &scores, scan, cfg)
}
