//! Scan ingestion from disk, trajectory output, and a synthetic world /
//! scan generator with known ground truth.
//!
//! File formats:
//! - Scan: text, header `# lmbao-scan v1 start=<t> duration=<d>`, then rows
//!   `x y z timestamp`. A dataset is a directory of such files sorted
//!   lexicographically.
//! - Trajectory: text rows `timestamp tx ty tz qx qy qz qw`, 6-decimal fixed
//!   precision.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::{RigidTransform, RotationMatrix};
use crate::motion_model::{relative_motion, MotionState};

#[derive(Debug, Error)]
pub enum ScanIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: missing or malformed header line")]
    BadHeader { path: String },
    #[error("{path}: parse error at row {row}, column {column}: {message}")]
    Parse {
        path: String,
        row: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: scan contains no points")]
    EmptyScan { path: String },
    #[error("scan timestamps are not non-decreasing at point {index}")]
    TimestampOrder { index: usize },
    #[error("scan start time {start} does not match first point timestamp {first}")]
    StartTimeMismatch { start: f64, first: f64 },
    #[error("simulated scan produced no surface intersections")]
    NoIntersections,
    #[error("trajectory has fewer than 2 poses")]
    TooFewPoses,
}

/// A single LiDAR return in the sensor frame with its absolute timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawPoint {
    pub position: Vector3<f64>,
    pub timestamp: f64,
}

/// One LiDAR sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub index: usize,
    pub start_time: f64,
    pub sweep_duration: f64,
    pub points: Vec<RawPoint>,
}

impl Scan {
    pub fn new(
        index: usize,
        start_time: f64,
        sweep_duration: f64,
        points: Vec<RawPoint>,
    ) -> Result<Self, ScanIoError> {
        if points.is_empty() {
            return Err(ScanIoError::EmptyScan {
                path: String::new(),
            });
        }
        for i in 1..points.len() {
            if points[i].timestamp < points[i - 1].timestamp {
                return Err(ScanIoError::TimestampOrder { index: i });
            }
        }
        if (points[0].timestamp - start_time).abs() > 1e-9 {
            return Err(ScanIoError::StartTimeMismatch {
                start: start_time,
                first: points[0].timestamp,
            });
        }
        Ok(Self {
            index,
            start_time,
            sweep_duration,
            points,
        })
    }
}

/// Reads a scan file; malformed rows are reported with row and column.
pub fn read_scan_file(path: &Path) -> Result<Scan, ScanIoError> {
    let text = fs::read_to_string(path).map_err(|source| ScanIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let display = path.display().to_string();
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| ScanIoError::BadHeader {
        path: display.clone(),
    })?;
    let (start_time, duration) = parse_scan_header(header).ok_or_else(|| ScanIoError::BadHeader {
        path: display.clone(),
    })?;

    let mut points = Vec::new();
    for (row, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut values = [0.0f64; 4];
        let mut fields = line.split_whitespace();
        for (column, slot) in values.iter_mut().enumerate() {
            let field = fields.next().ok_or_else(|| ScanIoError::Parse {
                path: display.clone(),
                row: row + 2,
                column: column + 1,
                message: "missing field".into(),
            })?;
            *slot = field.parse().map_err(|_| ScanIoError::Parse {
                path: display.clone(),
                row: row + 2,
                column: column + 1,
                message: format!("not a number: {field:?}"),
            })?;
        }
        points.push(RawPoint {
            position: Vector3::new(values[0], values[1], values[2]),
            timestamp: values[3],
        });
    }
    if points.is_empty() {
        return Err(ScanIoError::EmptyScan { path: display });
    }
    // Scan index comes from dataset ordering, not the file; default 0.
    Scan::new(0, start_time, duration, points)
}

fn parse_scan_header(header: &str) -> Option<(f64, f64)> {
    let rest = header.strip_prefix("# lmbao-scan v1 ")?;
    let mut start = None;
    let mut duration = None;
    for token in rest.split_whitespace() {
        if let Some(v) = token.strip_prefix("start=") {
            start = v.parse().ok();
        } else if let Some(v) = token.strip_prefix("duration=") {
            duration = v.parse().ok();
        }
    }
    Some((start?, duration?))
}

pub fn write_scan_file(scan: &Scan, path: &Path) -> Result<(), ScanIoError> {
    let mut out = String::new();
    out.push_str(&format!(
        "# lmbao-scan v1 start={:.6} duration={:.6}\n",
        scan.start_time, scan.sweep_duration
    ));
    for p in &scan.points {
        out.push_str(&format!(
            "{:.6} {:.6} {:.6} {:.6}\n",
            p.position.x, p.position.y, p.position.z, p.timestamp
        ));
    }
    fs::write(path, out).map_err(|source| ScanIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Formats a value at 6-decimal precision with trailing zeros trimmed.
fn format_trim(x: f64) -> String {
    let mut s = format!("{x:.6}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// Writes a trajectory as `timestamp tx ty tz qx qy qz qw` rows.
pub fn write_trajectory(states: &[(f64, RigidTransform)], path: &Path) -> Result<(), ScanIoError> {
    let file = fs::File::create(path).map_err(|source| ScanIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = std::io::BufWriter::new(file);
    for (t, pose) in states {
        let q = pose.rotation.to_quaternion();
        writeln!(
            w,
            "{:.6} {} {} {} {} {} {} {}",
            t,
            format_trim(pose.translation.x),
            format_trim(pose.translation.y),
            format_trim(pose.translation.z),
            format_trim(q[0]),
            format_trim(q[1]),
            format_trim(q[2]),
            format_trim(q[3]),
        )
        .map_err(|source| ScanIoError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, RigidTransform)>, ScanIoError> {
    let text = fs::read_to_string(path).map_err(|source| ScanIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let display = path.display().to_string();
    let mut out = Vec::new();
    for (row, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(ScanIoError::Parse {
                path: display,
                row: row + 1,
                column: fields.len() + 1,
                message: "expected 8 fields".into(),
            });
        }
        let mut v = [0.0f64; 8];
        for (column, f) in fields.iter().enumerate() {
            v[column] = f.parse().map_err(|_| ScanIoError::Parse {
                path: display.clone(),
                row: row + 1,
                column: column + 1,
                message: format!("not a number: {f:?}"),
            })?;
        }
        let rotation = RotationMatrix::from_quaternion([v[4], v[5], v[6], v[7]]).map_err(|e| {
            ScanIoError::Parse {
                path: display.clone(),
                row: row + 1,
                column: 5,
                message: e.to_string(),
            }
        })?;
        out.push((
            v[0],
            RigidTransform::new(rotation, Vector3::new(v[1], v[2], v[3])),
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic world
// ---------------------------------------------------------------------------

/// Finite rectangular plane patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanePatch {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// Orthonormal in-plane axes, derived deterministically from the normal.
    pub axes: (Vector3<f64>, Vector3<f64>),
    pub half_extents: (f64, f64),
}

impl PlanePatch {
    /// The first in-plane axis is horizontal (cross of the normal with z)
    /// whenever the normal allows, so for walls the first half-extent runs
    /// along the ground and the second up the wall. For near-horizontal
    /// patches the axes fall back to the y/x directions.
    pub fn new(center: Vector3<f64>, normal: Vector3<f64>, half_extents: (f64, f64)) -> Self {
        let normal = normal.normalize();
        let helper = if normal.z.abs() < 0.9 {
            Vector3::z()
        } else {
            Vector3::x()
        };
        let u = normal.cross(&helper).normalize();
        let v = normal.cross(&u);
        Self {
            center,
            normal,
            axes: (u, v),
            half_extents,
        }
    }
}

/// Finite line segment standing in for a pole or building edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSegment {
    pub center: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub half_length: f64,
}

impl EdgeSegment {
    pub fn new(center: Vector3<f64>, direction: Vector3<f64>, half_length: f64) -> Self {
        Self {
            center,
            direction: direction.normalize(),
            half_length,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub planes: Vec<PlanePatch>,
    pub edges: Vec<EdgeSegment>,
    pub seed: u64,
}

/// Parameters for the random world generator.
#[derive(Debug, Clone)]
pub struct WorldGenConfig {
    pub plane_count: usize,
    pub edge_count: usize,
    /// Half-side of the cubic bounding box centered at the origin.
    pub half_extent: f64,
}

impl Default for WorldGenConfig {
    fn default() -> Self {
        Self {
            plane_count: 10,
            edge_count: 10,
            half_extent: 20.0,
        }
    }
}

/// Deterministic random scene inside the configured bounding box.
pub fn generate_world(config: &WorldGenConfig, seed: u64) -> SyntheticWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.half_extent;
    let unit = |rng: &mut ChaCha8Rng| -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 {
                return v / n;
            }
        }
    };
    let mut planes = Vec::with_capacity(config.plane_count);
    for _ in 0..config.plane_count {
        let center = Vector3::new(
            rng.gen_range(-h..h),
            rng.gen_range(-h..h),
            rng.gen_range(-h..h),
        );
        let normal = unit(&mut rng);
        let he = (rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0));
        planes.push(PlanePatch::new(center, normal, he));
    }
    let mut edges = Vec::with_capacity(config.edge_count);
    for _ in 0..config.edge_count {
        let center = Vector3::new(
            rng.gen_range(-h..h),
            rng.gen_range(-h..h),
            rng.gen_range(-h..h),
        );
        let dir = unit(&mut rng);
        edges.push(EdgeSegment::new(center, dir, rng.gen_range(0.5..2.0)));
    }
    SyntheticWorld {
        planes,
        edges,
        seed,
    }
}

impl SyntheticWorld {
    /// A corridor along +x: side walls, ground, cross panels, and poles.
    /// Cross panels face the direction of travel so the along-corridor
    /// position stays observable.
    pub fn corridor(length: f64, half_width: f64, height: f64) -> Self {
        let mut planes = Vec::new();
        let mut edges = Vec::new();
        let mid = length / 2.0;
        // Side walls.
        for side in [-1.0, 1.0] {
            planes.push(PlanePatch::new(
                Vector3::new(mid, side * half_width, height / 2.0 - 1.5),
                Vector3::new(0.0, -side, 0.0),
                (length / 2.0 + 10.0, height / 2.0),
            ));
        }
        // Ground and ceiling; first extent runs across the corridor (the
        // horizontal-plane axes are y then x).
        planes.push(PlanePatch::new(
            Vector3::new(mid, 0.0, -1.5),
            Vector3::z(),
            (half_width, length / 2.0 + 10.0),
        ));
        planes.push(PlanePatch::new(
            Vector3::new(mid, 0.0, height - 1.5),
            Vector3::new(0.0, 0.0, -1.0),
            (half_width, length / 2.0 + 10.0),
        ));
        // Cross panels jutting from alternating walls every 4 m; they face
        // along the corridor so the x position stays observable, and they
        // cover only part of the cross-section so ground, ceiling, and far
        // structure stay visible.
        let mut x = 2.0;
        let mut panel_side = 1.0;
        while x < length + 10.0 {
            planes.push(PlanePatch::new(
                Vector3::new(x, panel_side * (half_width - 1.2), 0.0),
                Vector3::x(),
                (1.2, 1.4),
            ));
            panel_side = -panel_side;
            x += 2.0;
        }
        // Free-standing poles off the centerline every 3 m. Their background
        // is the far end of the corridor, so they register as sharp edges.
        let mut x = 1.5;
        let mut side = -1.0;
        while x < length + 10.0 {
            edges.push(EdgeSegment::new(
                Vector3::new(x, side * 0.8, 0.5),
                Vector3::z(),
                3.0,
            ));
            side = -side;
            x += 3.0;
        }
        Self {
            planes,
            edges,
            seed: 0,
        }
    }

    /// A closed square courtyard: perimeter walls, ground, inner pillars and
    /// poles, sized so a loop of the given half-side stays in view.
    pub fn courtyard(half_side: f64) -> Self {
        let wall = half_side + 8.0;
        let height = 4.0;
        let mut planes = Vec::new();
        let mut edges = Vec::new();
        // Perimeter walls.
        planes.push(PlanePatch::new(
            Vector3::new(wall, 0.0, height / 2.0 - 1.5),
            Vector3::new(-1.0, 0.0, 0.0),
            (wall, height / 2.0),
        ));
        planes.push(PlanePatch::new(
            Vector3::new(-wall, 0.0, height / 2.0 - 1.5),
            Vector3::new(1.0, 0.0, 0.0),
            (wall, height / 2.0),
        ));
        planes.push(PlanePatch::new(
            Vector3::new(0.0, wall, height / 2.0 - 1.5),
            Vector3::new(0.0, -1.0, 0.0),
            (wall, height / 2.0),
        ));
        planes.push(PlanePatch::new(
            Vector3::new(0.0, -wall, height / 2.0 - 1.5),
            Vector3::new(0.0, 1.0, 0.0),
            (wall, height / 2.0),
        ));
        // Ground.
        planes.push(PlanePatch::new(
            Vector3::new(0.0, 0.0, -1.5),
            Vector3::z(),
            (wall, wall),
        ));
        // Inner block giving every viewpoint a perpendicular face.
        let block = half_side * 0.45;
        planes.push(PlanePatch::new(
            Vector3::new(block, 0.0, height / 2.0 - 1.5),
            Vector3::new(1.0, 0.0, 0.0),
            (block, height / 2.0),
        ));
        planes.push(PlanePatch::new(
            Vector3::new(-block, 0.0, height / 2.0 - 1.5),
            Vector3::new(-1.0, 0.0, 0.0),
            (block, height / 2.0),
        ));
        planes.push(PlanePatch::new(
            Vector3::new(0.0, block, height / 2.0 - 1.5),
            Vector3::new(0.0, 1.0, 0.0),
            (block, height / 2.0),
        ));
        planes.push(PlanePatch::new(
            Vector3::new(0.0, -block, height / 2.0 - 1.5),
            Vector3::new(0.0, -1.0, 0.0),
            (block, height / 2.0),
        ));
        // Poles along the walls and at the inner corners.
        let step = 5.0;
        let mut s = -wall + 2.0;
        while s < wall - 1.0 {
            edges.push(EdgeSegment::new(
                Vector3::new(s, wall - 1.0, 0.5),
                Vector3::z(),
                2.0,
            ));
            edges.push(EdgeSegment::new(
                Vector3::new(s, -wall + 1.0, 0.5),
                Vector3::z(),
                2.0,
            ));
            edges.push(EdgeSegment::new(
                Vector3::new(wall - 1.0, s, 0.5),
                Vector3::z(),
                2.0,
            ));
            edges.push(EdgeSegment::new(
                Vector3::new(-wall + 1.0, s, 0.5),
                Vector3::z(),
                2.0,
            ));
            s += step;
        }
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                edges.push(EdgeSegment::new(
                    Vector3::new(sx * block, sy * block, 0.5),
                    Vector3::z(),
                    2.0,
                ));
            }
        }
        Self {
            planes,
            edges,
            seed: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Ground-truth trajectory
// ---------------------------------------------------------------------------

/// Body-frame twist held constant over a segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self {
            linear: Vector3::zeros(),
            angular: Vector3::zeros(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySegment {
    pub start_time: f64,
    pub duration: f64,
    pub twist: Twist,
}

/// Piecewise constant-twist trajectory. Within each segment the pose evolves
/// exactly as the constant velocity model assumes, so synthesized scans are
/// consistent with compensation using the true per-scan state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub start_pose: RigidTransform,
    pub segments: Vec<TrajectorySegment>,
}

impl Trajectory {
    pub fn stationary(duration: f64) -> Self {
        Self {
            start_pose: RigidTransform::identity(),
            segments: vec![TrajectorySegment {
                start_time: 0.0,
                duration,
                twist: Twist::zero(),
            }],
        }
    }

    pub fn constant_twist(twist: Twist, duration: f64) -> Self {
        Self {
            start_pose: RigidTransform::identity(),
            segments: vec![TrajectorySegment {
                start_time: 0.0,
                duration,
                twist,
            }],
        }
    }

    /// Builds a piecewise trajectory from (twist, duration) pieces starting
    /// at t = 0.
    pub fn piecewise(start_pose: RigidTransform, pieces: &[(Twist, f64)]) -> Self {
        let mut segments = Vec::with_capacity(pieces.len());
        let mut t = 0.0;
        for (twist, duration) in pieces {
            segments.push(TrajectorySegment {
                start_time: t,
                duration: *duration,
                twist: *twist,
            });
            t += duration;
        }
        Self {
            start_pose,
            segments,
        }
    }

    pub fn end_time(&self) -> f64 {
        self.segments
            .last()
            .map(|s| s.start_time + s.duration)
            .unwrap_or(0.0)
    }

    fn segment_at(&self, t: f64) -> (usize, &TrajectorySegment) {
        let mut idx = 0;
        for (i, seg) in self.segments.iter().enumerate() {
            if t >= seg.start_time {
                idx = i;
            }
        }
        (idx, &self.segments[idx])
    }

    /// World pose of the sensor at absolute time `t`.
    pub fn pose_at(&self, t: f64) -> RigidTransform {
        let state = self.state_at(t);
        state.transform
    }

    /// Full motion state at time `t`: pose plus the constant-velocity model
    /// parameters valid from `t` onward within the current segment.
    pub fn state_at(&self, t: f64) -> MotionState {
        let (idx, seg) = self.segment_at(t);
        let mut pose = self.start_pose;
        for s in &self.segments[..idx] {
            let hold = MotionState {
                transform: RigidTransform::identity(),
                linear_velocity: s.twist.linear,
                angular_velocity: s.twist.angular,
                start_time: 0.0,
            };
            pose = pose.compose(&relative_motion(&hold, s.duration));
        }
        let tau = t - seg.start_time;
        let hold = MotionState {
            transform: RigidTransform::identity(),
            linear_velocity: seg.twist.linear,
            angular_velocity: seg.twist.angular,
            start_time: 0.0,
        };
        let transform = pose.compose(&relative_motion(&hold, tau));
        // Velocities seen from the frame at time t.
        let back = crate::geom::exp_so3_raw(&(-tau * seg.twist.angular));
        MotionState {
            transform,
            linear_velocity: back * seg.twist.linear,
            angular_velocity: back * seg.twist.angular,
            start_time: t,
        }
    }

    /// Total translational path length, sampled at the given step.
    pub fn path_length(&self, dt: f64) -> f64 {
        let mut t = 0.0;
        let end = self.end_time();
        let mut prev = self.pose_at(0.0).translation;
        let mut len = 0.0;
        while t < end {
            t = (t + dt).min(end);
            let p = self.pose_at(t).translation;
            len += (p - prev).norm();
            prev = p;
        }
        len
    }
}

// ---------------------------------------------------------------------------
// Scan simulation
// ---------------------------------------------------------------------------

/// Rotary-LiDAR beam model: a horizontal sweep of `columns` firings, each a
/// vertical fan of `rings` beams.
#[derive(Debug, Clone)]
pub struct BeamModel {
    pub columns: usize,
    pub rings: usize,
    /// Radians; ring elevations are spread linearly over this range.
    pub elev_min: f64,
    pub elev_max: f64,
    pub min_range: f64,
    pub max_range: f64,
    /// A beam passing within this distance of an edge segment registers a
    /// return on the segment itself.
    pub edge_capture_radius: f64,
}

impl Default for BeamModel {
    fn default() -> Self {
        Self {
            columns: 1800,
            rings: 64,
            elev_min: -15.0_f64.to_radians(),
            elev_max: 15.0_f64.to_radians(),
            min_range: 0.5,
            max_range: 60.0,
            edge_capture_radius: 0.06,
        }
    }
}

impl BeamModel {
    pub fn ray_direction(&self, column: usize, ring: usize) -> Vector3<f64> {
        let az = 2.0 * std::f64::consts::PI * column as f64 / self.columns as f64;
        let elev = if self.rings > 1 {
            self.elev_min
                + (self.elev_max - self.elev_min) * ring as f64 / (self.rings - 1) as f64
        } else {
            0.0
        };
        Vector3::new(
            elev.cos() * az.cos(),
            elev.cos() * az.sin(),
            elev.sin(),
        )
    }
}

/// Synthesizes one sweep: each column fires at its own timestamp from the
/// instantaneous sensor pose, so ego-motion distortion is baked in and
/// compensation is testable. Optional Gaussian range noise with std `sigma`.
pub fn simulate_scan(
    world: &SyntheticWorld,
    trajectory: &Trajectory,
    index: usize,
    t_start: f64,
    sweep_duration: f64,
    beam: &BeamModel,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Scan, ScanIoError> {
    let mut points = Vec::new();
    for column in 0..beam.columns {
        let t = t_start + sweep_duration * column as f64 / beam.columns as f64;
        let pose = trajectory.pose_at(t);
        let origin = pose.translation;
        for ring in 0..beam.rings {
            let dir_body = beam.ray_direction(column, ring);
            let dir_world = pose.rotation.rotate(&dir_body);
            if let Some(hit) = cast_ray(world, &origin, &dir_world, beam) {
                let mut p_world = hit.point;
                if sigma > 0.0 {
                    let noise: f64 = sample_gaussian(rng) * sigma;
                    let along = (p_world - origin).normalize();
                    p_world += noise * along;
                }
                let position = pose.inverse_apply(&p_world);
                points.push(RawPoint {
                    position,
                    timestamp: t,
                });
            }
        }
    }
    if points.is_empty() {
        return Err(ScanIoError::NoIntersections);
    }
    // The scan clock starts at the first firing even if its beams all missed.
    let start = t_start;
    if (points[0].timestamp - start).abs() > 1e-12 {
        // Keep the invariant that start_time equals the first point's stamp.
        return Scan::new(index, points[0].timestamp, sweep_duration, points);
    }
    Scan::new(index, start, sweep_duration, points)
}

struct RayHit {
    range: f64,
    point: Vector3<f64>,
}

fn cast_ray(
    world: &SyntheticWorld,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    beam: &BeamModel,
) -> Option<RayHit> {
    let mut best: Option<RayHit> = None;
    for plane in &world.planes {
        let denom = plane.normal.dot(dir);
        if denom.abs() < 1e-12 {
            continue;
        }
        let s = plane.normal.dot(&(plane.center - origin)) / denom;
        if s < beam.min_range || s > beam.max_range {
            continue;
        }
        let q = origin + s * dir;
        let d = q - plane.center;
        if d.dot(&plane.axes.0).abs() > plane.half_extents.0
            || d.dot(&plane.axes.1).abs() > plane.half_extents.1
        {
            continue;
        }
        if best.as_ref().map_or(true, |b| s < b.range) {
            best = Some(RayHit { range: s, point: q });
        }
    }
    for edge in &world.edges {
        // Closest approach between the ray and the segment's line; the
        // return is placed exactly on the line so edge features are
        // perfectly collinear in the noiseless case.
        let w0 = origin - edge.center;
        let a = 1.0; // dir·dir
        let b = dir.dot(&edge.direction);
        let c = 1.0; // direction is unit
        let d = dir.dot(&w0);
        let e = edge.direction.dot(&w0);
        let denom = a * c - b * b;
        if denom.abs() < 1e-9 {
            continue; // Ray parallel to the edge.
        }
        let s = (b * e - c * d) / denom; // along ray
        let u = (a * e - b * d) / denom; // along edge line
        if s < beam.min_range || s > beam.max_range || u.abs() > edge.half_length {
            continue;
        }
        let on_ray = origin + s * dir;
        let on_edge = edge.center + u * edge.direction;
        if (on_ray - on_edge).norm() > beam.edge_capture_radius {
            continue;
        }
        let range = (on_edge - origin).norm();
        if best.as_ref().map_or(true, |b| range < b.range) {
            best = Some(RayHit {
                range,
                point: on_edge,
            });
        }
    }
    best
}

fn sample_gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion_model::compensate_point;
    use std::f64::consts::PI;

    fn flat_world() -> SyntheticWorld {
        SyntheticWorld {
            planes: vec![PlanePatch::new(
                Vector3::new(0.0, 0.0, -1.0),
                Vector3::z(),
                (1e6, 1e6),
            )],
            edges: vec![],
            seed: 0,
        }
    }

    fn small_beam() -> BeamModel {
        BeamModel {
            columns: 90,
            rings: 8,
            elev_min: -0.5,
            elev_max: -0.2,
            min_range: 0.1,
            max_range: 100.0,
            edge_capture_radius: 0.06,
        }
    }

    #[test]
    fn read_well_formed_scan() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        fs::write(
            &path,
            "# lmbao-scan v1 start=1.000000 duration=0.100000\n\
             1.0 2.0 3.0 1.000000\n\
             1.5 2.5 3.5 1.050000\n\
             2.0 3.0 4.0 1.090000\n",
        )
        .unwrap();
        let scan = read_scan_file(&path).unwrap();
        assert_eq!(scan.points.len(), 3);
        assert_eq!(scan.start_time, 1.0);
        assert_eq!(scan.sweep_duration, 0.1);
    }

    #[test]
    fn read_reports_bad_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        fs::write(
            &path,
            "# lmbao-scan v1 start=0.0 duration=0.1\n\
             0.0 0.0 0.0 0.0\n\
             oops 2.0 3.0 0.01\n",
        )
        .unwrap();
        match read_scan_file(&path) {
            Err(ScanIoError::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, 1);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn scan_round_trip() {
        let traj = Trajectory::stationary(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scan =
            simulate_scan(&flat_world(), &traj, 0, 0.0, 0.1, &small_beam(), 0.0, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.txt");
        write_scan_file(&scan, &path).unwrap();
        let back = read_scan_file(&path).unwrap();
        assert_eq!(back.points.len(), scan.points.len());
        for (a, b) in scan.points.iter().zip(&back.points) {
            assert!((a.position - b.position).norm() < 1e-5);
            assert!((a.timestamp - b.timestamp).abs() < 1e-6);
        }
    }

    #[test]
    fn trajectory_line_cases() {
        let t = RigidTransform::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let states = vec![
            (0.0, RigidTransform::identity()),
            (1.0, t),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        write_trajectory(&states, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "0.000000 0 0 0 0 0 0 1");
        assert_eq!(lines[1], "1.000000 1 2 3 0 0 0 1");
    }

    #[test]
    fn generate_world_deterministic_and_bounded() {
        let cfg = WorldGenConfig {
            plane_count: 10,
            edge_count: 3,
            half_extent: 5.0,
        };
        let a = generate_world(&cfg, 1);
        let b = generate_world(&cfg, 1);
        assert_eq!(a, b);
        assert_eq!(a.planes.len(), 10);
        for p in &a.planes {
            assert!(p.center.amax() <= 5.0);
            assert!((p.normal.norm() - 1.0).abs() < 1e-12);
        }
        let empty = generate_world(
            &WorldGenConfig {
                plane_count: 0,
                edge_count: 0,
                half_extent: 5.0,
            },
            7,
        );
        assert!(empty.planes.is_empty() && empty.edges.is_empty());
    }

    #[test]
    fn stationary_scan_hits_floor() {
        let traj = Trajectory::stationary(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scan =
            simulate_scan(&flat_world(), &traj, 0, 0.0, 0.1, &small_beam(), 0.0, &mut rng).unwrap();
        assert!(!scan.points.is_empty());
        for p in &scan.points {
            assert!((p.position.z - (-1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn moving_scan_compensates_onto_surface() {
        // Geometric consistency: compensation with the true state followed by
        // the true start pose must land every point back on the world surface.
        let twist = Twist {
            linear: Vector3::new(2.0, 0.3, 0.0),
            angular: Vector3::new(0.0, 0.0, 0.4),
        };
        let traj = Trajectory::constant_twist(twist, 10.0);
        let t_start = 0.4;
        let state = traj.state_at(t_start);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scan = simulate_scan(
            &flat_world(),
            &traj,
            4,
            t_start,
            0.1,
            &small_beam(),
            0.0,
            &mut rng,
        )
        .unwrap();
        for p in &scan.points {
            let comp = compensate_point(&p.position, p.timestamp, &state).unwrap();
            let world = state.transform.apply(&comp);
            assert!(
                (world.z - (-1.0)).abs() < 1e-9,
                "off-surface by {}",
                (world.z + 1.0).abs()
            );
        }
    }

    #[test]
    fn noise_std_matches_sigma() {
        let traj = Trajectory::stationary(1.0);
        let beam = BeamModel {
            columns: 360,
            rings: 32,
            ..small_beam()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scan = simulate_scan(&flat_world(), &traj, 0, 0.0, 0.1, &beam, 0.01, &mut rng).unwrap();
        assert!(scan.points.len() >= 10_000);
        // Residual to the z=-1 plane along z; convert range noise to vertical
        // component via the ray's z slope.
        let mut sq = 0.0;
        let mut n = 0.0;
        for p in &scan.points {
            let r = p.position.norm();
            let slope = p.position.z / r;
            let expected_r = -1.0 / slope;
            sq += (r - expected_r).powi(2);
            n += 1.0;
        }
        let std = (sq / n).sqrt();
        assert!((0.008..0.012).contains(&std), "std = {std}");
    }

    #[test]
    fn stationary_compensation_is_bit_identical() {
        let traj = Trajectory::stationary(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scan =
            simulate_scan(&flat_world(), &traj, 0, 0.0, 0.1, &small_beam(), 0.0, &mut rng).unwrap();
        let state = MotionState::identity(0.0);
        for p in &scan.points {
            let comp = compensate_point(&p.position, p.timestamp, &state).unwrap();
            assert_eq!(comp, p.position);
        }
    }

    #[test]
    fn quarter_turn_quaternion_written() {
        let rot = crate::geom::exp_so3(&crate::geom::RotationVector(Vector3::new(
            0.0,
            0.0,
            PI / 2.0,
        )))
        .unwrap();
        let q = rot.to_quaternion();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((q[2] - s).abs() < 1e-9 && (q[3] - s).abs() < 1e-9);
    }

    #[test]
    fn trajectory_read_write_round_trip() {
        let rot = crate::geom::exp_so3(&crate::geom::RotationVector(Vector3::new(0.1, -0.2, 0.3)))
            .unwrap();
        let states = vec![
            (0.0, RigidTransform::identity()),
            (0.1, RigidTransform::new(rot, Vector3::new(1.0, 2.0, -0.5))),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        write_trajectory(&states, &path).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back.len(), 2);
        for ((ta, a), (tb, b)) in states.iter().zip(&back) {
            assert!((ta - tb).abs() < 1e-9);
            assert!((a.translation - b.translation).norm() < 1e-5);
            assert!((a.rotation.matrix() - b.rotation.matrix()).norm() < 1e-5);
        }
    }

    #[test]
    fn piecewise_trajectory_is_continuous() {
        let pieces = [
            (
                Twist {
                    linear: Vector3::new(1.0, 0.0, 0.0),
                    angular: Vector3::zeros(),
                },
                1.0,
            ),
            (
                Twist {
                    linear: Vector3::new(1.0, 0.0, 0.0),
                    angular: Vector3::new(0.0, 0.0, 0.5),
                },
                1.0,
            ),
        ];
        let traj = Trajectory::piecewise(RigidTransform::identity(), &pieces);
        let before = traj.pose_at(1.0 - 1e-9);
        let after = traj.pose_at(1.0 + 1e-9);
        assert!((before.translation - after.translation).norm() < 1e-6);
        assert!((before.rotation.matrix() - after.rotation.matrix()).norm() < 1e-6);
    }
}
