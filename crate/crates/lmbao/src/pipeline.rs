//! Per-scan odometry driver, trajectory accumulation, ATE evaluation, and
//! dataset plumbing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::ba_core::solver::optimize_window;
use crate::ba_core::window::SlidingWindow;
use crate::config::OdometryConfig;
use crate::feature_extract::{extract_features, FeatureCategory};
use crate::geom::RigidTransform;
use crate::landmark_map::LandmarkMap;
use crate::motion_model::{predict_next_state, MotionError, MotionState};
use crate::scan_io::{read_scan_file, write_trajectory, Scan, ScanIoError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("scan {index} starts at {t} which is not after the previous scan at {prev}")]
    OutOfOrder { index: usize, t: f64, prev: f64 },
    #[error("no scans found in {0}")]
    NoScans(String),
    #[error("fewer than 2 trajectory pairs associate within tolerance {tolerance}")]
    TooFewPairs { tolerance: f64 },
    #[error("scan {index} ({stage}): {source}")]
    Scan {
        index: usize,
        stage: &'static str,
        #[source]
        source: ScanIoError,
    },
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Io(#[from] ScanIoError),
}

/// One report row.
#[derive(Debug, Clone)]
pub struct ScanRecord {
    pub index: usize,
    pub time_ms: f64,
    pub cost_final: f64,
    pub landmarks_active: usize,
    pub created: usize,
    pub deleted: usize,
    pub lm_iters: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub records: Vec<ScanRecord>,
    pub ate_rmse: Option<f64>,
}

impl RunReport {
    /// Text table, one row per scan. Timing can be suppressed so two
    /// identical runs serialize identically.
    pub fn to_table(&self, with_timing: bool) -> String {
        let mut out =
            String::from("# index time_ms cost_final landmarks_active created deleted lm_iters\n");
        for r in &self.records {
            let t = if with_timing { r.time_ms } else { 0.0 };
            out.push_str(&format!(
                "{} {:.3} {:.6e} {} {} {} {}\n",
                r.index, t, r.cost_final, r.landmarks_active, r.created, r.deleted, r.lm_iters
            ));
        }
        if let Some(ate) = self.ate_rmse {
            out.push_str(&format!("# ate_rmse_m {ate:.6}\n"));
        }
        out
    }

    pub fn mean_time_ms(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.time_ms).sum::<f64>() / self.records.len() as f64
    }
}

/// The odometry engine: owns the landmark map, the sliding window, and the
/// per-scan state machine.
pub struct OdometryEngine {
    pub config: OdometryConfig,
    pub map: LandmarkMap,
    pub window: SlidingWindow,
    last_state: Option<MotionState>,
    pub records: Vec<ScanRecord>,
}

impl OdometryEngine {
    pub fn new(config: OdometryConfig) -> Self {
        let window = SlidingWindow::new(config.window_size);
        Self {
            config,
            map: LandmarkMap::new(),
            window,
            last_state: None,
            records: Vec::new(),
        }
    }

    /// Runs the full per-scan pipeline and returns the newest optimized
    /// Feature extraction plus the optional plane subsampling stride.
    fn clustered_features(
        &self,
        scan: &Scan,
        state: &MotionState,
    ) -> Vec<crate::feature_extract::FeatureCluster> {
        let mut clusters = extract_features(scan, state, &self.config.feature);
        if self.config.plane_stride > 1 {
            let stride = self.config.plane_stride;
            for c in &mut clusters {
                if c.category == FeatureCategory::Plane {
                    c.members = c.members.iter().step_by(stride).cloned().collect();
                }
            }
            let min = self.config.feature.min_cluster;
            clusters.retain(|c| c.members.len() >= min);
        }
        clusters
    }

    /// state: predict, extract, associate, optimize, maintain, marginalize.
    pub fn process_scan(&mut self, scan: &Scan) -> Result<MotionState, PipelineError> {
        let started = Instant::now();
        if let Some(last) = &self.last_state {
            if scan.start_time <= last.start_time {
                return Err(PipelineError::OutOfOrder {
                    index: scan.index,
                    t: scan.start_time,
                    prev: last.start_time,
                });
            }
        }
        let predicted = match &self.last_state {
            Some(last) => predict_next_state(last, scan.start_time)?,
            None => MotionState::identity(scan.start_time),
        };

        let clusters = self.clustered_features(scan, &predicted);

        // Until the first pose leaves the window the velocity estimate is
        // still being bootstrapped and the predicted pose can be off by a
        // full inter-scan displacement. Under the normal shape gate that
        // error rejects exactly the associations that carry motion
        // information (points land a displacement away from their surface),
        // while the motion-blind ones still pass, so the optimizer would
        // lock onto the unrefined prediction. Instead, iterate: associate
        // under a relaxed gate, optimize, roll the map back, re-extract with
        // the refined state, and repeat, closing with a strict pass so no
        // off-surface association survives into the map.
        let bootstrap = self.window.fixed_poses.is_empty() && !self.map.is_empty();
        self.window.push(scan.index, predicted);
        let (mut report, mut outcome);
        if bootstrap {
            let snapshot = self.map.clone();
            let mut relaxed_cfg = self.config.landmark.clone();
            relaxed_cfg.assoc_spread = relaxed_cfg.assoc_spread.max(0.1);
            report = self
                .map
                .associate(&clusters, &predicted, scan.index, &relaxed_cfg);
            outcome = optimize_window(&self.map, &mut self.window, &self.config.solver);
            for round in 1..3 {
                self.map = snapshot.clone();
                let refined = self
                    .window
                    .entries
                    .last()
                    .expect("window holds the scan just pushed")
                    .state;
                let reclusters = self.clustered_features(scan, &refined);
                let cfg = if round < 2 {
                    &relaxed_cfg
                } else {
                    &self.config.landmark
                };
                report = self.map.associate(&reclusters, &refined, scan.index, cfg);
                outcome = optimize_window(&self.map, &mut self.window, &self.config.solver);
            }
        } else {
            report = self
                .map
                .associate(&clusters, &predicted, scan.index, &self.config.landmark);
            outcome = optimize_window(&self.map, &mut self.window, &self.config.solver);
        }

        let mut deleted = self.map.update_observation_counts(&report).len();
        // Center drift re-check for landmarks whose creation scan was just
        // re-optimized; once that scan is marginalized its pose is fixed and
        // the drift can no longer change.
        let drift_ids: Vec<(u64, usize)> = self
            .map
            .landmarks
            .values()
            .filter(|lm| self.window.state_of(lm.creation_scan).is_some())
            .map(|lm| (lm.id, lm.creation_scan))
            .collect();
        for (id, creation) in drift_ids {
            let state = *self.window.state_of(creation).expect("filtered above");
            if self.map.check_center_drift(id, &state, &self.config.landmark)
                == crate::landmark_map::DriftDecision::Delete
            {
                deleted += 1;
            }
        }
        deleted += self
            .map
            .prune_small_planes(scan.index, &self.config.landmark)
            .len();

        if self.window.is_full() {
            self.window.marginalize_oldest(&mut self.map);
        }

        let newest = self
            .window
            .entries
            .last()
            .expect("window holds the scan just pushed")
            .state;
        self.last_state = Some(newest);
        self.records.push(ScanRecord {
            index: scan.index,
            time_ms: started.elapsed().as_secs_f64() * 1e3,
            cost_final: outcome.cost_trace.last().copied().unwrap_or(0.0),
            landmarks_active: self.map.len(),
            created: report.created.len(),
            deleted,
            lm_iters: outcome.iterations,
        });
        Ok(newest)
    }

    /// Final pose estimate per scan: fixed poses for marginalized scans, the
    /// current window states for the rest, ordered by scan index.
    pub fn trajectory(&self) -> Vec<(f64, RigidTransform)> {
        let mut by_index: BTreeMap<usize, (f64, RigidTransform)> = BTreeMap::new();
        for (idx, st) in &self.window.fixed_poses {
            by_index.insert(*idx, (st.start_time, st.transform));
        }
        for e in &self.window.entries {
            by_index.insert(e.scan_index, (e.state.start_time, e.state.transform));
        }
        by_index.into_values().collect()
    }

    pub fn into_report(self) -> RunReport {
        RunReport {
            records: self.records,
            ate_rmse: None,
        }
    }
}

/// RMSE of absolute translational error after closed-form rigid alignment
/// (Umeyama with scale fixed to 1). Pairs are associated by timestamp within
/// `tolerance` seconds.
pub fn ate_rmse(
    estimated: &[(f64, RigidTransform)],
    ground_truth: &[(f64, RigidTransform)],
    tolerance: f64,
) -> Result<f64, PipelineError> {
    let mut pairs: Vec<(Vector3<f64>, Vector3<f64>)> = Vec::new();
    for (t, est) in estimated {
        let best = ground_truth
            .iter()
            .map(|(tg, g)| ((tg - t).abs(), g))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((dt, g)) = best {
            if dt <= tolerance {
                pairs.push((est.translation, g.translation));
            }
        }
    }
    if pairs.len() < 2 {
        return Err(PipelineError::TooFewPairs { tolerance });
    }
    let n = pairs.len() as f64;
    let mean_e: Vector3<f64> = pairs.iter().map(|(e, _)| e).sum::<Vector3<f64>>() / n;
    let mean_g: Vector3<f64> = pairs.iter().map(|(_, g)| g).sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (e, g) in &pairs {
        h += (g - mean_g) * (e - mean_e).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with v_t");
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rot = u * s * vt;
    let trans = mean_g - rot * mean_e;
    let mse = pairs
        .iter()
        .map(|(e, g)| (rot * e + trans - g).norm_squared())
        .sum::<f64>()
        / n;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub gt: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Lexicographically sorted scan files: regular files whose first line
/// carries the scan header.
pub fn list_dataset(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files: Vec<PathBuf> = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|source| {
        PipelineError::Io(ScanIoError::Io {
            path: dir.display().to_string(),
            source,
        })
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| {
            PipelineError::Io(ScanIoError::Io {
                path: dir.display().to_string(),
                source,
            })
        })?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let mut head = [0u8; 12];
        let is_scan = std::fs::File::open(&path)
            .and_then(|mut f| std::io::Read::read_exact(&mut f, &mut head))
            .map(|_| &head == b"# lmbao-scan")
            .unwrap_or(false);
        if is_scan {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if files.is_empty() {
        return Err(PipelineError::NoScans(dir.display().to_string()));
    }
    Ok(files)
}

/// Processes a whole dataset directory: runs the engine over every scan,
/// writes the trajectory (and optional report), and evaluates ATE against an
/// optional ground-truth trajectory.
pub fn run_dataset(
    opts: &RunOptions,
    config: &OdometryConfig,
) -> Result<RunReport, PipelineError> {
    let files = list_dataset(&opts.dataset)?;
    let mut engine = OdometryEngine::new(config.clone());
    for (index, path) in files.iter().enumerate() {
        let mut scan = read_scan_file(path).map_err(|source| PipelineError::Scan {
            index,
            stage: "read",
            source,
        })?;
        scan.index = index;
        engine.process_scan(&scan)?;
    }
    let trajectory = engine.trajectory();
    write_trajectory(&trajectory, &opts.out)?;

    let mut report = RunReport {
        records: engine.records,
        ate_rmse: None,
    };
    if let Some(gt_path) = &opts.gt {
        let gt = crate::scan_io::read_trajectory(gt_path)?;
        let tolerance = 0.5 * median_period(&trajectory);
        report.ate_rmse = Some(ate_rmse(&trajectory, &gt, tolerance)?);
    }
    if let Some(report_path) = &opts.report {
        std::fs::write(report_path, report.to_table(config.report_timing)).map_err(|source| {
            PipelineError::Io(ScanIoError::Io {
                path: report_path.display().to_string(),
                source,
            })
        })?;
    }
    Ok(report)
}

fn median_period(trajectory: &[(f64, RigidTransform)]) -> f64 {
    let mut gaps: Vec<f64> = trajectory.windows(2).map(|w| w[1].0 - w[0].0).collect();
    if gaps.is_empty() {
        return 0.1;
    }
    gaps.sort_by(f64::total_cmp);
    gaps[gaps.len() / 2]
}

/// Writes a synthetic dataset: one scan file per sweep plus the ground-truth
/// trajectory as `groundtruth.txt` (not matched by the scan header filter).
pub fn synthesize_dataset(
    world: &crate::scan_io::SyntheticWorld,
    trajectory: &crate::scan_io::Trajectory,
    scans: usize,
    period: f64,
    beam: &crate::scan_io::BeamModel,
    sigma: f64,
    seed: u64,
    dir: &Path,
) -> Result<PathBuf, PipelineError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut gt: Vec<(f64, RigidTransform)> = Vec::new();
    for i in 0..scans {
        let t = i as f64 * period;
        let scan = crate::scan_io::simulate_scan(
            world, trajectory, i, t, period, beam, sigma, &mut rng,
        )
        .map_err(|source| PipelineError::Scan {
            index: i,
            stage: "simulate",
            source,
        })?;
        let path = dir.join(format!("scan_{i:05}.txt"));
        crate::scan_io::write_scan_file(&scan, &path)?;
        gt.push((scan.start_time, trajectory.pose_at(scan.start_time)));
    }
    let gt_path = dir.join("groundtruth.txt");
    write_trajectory(&gt, &gt_path)?;
    Ok(gt_path)
}
