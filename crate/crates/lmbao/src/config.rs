//! Plain-text `key=value` configuration covering every module.

use std::path::Path;

use thiserror::Error;

use crate::ba_core::residuals::ContinuityWeights;
use crate::ba_core::solver::SolverConfig;
use crate::feature_extract::FeatureConfig;
use crate::landmark_map::LandmarkConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io error for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected key=value, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for {key}: {message}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Full engine configuration. Field groups mirror the module configs.
#[derive(Debug, Clone)]
pub struct OdometryConfig {
    pub feature: FeatureConfig,
    pub landmark: LandmarkConfig,
    pub solver: SolverConfig,
    /// Scans jointly optimized in the sliding window.
    pub window_size: usize,
    /// Keep every n-th member of plane clusters before association.
    pub plane_stride: usize,
    pub seed: u64,
    /// Write measured wall time into the report; disable for byte-identical
    /// report files across runs.
    pub report_timing: bool,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            feature: FeatureConfig::default(),
            landmark: LandmarkConfig::default(),
            solver: SolverConfig::default(),
            window_size: 4,
            plane_stride: 3,
            seed: 0,
            report_timing: true,
        }
    }
}

fn parse_as<T: std::str::FromStr>(
    line: usize,
    key: &str,
    value: &str,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.to_string(),
        value: value.to_string(),
        message: format!("expected {}", std::any::type_name::<T>()),
    })
}

impl OdometryConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Parses `key=value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line,
                    text: content.to_string(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "alpha" => cfg.feature.alpha = parse_as(line, key, value)?,
                "rings" => cfg.feature.rings = parse_as(line, key, value)?,
                "elev_min_deg" => {
                    cfg.feature.elev_min = parse_as::<f64>(line, key, value)?.to_radians()
                }
                "elev_max_deg" => {
                    cfg.feature.elev_max = parse_as::<f64>(line, key, value)?.to_radians()
                }
                "plane_threshold" => cfg.feature.plane_threshold = parse_as(line, key, value)?,
                "edge_threshold" => cfg.feature.edge_threshold = parse_as(line, key, value)?,
                "smooth_window" => cfg.feature.smooth_window = parse_as(line, key, value)?,
                "depth_gap" => cfg.feature.depth_gap = parse_as(line, key, value)?,
                "plane_depth_gap" => cfg.feature.plane_depth_gap = parse_as(line, key, value)?,
                "min_cluster" => {
                    cfg.feature.min_cluster = parse_as(line, key, value)?;
                    cfg.landmark.min_cluster = cfg.feature.min_cluster;
                }
                "obs_count_init" => cfg.landmark.obs_count_init = parse_as(line, key, value)?,
                "drift_factor" => cfg.landmark.drift_factor = parse_as(line, key, value)?,
                "min_plane_points" => cfg.landmark.min_plane_points = parse_as(line, key, value)?,
                "min_plane_age" => cfg.landmark.min_plane_age = parse_as(line, key, value)?,
                "radius_clamp" => {
                    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                    if parts.len() != 2 {
                        return Err(ConfigError::BadValue {
                            line,
                            key: key.into(),
                            value: value.into(),
                            message: "expected min,max".into(),
                        });
                    }
                    cfg.landmark.radius_min = parse_as(line, key, parts[0])?;
                    cfg.landmark.radius_max = parse_as(line, key, parts[1])?;
                }
                "max_points_per_scan" => {
                    cfg.landmark.max_points_per_scan = parse_as(line, key, value)?
                }
                "max_shape_spread" => cfg.landmark.max_shape_spread = parse_as(line, key, value)?,
                "assoc_spread" => cfg.landmark.assoc_spread = parse_as(line, key, value)?,
                "min_plane_extent" => cfg.landmark.min_plane_extent = parse_as(line, key, value)?,
                "window_size" => cfg.window_size = parse_as(line, key, value)?,
                "lm_max_iters" => cfg.solver.max_iterations = parse_as(line, key, value)?,
                "lm_init_damping" => cfg.solver.initial_damping = parse_as(line, key, value)?,
                "weights.position" => cfg.solver.weights.position = parse_as(line, key, value)?,
                "weights.rotation" => cfg.solver.weights.rotation = parse_as(line, key, value)?,
                "weights.angular" => cfg.solver.weights.angular = parse_as(line, key, value)?,
                "min_plane_eval" => cfg.solver.min_plane_eval = parse_as(line, key, value)?,
                "min_edge_eval" => cfg.solver.min_edge_eval = parse_as(line, key, value)?,
                "scale_by_count" => cfg.solver.scale_by_count = parse_as(line, key, value)?,
                "plane_stride" => cfg.plane_stride = parse_as(line, key, value)?,
                "seed" => cfg.seed = parse_as(line, key, value)?,
                "report_timing" => cfg.report_timing = parse_as(line, key, value)?,
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if self.window_size < 2 {
            problems.push("window_size must be at least 2".to_string());
        }
        for (name, v) in [
            ("alpha", self.feature.alpha),
            ("plane_threshold", self.feature.plane_threshold),
            ("edge_threshold", self.feature.edge_threshold),
            ("depth_gap", self.feature.depth_gap),
            ("plane_depth_gap", self.feature.plane_depth_gap),
            ("drift_factor", self.landmark.drift_factor),
            ("radius_clamp min", self.landmark.radius_min),
            ("max_shape_spread", self.landmark.max_shape_spread),
            ("assoc_spread", self.landmark.assoc_spread),
            ("min_plane_extent", self.landmark.min_plane_extent),
        ] {
            if !(v > 0.0) {
                problems.push(format!("{name} must be positive, got {v}"));
            }
        }
        if self.feature.edge_threshold <= self.feature.plane_threshold {
            problems.push("edge_threshold must exceed plane_threshold".to_string());
        }
        if self.landmark.radius_max < self.landmark.radius_min {
            problems.push("radius_clamp max below min".to_string());
        }
        if self.plane_stride == 0 {
            problems.push("plane_stride must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems.join("; ")))
        }
    }

    /// Canonical serialization; `parse` of the output reproduces the config.
    pub fn to_config_string(&self) -> String {
        let w: &ContinuityWeights = &self.solver.weights;
        format!(
            "alpha={}\nrings={}\nelev_min_deg={}\nelev_max_deg={}\n\
             plane_threshold={}\nedge_threshold={}\nsmooth_window={}\ndepth_gap={}\nplane_depth_gap={}\n\
             min_cluster={}\nobs_count_init={}\ndrift_factor={}\nmin_plane_points={}\n\
             min_plane_age={}\nradius_clamp={},{}\nmax_points_per_scan={}\n\
             max_shape_spread={}\nassoc_spread={}\nmin_plane_extent={}\nwindow_size={}\n\
             lm_max_iters={}\nlm_init_damping={}\nweights.position={}\nweights.rotation={}\n\
             weights.angular={}\nmin_plane_eval={}\nmin_edge_eval={}\nscale_by_count={}\n\
             plane_stride={}\nseed={}\nreport_timing={}\n",
            self.feature.alpha,
            self.feature.rings,
            self.feature.elev_min.to_degrees(),
            self.feature.elev_max.to_degrees(),
            self.feature.plane_threshold,
            self.feature.edge_threshold,
            self.feature.smooth_window,
            self.feature.depth_gap,
            self.feature.plane_depth_gap,
            self.feature.min_cluster,
            self.landmark.obs_count_init,
            self.landmark.drift_factor,
            self.landmark.min_plane_points,
            self.landmark.min_plane_age,
            self.landmark.radius_min,
            self.landmark.radius_max,
            self.landmark.max_points_per_scan,
            self.landmark.max_shape_spread,
            self.landmark.assoc_spread,
            self.landmark.min_plane_extent,
            self.window_size,
            self.solver.max_iterations,
            self.solver.initial_damping,
            w.position,
            w.rotation,
            w.angular,
            self.solver.min_plane_eval,
            self.solver.min_edge_eval,
            self.solver.scale_by_count,
            self.plane_stride,
            self.seed,
            self.report_timing,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_default() {
        let cfg = OdometryConfig::parse("").unwrap();
        assert_eq!(cfg.window_size, 4);
        assert_eq!(cfg.landmark.obs_count_init, 4);
    }

    #[test]
    fn comments_and_values() {
        let cfg = OdometryConfig::parse(
            "# a comment\nwindow_size=3\nplane_threshold = 0.07  # inline\nradius_clamp=0.5,2.5\n",
        )
        .unwrap();
        assert_eq!(cfg.window_size, 3);
        assert_eq!(cfg.feature.plane_threshold, 0.07);
        assert_eq!(cfg.landmark.radius_min, 0.5);
        assert_eq!(cfg.landmark.radius_max, 2.5);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = OdometryConfig::parse("frobnicate=1\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 1, .. }));
    }

    #[test]
    fn malformed_line_rejected() {
        assert!(matches!(
            OdometryConfig::parse("just words\n").unwrap_err(),
            ConfigError::Malformed { .. }
        ));
    }

    #[test]
    fn bad_value_rejected() {
        assert!(matches!(
            OdometryConfig::parse("window_size=big\n").unwrap_err(),
            ConfigError::BadValue { .. }
        ));
    }

    #[test]
    fn invariants_enforced() {
        assert!(OdometryConfig::parse("window_size=1\n").is_err());
        assert!(OdometryConfig::parse("edge_threshold=0.01\n").is_err());
        assert!(OdometryConfig::parse("radius_clamp=3.0,0.3\n").is_err());
    }

    #[test]
    fn round_trips_through_serialization() {
        let mut cfg = OdometryConfig::default();
        cfg.window_size = 5;
        cfg.solver.weights.angular = 0.25;
        cfg.feature.depth_gap = 0.45;
        let back = OdometryConfig::parse(&cfg.to_config_string()).unwrap();
        assert_eq!(back.window_size, 5);
        assert_eq!(back.solver.weights.angular, 0.25);
        assert_eq!(back.feature.depth_gap, 0.45);
        assert!((back.feature.elev_min - cfg.feature.elev_min).abs() < 1e-12);
    }
}
