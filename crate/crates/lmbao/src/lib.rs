//! Landmark-map bundle-adjustment LiDAR odometry.
//!
//! A sliding-window BA odometry engine: scans are motion-compensated with a
//! constant velocity model, plane and edge features are extracted from a
//! spherical projection, features are associated into persistent landmarks,
//! and the recent scan states are jointly optimized against eigenvalue
//! point-cloud residuals. Scans leaving the window are marginalized into
//! per-landmark moment accumulators so their constraints persist at constant
//! cost.

pub mod ba_core;
pub mod config;
pub mod feature_extract;
pub mod geom;
pub mod landmark_map;
pub mod motion_model;
pub mod pipeline;
pub mod scan_io;
