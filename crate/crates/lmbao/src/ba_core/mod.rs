//! Bundle-adjustment core: moment accumulators, eigenvalue residuals,
//! marginalization, and the sliding-window Levenberg-Marquardt solver.

pub mod moments;
pub mod residuals;
pub mod solver;
pub mod window;
