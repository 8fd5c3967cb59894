//! Constant-velocity motion compensation within a scan and state prediction
//! for the next scan.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geom::{exp_so3_raw, RigidTransform, RotationMatrix};

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("point timestamp {t_point} precedes scan start {t_scan}")]
    TimeBeforeScan { t_point: f64, t_scan: f64 },
    #[error("prediction target {t_next} is not after scan start {t_scan}")]
    NonIncreasingTime { t_next: f64, t_scan: f64 },
}

/// Per-scan state: world pose plus linear and angular velocity expressed in
/// the scan's own frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionState {
    pub transform: RigidTransform,
    /// m/s, current-scan frame.
    pub linear_velocity: Vector3<f64>,
    /// rad/s rotation vector, current-scan frame.
    pub angular_velocity: Vector3<f64>,
    /// Scan start time, seconds.
    pub start_time: f64,
}

impl MotionState {
    /// Bootstrap state for the first scan: identity pose, zero velocities.
    pub fn identity(start_time: f64) -> Self {
        Self {
            transform: RigidTransform::identity(),
            linear_velocity: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
            start_time,
        }
    }
}

/// De-skews a raw point recorded at `t_i` into the scan-start frame:
/// `exp((t_i - t_k) ω) p + (t_i - t_k) v`.
pub fn compensate_point(
    p: &Vector3<f64>,
    t_i: f64,
    state: &MotionState,
) -> Result<Vector3<f64>, MotionError> {
    let dt = t_i - state.start_time;
    if dt < 0.0 {
        return Err(MotionError::TimeBeforeScan {
            t_point: t_i,
            t_scan: state.start_time,
        });
    }
    Ok(compensate_point_raw(p, dt, state))
}

/// Same as [`compensate_point`] with the time offset already validated.
#[inline]
pub(crate) fn compensate_point_raw(p: &Vector3<f64>, dt: f64, state: &MotionState) -> Vector3<f64> {
    exp_so3_raw(&(dt * state.angular_velocity)) * p + dt * state.linear_velocity
}

/// Maps a compensated point into the world frame via the scan pose.
pub fn to_world(state: &MotionState, p_compensated: &Vector3<f64>) -> Vector3<f64> {
    state.transform.apply(p_compensated)
}

/// Propagates the state to the start of the next scan under the constant
/// velocity model: the pose advances by the in-scan motion and the body-frame
/// velocities are rotated back into the new frame.
pub fn predict_next_state(state: &MotionState, t_next: f64) -> Result<MotionState, MotionError> {
    let dt = t_next - state.start_time;
    if dt < 0.0 || (dt == 0.0 && t_next != state.start_time) {
        return Err(MotionError::NonIncreasingTime {
            t_next,
            t_scan: state.start_time,
        });
    }
    let rot_step = RotationMatrix::from_matrix_unchecked(exp_so3_raw(&(dt * state.angular_velocity)));
    let step = RigidTransform::new(rot_step, dt * state.linear_velocity);
    let back = exp_so3_raw(&(-dt * state.angular_velocity));
    Ok(MotionState {
        transform: state.transform.compose(&step),
        linear_velocity: back * state.linear_velocity,
        angular_velocity: back * state.angular_velocity,
        start_time: t_next,
    })
}

/// Relative transform from the scan-start frame to the body frame at
/// `start_time + dt` under the constant velocity model.
pub fn relative_motion(state: &MotionState, dt: f64) -> RigidTransform {
    RigidTransform::new(
        RotationMatrix::from_matrix_unchecked(exp_so3_raw(&(dt * state.angular_velocity))),
        dt * state.linear_velocity,
    )
}
