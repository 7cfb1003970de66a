//! Error-state filtering of the trocar-in-end-effector pose.
//!
//! All filters consume the same per-camera-tick stream: the end-effector
//! increment since the previous tick (base frame), the end-effector pose at
//! the previous tick, and an optional pose measurement with a reprojection
//! quality. Prediction is shared: a static target observed from a moving
//! end-effector moves by exactly the inverse of the end-effector's own
//! body-frame increment, so the prior composes that inverse increment with
//! the previous posterior. This realizes the error-state dynamics
//! `δs = B·ψ` (with `B = diag(R_b^e, R_b^e)` and the sign expressing target
//! motion relative to the end-effector) without first-order integration
//! error, which is what lets pure dead-reckoning track a static target
//! exactly on noiseless kinematics.
//!
//! Implemented filters: classical error-state Kalman update with χ² gating,
//! raw-state KF/EKF baselines operating directly on `[p, q]` (included to
//! demonstrate their orientation failure), a one-shot hand-eye-calibration
//! baseline, pure dead-reckoning, an observation passthrough, and the
//! learned GRU-gain filters in [`network`].

mod classical;
pub mod network;
pub mod training;

pub use classical::{
    ClassicalEskf, DeadReckoning, EskfConfig, HandEyeKinematic, ObservationOnly, RawKalman,
};

use nalgebra::{UnitQuaternion, Vector3, Vector6};

use crate::real::Real;
use crate::se3::{quat_to_rotvec, Pose};

#[derive(Debug, Clone, thiserror::Error)]
pub enum FilterError {
    #[error("no valid measurement within the first {0:.1} s of the stream")]
    NoInitialMeasurement(f64),
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("quality weight {0} outside [0.2, 1.0]")]
    BadQuality(f64),
}

/// Camera-derived pose measurement at one camera tick.
#[derive(Debug, Clone, Copy)]
pub struct Measurement {
    pub t: f64,
    /// Trocar pose in the end-effector frame.
    pub z: Pose<f64>,
    /// Reprojection quality weight in `[0.2, 1.0]` (1 = best frame).
    pub quality_w: f64,
    /// False when occluded or otherwise unsolvable; `z` is then meaningless.
    pub valid: bool,
}

impl Measurement {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.valid && !(0.2..=1.0).contains(&self.quality_w) {
            return Err(FilterError::BadQuality(self.quality_w));
        }
        Ok(())
    }
}

/// End-effector increment over one filter tick: `[δp_e^b, δθ_e^b]`,
/// base frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlIncrement {
    pub psi: Vector6<f64>,
}

impl ControlIncrement {
    pub fn zero() -> Self {
        ControlIncrement {
            psi: Vector6::zeros(),
        }
    }

    /// Exact increment between two forward-kinematics poses:
    /// `δp = p₁ - p₀` and `δθ = Log(R₁ R₀ᵀ)` (world-frame rotation delta).
    /// Agrees with `J q̇ T_s` to second order in the step size.
    pub fn from_fk_poses(prev: &Pose<f64>, cur: &Pose<f64>) -> Self {
        let dp = cur.p - prev.p;
        let dtheta = quat_to_rotvec(&(cur.q * prev.q.inverse()));
        let mut psi = Vector6::zeros();
        psi.fixed_rows_mut::<3>(0).copy_from(&dp);
        psi.fixed_rows_mut::<3>(3).copy_from(&dtheta);
        ControlIncrement { psi }
    }
}

/// Exact prior: compose the inverse of the end-effector's body-frame
/// increment with the previous posterior.
///
/// `ee_q_prev` is the end-effector orientation in the base frame at the
/// previous tick (its inverse is the `R_b^e` of the motion-transfer matrix).
pub fn eskf_predict<T: Real>(
    s_prev: &Pose<T>,
    psi: &Vector6<T>,
    ee_q_prev: &UnitQuaternion<T>,
) -> Pose<T> {
    let r_be = ee_q_prev.inverse();
    let dp_e = r_be * Vector3::new(psi[0], psi[1], psi[2]);
    let dth_e = r_be * Vector3::new(psi[3], psi[4], psi[5]);
    let inc = Pose::new(dp_e, crate::se3::quat_from_rotvec(&dth_e));
    inc.inverse().compose(s_prev)
}

/// Uniform interface every filter implements so the evaluation harness can
/// feed them identical streams.
pub trait PoseFilter {
    fn name(&self) -> &'static str;

    /// Advance one camera tick. `psi` is the end-effector increment since
    /// the previous tick with `ee_prev` the end-effector pose at that
    /// previous tick; `meas` is this tick's measurement when the camera
    /// produced one. Returns the posterior, or `None` while uninitialized
    /// (before the first valid measurement).
    fn step(
        &mut self,
        psi: &Vector6<f64>,
        ee_prev: &Pose<f64>,
        meas: Option<&Measurement>,
    ) -> Option<Pose<f64>>;
}

/// Run a filter over aligned measurement/increment streams; `increments[i]`
/// moves the end-effector from tick `i-1` to tick `i` (`increments[0]` is
/// ignored). Errors if no valid measurement arrives within `init_window_s`.
pub fn run_filter(
    filter: &mut dyn PoseFilter,
    measurements: &[Measurement],
    increments: &[ControlIncrement],
    ee_poses: &[Pose<f64>],
    init_window_s: f64,
) -> Result<Vec<Option<Pose<f64>>>, FilterError> {
    if measurements.len() != increments.len() || measurements.len() != ee_poses.len() {
        return Err(FilterError::LengthMismatch(
            measurements.len(),
            increments.len().min(ee_poses.len()),
        ));
    }
    let t0 = measurements.first().map_or(0.0, |m| m.t);
    let mut out = Vec::with_capacity(measurements.len());
    let mut initialized = false;
    for i in 0..measurements.len() {
        let psi = if i == 0 {
            Vector6::zeros()
        } else {
            increments[i].psi
        };
        let ee_prev = if i == 0 { ee_poses[0] } else { ee_poses[i - 1] };
        let meas = &measurements[i];
        meas.validate()?;
        let post = filter.step(&psi, &ee_prev, Some(meas));
        if !initialized && post.is_none() && meas.t - t0 > init_window_s {
            return Err(FilterError::NoInitialMeasurement(init_window_s));
        }
        initialized |= post.is_some();
        out.push(post);
    }
    Ok(out)
}
