//! Simulation-backed toolkit for semi-autonomous keyhole docking.
//!
//! The crate covers the full desk-scale stack: marker-based pose estimation
//! (EPnP + SVD registration), 7-DOF arm dynamics (RNEA) with external-wrench
//! estimation, a closed-loop world model, error-state filtering with both
//! classical and learned (GRU) gains, self-supervised hand-eye calibration
//! and dataset construction, an optimization-based compliant velocity
//! controller, and the evaluation metrics that compare them.
//!
//! The numeric core is generic over the scalar type via [`real::Real`]
//! (`f32`, `f64`, or the reverse-mode autodiff scalar [`autodiff::Ad`]);
//! the pipeline layers (simulation, dataset, file formats) run at `f64`.

pub mod autodiff;
pub mod controller;
pub mod real;
pub mod robot;
pub mod se3;
pub mod vision;

pub use real::Real;

/// `f64` pose used by the pipeline layers.
pub type Pose64 = se3::Pose<f64>;
/// `f32` pose alias.
pub type Pose32 = se3::Pose<f32>;
/// `f64` error state.
pub type ErrorState64 = se3::ErrorState<f64>;
/// `f64` twist.
pub type Twist64 = se3::Twist<f64>;
