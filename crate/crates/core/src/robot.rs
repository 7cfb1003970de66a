//! 7-DOF serial-arm kinematics, geometric Jacobian, RNEA inverse dynamics,
//! and external-wrench estimation.
//!
//! The arm is described by a JSON data file (`data/arm7.json` ships with the
//! crate): per joint a fixed origin transform, a rotation axis, link mass,
//! COM, inertia about the COM, position/velocity limits, and Coulomb/viscous
//! friction. Units are SI throughout (m, kg, kg·m², rad, N·m). The tool
//! transform places the end-effector frame at the instrument tip with its
//! z-axis pointing from the tip back toward the flange, so insertion motion
//! is along `-z` of the end-effector.

mod rnea;

pub use rnea::{mass_matrix, rnea, rnea_with};

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::se3::{quat_from_rotvec, Pose};

pub type JointVector<T> = SVector<T, 7>;
pub type Jacobian<T> = SMatrix<T, 6, 7>;

#[derive(Debug, Clone, thiserror::Error)]
pub enum RobotError {
    #[error("invalid robot description: {0}")]
    BadChain(String),
    #[error("robot description parse error: {0}")]
    Parse(String),
}

/// Per-joint parameters. The link frame coincides with the joint frame after
/// the joint rotation; COM and inertia are expressed there.
#[derive(Debug, Clone)]
pub struct JointParams<T: Real> {
    pub origin: Pose<T>,
    /// Unit rotation axis in the joint frame.
    pub axis: Vector3<T>,
    pub mass: T,
    pub com: Vector3<T>,
    pub inertia: Matrix3<T>,
    pub q_limit: (T, T),
    pub dq_limit: T,
    /// Coulomb friction, N·m.
    pub coulomb: T,
    /// Viscous friction, N·m·s.
    pub viscous: T,
}

#[derive(Debug, Clone)]
pub struct KinematicChain<T: Real> {
    pub joints: Vec<JointParams<T>>,
    /// Fixed transform from the last joint frame to the end-effector frame.
    pub tool: Pose<T>,
    /// Gravity acceleration in the base frame, m/s².
    pub gravity: Vector3<T>,
}

impl<T: Real> KinematicChain<T> {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// Copy with Coulomb and viscous friction zeroed (model-only torques).
    pub fn with_zero_friction(&self) -> Self {
        let mut c = self.clone();
        for j in &mut c.joints {
            j.coulomb = T::zero();
            j.viscous = T::zero();
        }
        c
    }

    pub fn within_position_limits(&self, q: &JointVector<T>) -> bool {
        self.joints
            .iter()
            .enumerate()
            .all(|(i, j)| q[i] >= j.q_limit.0 && q[i] <= j.q_limit.1)
    }

    pub fn clamp_joint_velocity(&self, dq: &JointVector<T>) -> JointVector<T> {
        let mut out = *dq;
        for (i, j) in self.joints.iter().enumerate() {
            out[i] = out[i].clamp(-j.dq_limit, j.dq_limit);
        }
        out
    }
}

/// Joint-space sensor snapshot.
#[derive(Debug, Clone, Copy)]
pub struct JointState<T: Real> {
    pub q: JointVector<T>,
    pub dq: JointVector<T>,
    pub ddq: JointVector<T>,
    /// Measured joint torques, N·m.
    pub tau_raw: JointVector<T>,
}

/// Task-space force/torque, expressed in the end-effector frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench<T: Real> {
    pub force: Vector3<T>,
    pub torque: Vector3<T>,
}

impl<T: Real> Wrench<T> {
    pub fn zero() -> Self {
        Wrench {
            force: Vector3::zeros(),
            torque: Vector3::zeros(),
        }
    }
}

/// External-wrench solve result; `near_singular` flags low-confidence output
/// (smallest singular value of the Jacobian below 1e-3).
#[derive(Debug, Clone, Copy)]
pub struct WrenchEstimate<T: Real> {
    pub wrench: Wrench<T>,
    pub near_singular: bool,
}

/// World-frame frames of every joint plus the end-effector.
#[derive(Debug, Clone)]
pub struct Frames<T: Real> {
    pub joints: Vec<Pose<T>>,
    pub ee: Pose<T>,
}

pub fn fk_frames<T: Real>(chain: &KinematicChain<T>, q: &JointVector<T>) -> Frames<T> {
    let mut cur = Pose::identity();
    let mut joints = Vec::with_capacity(chain.dof());
    for (i, j) in chain.joints.iter().enumerate() {
        cur = cur.compose(&j.origin).compose(&Pose::new(
            Vector3::zeros(),
            quat_from_rotvec(&(j.axis * q[i])),
        ));
        joints.push(cur);
    }
    let ee = cur.compose(&chain.tool);
    Frames { joints, ee }
}

/// End-effector pose in the base frame.
pub fn fk<T: Real>(chain: &KinematicChain<T>, q: &JointVector<T>) -> Pose<T> {
    fk_frames(chain, q).ee
}

/// Geometric Jacobian at the end-effector point, base frame.
/// Rows 0..3 are linear, rows 3..6 angular.
pub fn jacobian<T: Real>(chain: &KinematicChain<T>, q: &JointVector<T>) -> Jacobian<T> {
    let frames = fk_frames(chain, q);
    let p_ee = frames.ee.p;
    let mut j = Jacobian::zeros();
    for i in 0..chain.dof() {
        let z = frames.joints[i].q * chain.joints[i].axis;
        let jl = z.cross(&(p_ee - frames.joints[i].p));
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&jl);
        j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
    }
    j
}

/// External wrench from measured torques: `τ_ext = τ_raw - τ_model`, then
/// `f` solved from `τ_ext = Jᵀ f` by damped least squares (λ = 1e-4) and
/// rotated into the end-effector frame.
///
/// The task-space statics relation is `τ = Jᵀ f`; recovering `f` therefore
/// inverts `Jᵀ` rather than applying it.
pub fn estimate_external_wrench<T: Real>(
    chain: &KinematicChain<T>,
    state: &JointState<T>,
) -> WrenchEstimate<T> {
    let tau_m = rnea(chain, &state.q, &state.dq, &state.ddq, &chain.gravity);
    let tau_ext = state.tau_raw - tau_m;
    let j = jacobian(chain, &state.q);

    let lambda2 = T::of(1e-8);
    let mut jjt = j * j.transpose();
    for i in 0..6 {
        jjt[(i, i)] += lambda2;
    }
    // damped solve plus two refinement passes: the damping bias λ²/σ² is
    // squared each pass, so well-conditioned poses recover the wrench to
    // machine precision while near-singular directions stay suppressed
    let f_base = match jjt.cholesky() {
        Some(ch) => {
            let mut f = ch.solve(&(j * tau_ext));
            for _ in 0..2 {
                let residual = tau_ext - j.transpose() * f;
                f += ch.solve(&(j * residual));
            }
            f
        }
        None => SVector::<T, 6>::zeros(),
    };

    let sv = j.svd(false, false).singular_values;
    let near_singular = sv[sv.len() - 1] < T::of(1e-3);

    let r_be = fk(chain, &state.q).rotation_matrix();
    let force = r_be.transpose() * Vector3::new(f_base[0], f_base[1], f_base[2]);
    let torque = r_be.transpose() * Vector3::new(f_base[3], f_base[4], f_base[5]);
    WrenchEstimate {
        wrench: Wrench { force, torque },
        near_singular,
    }
}

/// Joint torque contribution of a wrench applied at the end-effector
/// (wrench expressed in the end-effector frame): `τ = Jᵀ f_base`.
pub fn wrench_to_joint_torque<T: Real>(
    chain: &KinematicChain<T>,
    q: &JointVector<T>,
    wrench_ee: &Wrench<T>,
) -> JointVector<T> {
    let r_be = fk(chain, q).rotation_matrix();
    let j = jacobian(chain, q);
    let mut f_base = SVector::<T, 6>::zeros();
    f_base
        .fixed_view_mut::<3, 1>(0, 0)
        .copy_from(&(r_be * wrench_ee.force));
    f_base
        .fixed_view_mut::<3, 1>(3, 0)
        .copy_from(&(r_be * wrench_ee.torque));
    j.transpose() * f_base
}

/// Finite-difference joint acceleration with a first-order low-pass filter
/// (cutoff 10 Hz), the estimator-side stand-in for unmeasured `q̈`.
#[derive(Debug, Clone)]
pub struct AccelEstimator {
    prev_dq: Option<JointVector<f64>>,
    filtered: JointVector<f64>,
    cutoff_hz: f64,
}

impl AccelEstimator {
    pub fn new() -> Self {
        AccelEstimator {
            prev_dq: None,
            filtered: JointVector::zeros(),
            cutoff_hz: 10.0,
        }
    }

    pub fn step(&mut self, dq: &JointVector<f64>, dt: f64) -> JointVector<f64> {
        let raw = match &self.prev_dq {
            Some(prev) => (dq - prev) / dt,
            None => JointVector::zeros(),
        };
        self.prev_dq = Some(*dq);
        let wc = 2.0 * std::f64::consts::PI * self.cutoff_hz;
        let alpha = wc * dt / (1.0 + wc * dt);
        self.filtered += (raw - self.filtered) * alpha;
        self.filtered
    }
}

impl Default for AccelEstimator {
    fn default() -> Self {
        Self::new()
    }
}

// ---- robot description file ---------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmFile {
    pub name: String,
    pub gravity_mps2: [f64; 3],
    pub joints: Vec<ArmFileJoint>,
    pub tool_xyz_m: [f64; 3],
    pub tool_rpy_rad: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmFileJoint {
    pub origin_xyz_m: [f64; 3],
    pub origin_rpy_rad: [f64; 3],
    pub axis: [f64; 3],
    pub mass_kg: f64,
    pub com_m: [f64; 3],
    pub inertia_kgm2: InertiaFile,
    pub q_limit_rad: [f64; 2],
    pub dq_limit_rad_s: f64,
    pub coulomb_nm: f64,
    pub viscous_nms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InertiaFile {
    pub ixx: f64,
    pub iyy: f64,
    pub izz: f64,
    pub ixy: f64,
    pub ixz: f64,
    pub iyz: f64,
}

/// Quaternion from roll-pitch-yaw (x, then y, then z rotation).
fn quat_from_rpy(rpy: [f64; 3]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(rpy[0], rpy[1], rpy[2])
}

impl KinematicChain<f64> {
    pub fn from_json(text: &str) -> Result<Self, RobotError> {
        let file: ArmFile =
            serde_json::from_str(text).map_err(|e| RobotError::Parse(e.to_string()))?;
        file.to_chain()
    }

    /// The arm description shipped with the crate.
    pub fn default_arm() -> Self {
        Self::from_json(include_str!("../data/arm7.json")).expect("bundled arm file is valid")
    }
}

impl ArmFile {
    pub fn to_chain(&self) -> Result<KinematicChain<f64>, RobotError> {
        if self.joints.len() != 7 {
            return Err(RobotError::BadChain(format!(
                "expected 7 revolute joints, got {}",
                self.joints.len()
            )));
        }
        let joints = self
            .joints
            .iter()
            .enumerate()
            .map(|(i, j)| {
                let axis = Vector3::from(j.axis);
                if (axis.norm() - 1.0).abs() > 1e-9 {
                    return Err(RobotError::BadChain(format!("joint {i} axis is not unit")));
                }
                let inertia = Matrix3::new(
                    j.inertia_kgm2.ixx,
                    j.inertia_kgm2.ixy,
                    j.inertia_kgm2.ixz,
                    j.inertia_kgm2.ixy,
                    j.inertia_kgm2.iyy,
                    j.inertia_kgm2.iyz,
                    j.inertia_kgm2.ixz,
                    j.inertia_kgm2.iyz,
                    j.inertia_kgm2.izz,
                );
                let eig = inertia.symmetric_eigen();
                if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
                    return Err(RobotError::BadChain(format!(
                        "joint {i} inertia is not positive-definite"
                    )));
                }
                if j.mass_kg <= 0.0 {
                    return Err(RobotError::BadChain(format!(
                        "joint {i} mass must be positive"
                    )));
                }
                if j.q_limit_rad[0] >= j.q_limit_rad[1] {
                    return Err(RobotError::BadChain(format!("joint {i} has empty limits")));
                }
                Ok(JointParams {
                    origin: Pose::new(
                        Vector3::from(j.origin_xyz_m),
                        quat_from_rpy(j.origin_rpy_rad),
                    ),
                    axis,
                    mass: j.mass_kg,
                    com: Vector3::from(j.com_m),
                    inertia,
                    q_limit: (j.q_limit_rad[0], j.q_limit_rad[1]),
                    dq_limit: j.dq_limit_rad_s,
                    coulomb: j.coulomb_nm,
                    viscous: j.viscous_nms,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(KinematicChain {
            joints,
            tool: Pose::new(
                Vector3::from(self.tool_xyz_m),
                quat_from_rpy(self.tool_rpy_rad),
            ),
            gravity: Vector3::from(self.gravity_mps2),
        })
    }
}
