//! Optimization-based compliant docking controller.
//!
//! Three task-space criteria are weighted into one cost over the joint
//! velocity command: lateral alignment of tool and trocar with force
//! compliance, alignment of the tool axis with the trocar axis with torque
//! compliance, and admittance-based guidance along the tool axis. The
//! commanded velocity minimizes the weighted cost subject to hard per-axis
//! Cartesian velocity limits and joint-rate bounds.
//!
//! Frame conventions: the external wrench is expressed in the end-effector
//! frame; forces along the EE z-axis are treated as operator guidance, the
//! lateral force components and the x/y torques as environment interaction.
//! Rotation about the tool axis is deliberately unconstrained (the docking
//! task is symmetric about it).

mod sqp;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::robot::{jacobian, fk, JointVector, KinematicChain, Wrench};
use crate::se3::Pose;

/// Gains, weights, and limits. Defaults follow the reference tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Lateral admittance, m/s per N.
    pub b_x: f64,
    pub b_y: f64,
    /// Tool-axis admittance, m/s per N.
    pub b_z: f64,
    /// Rotational admittance, rad/s per N·m.
    pub b_rx: f64,
    pub b_ry: f64,
    /// Cost weights: guidance, lateral, rotational, joint-velocity
    /// regularization.
    pub w_zf: f64,
    pub w_xyf: f64,
    pub w_rf: f64,
    pub w_j: f64,
    /// Per-axis Cartesian velocity bounds, m/s.
    pub v_max: [f64; 3],
    /// Per-axis angular velocity bounds, rad/s.
    pub omega_max: [f64; 3],
    /// Joint-rate bound, rad/s.
    pub dq_max: f64,
    /// Control period, s.
    pub t_s: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            b_x: 0.02,
            b_y: 0.02,
            b_z: 0.1,
            b_rx: 0.2,
            b_ry: 0.2,
            w_zf: 0.5,
            w_xyf: 0.1,
            w_rf: 0.1,
            w_j: 0.1,
            v_max: [0.03, 0.03, 0.03],
            omega_max: [0.3, 0.3, 0.3],
            dq_max: 1.5,
            t_s: 0.01,
        }
    }
}

/// One control tick's inputs.
#[derive(Debug, Clone)]
pub struct ControlProblem<T: Real> {
    pub q: JointVector<T>,
    /// Filtered trocar pose in the end-effector frame.
    pub target_in_ee: Pose<T>,
    /// External wrench, end-effector frame (zero when unavailable).
    pub wrench: Wrench<T>,
    /// Previous converged solution, if any.
    pub warm_start: Option<JointVector<T>>,
}

/// Solver output. `stalled` means the QP could not make progress and the
/// fallback (previous solution scaled by 0.5) was returned.
#[derive(Debug, Clone)]
pub struct Solution<T: Real> {
    pub qdot: JointVector<T>,
    pub iterations: usize,
    pub cost: T,
    pub active_constraints: usize,
    pub stalled: bool,
}

/// Geometry shared by all three criteria at one configuration.
struct Context<T: Real> {
    jl: SMatrix<T, 3, 7>,
    jw: SMatrix<T, 3, 7>,
    r_e: Matrix3<T>,
    /// Trocar center, base frame.
    p_o: Vector3<T>,
    /// EE position, base frame.
    p_e: Vector3<T>,
    /// Trocar z-axis, base frame.
    xi_oz: Vector3<T>,
    /// EE z-axis, base frame.
    xi_ez: Vector3<T>,
}

fn context<T: Real>(chain: &KinematicChain<T>, prob: &ControlProblem<T>) -> Context<T> {
    let j = jacobian(chain, &prob.q);
    let ee = fk(chain, &prob.q);
    let r_e = ee.rotation_matrix();
    let s = &prob.target_in_ee;
    Context {
        jl: j.fixed_view::<3, 7>(0, 0).into_owned(),
        jw: j.fixed_view::<3, 7>(3, 0).into_owned(),
        r_e,
        p_o: ee.p + r_e * s.p,
        p_e: ee.p,
        xi_oz: r_e * (s.rotation_matrix() * Vector3::z()),
        xi_ez: r_e * Vector3::z(),
    }
}

/// Affine residual `r(q̇) = m·q̇ + c`; every criterion reduces to one.
struct AffineResidual<T: Real, const R: usize> {
    m: SMatrix<T, R, 7>,
    c: SVector<T, R>,
}

impl<T: Real, const R: usize> AffineResidual<T, R> {
    fn eval(&self, qdot: &JointVector<T>) -> SVector<T, R> {
        self.m * qdot + self.c
    }
}

/// Lateral alignment + force compliance, selector diag(1,1,0) in EE frame.
fn translational_residual<T: Real>(
    ctx: &Context<T>,
    cfg: &ControllerConfig,
    wrench: &Wrench<T>,
) -> AffineResidual<T, 3> {
    let ts = T::of(cfg.t_s);
    let mask = Vector3::new(T::one(), T::one(), T::zero());
    let b_f = Vector3::new(
        T::of(cfg.b_x) * wrench.force.x,
        T::of(cfg.b_y) * wrench.force.y,
        T::zero(),
    );
    let proj = ctx.r_e.transpose() * (ctx.p_e - ctx.p_o);
    let c = (b_f + proj).component_mul(&mask);
    let mut m = ctx.r_e.transpose() * ctx.jl * ts;
    m.row_mut(2).fill(T::zero());
    AffineResidual { m, c }
}

/// Virtual angular velocity from the x/y torques, in the base frame.
fn virtual_omega_ext<T: Real>(
    ctx: &Context<T>,
    cfg: &ControllerConfig,
    wrench: &Wrench<T>,
) -> Vector3<T> {
    ctx.r_e
        * Vector3::new(
            T::of(cfg.b_rx) * wrench.torque.x,
            T::of(cfg.b_ry) * wrench.torque.y,
            T::zero(),
        )
}

/// Tool-axis / trocar-axis alignment + torque compliance; scalar residual
/// `ξ_oz·ξ_{t+1,z} - 1`.
fn rotational_residual<T: Real>(
    ctx: &Context<T>,
    cfg: &ControllerConfig,
    wrench: &Wrench<T>,
) -> AffineResidual<T, 1> {
    let ts = T::of(cfg.t_s);
    let omega_ext = virtual_omega_ext(ctx, cfg, wrench);
    let cross = ctx.xi_ez.cross(&ctx.xi_oz);
    let c0 = ctx.xi_oz.dot(&ctx.xi_ez) - T::one() + ts * omega_ext.dot(&cross);
    let m = (cross.transpose() * ctx.jw) * ts;
    AffineResidual {
        m,
        c: SVector::<T, 1>::new(c0),
    }
}

/// Vector form of the axis-alignment residual used inside the solver:
/// `ξ_{t+1,z} - ξ_oz` with `ξ_{t+1,z} = (I + T_s·Ω̂ + T_s·Ω̂_ext)·ξ_ez`.
///
/// Its squared norm equals `2·(1 - ξ_oz·ξ_{t+1,z})` up to the affine
/// unit-norm defect, so it drives the same alignment as the scalar
/// inner-product cost, but it is quadratic rather than quartic near
/// alignment, which keeps the Gauss-Newton model well conditioned there.
fn rotational_residual_vec<T: Real>(
    ctx: &Context<T>,
    cfg: &ControllerConfig,
    wrench: &Wrench<T>,
) -> AffineResidual<T, 3> {
    let ts = T::of(cfg.t_s);
    let omega_ext = virtual_omega_ext(ctx, cfg, wrench);
    let c = ctx.xi_ez + omega_ext.cross(&ctx.xi_ez) * ts - ctx.xi_oz;
    // Ω̂(q̇)·ξ_ez = (J_Ω q̇) × ξ_ez = -ξ_ez × (J_Ω q̇)
    let m = -crate::se3::skew(&ctx.xi_ez) * ctx.jw * ts;
    AffineResidual { m, c }
}

/// Guidance admittance along the tool axis: `N_f (B_z f - v)`.
fn guidance_residual<T: Real>(
    ctx: &Context<T>,
    cfg: &ControllerConfig,
    wrench: &Wrench<T>,
) -> AffineResidual<T, 3> {
    let v_target = ctx.xi_ez * (T::of(cfg.b_z) * wrench.force.z);
    let n_f = ctx.xi_ez * ctx.xi_ez.transpose();
    AffineResidual {
        m: -(n_f * ctx.jl),
        c: n_f * v_target,
    }
}

/// Squared lateral-compliance error for a candidate joint velocity.
pub fn cost_translational<T: Real>(
    chain: &KinematicChain<T>,
    qdot: &JointVector<T>,
    prob: &ControlProblem<T>,
    cfg: &ControllerConfig,
) -> T {
    let ctx = context(chain, prob);
    translational_residual(&ctx, cfg, &prob.wrench)
        .eval(qdot)
        .norm_squared()
}

/// Squared axis-alignment error for a candidate joint velocity.
pub fn cost_rotational<T: Real>(
    chain: &KinematicChain<T>,
    qdot: &JointVector<T>,
    prob: &ControlProblem<T>,
    cfg: &ControllerConfig,
) -> T {
    let ctx = context(chain, prob);
    rotational_residual(&ctx, cfg, &prob.wrench)
        .eval(qdot)
        .norm_squared()
}

/// Squared guidance-admittance error for a candidate joint velocity.
pub fn cost_guidance<T: Real>(
    chain: &KinematicChain<T>,
    qdot: &JointVector<T>,
    prob: &ControlProblem<T>,
    cfg: &ControllerConfig,
) -> T {
    let ctx = context(chain, prob);
    guidance_residual(&ctx, cfg, &prob.wrench)
        .eval(qdot)
        .norm_squared()
}

/// Weighted total cost (including the joint-velocity regularizer), with the
/// scalar inner-product form of the rotational criterion.
pub fn total_cost<T: Real>(
    chain: &KinematicChain<T>,
    qdot: &JointVector<T>,
    prob: &ControlProblem<T>,
    cfg: &ControllerConfig,
) -> T {
    T::of(cfg.w_zf) * cost_guidance(chain, qdot, prob, cfg)
        + T::of(cfg.w_xyf) * cost_translational(chain, qdot, prob, cfg)
        + T::of(cfg.w_rf) * cost_rotational(chain, qdot, prob, cfg)
        + T::of(cfg.w_j) * qdot.norm_squared()
}

/// The objective [`solve`] actually minimizes: identical to [`total_cost`]
/// except the rotational criterion uses the vector-form axis residual.
pub fn solver_cost<T: Real>(
    chain: &KinematicChain<T>,
    qdot: &JointVector<T>,
    prob: &ControlProblem<T>,
    cfg: &ControllerConfig,
) -> T {
    let ctx = context(chain, prob);
    T::of(cfg.w_zf)
        * guidance_residual(&ctx, cfg, &prob.wrench)
            .eval(qdot)
            .norm_squared()
        + T::of(cfg.w_xyf)
            * translational_residual(&ctx, cfg, &prob.wrench)
                .eval(qdot)
                .norm_squared()
        + T::of(cfg.w_rf)
            * rotational_residual_vec(&ctx, cfg, &prob.wrench)
                .eval(qdot)
                .norm_squared()
        + T::of(cfg.w_j) * qdot.norm_squared()
}

/// Solve one control tick: SQP over the weighted criteria subject to
/// per-axis Cartesian and joint velocity limits.
///
/// Warm-started from the previous converged solution; with no warm start,
/// the seed solves the guidance criterion alone. The returned command
/// satisfies the velocity limits exactly (a final homogeneous scaling
/// absorbs any last-ulp numeric overshoot).
pub fn solve<T: Real>(
    chain: &KinematicChain<T>,
    prob: &ControlProblem<T>,
    cfg: &ControllerConfig,
) -> Solution<T> {
    let ctx = context(chain, prob);
    let rt = translational_residual(&ctx, cfg, &prob.wrench);
    let rr = rotational_residual_vec(&ctx, cfg, &prob.wrench);
    let rg = guidance_residual(&ctx, cfg, &prob.wrench);

    // constraints: ±(J_l q̇) ≤ v_max, ±(J_Ω q̇) ≤ ω_max, |q̇| ≤ dq_max
    let mut rows: Vec<SVector<T, 7>> = Vec::with_capacity(26);
    let mut bounds: Vec<T> = Vec::with_capacity(26);
    for axis in 0..3 {
        let row = ctx.jl.row(axis).transpose();
        rows.push(row);
        bounds.push(T::of(cfg.v_max[axis]));
        rows.push(-row);
        bounds.push(T::of(cfg.v_max[axis]));
    }
    for axis in 0..3 {
        let row = ctx.jw.row(axis).transpose();
        rows.push(row);
        bounds.push(T::of(cfg.omega_max[axis]));
        rows.push(-row);
        bounds.push(T::of(cfg.omega_max[axis]));
    }
    for jnt in 0..7 {
        let mut e = SVector::<T, 7>::zeros();
        e[jnt] = T::one();
        rows.push(e);
        bounds.push(T::of(cfg.dq_max));
        rows.push(-e);
        bounds.push(T::of(cfg.dq_max));
    }

    // exact quadratic model: residuals are affine in q̇
    let w_z = T::of(cfg.w_zf);
    let w_xy = T::of(cfg.w_xyf);
    let w_r = T::of(cfg.w_rf);
    let w_j = T::of(cfg.w_j);
    let two = T::of(2.0);
    let mut h = (rg.m.transpose() * rg.m) * (two * w_z)
        + (rt.m.transpose() * rt.m) * (two * w_xy)
        + (rr.m.transpose() * rr.m) * (two * w_r);
    for i in 0..7 {
        h[(i, i)] += two * w_j;
    }
    let g_lin = rg.m.transpose() * rg.c * (two * w_z)
        + rt.m.transpose() * rt.c * (two * w_xy)
        + rr.m.transpose() * rr.c * (two * w_r);
    let cost_at = |x: &SVector<T, 7>| {
        w_z * rg.eval(x).norm_squared()
            + w_xy * rt.eval(x).norm_squared()
            + w_r * rr.eval(x).norm_squared()
            + w_j * x.norm_squared()
    };

    // seed: warm start, or the guidance-only least-squares solution
    let seed = match prob.warm_start {
        Some(ws) => ws,
        None => {
            let mut a = (rg.m.transpose() * rg.m) * w_z;
            for i in 0..7 {
                a[(i, i)] += w_j;
            }
            a.cholesky()
                .map(|ch| ch.solve(&(-(rg.m.transpose() * rg.c) * w_z)))
                .unwrap_or_else(SVector::zeros)
        }
    };
    let x0 = sqp::pull_feasible(seed, &rows, &bounds);

    let result = sqp::sqp_minimize(&h, &g_lin, cost_at, x0, &rows, &bounds);
    let (mut qdot, iterations, stalled) = match result {
        Some(r) => (r.x, r.iterations, false),
        None => (
            prob.warm_start.map_or_else(SVector::zeros, |w| w * T::of(0.5)),
            0,
            true,
        ),
    };
    if stalled {
        log::warn!("controller QP stalled; holding scaled previous command");
        qdot = sqp::pull_feasible(qdot, &rows, &bounds);
    }

    // homogeneous safety scaling: velocity limits hold exactly
    let mut scale = T::one();
    for (row, bound) in rows.iter().zip(&bounds) {
        let v = row.dot(&qdot);
        if v > *bound {
            scale = scale.min(*bound / v);
        }
    }
    if scale < T::one() {
        qdot *= scale;
    }

    let active = rows
        .iter()
        .zip(&bounds)
        .filter(|(row, bound)| (row.dot(&qdot) - **bound).abs() < T::of(1e-9))
        .count();
    Solution {
        qdot,
        iterations,
        cost: cost_at(&qdot),
        active_constraints: active,
        stalled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot::wrench_to_joint_torque;
    use crate::se3::quat_from_rotvec;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn chain() -> KinematicChain<f64> {
        KinematicChain::default_arm()
    }

    /// Elbow-bent configuration, well away from singularities. The pitch
    /// angles sum to π so the tool axis is exactly vertical (`ξ_ez = +z`).
    fn nominal_q() -> JointVector<f64> {
        JointVector::from_column_slice(&[
            0.3,
            0.8,
            0.0,
            -1.6,
            0.0,
            std::f64::consts::PI - 2.4,
            0.4,
        ])
    }

    fn aligned_problem(wrench: Wrench<f64>) -> ControlProblem<f64> {
        // trocar straight ahead of the tool along -z of the EE, axes parallel
        ControlProblem {
            q: nominal_q(),
            target_in_ee: Pose::new(Vector3::new(0.0, 0.0, -0.1), nalgebra::UnitQuaternion::identity()),
            wrench,
            warm_start: None,
        }
    }

    #[test]
    fn translational_cost_examples() {
        let chain = chain();
        let cfg = ControllerConfig::default();
        let zero = JointVector::zeros();

        // aligned, no force, no command
        let prob = aligned_problem(Wrench::zero());
        assert_relative_eq!(cost_translational(&chain, &zero, &prob, &cfg), 0.0, epsilon = 1e-18);

        // pure z offset is invisible to the lateral selector
        let mut prob_z = prob.clone();
        prob_z.target_in_ee.p.z = -0.25;
        assert_relative_eq!(cost_translational(&chain, &zero, &prob_z, &cfg), 0.0, epsilon = 1e-18);

        // lateral offset d along EE x costs d²
        let d = 0.013;
        let mut prob_x = prob.clone();
        prob_x.target_in_ee.p.x = d;
        assert_relative_eq!(
            cost_translational(&chain, &zero, &prob_x, &cfg),
            d * d,
            epsilon = 1e-12
        );
    }

    #[test]
    fn rotational_cost_examples() {
        let chain = chain();
        let cfg = ControllerConfig::default();
        let zero = JointVector::zeros();

        let prob = aligned_problem(Wrench::zero());
        assert_relative_eq!(cost_rotational(&chain, &zero, &prob, &cfg), 0.0, epsilon = 1e-18);

        // axes at angle θ: cost (cos θ - 1)²
        let theta = 0.4;
        let mut tilted = prob.clone();
        tilted.target_in_ee.q = quat_from_rotvec(&Vector3::new(theta, 0.0, 0.0));
        let expect = (theta.cos() - 1.0).powi(2);
        assert_relative_eq!(
            cost_rotational(&chain, &zero, &tilted, &cfg),
            expect,
            epsilon = 1e-12
        );

        // a small corrective rotation about the separating axis reduces cost
        let j = jacobian(&chain, &tilted.q);
        let ctx = context(&chain, &tilted);
        let omega_dir = ctx.xi_ez.cross(&ctx.xi_oz).normalize();
        let jw = j.fixed_view::<3, 7>(3, 0).into_owned();
        let qdot_corr = jw.transpose() * ((jw * jw.transpose()).try_inverse().unwrap() * omega_dir);
        let step = qdot_corr * 0.05;
        assert!(
            cost_rotational(&chain, &step, &tilted, &cfg)
                < cost_rotational(&chain, &zero, &tilted, &cfg)
        );
    }

    #[test]
    fn guidance_cost_examples() {
        let chain = chain();
        let cfg = ControllerConfig::default();
        let zero = JointVector::zeros();

        // admittance fixed point: v = B_z f exactly cancels a 10 N push
        let wrench = Wrench {
            force: Vector3::new(0.0, 0.0, 10.0),
            torque: Vector3::zeros(),
        };
        let prob = aligned_problem(wrench);
        let ctx = context(&chain, &prob);
        let v_target = ctx.xi_ez * (cfg.b_z * 10.0);
        let jl = ctx.jl;
        let qdot = jl.transpose() * ((jl * jl.transpose()).try_inverse().unwrap() * v_target);
        assert_relative_eq!(cost_guidance(&chain, &qdot, &prob, &cfg), 0.0, epsilon = 1e-12);

        // zero force, zero velocity
        let prob0 = aligned_problem(Wrench::zero());
        assert_relative_eq!(cost_guidance(&chain, &zero, &prob0, &cfg), 0.0, epsilon = 1e-18);

        // zero force, 0.01 m/s along the tool axis costs (0.01)²
        let v = ctx.xi_ez * 0.01;
        let qdot = jl.transpose() * ((jl * jl.transpose()).try_inverse().unwrap() * v);
        assert_relative_eq!(
            cost_guidance(&chain, &qdot, &prob0, &cfg),
            1e-4,
            epsilon = 1e-10
        );
    }

    #[test]
    fn stationary_when_aligned_and_unforced() {
        let chain = chain();
        let cfg = ControllerConfig::default();
        let sol = solve(&chain, &aligned_problem(Wrench::zero()), &cfg);
        assert!(!sol.stalled);
        assert!(sol.qdot.norm() < 1e-8, "qdot {}", sol.qdot.norm());
    }

    #[test]
    fn saturated_guidance_rides_the_velocity_limit() {
        // B_z·10 N = 1 m/s: far beyond the box, so the commanded speed along
        // the tool axis sits exactly on the clamped admittance target
        // clamp(B_z f, v_max) = 0.03 m/s (ξ_ez is a coordinate axis here).
        let chain = chain();
        let cfg = ControllerConfig::default();
        let wrench = Wrench {
            force: Vector3::new(0.0, 0.0, 10.0),
            torque: Vector3::zeros(),
        };
        let prob = aligned_problem(wrench);
        let ctx = context(&chain, &prob);
        let sol = solve(&chain, &prob, &cfg);
        let v = ctx.jl * sol.qdot;
        let axis_speed = ctx.xi_ez.dot(&v);
        assert_relative_eq!(axis_speed, 0.03, epsilon = 1e-4);
    }

    #[test]
    fn moderate_guidance_tracks_admittance_with_bounded_side_motion() {
        let chain = chain();
        let cfg = ControllerConfig::default();
        let wrench = Wrench {
            force: Vector3::new(0.0, 0.0, -0.2),
            torque: Vector3::zeros(),
        };
        let prob = aligned_problem(wrench);
        let ctx = context(&chain, &prob);
        let sol = solve(&chain, &prob, &cfg);
        let v = ctx.jl * sol.qdot;
        let w = ctx.jw * sol.qdot;
        let axial = ctx.xi_ez.dot(&v);
        // pushes toward the trocar, never past the admittance target
        assert!(axial < -1e-4 && axial >= -0.02 - 1e-9, "axial {axial}");
        // side motion is a least-norm by-product of realizing axial motion;
        // bound it by the kinematic coupling of the same realization
        let jl = ctx.jl;
        let jz = jl.transpose() * ctx.xi_ez;
        let qdot_min_norm = jz * (axial / jz.norm_squared());
        let coupling_v = (jl * qdot_min_norm - ctx.xi_ez * axial).norm();
        let coupling_w = (ctx.jw * qdot_min_norm).norm();
        assert!((v - ctx.xi_ez * axial).norm() <= 2.0 * coupling_v + 1e-9);
        assert!(w.norm() <= 2.0 * coupling_w + 1e-9, "w {} vs {}", w.norm(), coupling_w);
    }

    #[test]
    fn wrench_channel_separation() {
        let chain = chain();
        let cfg = ControllerConfig::default();
        let zero = JointVector::zeros();
        let base = aligned_problem(Wrench::zero());

        // tool-axis force enters only the guidance cost
        let mut fz = base.clone();
        fz.wrench.force.z = 4.0;
        assert!(cost_guidance(&chain, &zero, &fz, &cfg) > 0.0);
        assert_relative_eq!(cost_translational(&chain, &zero, &fz, &cfg), 0.0, epsilon = 1e-18);
        assert_relative_eq!(cost_rotational(&chain, &zero, &fz, &cfg), 0.0, epsilon = 1e-18);

        // lateral force enters only the translational cost
        let mut fx = base.clone();
        fx.wrench.force.x = 4.0;
        assert_relative_eq!(cost_guidance(&chain, &zero, &fx, &cfg), 0.0, epsilon = 1e-18);
        assert!(cost_translational(&chain, &zero, &fx, &cfg) > 0.0);
        assert_relative_eq!(cost_rotational(&chain, &zero, &fx, &cfg), 0.0, epsilon = 1e-18);

        // x/y torque enters only the rotational cost; the residual needs a
        // misaligned axis pair to be visible, so tilt slightly
        let mut tq = base.clone();
        tq.target_in_ee.q = quat_from_rotvec(&Vector3::new(0.2, 0.0, 0.0));
        let cost_no_torque = cost_rotational(&chain, &zero, &tq, &cfg);
        tq.wrench.torque.x = 2.0;
        assert!((cost_rotational(&chain, &zero, &tq, &cfg) - cost_no_torque).abs() > 1e-9);
        assert_relative_eq!(cost_guidance(&chain, &zero, &tq, &cfg), 0.0, epsilon = 1e-18);
        assert_relative_eq!(cost_translational(&chain, &zero, &tq, &cfg), 0.0, epsilon = 1e-18);

        // torque about the tool axis is ignored everywhere
        let mut tz = base.clone();
        tz.target_in_ee.q = quat_from_rotvec(&Vector3::new(0.2, 0.0, 0.0));
        let before = cost_rotational(&chain, &zero, &tz, &cfg);
        tz.wrench.torque.z = 5.0;
        assert_relative_eq!(cost_rotational(&chain, &zero, &tz, &cfg), before, epsilon = 1e-15);
    }

    #[test]
    fn rotation_about_tool_axis_is_free() {
        let chain = chain();
        let cfg = ControllerConfig::default();
        let mut prob = aligned_problem(Wrench::zero());
        prob.target_in_ee.q = quat_from_rotvec(&Vector3::new(0.3, -0.1, 0.0));
        let ctx = context(&chain, &prob);
        // joint velocity that spins exactly about the EE z-axis
        let j = jacobian(&chain, &prob.q);
        let jw = j.fixed_view::<3, 7>(3, 0).into_owned();
        let spin = jw.transpose() * ((jw * jw.transpose()).try_inverse().unwrap() * ctx.xi_ez);
        let c0 = cost_rotational(&chain, &JointVector::zeros(), &prob, &cfg);
        let c1 = cost_rotational(&chain, &(spin * 0.2), &prob, &cfg);
        assert_relative_eq!(c0, c1, epsilon = 1e-12);
    }

    #[test]
    fn constraints_hold_on_random_problems() {
        let chain = chain();
        let cfg = ControllerConfig::default();
        let mut rng = StdRng::seed_from_u64(11);
        let mut warm: Option<JointVector<f64>> = None;
        for trial in 0..2000 {
            let q = nominal_q()
                + JointVector::from_fn(|_, _| rng.random_range(-0.4..0.4));
            let prob = ControlProblem {
                q,
                target_in_ee: Pose::new(
                    Vector3::new(
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.4..0.1),
                    ),
                    quat_from_rotvec(&Vector3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                    )),
                ),
                wrench: Wrench {
                    force: Vector3::new(
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-10.0..10.0),
                    ),
                    torque: Vector3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    ),
                },
                warm_start: if trial % 3 == 0 { None } else { warm },
            };
            let sol = solve(&chain, &prob, &cfg);
            assert!(!sol.stalled, "stall at trial {trial}");
            let j = jacobian(&chain, &q);
            let v = j.fixed_view::<3, 7>(0, 0) * sol.qdot;
            let w = j.fixed_view::<3, 7>(3, 0) * sol.qdot;
            for a in 0..3 {
                assert!(v[a].abs() <= cfg.v_max[a] + 1e-9, "v[{a}] = {}", v[a]);
                assert!(w[a].abs() <= cfg.omega_max[a] + 1e-9, "w[{a}] = {}", w[a]);
            }
            for jnt in 0..7 {
                assert!(sol.qdot[jnt].abs() <= cfg.dq_max + 1e-9);
            }
            warm = Some(sol.qdot);
        }
    }

    #[test]
    fn solution_beats_random_feasible_candidates() {
        let chain = chain();
        let cfg = ControllerConfig::default();
        let mut rng = StdRng::seed_from_u64(13);
        let mut prob = aligned_problem(Wrench {
            force: Vector3::new(2.0, -1.5, 4.0),
            torque: Vector3::new(0.3, -0.2, 0.0),
        });
        prob.target_in_ee.p.x = 0.02;
        prob.target_in_ee.q = quat_from_rotvec(&Vector3::new(0.15, -0.1, 0.0));
        let sol = solve(&chain, &prob, &cfg);
        let j = jacobian(&chain, &prob.q);
        let feasible = |x: &JointVector<f64>| {
            let v = j.fixed_view::<3, 7>(0, 0) * x;
            let w = j.fixed_view::<3, 7>(3, 0) * x;
            (0..3).all(|a| v[a].abs() <= cfg.v_max[a] && w[a].abs() <= cfg.omega_max[a])
                && (0..7).all(|k| x[k].abs() <= cfg.dq_max)
        };
        let opt_cost = solver_cost(&chain, &sol.qdot, &prob, &cfg);
        let mut checked = 0;
        while checked < 500 {
            let x = JointVector::from_fn(|_, _| rng.random_range(-0.5..0.5));
            if !feasible(&x) {
                continue;
            }
            checked += 1;
            assert!(solver_cost(&chain, &x, &prob, &cfg) + 1e-12 >= opt_cost);
        }
        // perturbations around the optimum stay worse
        for _ in 0..200 {
            let x = sol.qdot + JointVector::from_fn(|_, _| rng.random_range(-1e-3..1e-3));
            if !feasible(&x) {
                continue;
            }
            assert!(solver_cost(&chain, &x, &prob, &cfg) + 1e-14 >= opt_cost);
        }
    }

    #[test]
    fn config_round_trips_and_defaults_are_reference_values() {
        let cfg = ControllerConfig::default();
        assert_eq!(
            (cfg.b_x, cfg.b_y, cfg.b_z, cfg.b_rx, cfg.b_ry),
            (0.02, 0.02, 0.1, 0.2, 0.2)
        );
        assert_eq!((cfg.w_zf, cfg.w_xyf, cfg.w_rf, cfg.w_j), (0.5, 0.1, 0.1, 0.1));
        assert_eq!(cfg.v_max, [0.03; 3]);
        assert_eq!(cfg.omega_max, [0.3; 3]);
        assert_eq!(cfg.t_s, 0.01);
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ControllerConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn wrench_torque_consistency_with_robot_layer() {
        // lateral contact force at the tip maps to torques the controller
        // would feel; sanity-wire the two layers together
        let chain = chain();
        let q = nominal_q();
        let w = Wrench {
            force: Vector3::new(1.0, 0.0, 0.0),
            torque: Vector3::zeros(),
        };
        let tau = wrench_to_joint_torque(&chain, &q, &w);
        assert!(tau.norm() > 1e-3);
    }
}
