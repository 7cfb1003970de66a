//! EPnP pose solver for planar (and volumetric) correspondence sets, with
//! Gauss-Newton reprojection refinement.
//!
//! The planar variant uses three virtual control points (centroid plus the
//! two principal directions of the board); the null space of the stacked
//! projection constraints is one-dimensional for non-degenerate boards, and
//! the control-point scale is fixed by inter-control-point distance
//! invariance. The closed-form pose from 3D-3D registration is then refined
//! by damped Gauss-Newton on the total squared reprojection error.

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Matrix6, SMatrix, Vector3, Vector6};

use crate::real::Real;
use crate::se3::{inject, skew, ErrorState, Pose};
use crate::vision::{
    project_clamped, register_3d3d, reprojection_error, CameraIntrinsics, CorrespondenceSet,
    PoseEstimate, VisionError,
};

const MAX_GN_ITERS: usize = 10;

/// Solve for the board pose in the camera frame from 2D-3D correspondences.
pub fn solve_epnp<T: Real>(
    k: &CameraIntrinsics<T>,
    s: &CorrespondenceSet<T>,
) -> Result<PoseEstimate<T>, VisionError> {
    let n = s.pairs.len();
    if n < 4 {
        return Err(VisionError::TooFewCorrespondences { needed: 4, got: n });
    }

    // Principal analysis of the board points picks the control points.
    let centroid = s
        .pairs
        .iter()
        .fold(Vector3::zeros(), |acc: Vector3<T>, c| acc + c.p)
        / T::of(n as f64);
    let mut cov = Matrix3::<T>::zeros();
    for c in &s.pairs {
        let d = c.p - centroid;
        cov += d * d.transpose();
    }
    cov /= T::of(n as f64);
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let lam_max = eig.eigenvalues[order[0]];
    if lam_max <= T::zero() || eig.eigenvalues[order[1]] < T::of(1e-12) * lam_max {
        // all points on a line (or a single point)
        return Err(VisionError::DegenerateConfiguration);
    }
    let planar = eig.eigenvalues[order[2]] < T::of(1e-9) * lam_max;
    let n_ctrl = if planar { 3 } else { 4 };

    let mut ctrl: Vec<Vector3<T>> = vec![centroid];
    for j in 0..(n_ctrl - 1) {
        let dir = eig.eigenvectors.column(order[j]).into_owned();
        ctrl.push(centroid + dir * eig.eigenvalues[order[j]].sqrt());
    }

    // Barycentric weights: p_i = Σ_j α_ij ζ_j with Σ_j α_ij = 1.
    let mut alphas: Vec<Vec<T>> = Vec::with_capacity(n);
    if planar {
        let d1 = ctrl[1] - ctrl[0];
        let d2 = ctrl[2] - ctrl[0];
        let g = nalgebra::Matrix2::new(d1.dot(&d1), d1.dot(&d2), d2.dot(&d1), d2.dot(&d2));
        let g_inv = g.try_inverse().ok_or(VisionError::DegenerateConfiguration)?;
        for c in &s.pairs {
            let rhs = nalgebra::Vector2::new((c.p - ctrl[0]).dot(&d1), (c.p - ctrl[0]).dot(&d2));
            let b = g_inv * rhs;
            alphas.push(vec![T::one() - b[0] - b[1], b[0], b[1]]);
        }
    } else {
        let basis = Matrix3::from_columns(&[ctrl[1] - ctrl[0], ctrl[2] - ctrl[0], ctrl[3] - ctrl[0]]);
        let inv = basis
            .try_inverse()
            .ok_or(VisionError::DegenerateConfiguration)?;
        for c in &s.pairs {
            let b = inv * (c.p - ctrl[0]);
            alphas.push(vec![T::one() - b[0] - b[1] - b[2], b[0], b[1], b[2]]);
        }
    }

    // Stack the homogeneous projection constraints F x = 0 over the control
    // point camera coordinates x ∈ R^{3·n_ctrl}.
    let cols = 3 * n_ctrl;
    let mut f = DMatrix::<T>::zeros(2 * n, cols);
    for (i, c) in s.pairs.iter().enumerate() {
        for j in 0..n_ctrl {
            let a = alphas[i][j];
            f[(2 * i, 3 * j)] = a * k.fx;
            f[(2 * i, 3 * j + 2)] = a * (k.cx - c.u.x);
            f[(2 * i + 1, 3 * j + 1)] = a * k.fy;
            f[(2 * i + 1, 3 * j + 2)] = a * (k.cy - c.u.y);
        }
    }
    let ftf = f.transpose() * &f;
    let eig = ftf.symmetric_eigen();
    let mut idx: Vec<usize> = (0..cols).collect();
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .expect("finite eigenvalues")
    });
    let lam_big = eig.eigenvalues[idx[cols - 1]];
    if eig.eigenvalues[idx[1]] < T::of(1e-10) * lam_big {
        return Err(VisionError::DegenerateConfiguration);
    }
    let null = eig.eigenvectors.column(idx[0]);

    // Scale from inter-control-point distance invariance.
    let mut num = T::zero();
    let mut den = T::zero();
    for a in 0..n_ctrl {
        for b in (a + 1)..n_ctrl {
            let va = Vector3::new(null[3 * a], null[3 * a + 1], null[3 * a + 2]);
            let vb = Vector3::new(null[3 * b], null[3 * b + 1], null[3 * b + 2]);
            let d_null = (va - vb).norm();
            let d_true = (ctrl[a] - ctrl[b]).norm();
            num += d_null * d_true;
            den += d_null * d_null;
        }
    }
    if den <= T::zero() {
        return Err(VisionError::DegenerateConfiguration);
    }
    let mut beta = num / den;

    // Camera-frame points; flip the null-vector sign if they land behind the
    // camera.
    let cam_point = |beta: T, i: usize| -> Vector3<T> {
        let mut p = Vector3::zeros();
        for j in 0..n_ctrl {
            let zj = Vector3::new(null[3 * j], null[3 * j + 1], null[3 * j + 2]) * beta;
            p += zj * alphas[i][j];
        }
        p
    };
    let mean_z = (0..n).fold(T::zero(), |acc, i| acc + cam_point(beta, i).z) / T::of(n as f64);
    if mean_z < T::zero() {
        beta = -beta;
    }
    let cam_points: Vec<Vector3<T>> = (0..n).map(|i| cam_point(beta, i)).collect();
    let board_points: Vec<Vector3<T>> = s.pairs.iter().map(|c| c.p).collect();

    let pose0 = register_3d3d(&board_points, &cam_points, None)?;
    let (pose, err_sum) = refine(k, s, pose0);
    Ok(PoseEstimate {
        pose,
        reproj_error_px: err_sum / T::of(n as f64),
        n_points: n,
    })
}

/// Gauss-Newton refinement of the pose on total squared reprojection error.
/// Accepts steps only when the summed pixel residual decreases, so the
/// refined estimate is never worse than its seed.
fn refine<T: Real>(
    k: &CameraIntrinsics<T>,
    s: &CorrespondenceSet<T>,
    pose0: Pose<T>,
) -> (Pose<T>, T) {
    let mut pose = pose0;
    let mut err = reprojection_error(k, &pose, s);

    for _ in 0..MAX_GN_ITERS {
        let r_mat = pose.rotation_matrix();
        let mut jtj = Matrix6::<T>::zeros();
        let mut jtr = Vector6::<T>::zeros();
        for c in &s.pairs {
            let pc = pose.transform_point(&c.p);
            let z = pc.z.max(T::of(1e-6));
            let proj = Matrix2x3::new(
                k.fx / z,
                T::zero(),
                -k.fx * pc.x / (z * z),
                T::zero(),
                k.fy / z,
                -k.fy * pc.y / (z * z),
            );
            // d(p_cam)/d[δt, δθ] for the right-perturbed pose
            let mut dp = SMatrix::<T, 3, 6>::zeros();
            dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r_mat * skew(&c.p)));
            let jac = proj * dp;
            let res = project_clamped(k, &pose, &c.p) - c.u;
            jtj += jac.transpose() * jac;
            jtr += jac.transpose() * res;
        }
        for i in 0..6 {
            jtj[(i, i)] += T::of(1e-12);
        }
        let delta = match jtj.cholesky() {
            Some(ch) => -(ch.solve(&jtr)),
            None => break,
        };

        let mut accepted = false;
        let mut alpha = T::one();
        for _ in 0..8 {
            let step = delta * alpha;
            let cand = inject(
                &pose,
                &ErrorState {
                    dp: Vector3::new(step[0], step[1], step[2]),
                    dtheta: Vector3::new(step[3], step[4], step[5]),
                },
            );
            let cand_err = reprojection_error(k, &cand, s);
            if cand_err < err {
                pose = cand;
                err = cand_err;
                accepted = true;
                break;
            }
            alpha *= T::of(0.5);
        }
        if !accepted || delta.norm() < T::of(1e-10) {
            break;
        }
    }
    (pose, err)
}
