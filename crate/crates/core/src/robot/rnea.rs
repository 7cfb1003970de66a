//! Recursive Newton-Euler inverse dynamics.

use nalgebra::{SMatrix, Vector3};

use crate::real::Real;
use crate::robot::{JointVector, KinematicChain};

/// Model torques for a joint-space state: inertia, Coriolis/centrifugal,
/// gravity, and friction per the chain parameters.
///
/// `sgn(0) = 0` in the Coulomb term, so a resting joint sees no friction
/// torque.
pub fn rnea<T: Real>(
    chain: &KinematicChain<T>,
    q: &JointVector<T>,
    dq: &JointVector<T>,
    ddq: &JointVector<T>,
    gravity: &Vector3<T>,
) -> JointVector<T> {
    rnea_with(chain, q, dq, ddq, gravity, true)
}

/// RNEA with friction optionally excluded.
pub fn rnea_with<T: Real>(
    chain: &KinematicChain<T>,
    q: &JointVector<T>,
    dq: &JointVector<T>,
    ddq: &JointVector<T>,
    gravity: &Vector3<T>,
    friction: bool,
) -> JointVector<T> {
    let n = chain.dof();

    // local link-to-link rotations and offsets at this configuration
    let mut rot = Vec::with_capacity(n); // R_{i-1 -> i expressed in {i-1}}
    let mut off = Vec::with_capacity(n); // origin of {i} in {i-1}
    for (i, j) in chain.joints.iter().enumerate() {
        let rot_joint = crate::se3::quat_from_rotvec(&(j.axis * q[i]));
        rot.push((j.origin.q * rot_joint).to_rotation_matrix().into_inner());
        off.push(j.origin.p);
    }

    // outward pass: velocities and accelerations in local frames; the base
    // "accelerates" at -g, which injects gravity everywhere
    let mut w = vec![Vector3::<T>::zeros(); n];
    let mut wd = vec![Vector3::<T>::zeros(); n];
    let mut acc = vec![Vector3::<T>::zeros(); n];
    let mut force = vec![Vector3::<T>::zeros(); n];
    let mut moment = vec![Vector3::<T>::zeros(); n];

    for i in 0..n {
        let joint = &chain.joints[i];
        let rt = rot[i].transpose();
        let (w_p, wd_p, a_p) = if i == 0 {
            (Vector3::zeros(), Vector3::zeros(), -*gravity)
        } else {
            (w[i - 1], wd[i - 1], acc[i - 1])
        };
        let w_prev = rt * w_p;
        let axis_dq = joint.axis * dq[i];
        w[i] = w_prev + axis_dq;
        wd[i] = rt * wd_p + joint.axis * ddq[i] + w_prev.cross(&axis_dq);
        acc[i] = rt * (a_p + wd_p.cross(&off[i]) + w_p.cross(&w_p.cross(&off[i])));

        let a_com = acc[i] + wd[i].cross(&joint.com) + w[i].cross(&w[i].cross(&joint.com));
        force[i] = a_com * joint.mass;
        moment[i] = joint.inertia * wd[i] + w[i].cross(&(joint.inertia * w[i]));
    }

    // inward pass: accumulate forces/moments toward the base
    let mut tau = JointVector::zeros();
    let mut f_child = Vector3::<T>::zeros();
    let mut n_child = Vector3::<T>::zeros();
    for i in (0..n).rev() {
        let joint = &chain.joints[i];
        let (f_from_child, n_from_child, child_off) = if i + 1 < n {
            (rot[i + 1] * f_child, rot[i + 1] * n_child, off[i + 1])
        } else {
            (Vector3::zeros(), Vector3::zeros(), Vector3::zeros())
        };
        let f_total = force[i] + f_from_child;
        let n_total =
            moment[i] + joint.com.cross(&force[i]) + n_from_child + child_off.cross(&f_from_child);
        tau[i] = joint.axis.dot(&n_total);
        if friction {
            let sgn = if dq[i] > T::zero() {
                T::one()
            } else if dq[i] < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            tau[i] += joint.coulomb * sgn + joint.viscous * dq[i];
        }
        f_child = f_total;
        n_child = n_total;
    }
    tau
}

/// Joint-space mass matrix, extracted column-wise from the inverse dynamics
/// (`ddq = e_i`, zero velocity, zero gravity, no friction).
pub fn mass_matrix<T: Real>(chain: &KinematicChain<T>, q: &JointVector<T>) -> SMatrix<T, 7, 7> {
    let zero = JointVector::zeros();
    let g0 = Vector3::zeros();
    let mut m = SMatrix::<T, 7, 7>::zeros();
    for i in 0..7 {
        let mut e = JointVector::zeros();
        e[i] = T::one();
        let col = rnea_with(chain, q, &zero, &e, &g0, false);
        m.set_column(i, &col);
    }
    m
}
