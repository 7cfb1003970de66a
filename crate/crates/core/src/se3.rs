//! Quaternion / SE(3) / error-state algebra shared by the whole pipeline.
//!
//! Conventions, frozen here for every file format and module in the crate:
//!
//! * Quaternions are stored in `(w, x, y, z)` order in all file formats and
//!   accessors, and are canonicalized to `w >= 0` after every operation
//!   (`q` and `-q` describe the same rotation).
//! * Error-state rotations live in the local (right-multiplied) tangent:
//!   `inject` applies `q ⊗ exp(dθ)`. Integration uses the exact quaternion
//!   exponential, not a first-order Euler step.
//! * Rotation vectors are minimal (`|dθ| <= π`). At exactly π the axis sign
//!   is ambiguous; we deterministically pick the sign that makes the axis
//!   component with the largest magnitude positive.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};

use crate::real::Real;

/// Rigid-body pose: position plus unit quaternion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<T: Real> {
    /// Position, meters.
    pub p: Vector3<T>,
    /// Orientation, unit quaternion canonicalized to `w >= 0`.
    pub q: UnitQuaternion<T>,
}

/// Small pose increment tracked by the error-state filters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorState<T: Real> {
    /// Position increment, meters.
    pub dp: Vector3<T>,
    /// Rotation vector (axis scaled by angle), radians, `|dtheta| < π`.
    pub dtheta: Vector3<T>,
}

/// Spatial velocity of the end-effector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist<T: Real> {
    /// Linear velocity, m/s.
    pub v: Vector3<T>,
    /// Angular velocity, rad/s.
    pub w: Vector3<T>,
}

impl<T: Real> Pose<T> {
    /// Pose from parts; renormalizes the quaternion and canonicalizes its sign.
    pub fn new(p: Vector3<T>, q: UnitQuaternion<T>) -> Self {
        Pose {
            p,
            q: canonicalize(renormalize(q)),
        }
    }

    pub fn identity() -> Self {
        Pose {
            p: Vector3::zeros(),
            q: UnitQuaternion::identity(),
        }
    }

    /// Composition `self ∘ other`: apply `other` in `self`'s frame.
    ///
    /// Interpreting poses as child-in-parent transforms `T_b^a`, this returns
    /// `T_c^a = T_b^a ∘ T_c^b`.
    pub fn compose(&self, other: &Pose<T>) -> Pose<T> {
        Pose::new(self.p + self.q * other.p, self.q * other.q)
    }

    pub fn inverse(&self) -> Pose<T> {
        let q_inv = self.q.inverse();
        Pose::new(-(q_inv * self.p), q_inv)
    }

    /// Map a point expressed in this pose's child frame into the parent frame.
    pub fn transform_point(&self, point: &Vector3<T>) -> Vector3<T> {
        self.q * point + self.p
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        self.q.to_rotation_matrix().into_inner()
    }

    /// Quaternion components in the crate's `(w, x, y, z)` order.
    pub fn quat_wxyz(&self) -> [T; 4] {
        let q = self.q.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Build from `(w, x, y, z)` components; renormalizes and canonicalizes.
    pub fn from_parts_wxyz(p: Vector3<T>, wxyz: [T; 4]) -> Self {
        Pose::new(
            p,
            UnitQuaternion::new_normalize(Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3])),
        )
    }

    /// Map the scalar type (used to lift recorded `f64` data into autodiff scalars).
    pub fn map<U: Real>(&self, mut f: impl FnMut(T) -> U) -> Pose<U> {
        let q = self.q.quaternion();
        Pose::new(
            Vector3::new(f(self.p.x), f(self.p.y), f(self.p.z)),
            UnitQuaternion::new_normalize(Quaternion::new(f(q.w), f(q.i), f(q.j), f(q.k))),
        )
    }
}

impl<T: Real> ErrorState<T> {
    pub fn zero() -> Self {
        ErrorState {
            dp: Vector3::zeros(),
            dtheta: Vector3::zeros(),
        }
    }

    pub fn from_vector(v: &Vector6<T>) -> Self {
        ErrorState {
            dp: Vector3::new(v[0], v[1], v[2]),
            dtheta: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<T> {
        Vector6::new(
            self.dp.x,
            self.dp.y,
            self.dp.z,
            self.dtheta.x,
            self.dtheta.y,
            self.dtheta.z,
        )
    }

    pub fn norm(&self) -> T {
        self.to_vector().norm()
    }
}

fn renormalize<T: Real>(q: UnitQuaternion<T>) -> UnitQuaternion<T> {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// Canonical quaternion sign: `w >= 0`; at `w == 0` the axis component with
/// the largest magnitude is made positive.
pub fn canonicalize<T: Real>(q: UnitQuaternion<T>) -> UnitQuaternion<T> {
    let c = q.quaternion();
    let flip = if c.w < T::zero() {
        true
    } else if c.w > T::zero() {
        false
    } else {
        let (ax, ay, az) = (c.i.abs(), c.j.abs(), c.k.abs());
        let lead = if ax >= ay && ax >= az {
            c.i
        } else if ay >= az {
            c.j
        } else {
            c.k
        };
        lead < T::zero()
    };
    if flip {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Unit quaternion of the rotation by `|r|` radians about `r/|r|`.
///
/// Requires `|r| < π`. The zero vector maps to the identity analytically;
/// small angles use a Taylor series in `|r|²` so the result (and its
/// derivatives, under autodiff scalars) stay smooth through zero.
pub fn quat_from_rotvec<T: Real>(r: &Vector3<T>) -> UnitQuaternion<T> {
    let n2 = r.norm_squared();
    let (w, k) = if n2 < T::of(1e-8) {
        // cos(θ/2) and sin(θ/2)/θ expanded in θ²
        let w = T::one() - n2 * T::of(0.125) + n2 * n2 * T::of(1.0 / 384.0);
        let k = T::of(0.5) - n2 * T::of(1.0 / 48.0) + n2 * n2 * T::of(1.0 / 3840.0);
        (w, k)
    } else {
        let theta = n2.sqrt();
        let half = theta * T::of(0.5);
        (half.cos(), half.sin() / theta)
    };
    canonicalize(UnitQuaternion::new_normalize(Quaternion::new(
        w,
        r.x * k,
        r.y * k,
        r.z * k,
    )))
}

/// Minimal rotation vector of a unit quaternion (`|result| <= π`).
pub fn quat_to_rotvec<T: Real>(q: &UnitQuaternion<T>) -> Vector3<T> {
    let c = canonicalize(*q);
    let c = c.quaternion();
    let v = Vector3::new(c.i, c.j, c.k);
    let s2 = v.norm_squared();
    if s2 < T::of(1e-16) {
        // θ/s = 2·atan2(s, w)/s expanded in s² (w ≈ 1 here)
        let w2 = c.w * c.w;
        return v * (T::of(2.0) / c.w) * (T::one() - s2 / (w2 * T::of(3.0)));
    }
    let s = s2.sqrt();
    let theta = T::of(2.0) * s.atan2(c.w);
    v * (theta / s)
}

/// Apply an error state: `p + dp` on position, `q ⊗ exp(dθ)` on orientation.
pub fn inject<T: Real>(s: &Pose<T>, ds: &ErrorState<T>) -> Pose<T> {
    Pose::new(s.p + ds.dp, s.q * quat_from_rotvec(&ds.dtheta))
}

/// Error state taking `a` to `b`: the inverse of [`inject`].
///
/// `inject(a, retract(a, b)) == b`. A relative rotation of exactly π returns
/// the deterministic axis described in the module docs.
pub fn retract<T: Real>(a: &Pose<T>, b: &Pose<T>) -> ErrorState<T> {
    ErrorState {
        dp: b.p - a.p,
        dtheta: quat_to_rotvec(&(a.q.inverse() * b.q)),
    }
}

/// Skew-symmetric (cross-product) matrix of a 3-vector.
#[rustfmt::skip]
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(), -v.z,      v.y,
        v.z,       T::zero(), -v.x,
        -v.y,      v.x,       T::zero(),
    )
}
