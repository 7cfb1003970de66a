//! Least-squares rigid registration of paired 3D point sets.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::real::Real;
use crate::se3::Pose;
use crate::vision::VisionError;

/// Rigid transform mapping `src`-frame coordinates into the `dst` frame, by
/// SVD of the weighted cross-covariance of the centered points (Kabsch).
///
/// With optional positive per-pair `weights`, centroids and the covariance
/// are weighted; weights enter homogeneously, so scaling them all leaves the
/// result bit-identical. The returned rotation is always proper
/// (`det(R) = +1`); a reflection-favoring point pairing resolves to the best
/// proper rotation instead.
pub fn register_3d3d<T: Real>(
    src: &[Vector3<T>],
    dst: &[Vector3<T>],
    weights: Option<&[T]>,
) -> Result<Pose<T>, VisionError> {
    if src.len() != dst.len() {
        return Err(VisionError::LengthMismatch {
            src: src.len(),
            dst: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(VisionError::TooFewCorrespondences {
            needed: 3,
            got: src.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != src.len() {
            return Err(VisionError::LengthMismatch {
                src: src.len(),
                dst: w.len(),
            });
        }
        if w.iter().any(|&wi| wi <= T::zero()) {
            return Err(VisionError::NonPositiveWeight);
        }
    }

    let weight = |i: usize| weights.map_or(T::one(), |w| w[i]);
    let mut w_sum = T::zero();
    let mut mu_s = Vector3::zeros();
    let mut mu_d = Vector3::zeros();
    for i in 0..src.len() {
        let w = weight(i);
        w_sum += w;
        mu_s += src[i] * w;
        mu_d += dst[i] * w;
    }
    mu_s /= w_sum;
    mu_d /= w_sum;

    let mut h = Matrix3::<T>::zeros();
    for i in 0..src.len() {
        h += (dst[i] - mu_d) * (src[i] - mu_s).transpose() * weight(i);
    }

    let svd = h.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let sv = svd.singular_values;
    if sv[1] < T::of(1e-12) * sv[0] && sv[2] < T::of(1e-12) * sv[0] {
        return Err(VisionError::CollinearPoints);
    }

    let det = (u * v_t).determinant();
    let mut d = Matrix3::identity();
    if det < T::zero() {
        d[(2, 2)] = -T::one();
    }
    let r = u * d * v_t;
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let t = mu_d - r * mu_s;
    Ok(Pose::new(t, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::quat_from_rotvec;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_cloud(rng: &mut StdRng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect()
    }

    #[test]
    fn identity_on_identical_sets() {
        let mut rng = StdRng::seed_from_u64(0);
        let pts = random_cloud(&mut rng, 6);
        let pose = register_3d3d(&pts, &pts, None).unwrap();
        assert_relative_eq!(pose.p, Vector3::zeros(), epsilon = 1e-14);
        assert_relative_eq!(pose.q.angle(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn recovers_known_transform_exactly() {
        let mut rng = StdRng::seed_from_u64(1);
        let src = random_cloud(&mut rng, 10);
        let truth = Pose::new(
            Vector3::new(0.3, -0.2, 0.9),
            quat_from_rotvec(&Vector3::new(0.4, -0.8, 0.5)),
        );
        let dst: Vec<_> = src.iter().map(|p| truth.transform_point(p)).collect();
        let est = register_3d3d(&src, &dst, None).unwrap();
        assert_relative_eq!(est.p, truth.p, epsilon = 1e-12);
        assert_relative_eq!(
            est.q.into_inner(),
            truth.q.into_inner(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn mirrored_cloud_yields_proper_rotation() {
        // A reflected pairing plus tiny noise must still produce det(R)=+1,
        // and the SVD fit must be at least as good as any sampled proper
        // rotation.
        let mut rng = StdRng::seed_from_u64(2);
        let src = random_cloud(&mut rng, 12);
        let dst: Vec<Vector3<f64>> = src
            .iter()
            .map(|p| {
                Vector3::new(-p.x, p.y, p.z)
                    + Vector3::new(
                        rng.random_range(-1e-3..1e-3),
                        rng.random_range(-1e-3..1e-3),
                        rng.random_range(-1e-3..1e-3),
                    )
            })
            .collect();
        let est = register_3d3d(&src, &dst, None).unwrap();
        let det = est.rotation_matrix().determinant();
        assert_relative_eq!(det, 1.0, epsilon = 1e-9);

        let sse = |pose: &Pose<f64>| -> f64 {
            src.iter()
                .zip(&dst)
                .map(|(s, d)| (pose.transform_point(s) - d).norm_squared())
                .sum()
        };
        let est_sse = sse(&est);
        // brute-force oracle: random proper rotations with the optimal
        // translation for each
        let mu_s = src.iter().sum::<Vector3<f64>>() / src.len() as f64;
        let mu_d = dst.iter().sum::<Vector3<f64>>() / dst.len() as f64;
        for _ in 0..2000 {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if axis.norm() < 1e-6 {
                continue;
            }
            let q = quat_from_rotvec(&(axis.normalize() * rng.random_range(0.0..3.1)));
            let cand = Pose::new(mu_d - q * mu_s, q);
            assert!(sse(&cand) + 1e-12 >= est_sse);
        }
    }

    #[test]
    fn uniform_weight_scaling_is_bit_identical() {
        let mut rng = StdRng::seed_from_u64(3);
        let src = random_cloud(&mut rng, 8);
        let truth = Pose::new(
            Vector3::new(0.1, 0.2, -0.3),
            quat_from_rotvec(&Vector3::new(-0.2, 0.6, 0.1)),
        );
        let dst: Vec<_> = src.iter().map(|p| truth.transform_point(p)).collect();
        let w1: Vec<f64> = (0..8).map(|i| 0.25 + 0.1 * i as f64).collect();
        let w2: Vec<f64> = w1.iter().map(|w| w * 4.0).collect();
        let a = register_3d3d(&src, &dst, Some(&w1)).unwrap();
        let b = register_3d3d(&src, &dst, Some(&w2)).unwrap();
        assert_eq!(a.p, b.p);
        assert_eq!(a.q, b.q);
    }

    #[test]
    fn collinear_points_rejected() {
        let src: Vec<Vector3<f64>> = (0..5)
            .map(|i| Vector3::new(i as f64 * 0.1, 0.0, 0.0))
            .collect();
        let dst = src.clone();
        assert!(matches!(
            register_3d3d(&src, &dst, None),
            Err(VisionError::CollinearPoints)
        ));
    }

    #[test]
    fn planar_sets_are_fine() {
        // rank-2 clouds (planar boards) determine the rotation once the
        // reflection is resolved
        let mut rng = StdRng::seed_from_u64(4);
        let src: Vec<Vector3<f64>> = (0..10)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0))
            .collect();
        let truth = Pose::new(
            Vector3::new(0.0, 0.5, 1.0),
            quat_from_rotvec(&Vector3::new(0.7, 0.2, -0.4)),
        );
        let dst: Vec<_> = src.iter().map(|p| truth.transform_point(p)).collect();
        let est = register_3d3d(&src, &dst, None).unwrap();
        assert_relative_eq!(est.p, truth.p, epsilon = 1e-12);
        assert_relative_eq!(est.q.into_inner(), truth.q.into_inner(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_weights_and_lengths() {
        let pts: Vec<Vector3<f64>> =
            vec![Vector3::x(), Vector3::y(), Vector3::z(), Vector3::zeros()];
        assert!(matches!(
            register_3d3d(&pts, &pts[..3], None),
            Err(VisionError::LengthMismatch { .. })
        ));
        let w = vec![1.0, 1.0, 0.0, 1.0];
        assert!(matches!(
            register_3d3d(&pts, &pts, Some(&w)),
            Err(VisionError::NonPositiveWeight)
        ));
    }
}
