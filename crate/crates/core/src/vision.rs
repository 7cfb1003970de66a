//! Camera model, marker-board geometry, EPnP pose estimation, and SVD-based
//! 3D-3D registration.
//!
//! Image handling is out of scope: corner pixel coordinates arrive
//! synthesized (projection plus noise), never decoded from images. All
//! lengths are meters, all image coordinates pixels. The pinhole model has
//! no lens distortion.

mod epnp;
mod registration;

pub use epnp::solve_epnp;
pub use registration::register_3d3d;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::se3::Pose;

#[derive(Debug, Clone, thiserror::Error)]
pub enum VisionError {
    #[error("point is behind the camera (z = {z:.3e} m)")]
    PointBehindCamera { z: f64 },
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("degenerate correspondence configuration (null space dimension > 1)")]
    DegenerateConfiguration,
    #[error("point sets are collinear")]
    CollinearPoints,
    #[error("point lists differ in length: {src} vs {dst}")]
    LengthMismatch { src: usize, dst: usize },
    #[error("weights must be positive")]
    NonPositiveWeight,
    #[error("invalid camera intrinsics: {0}")]
    BadIntrinsics(String),
    #[error("invalid marker board: {0}")]
    BadBoard(String),
}

/// Pinhole camera intrinsics (no distortion).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: u32, height: u32) -> Result<Self, VisionError> {
        if fx <= T::zero() || fy <= T::zero() {
            return Err(VisionError::BadIntrinsics(
                "focal length must be positive".into(),
            ));
        }
        if cx < T::zero()
            || cy < T::zero()
            || cx >= T::of(width as f64)
            || cy >= T::of(height as f64)
        {
            return Err(VisionError::BadIntrinsics(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Synthetic defaults resembling a 720p stereo camera left sensor.
    pub fn default_720p() -> Self {
        CameraIntrinsics {
            fx: T::of(700.0),
            fy: T::of(700.0),
            cx: T::of(640.0),
            cy: T::of(360.0),
            width: 1280,
            height: 720,
        }
    }

    pub fn contains(&self, u: &Vector2<T>) -> bool {
        u.x >= T::zero()
            && u.y >= T::zero()
            && u.x < T::of(self.width as f64)
            && u.y < T::of(self.height as f64)
    }
}

/// One fiducial marker: four coplanar corners in the board frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Marker<T: Real> {
    pub id: u32,
    pub corners: [Vector3<T>; 4],
}

/// Planar fiducial board. All corners satisfy `z == 0` in the board frame and
/// each marker's corners wind counterclockwise (viewed from `+z`).
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerBoard<T: Real> {
    pub markers: Vec<Marker<T>>,
    /// Marker edge length, meters.
    pub marker_size: T,
}

impl<T: Real> MarkerBoard<T> {
    pub fn new(markers: Vec<Marker<T>>, marker_size: T) -> Result<Self, VisionError> {
        for m in &markers {
            for c in &m.corners {
                if c.z.abs() > T::of(1e-12) {
                    return Err(VisionError::BadBoard(format!(
                        "marker {} corner off the board plane",
                        m.id
                    )));
                }
            }
            let e1 = m.corners[1] - m.corners[0];
            let e2 = m.corners[2] - m.corners[1];
            if e1.cross(&e2).z <= T::zero() {
                return Err(VisionError::BadBoard(format!(
                    "marker {} corners are not counterclockwise",
                    m.id
                )));
            }
        }
        Ok(MarkerBoard {
            markers,
            marker_size,
        })
    }

    fn square(id: u32, center: Vector2<T>, size: T) -> Marker<T> {
        let h = size * T::of(0.5);
        Marker {
            id,
            corners: [
                Vector3::new(center.x - h, center.y - h, T::zero()),
                Vector3::new(center.x + h, center.y - h, T::zero()),
                Vector3::new(center.x + h, center.y + h, T::zero()),
                Vector3::new(center.x - h, center.y + h, T::zero()),
            ],
        }
    }

    /// Eight 20 mm markers ringed around the board origin (the trocar entry
    /// point).
    pub fn trocar_ring() -> Self {
        let size = T::of(0.02);
        let radius = T::of(0.045);
        let markers = (0..8u32)
            .map(|i| {
                let a = T::of(i as f64 * std::f64::consts::FRAC_PI_4);
                Self::square(i, Vector2::new(radius * a.cos(), radius * a.sin()), size)
            })
            .collect();
        MarkerBoard {
            markers,
            marker_size: size,
        }
    }

    /// Single 45 mm marker centered on the board origin.
    pub fn single_marker() -> Self {
        let size = T::of(0.045);
        MarkerBoard {
            markers: vec![Self::square(0, Vector2::zeros(), size)],
            marker_size: size,
        }
    }

    pub fn corner_count(&self) -> usize {
        self.markers.len() * 4
    }

    pub fn corners(&self) -> impl Iterator<Item = (u32, u8, &Vector3<T>)> {
        self.markers.iter().flat_map(|m| {
            m.corners
                .iter()
                .enumerate()
                .map(move |(i, c)| (m.id, i as u8, c))
        })
    }
}

/// 2D-3D correspondence used for pose solving.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence<T: Real> {
    /// Detected corner, pixels.
    pub u: Vector2<T>,
    /// Corner coordinates in the board frame, meters.
    pub p: Vector3<T>,
    pub marker_id: u32,
    pub corner_id: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet<T: Real> {
    pub pairs: Vec<Correspondence<T>>,
}

impl<T: Real> CorrespondenceSet<T> {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
    pub fn len(&self) -> usize {
        self.pairs.len()
    }
}

/// Pose solved from correspondences: board frame in camera frame.
#[derive(Debug, Clone, Copy)]
pub struct PoseEstimate<T: Real> {
    pub pose: Pose<T>,
    /// Mean per-corner pixel residual.
    pub reproj_error_px: T,
    pub n_points: usize,
}

/// Pinhole projection of a board-frame point into pixel coordinates.
pub fn project<T: Real>(
    k: &CameraIntrinsics<T>,
    pose: &Pose<T>,
    p_board: &Vector3<T>,
) -> Result<Vector2<T>, VisionError> {
    let pc = pose.transform_point(p_board);
    if pc.z <= T::of(1e-6) {
        return Err(VisionError::PointBehindCamera { z: pc.z.to_f64() });
    }
    Ok(Vector2::new(
        k.fx * pc.x / pc.z + k.cx,
        k.fy * pc.y / pc.z + k.cy,
    ))
}

/// Projection with the depth clamped away from zero; used inside residual
/// loops that must stay total.
pub(crate) fn project_clamped<T: Real>(
    k: &CameraIntrinsics<T>,
    pose: &Pose<T>,
    p_board: &Vector3<T>,
) -> Vector2<T> {
    let pc = pose.transform_point(p_board);
    let z = pc.z.max(T::of(1e-6));
    Vector2::new(k.fx * pc.x / z + k.cx, k.fy * pc.y / z + k.cy)
}

/// Sum of per-corner pixel L2 residuals of `pose` against the set.
pub fn reprojection_error<T: Real>(
    k: &CameraIntrinsics<T>,
    pose: &Pose<T>,
    s: &CorrespondenceSet<T>,
) -> T {
    s.pairs
        .iter()
        .map(|c| (project_clamped(k, pose, &c.p) - c.u).norm())
        .fold(T::zero(), |acc, r| acc + r)
}

// ---- board layout file ------------------------------------------------

/// On-disk board layout. Units: meters. Corner arrays are `[x, y, z]` in the
/// board frame with `z == 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoardFile {
    pub marker_size_m: f64,
    pub markers: Vec<BoardFileMarker>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoardFileMarker {
    pub id: u32,
    pub corners_m: [[f64; 3]; 4],
}

impl BoardFile {
    pub fn from_board(board: &MarkerBoard<f64>) -> Self {
        BoardFile {
            marker_size_m: board.marker_size,
            markers: board
                .markers
                .iter()
                .map(|m| BoardFileMarker {
                    id: m.id,
                    corners_m: [
                        m.corners[0].into(),
                        m.corners[1].into(),
                        m.corners[2].into(),
                        m.corners[3].into(),
                    ],
                })
                .collect(),
        }
    }

    pub fn to_board(&self) -> Result<MarkerBoard<f64>, VisionError> {
        MarkerBoard::new(
            self.markers
                .iter()
                .map(|m| Marker {
                    id: m.id,
                    corners: [
                        Vector3::from(m.corners_m[0]),
                        Vector3::from(m.corners_m[1]),
                        Vector3::from(m.corners_m[2]),
                        Vector3::from(m.corners_m[3]),
                    ],
                })
                .collect(),
            self.marker_size_m,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::quat_from_rotvec;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn project_on_axis_and_offset() {
        let k = CameraIntrinsics::<f64>::default_720p();
        let pose = Pose::identity();
        let u = project(&k, &pose, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(u, Vector2::new(640.0, 360.0));
        let u = project(&k, &pose, &Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert_relative_eq!(u, Vector2::new(710.0, 360.0));
    }

    #[test]
    fn project_rejects_points_behind_camera() {
        let k = CameraIntrinsics::<f64>::default_720p();
        let pose = Pose::identity();
        assert!(matches!(
            project(&k, &pose, &Vector3::new(0.0, 0.0, -0.5)),
            Err(VisionError::PointBehindCamera { .. })
        ));
    }

    #[test]
    fn reprojection_error_zero_at_truth_and_345_offset() {
        let k = CameraIntrinsics::<f64>::default_720p();
        let board = MarkerBoard::<f64>::trocar_ring();
        let pose = Pose::new(
            Vector3::new(0.05, -0.02, 0.9),
            quat_from_rotvec(&Vector3::new(0.2, 0.1, 0.0)),
        );
        let mut set = CorrespondenceSet::default();
        for (mid, cid, p) in board.corners() {
            set.pairs.push(Correspondence {
                u: project(&k, &pose, p).unwrap(),
                p: *p,
                marker_id: mid,
                corner_id: cid,
            });
        }
        assert_relative_eq!(reprojection_error(&k, &pose, &set), 0.0, epsilon = 1e-9);

        // perturb one corner by (3, 4) px: contributes exactly 5 px
        set.pairs[7].u += Vector2::new(3.0, 4.0);
        assert_relative_eq!(reprojection_error(&k, &pose, &set), 5.0, epsilon = 1e-9);
    }

    #[test]
    fn reprojection_noise_matches_rayleigh_mean() {
        // residual of N(0, σ²I₂) noise has Rayleigh mean σ·√(π/2)
        let k = CameraIntrinsics::<f64>::default_720p();
        let board = MarkerBoard::<f64>::trocar_ring();
        let pose = Pose::new(Vector3::new(0.0, 0.0, 0.8), UnitQuaternion::identity());
        let sigma = 1.0;
        let mut rng = StdRng::seed_from_u64(42);
        let trials = 200;
        let mut total = 0.0;
        for _ in 0..trials {
            let mut set = CorrespondenceSet::default();
            for (mid, cid, p) in board.corners() {
                let n: f64 = StandardNormal.sample(&mut rng);
                let m: f64 = StandardNormal.sample(&mut rng);
                set.pairs.push(Correspondence {
                    u: project(&k, &pose, p).unwrap() + Vector2::new(n * sigma, m * sigma),
                    p: *p,
                    marker_id: mid,
                    corner_id: cid,
                });
            }
            total += reprojection_error(&k, &pose, &set) / set.len() as f64;
        }
        let mean = total / trials as f64;
        let expect = sigma * (std::f64::consts::PI / 2.0).sqrt();
        // standard error over 32 × 200 draws is ~0.008 px; allow 5×
        assert!((mean - expect).abs() < 0.04, "mean {mean} vs {expect}");
    }

    #[test]
    fn board_invariants_enforced() {
        let mut bad = MarkerBoard::<f64>::single_marker();
        bad.markers[0].corners[2].z = 1e-6;
        assert!(MarkerBoard::new(bad.markers.clone(), bad.marker_size).is_err());

        let mut cw = MarkerBoard::<f64>::single_marker();
        cw.markers[0].corners.swap(1, 3);
        assert!(MarkerBoard::new(cw.markers.clone(), cw.marker_size).is_err());

        assert_eq!(MarkerBoard::<f64>::trocar_ring().corner_count(), 32);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 700.0, 640.0, 360.0, 1280, 720).is_err());
        assert!(CameraIntrinsics::new(700.0, 700.0, 1400.0, 360.0, 1280, 720).is_err());
        assert!(CameraIntrinsics::new(700.0, 700.0, 640.0, 360.0, 1280, 720).is_ok());
    }

    #[test]
    fn board_file_round_trip() {
        let board = MarkerBoard::<f64>::trocar_ring();
        let file = BoardFile::from_board(&board);
        let json = serde_json::to_string(&file).unwrap();
        let back: BoardFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_board().unwrap(), board);
    }
}
