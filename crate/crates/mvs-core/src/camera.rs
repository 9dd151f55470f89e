//! Pinhole camera model and plane-sweep warping.
//!
//! Conventions: extrinsics map world to camera coordinates
//! (`x_cam = R * x_world + t`), depth is the camera-frame z coordinate,
//! and integer pixel coordinates address pixel centers. Continuous
//! coordinates share the same frame with no half-pixel offset.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Homogeneous depth at or below this is treated as behind the image plane.
pub const BEHIND_EPS: f64 = 1e-9;

/// Intrinsics and pose of one pinhole view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Matrix3<f64>,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation, in depth units.
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

/// One warped sample: continuous source pixel plus its source-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpSample {
    pub coord: Vector2<f64>,
    /// Depth of the warped point in the source camera frame.
    pub src_depth: f64,
    /// True when the point lies in front of the source camera and inside
    /// `[0,W) x [0,H)`.
    pub valid: bool,
}

impl CameraModel {
    /// Validates the type invariants: upper-triangular intrinsics with a
    /// positive diagonal and unit bottom-right entry, orthonormal rotation.
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::config("camera dimensions must be positive"));
        }
        if intrinsics[(1, 0)] != 0.0 || intrinsics[(2, 0)] != 0.0 || intrinsics[(2, 1)] != 0.0 {
            return Err(Error::config("intrinsics must be upper-triangular"));
        }
        if intrinsics[(0, 0)] <= 0.0 || intrinsics[(1, 1)] <= 0.0 {
            return Err(Error::config("intrinsics diagonal must be positive"));
        }
        if intrinsics[(2, 2)] != 1.0 {
            return Err(Error::config("intrinsics bottom-right entry must be 1"));
        }
        let gram = rotation.transpose() * rotation;
        let dev = (gram - Matrix3::identity()).amax();
        if dev > 1e-9 {
            return Err(Error::config(format!(
                "rotation is not orthonormal (|R^T R - I| = {dev:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "rotation determinant {det} is not 1"
            )));
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    /// Back-project pixel `p` at camera-frame depth `d` to a world point.
    pub fn back_project(&self, p: Vector2<f64>, depth: f64) -> Vector3<f64> {
        let ray = self
            .intrinsics
            .try_inverse()
            .expect("valid K is invertible")
            * Vector3::new(p.x, p.y, 1.0);
        let cam = ray * depth;
        self.rotation.transpose() * (cam - self.translation)
    }

    /// Project a world point; returns pixel, camera-frame depth, and the
    /// front-of-camera/in-bounds flag.
    pub fn project(&self, world: Vector3<f64>) -> (Vector2<f64>, f64, bool) {
        let cam = self.rotation * world + self.translation;
        let h = self.intrinsics * cam;
        if h.z <= BEHIND_EPS {
            return (Vector2::new(f64::NAN, f64::NAN), h.z, false);
        }
        let p = Vector2::new(h.x / h.z, h.y / h.z);
        (p, h.z, self.contains(p))
    }

    /// True when a continuous coordinate falls inside `[0,W) x [0,H)`.
    pub fn contains(&self, p: Vector2<f64>) -> bool {
        p.x >= 0.0 && p.x < self.width as f64 && p.y >= 0.0 && p.y < self.height as f64
    }

    /// Camera for a feature scale downsampled by `2^level`: focal lengths and
    /// principal point divided exactly, image size halved per level.
    pub fn scaled(&self, level: usize) -> Self {
        let f = (1u64 << level) as f64;
        let mut k = self.intrinsics;
        k[(0, 0)] /= f;
        k[(1, 1)] /= f;
        k[(0, 1)] /= f;
        k[(0, 2)] /= f;
        k[(1, 2)] /= f;
        Self {
            intrinsics: k,
            rotation: self.rotation,
            translation: self.translation,
            width: self.width >> level,
            height: self.height >> level,
        }
    }
}

/// Precomputed reference-to-source warp for one camera pair.
///
/// The homogeneous source projection of reference pixel `p` at depth `d`
/// factors as `d * (A * p~) + b` with `A = K_s R_rel K_r^-1` and
/// `b = K_s t_rel`, so sweeping depths costs a handful of flops per sample.
#[derive(Debug, Clone)]
pub struct PairWarper {
    a: Matrix3<f64>,
    b: Vector3<f64>,
    src_width: f64,
    src_height: f64,
}

impl PairWarper {
    pub fn new(ref_cam: &CameraModel, src_cam: &CameraModel) -> Self {
        let r_rel = src_cam.rotation * ref_cam.rotation.transpose();
        let t_rel = src_cam.translation - r_rel * ref_cam.translation;
        let k_ref_inv = ref_cam
            .intrinsics
            .try_inverse()
            .expect("valid K is invertible");
        Self {
            a: src_cam.intrinsics * r_rel * k_ref_inv,
            b: src_cam.intrinsics * t_rel,
            src_width: src_cam.width as f64,
            src_height: src_cam.height as f64,
        }
    }

    /// Direction part of the warp for one pixel; combine with [`Self::warp_ray`].
    pub fn ray(&self, p_r: Vector2<f64>) -> Vector3<f64> {
        self.a * Vector3::new(p_r.x, p_r.y, 1.0)
    }

    /// Warp a precomputed ray at depth `d`.
    pub fn warp_ray(&self, ray: Vector3<f64>, depth: f64) -> WarpSample {
        let h = ray * depth + self.b;
        if h.z <= BEHIND_EPS {
            return WarpSample {
                coord: Vector2::new(f64::NAN, f64::NAN),
                src_depth: h.z,
                valid: false,
            };
        }
        let coord = Vector2::new(h.x / h.z, h.y / h.z);
        let inside = coord.x >= 0.0
            && coord.x < self.src_width
            && coord.y >= 0.0
            && coord.y < self.src_height;
        WarpSample {
            coord,
            src_depth: h.z,
            valid: inside,
        }
    }

    pub fn warp(&self, p_r: Vector2<f64>, depth: f64) -> WarpSample {
        self.warp_ray(self.ray(p_r), depth)
    }
}

/// Warp reference pixel `p_r` at hypothesized depth `d` into the source view.
///
/// Behind-plane projections (homogeneous depth <= [`BEHIND_EPS`]) and
/// out-of-bounds landings are reported through the sample's `valid` flag
/// rather than as errors.
pub fn warp_pixel(
    ref_cam: &CameraModel,
    src_cam: &CameraModel,
    p_r: Vector2<f64>,
    depth: f64,
) -> WarpSample {
    PairWarper::new(ref_cam, src_cam).warp(p_r, depth)
}

/// Warp one reference pixel onto the source epipolar line at every
/// hypothesized depth.
pub fn epipolar_samples(
    ref_cam: &CameraModel,
    src_cam: &CameraModel,
    p_r: Vector2<f64>,
    depths: &[f64],
) -> Vec<WarpSample> {
    let warper = PairWarper::new(ref_cam, src_cam);
    let ray = warper.ray(p_r);
    depths.iter().map(|&d| warper.warp_ray(ray, d)).collect()
}
