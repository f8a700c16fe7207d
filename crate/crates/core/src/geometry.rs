//! Pinhole cameras, world-to-camera pose algebra and Plücker ray bundles.
//!
//! Every pose in this module is world-to-camera: a world point `x` maps to
//! camera coordinates `R x + T`, and the camera center is `-Rᵀ T`.
//! Camera-to-world matrices only show up at the metric and export boundaries
//! through [`camera_to_world`].

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Orthonormality tolerance accepted by [`CameraPose::new`].
pub const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    /// Reference raster the pixel quantities above are expressed in.
    pub width: u32,
    pub height: u32,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: u32, height: u32) -> Result<Self> {
        if !(fx > T::zero() && fy > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "reference resolution must be nonzero ({width}x{height})"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidArgument(
                "principal point must be finite".into(),
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Identity calibration (`K = I`) on a `width`×`height` raster.
    pub fn identity(width: u32, height: u32) -> Self {
        Self {
            fx: T::one(),
            fy: T::one(),
            cx: T::zero(),
            cy: T::zero(),
            width,
            height,
        }
    }

    pub fn as_matrix(&self) -> Matrix3<T> {
        let (z, o) = (T::zero(), T::one());
        Matrix3::new(self.fx, z, self.cx, z, self.fy, self.cy, z, z, o)
    }

    /// Closed-form inverse of the upper-triangular calibration matrix.
    pub fn inverse_matrix(&self) -> Matrix3<T> {
        let (z, o) = (T::zero(), T::one());
        Matrix3::new(
            o / self.fx,
            z,
            -self.cx / self.fx,
            z,
            o / self.fy,
            -self.cy / self.fy,
            z,
            z,
            o,
        )
    }

    pub fn scaled(&self, new_w: u32, new_h: u32) -> Self {
        scale_intrinsics(self, new_w, new_h)
    }

    pub fn cast<U: Real>(&self) -> CameraIntrinsics<U> {
        CameraIntrinsics {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Rescales intrinsics from their reference raster to `new_w`×`new_h`.
///
/// Focal lengths and principal point scale with the per-axis ratio, so a
/// rescale to the reference size returns the input unchanged.
pub fn scale_intrinsics<T: Real>(
    k: &CameraIntrinsics<T>,
    new_w: u32,
    new_h: u32,
) -> CameraIntrinsics<T> {
    assert!(new_w >= 1 && new_h >= 1, "target raster must be nonempty");
    if new_w == k.width && new_h == k.height {
        return *k;
    }
    let sx = T::lit(new_w as f64) / T::lit(k.width as f64);
    let sy = T::lit(new_h as f64) / T::lit(k.height as f64);
    CameraIntrinsics {
        fx: k.fx * sx,
        fy: k.fy * sy,
        cx: k.cx * sx,
        cy: k.cy * sy,
        width: new_w,
        height: new_h,
    }
}

/// World-to-camera rigid transform `[R | T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> CameraPose<T> {
    /// Builds a pose, rejecting rotations that are not proper orthonormal.
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        let err = pose.orthonormality_error();
        if !(err < T::lit(ORTHONORMAL_TOL)) || rotation.determinant() <= T::zero() {
            return Err(Error::InvalidArgument(format!(
                "rotation is not in SO(3) (|RᵀR - I|_F = {err})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("translation must be finite".into()));
        }
        Ok(pose)
    }

    /// Builds a pose without validating the rotation.
    pub fn new_unchecked(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// `‖RᵀR − I‖_F`
    pub fn orthonormality_error(&self) -> T {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    /// Camera center in world coordinates, `-Rᵀ T`.
    pub fn center(&self) -> Vector3<T> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn transform_point(&self, x: &Vector3<T>) -> Vector3<T> {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn cast<U: Real>(&self) -> CameraPose<U> {
        CameraPose {
            rotation: self.rotation.map(|v| U::lit(v.as_f64())),
            translation: self.translation.map(|v| U::lit(v.as_f64())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraFrame<T: Real> {
    pub intrinsics: CameraIntrinsics<T>,
    pub pose: CameraPose<T>,
    /// Capture time in microseconds, when the source provides one.
    pub timestamp: Option<i64>,
}

impl<T: Real> CameraFrame<T> {
    pub fn new(intrinsics: CameraIntrinsics<T>, pose: CameraPose<T>) -> Self {
        Self {
            intrinsics,
            pose,
            timestamp: None,
        }
    }

    /// Projects a world point with `u = K [R|T] x`.
    ///
    /// Returns the pixel and the camera-space depth; `None` when the point
    /// lies on or behind the image plane.
    pub fn project(&self, x: &Vector3<T>) -> Option<(Vector2<T>, T)> {
        let xc = self.pose.transform_point(x);
        if xc.z <= T::zero() {
            return None;
        }
        let k = &self.intrinsics;
        let u = k.fx * xc.x / xc.z + k.cx;
        let v = k.fy * xc.y / xc.z + k.cy;
        Some((Vector2::new(u, v), xc.z))
    }

    /// Same camera with intrinsics rescaled to a `w`×`h` raster.
    pub fn at_resolution(&self, w: u32, h: u32) -> Self {
        Self {
            intrinsics: self.intrinsics.scaled(w, h),
            ..*self
        }
    }

    pub fn cast<U: Real>(&self) -> CameraFrame<U> {
        CameraFrame {
            intrinsics: self.intrinsics.cast(),
            pose: self.pose.cast(),
            timestamp: self.timestamp,
        }
    }
}

/// Inverts a rigid transform: `(R, T) ↦ (Rᵀ, −RᵀT)`.
///
/// Applied to a world-to-camera pose this yields the camera-to-world pose and
/// vice versa.
pub fn camera_to_world<T: Real>(pose: &CameraPose<T>) -> CameraPose<T> {
    pose.inverse()
}

/// Pose of frame `to` expressed relative to frame `from`.
///
/// With world-to-camera poses on both sides, `R = R_j R_iᵀ` and
/// `T = T_j − R_j R_iᵀ T_i`; the result maps camera-`i` coordinates to
/// camera-`j` coordinates.
pub fn relative_pose<T: Real>(from: &CameraFrame<T>, to: &CameraFrame<T>) -> CameraPose<T> {
    let r = to.pose.rotation * from.pose.rotation.transpose();
    let t = to.pose.translation - r * from.pose.translation;
    CameraPose::new_unchecked(r, t)
}

/// Rotation of `angle` radians about `axis`.
pub fn axis_angle<T: Real>(axis: Vector3<T>, angle: T) -> Matrix3<T> {
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
}

/// Closest rotation to `m` in Frobenius norm (polar decomposition).
pub fn nearest_rotation<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < T::zero() {
        d[(2, 2)] = -T::one();
    }
    u * d * vt
}

/// Oriented line in Plücker form: unit direction `d` and moment `m = p × d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluckerRay<T: Real> {
    pub moment: Vector3<T>,
    pub direction: Vector3<T>,
}

impl<T: Real> PluckerRay<T> {
    /// Line through `point` along `direction` (normalized here).
    pub fn through(point: &Vector3<T>, direction: &Vector3<T>) -> Self {
        let d = direction.normalize();
        Self {
            moment: point.cross(&d),
            direction: d,
        }
    }

    /// Point of the line closest to the world origin, `d × m`.
    pub fn closest_point_to_origin(&self) -> Vector3<T> {
        self.direction.cross(&self.moment)
    }

    pub fn distance_to_origin(&self) -> T {
        self.moment.norm()
    }

    /// Euclidean distance from `x` to the line.
    pub fn distance_to_point(&self, x: &Vector3<T>) -> T {
        (x.cross(&self.direction) - self.moment).norm()
    }

    /// The six channels `(m, d)`.
    pub fn channels(&self) -> [T; 6] {
        let (m, d) = (&self.moment, &self.direction);
        [m.x, m.y, m.z, d.x, d.y, d.z]
    }

    /// Point nearest to both lines (midpoint of the common perpendicular).
    ///
    /// `None` for parallel lines.
    pub fn closest_point_between(&self, other: &Self) -> Option<Vector3<T>> {
        let (p1, d1) = (self.closest_point_to_origin(), self.direction);
        let (p2, d2) = (other.closest_point_to_origin(), other.direction);
        let n = d1.cross(&d2);
        let nn = n.norm_squared();
        if nn < T::lit(1e-24) {
            return None;
        }
        let w = p2 - p1;
        let s = w.cross(&d2).dot(&n) / nn;
        let t = w.cross(&d1).dot(&n) / nn;
        Some((p1 + d1 * s + p2 + d2 * t) * T::lit(0.5))
    }
}

/// Unprojects pixel `(u, v)` into a world-space Plücker ray.
///
/// The direction is `R⁻¹ K⁻¹ (u, v, 1)ᵀ` normalized to unit length and the
/// moment is taken against the normalized direction, so `‖m‖` is the distance
/// between the ray and the world origin.
pub fn unproject_ray<T: Real>(frame: &CameraFrame<T>, u: T, v: T) -> PluckerRay<T> {
    let pixel = Vector3::new(u, v, T::one());
    let rt = frame.pose.rotation.transpose();
    let d = (rt * (frame.intrinsics.inverse_matrix() * pixel)).normalize();
    let center = -(rt * frame.pose.translation);
    PluckerRay {
        moment: center.cross(&d),
        direction: d,
    }
}

/// H×W ray bundle for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PluckerGrid<T: Real> {
    pub h: usize,
    pub w: usize,
    pub frame_index: usize,
    /// Row-major rays.
    pub rays: Vec<PluckerRay<T>>,
}

impl<T: Real> PluckerGrid<T> {
    pub fn get(&self, row: usize, col: usize) -> &PluckerRay<T> {
        &self.rays[row * self.w + col]
    }

    /// Flattened `(h·w) × 6` channel data, row-major, moment first.
    pub fn channel_rows(&self) -> Vec<[T; 6]> {
        self.rays.iter().map(PluckerRay::channels).collect()
    }

    /// Checks unit direction, `m ⊥ d` and a common center shared by all rays.
    pub fn check_invariants(&self, tol: T) -> Result<()> {
        for (i, ray) in self.rays.iter().enumerate() {
            if (ray.direction.norm() - T::one()).abs() > tol
                || ray.moment.dot(&ray.direction).abs() > tol
            {
                return Err(Error::InvalidArgument(format!(
                    "ray {i} violates Plücker constraints"
                )));
            }
        }
        if let Some(center) = self.recover_center() {
            for (i, ray) in self.rays.iter().enumerate() {
                if ray.distance_to_point(&center) > tol.max(T::lit(1e-6)) {
                    return Err(Error::InvalidArgument(format!(
                        "ray {i} misses the shared center"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Camera center recovered from the rays alone (intersection of the
    /// first ray with the ray of largest angular separation).
    pub fn recover_center(&self) -> Option<Vector3<T>> {
        let first = self.rays.first()?;
        let other = self.rays.iter().skip(1).max_by(|a, b| {
            let sa = first.direction.cross(&a.direction).norm();
            let sb = first.direction.cross(&b.direction).norm();
            sa.partial_cmp(&sb).unwrap_or(std::cmp::Ordering::Equal)
        })?;
        first.closest_point_between(other)
    }
}

/// Rasterizes the ray bundle of `frame` on an `h`×`w` grid.
///
/// Intrinsics are rescaled to `w`×`h` first; cell `(r, c)` is sampled at the
/// pixel center `(c + 0.5, r + 0.5)`.
pub fn plucker_grid<T: Real>(frame: &CameraFrame<T>, h: usize, w: usize) -> PluckerGrid<T> {
    assert!(h >= 1 && w >= 1, "grid must be nonempty");
    let scaled = frame.at_resolution(w as u32, h as u32);
    let half = T::lit(0.5);
    let mut rays = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            rays.push(unproject_ray(
                &scaled,
                T::lit(c as f64) + half,
                T::lit(r as f64) + half,
            ));
        }
    }
    PluckerGrid {
        h,
        w,
        frame_index: 0,
        rays,
    }
}

/// One grid per frame, with `frame_index` set to the position in `frames`.
pub fn plucker_grids<T: Real>(
    frames: &[CameraFrame<T>],
    h: usize,
    w: usize,
) -> Vec<PluckerGrid<T>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| PluckerGrid {
            frame_index: i,
            ..plucker_grid(f, h, w)
        })
        .collect()
}
