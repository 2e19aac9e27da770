//! Calibrated pinhole cameras, projection, and linear multi-view triangulation.
//!
//! World coordinates are millimeters; image coordinates are full-resolution
//! pixels. Extrinsics map world to camera (`x_cam = R x_world + t`) and the
//! camera looks down its +z axis.

mod calibration;

pub use calibration::{calibration_to_json, load_calibration, parse_calibration, CalibrationError};

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Camera-frame depth below which projection is considered degenerate.
pub const DEPTH_EPSILON: f64 = 1e-6;

/// Condition-number threshold for declaring the DLT system rank-deficient.
pub const DLT_CONDITION_LIMIT: f64 = 1e10;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("camera `{camera}`: point at or behind the image plane (depth {depth:.3e} mm)")]
    DegenerateDepth { camera: String, depth: f64 },
    #[error("triangulation needs at least 2 observations, got {0}")]
    InsufficientViews(usize),
    #[error("degenerate triangulation geometry (condition {condition:.3e})")]
    DegenerateGeometry { condition: f64 },
    #[error("invalid camera `{camera}`: {reason}")]
    InvalidCamera { camera: String, reason: String },
}

/// Sub-pixel image coordinates in the full-resolution frame.
///
/// Not required to lie inside the image bounds: projections may exit the frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub fn new(x: f64, y: f64) -> Self {
        PixelPoint { x, y }
    }

    pub fn distance_to(&self, other: &PixelPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// World-frame 3D point in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        WorldPoint { x, y, z }
    }

    pub fn distance_to(&self, other: &WorldPoint) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2))
            .sqrt()
    }

    fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

/// Calibrated pinhole camera without lens distortion.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    name: String,
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    image_size: (u32, u32),
}

impl CameraModel {
    /// Builds a camera, validating the calibration invariants:
    /// orthonormal right-handed rotation (within 1e-9), upper-triangular
    /// intrinsics with positive focal entries, positive image size, and
    /// finite entries throughout.
    pub fn new(
        name: impl Into<String>,
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        image_size: (u32, u32),
    ) -> Result<CameraModel, GeometryError> {
        let name = name.into();
        let invalid = |reason: String| GeometryError::InvalidCamera {
            camera: name.clone(),
            reason,
        };

        if intrinsics.iter().any(|v| !v.is_finite())
            || rotation.iter().any(|v| !v.is_finite())
            || translation.iter().any(|v| !v.is_finite())
        {
            return Err(invalid("non-finite calibration entry".into()));
        }

        let gram = rotation.transpose() * rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > 1e-9 {
            return Err(invalid(format!(
                "rotation is not orthonormal (max |R'R - I| = {dev:.3e}, limit 1e-9)"
            )));
        }
        if rotation.determinant() < 0.0 {
            return Err(invalid(
                "rotation has negative determinant (reflection, not a rotation)".into(),
            ));
        }

        if intrinsics[(0, 0)] <= 0.0 || intrinsics[(1, 1)] <= 0.0 {
            return Err(invalid("intrinsics focal entries must be positive".into()));
        }
        for (r, c) in [(1, 0), (2, 0), (2, 1)] {
            if intrinsics[(r, c)] != 0.0 {
                return Err(invalid(format!(
                    "intrinsics entry ({r},{c}) must be zero, got {}",
                    intrinsics[(r, c)]
                )));
            }
        }

        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(invalid("image size must be positive".into()));
        }

        Ok(CameraModel {
            name,
            intrinsics,
            rotation,
            translation,
            image_size,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }

    /// Transforms a world point into the camera frame.
    pub fn camera_frame(&self, point: &WorldPoint) -> Vector3<f64> {
        self.rotation * point.to_vector() + self.translation
    }

    /// Perspective projection `K [R|t] x` with homogeneous division.
    pub fn project(&self, point: &WorldPoint) -> Result<PixelPoint, GeometryError> {
        let cam = self.camera_frame(point);
        if cam.z <= DEPTH_EPSILON {
            return Err(GeometryError::DegenerateDepth {
                camera: self.name.clone(),
                depth: cam.z,
            });
        }
        let h = self.intrinsics * cam;
        Ok(PixelPoint::new(h.x / h.z, h.y / h.z))
    }

    /// Euclidean pixel distance between the projection of `point` and `observed`.
    pub fn reprojection_error(
        &self,
        point: &WorldPoint,
        observed: &PixelPoint,
    ) -> Result<f64, GeometryError> {
        Ok(self.project(point)?.distance_to(observed))
    }

    /// Pixel coordinates mapped to normalized (intrinsics-removed) image
    /// coordinates.
    fn normalize_pixel(&self, pixel: &PixelPoint) -> (f64, f64) {
        // Upper-triangular K with positive diagonal inverts by back substitution.
        let k = &self.intrinsics;
        let z = 1.0 / k[(2, 2)];
        let y = (pixel.y - k[(1, 2)] * z) / k[(1, 1)];
        let x = (pixel.x - k[(0, 1)] * y - k[(0, 2)] * z) / k[(0, 0)];
        (x / z, y / z)
    }
}

/// Direct linear transform triangulation over two or more calibrated views.
///
/// Stacks the projection constraints in normalized image coordinates and takes
/// the right singular vector of the smallest singular value. Conditioning is
/// checked against [`DLT_CONDITION_LIMIT`]; a rank-deficient stack (all camera
/// centers collinear with the point, or duplicated views) is reported as
/// [`GeometryError::DegenerateGeometry`].
pub fn triangulate_dlt(
    observations: &[(&CameraModel, PixelPoint)],
) -> Result<WorldPoint, GeometryError> {
    if observations.len() < 2 {
        return Err(GeometryError::InsufficientViews(observations.len()));
    }

    let mut a = DMatrix::<f64>::zeros(2 * observations.len(), 4);
    for (i, (camera, pixel)) in observations.iter().enumerate() {
        let (u, v) = camera.normalize_pixel(pixel);
        let r = &camera.rotation;
        let t = &camera.translation;
        for col in 0..3 {
            a[(2 * i, col)] = u * r[(2, col)] - r[(0, col)];
            a[(2 * i + 1, col)] = v * r[(2, col)] - r[(1, col)];
        }
        a[(2 * i, 3)] = u * t.z - t.x;
        a[(2 * i + 1, 3)] = v * t.z - t.y;
    }

    let svd = a.svd(false, true);
    let sv = &svd.singular_values;
    // Solvability requires rank 3: the second-smallest singular value must be
    // well separated from zero.
    let condition = if sv[2] > 0.0 { sv[0] / sv[2] } else { f64::INFINITY };
    if !condition.is_finite() || condition > DLT_CONDITION_LIMIT {
        return Err(GeometryError::DegenerateGeometry { condition });
    }

    let v_t = svd.v_t.expect("svd computed with v_t");
    let h = v_t.row(3);
    let w = h[3];
    if w.abs() < 1e-300 {
        return Err(GeometryError::DegenerateGeometry {
            condition: f64::INFINITY,
        });
    }
    Ok(WorldPoint::new(h[0] / w, h[1] / w, h[2] / w))
}
