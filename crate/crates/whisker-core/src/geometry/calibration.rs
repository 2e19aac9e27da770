//! Calibration file parsing.
//!
//! Format: a single JSON document with one `cameras` array. Each camera object
//! carries exactly these keys:
//!
//! ```json
//! {
//!   "cameras": [
//!     {
//!       "name": "cam0",
//!       "image_size": [2048, 1400],
//!       "intrinsics": [1500.0, 0.0, 1024.0, 0.0, 1500.0, 700.0, 0.0, 0.0, 1.0],
//!       "rotation":   [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
//!       "translation": [0.0, 0.0, 1000.0]
//!     }
//!   ]
//! }
//! ```
//!
//! `intrinsics` and `rotation` are row-major 3x3; `translation` is world to
//! camera in millimeters. Unknown keys are rejected rather than ignored, and
//! lens-distortion fields get a dedicated error since there is no distortion
//! model to apply them to.

use super::{CameraModel, GeometryError};
use nalgebra::{Matrix3, Vector3};
use serde_json::Value;
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("failed to read calibration file: {0}")]
    Io(#[from] std::io::Error),
    #[error("calibration file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("calibration camera `{camera}`: lens distortion is not supported; remove key `{key}`")]
    DistortionUnsupported { camera: String, key: String },
    #[error("calibration camera `{camera}`: unknown key `{key}`")]
    UnknownKey { camera: String, key: String },
    #[error("calibration: unknown top-level key `{0}`")]
    UnknownTopLevelKey(String),
    #[error("calibration camera `{camera}`: missing key `{key}`")]
    MissingKey { camera: String, key: String },
    #[error("calibration camera `{camera}`: key `{key}` {reason}")]
    BadValue {
        camera: String,
        key: String,
        reason: String,
    },
    #[error("calibration: duplicate camera name `{0}`")]
    DuplicateCamera(String),
    #[error("calibration: `cameras` must be a non-empty array")]
    NoCameras,
    #[error(transparent)]
    InvalidCamera(#[from] GeometryError),
}

const CAMERA_KEYS: [&str; 5] = ["name", "image_size", "intrinsics", "rotation", "translation"];
const DISTORTION_KEYS: [&str; 6] = [
    "distortion",
    "distortion_coefficients",
    "dist_coeffs",
    "radial_distortion",
    "tangential_distortion",
    "k1",
];

pub fn load_calibration(path: &Path) -> Result<Vec<CameraModel>, CalibrationError> {
    let text = std::fs::read_to_string(path)?;
    parse_calibration(&text)
}

pub fn parse_calibration(text: &str) -> Result<Vec<CameraModel>, CalibrationError> {
    let doc: Value = serde_json::from_str(text)?;
    let obj = doc
        .as_object()
        .ok_or(CalibrationError::NoCameras)?;
    for key in obj.keys() {
        if key != "cameras" {
            return Err(CalibrationError::UnknownTopLevelKey(key.clone()));
        }
    }
    let cameras = obj
        .get("cameras")
        .and_then(Value::as_array)
        .ok_or(CalibrationError::NoCameras)?;
    if cameras.is_empty() {
        return Err(CalibrationError::NoCameras);
    }

    let mut out = Vec::with_capacity(cameras.len());
    let mut names = BTreeSet::new();
    for entry in cameras {
        let camera = parse_camera(entry)?;
        if !names.insert(camera.name().to_string()) {
            return Err(CalibrationError::DuplicateCamera(camera.name().to_string()));
        }
        out.push(camera);
    }
    Ok(out)
}

fn parse_camera(entry: &Value) -> Result<CameraModel, CalibrationError> {
    let obj = entry.as_object().ok_or(CalibrationError::NoCameras)?;
    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .unwrap_or("<unnamed>")
        .to_string();

    for key in obj.keys() {
        if DISTORTION_KEYS.contains(&key.as_str()) {
            return Err(CalibrationError::DistortionUnsupported {
                camera: name,
                key: key.clone(),
            });
        }
        if !CAMERA_KEYS.contains(&key.as_str()) {
            return Err(CalibrationError::UnknownKey {
                camera: name,
                key: key.clone(),
            });
        }
    }

    let missing = |key: &str| CalibrationError::MissingKey {
        camera: name.clone(),
        key: key.into(),
    };

    obj.get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| missing("name"))?;

    let image_size = read_numbers(obj, &name, "image_size", 2)?;
    if image_size.iter().any(|v| *v <= 0.0 || v.fract() != 0.0) {
        return Err(CalibrationError::BadValue {
            camera: name,
            key: "image_size".into(),
            reason: "must hold two positive integers".into(),
        });
    }

    let k = read_numbers(obj, &name, "intrinsics", 9)?;
    let r = read_numbers(obj, &name, "rotation", 9)?;
    let t = read_numbers(obj, &name, "translation", 3)?;

    let camera = CameraModel::new(
        name,
        Matrix3::from_row_slice(&k),
        Matrix3::from_row_slice(&r),
        Vector3::new(t[0], t[1], t[2]),
        (image_size[0] as u32, image_size[1] as u32),
    )?;
    Ok(camera)
}

fn read_numbers(
    obj: &serde_json::Map<String, Value>,
    camera: &str,
    key: &str,
    expected: usize,
) -> Result<Vec<f64>, CalibrationError> {
    let arr = obj
        .get(key)
        .ok_or_else(|| CalibrationError::MissingKey {
            camera: camera.into(),
            key: key.into(),
        })?
        .as_array()
        .ok_or_else(|| CalibrationError::BadValue {
            camera: camera.into(),
            key: key.into(),
            reason: "must be an array of numbers".into(),
        })?;
    if arr.len() != expected {
        return Err(CalibrationError::BadValue {
            camera: camera.into(),
            key: key.into(),
            reason: format!("must hold {expected} numbers, got {}", arr.len()),
        });
    }
    arr.iter()
        .map(|v| {
            v.as_f64().ok_or_else(|| CalibrationError::BadValue {
                camera: camera.into(),
                key: key.into(),
                reason: "must be an array of numbers".into(),
            })
        })
        .collect()
}

/// Serializes cameras back into the documented calibration format.
pub fn calibration_to_json(cameras: &[CameraModel]) -> Value {
    let entries: Vec<Value> = cameras
        .iter()
        .map(|c| {
            let k = c.intrinsics();
            let r = c.rotation();
            let t = c.translation();
            serde_json::json!({
                "name": c.name(),
                "image_size": [c.image_size().0, c.image_size().1],
                "intrinsics": (0..3).flat_map(|i| (0..3).map(move |j| k[(i, j)])).collect::<Vec<f64>>(),
                "rotation": (0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)])).collect::<Vec<f64>>(),
                "translation": [t.x, t.y, t.z],
            })
        })
        .collect();
    serde_json::json!({ "cameras": entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{
        "cameras": [{
            "name": "cam0",
            "image_size": [2048, 1400],
            "intrinsics": [1500.0, 0.0, 1024.0, 0.0, 1500.0, 700.0, 0.0, 0.0, 1.0],
            "rotation": [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            "translation": [0.0, 0.0, 1000.0]
        }]
    }"#;

    #[test]
    fn parses_valid_calibration() {
        let cams = parse_calibration(GOOD).unwrap();
        assert_eq!(cams.len(), 1);
        assert_eq!(cams[0].name(), "cam0");
        assert_eq!(cams[0].image_size(), (2048, 1400));
    }

    #[test]
    fn round_trips_through_export() {
        let cams = parse_calibration(GOOD).unwrap();
        let text = serde_json::to_string_pretty(&calibration_to_json(&cams)).unwrap();
        let again = parse_calibration(&text).unwrap();
        assert_eq!(cams, again);
    }

    #[test]
    fn rejects_unknown_key_by_name() {
        let text = GOOD.replace("\"translation\"", "\"extra\": 1, \"translation\"");
        let err = parse_calibration(&text).unwrap_err();
        match err {
            CalibrationError::UnknownKey { camera, key } => {
                assert_eq!(camera, "cam0");
                assert_eq!(key, "extra");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn rejects_distortion_with_dedicated_error() {
        let text =
            GOOD.replace("\"translation\"", "\"distortion\": [0.1, 0.0], \"translation\"");
        let err = parse_calibration(&text).unwrap_err();
        assert!(matches!(err, CalibrationError::DistortionUnsupported { .. }));
        assert!(err.to_string().contains("distortion"));
    }

    #[test]
    fn rejects_missing_key() {
        let text = GOOD.replace(
            "\"translation\": [0.0, 0.0, 1000.0]",
            "\"translation\": [0.0, 0.0]",
        );
        assert!(matches!(
            parse_calibration(&text).unwrap_err(),
            CalibrationError::BadValue { .. }
        ));
    }

    #[test]
    fn rejects_bad_rotation() {
        let text = GOOD.replace(
            "\"rotation\": [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]",
            "\"rotation\": [1.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]",
        );
        assert!(matches!(
            parse_calibration(&text).unwrap_err(),
            CalibrationError::InvalidCamera(_)
        ));
    }

    #[test]
    fn rejects_duplicate_names() {
        let good = parse_calibration(GOOD).unwrap();
        let doubled = serde_json::to_string(&calibration_to_json(
            &[good[0].clone(), good[0].clone()],
        ))
        .unwrap();
        assert!(matches!(
            parse_calibration(&doubled).unwrap_err(),
            CalibrationError::DuplicateCamera(_)
        ));
    }
}
