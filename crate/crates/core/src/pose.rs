//! Rigid camera poses (camera-to-world) with optional focal lengths.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera-to-world transform: `x_world = R x_cam + t`, so `t` is the camera center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseJson", into = "PoseJson")]
pub struct CameraPose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub focal: Option<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct PoseJson {
    /// `[w, x, y, z]`
    q: [f64; 4],
    t: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    focal: Option<[f64; 2]>,
}

impl From<PoseJson> for CameraPose {
    fn from(p: PoseJson) -> Self {
        CameraPose::from_wxyz(p.q, p.t).with_focal(p.focal)
    }
}

impl From<CameraPose> for PoseJson {
    fn from(p: CameraPose) -> Self {
        PoseJson { q: p.quat_wxyz(), t: p.translation.into(), focal: p.focal }
    }
}

impl Default for CameraPose {
    fn default() -> Self {
        CameraPose::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose { rotation: UnitQuaternion::identity(), translation: Vector3::zeros(), focal: None }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        CameraPose { rotation, translation, focal: None }
    }

    /// Normalizes `q`; a zero quaternion yields the identity rotation.
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Self {
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        let rotation = if raw.norm() > 0.0 { UnitQuaternion::from_quaternion(raw) } else { UnitQuaternion::identity() };
        CameraPose::new(rotation, Vector3::from(t))
    }

    pub fn from_matrix(r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*r);
        CameraPose::new(UnitQuaternion::from_rotation_matrix(&rot), t)
    }

    pub fn with_focal(mut self, focal: Option<[f64; 2]>) -> Self {
        self.focal = focal;
        self
    }

    pub fn quat_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn inverse(&self) -> CameraPose {
        let inv = self.rotation.inverse();
        CameraPose::new(inv, -(inv * self.translation))
    }

    /// `self ∘ other`, applying `other` first.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose::new(self.rotation * other.rotation, self.rotation * other.translation + self.translation)
    }

    /// `T_i⁻¹ T_j`: pose of camera `j` expressed in camera `i`'s frame.
    pub fn relative(&self, other: &CameraPose) -> CameraPose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Applies the world similarity `x ↦ s R x + t` to the camera.
    pub fn similarity(&self, s: f64, r: &UnitQuaternion<f64>, t: &Vector3<f64>) -> CameraPose {
        CameraPose {
            rotation: r * self.rotation,
            translation: s * (r * self.translation) + t,
            focal: self.focal,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.quat_wxyz().iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }
}

/// Pinhole intrinsics for an image of `height × width` with `f = width`.
pub fn default_intrinsics(height: usize, width: usize) -> Matrix3<f64> {
    let f = width as f64;
    Matrix3::new(f, 0.0, (width as f64 - 1.0) / 2.0, 0.0, f, (height as f64 - 1.0) / 2.0, 0.0, 0.0, 1.0)
}

/// Reads a 3×3 matrix from JSON as either nested rows or a flat list of nine.
pub fn intrinsics_from_json(v: &serde_json::Value) -> Result<Matrix3<f64>> {
    let flat: Vec<f64> = match v {
        serde_json::Value::Array(rows) if rows.iter().all(|r| r.is_array()) => {
            rows.iter().flat_map(|r| r.as_array().unwrap().iter().filter_map(|x| x.as_f64())).collect()
        }
        serde_json::Value::Array(xs) => xs.iter().filter_map(|x| x.as_f64()).collect(),
        _ => Vec::new(),
    };
    if flat.len() != 9 {
        return Err(Error::Format("intrinsics must be 3x3".into()));
    }
    Ok(Matrix3::from_row_slice(&flat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn relative_of_self_is_identity() {
        let p = CameraPose::from_wxyz([0.9, 0.1, -0.3, 0.2], [1.0, 2.0, 3.0]);
        let r = p.relative(&p);
        assert!(r.rotation.angle() < 1e-12);
        assert!(r.translation.norm() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let p = CameraPose::from_wxyz([0.0, 0.0, 0.0, 2.0], [1.0, 0.0, -1.0]).with_focal(Some([16.0, 16.0]));
        assert_eq!(p.quat_wxyz(), [0.0, 0.0, 0.0, 1.0]);
        let s = serde_json::to_string(&p).unwrap();
        let back: CameraPose = serde_json::from_str(&s).unwrap();
        assert_relative_eq!(back.translation, p.translation);
        assert_eq!(back.focal, p.focal);
    }

    #[test]
    fn compose_with_inverse_cancels() {
        let p = CameraPose::from_wxyz([0.5, 0.5, 0.5, 0.5], [0.3, -0.2, 4.0]);
        let x = Vector3::new(1.0, 2.0, 3.0);
        assert_relative_eq!(p.inverse().transform_point(&p.transform_point(&x)), x, epsilon = 1e-12);
    }
}
