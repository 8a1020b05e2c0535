//! Pinhole camera and viewpoint sampling.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// World-to-camera extrinsics plus intrinsics. The camera looks along +z
/// with image x to the right and y down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub principal_point: [f64; 2],
    pub focal: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraParams {
    pub fn identity(focal: f64, principal_point: [f64; 2]) -> Self {
        Self {
            principal_point,
            focal,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn set_rotation(&mut self, m: &Matrix3<f64>) {
        for i in 0..3 {
            for j in 0..3 {
                self.rotation[i][j] = m[(i, j)];
            }
        }
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation_vector()
    }

    /// Camera at `eye` looking at `target`, with world `up` mapped to image up.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>, focal: f64, principal_point: [f64; 2]) -> Self {
        let z = (target - eye).normalize();
        let y = -(up - z * up.dot(&z)).normalize();
        let x = y.cross(&z);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let mut cam = Self::identity(focal, principal_point);
        cam.set_rotation(&r);
        cam.translation = (-(r * eye)).into();
        cam
    }

    pub fn check(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::Config(format!("focal length must be positive, got {}", self.focal)));
        }
        Ok(())
    }
}

/// `(u, v) = (f x / z + cx, f y / z + cy)` in camera coordinates.
pub fn project_pinhole(joints3d: &[Vector3<f64>], cam: &CameraParams) -> Result<Vec<[f64; 2]>> {
    cam.check()?;
    joints3d
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = cam.to_camera(p);
            if !(c.z > 0.0) {
                return Err(Error::Projection {
                    joint: i,
                    name: String::new(),
                    z: c.z,
                });
            }
            Ok([
                cam.focal * c.x / c.z + cam.principal_point[0],
                cam.focal * c.y / c.z + cam.principal_point[1],
            ])
        })
        .collect()
}

/// Viewpoints on a hemisphere around the subject at a fixed focal length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewSampler {
    pub focal: f64,
    pub distance_range: (f64, f64),
    pub elevation_deg: (f64, f64),
    /// Roll of the camera about its optical axis.
    pub max_roll_deg: f64,
}

impl Default for ViewSampler {
    fn default() -> Self {
        Self {
            focal: 120.0,
            distance_range: (1.4, 1.8),
            elevation_deg: (-10.0, 60.0),
            max_roll_deg: 15.0,
        }
    }
}

impl ViewSampler {
    pub fn sample(&self, target: Vector3<f64>, principal_point: [f64; 2], rng: &mut impl Rng) -> CameraParams {
        let az = rng.random_range(0.0..2.0 * PI);
        let (lo, hi) = self.elevation_deg;
        let el = if hi > lo { rng.random_range(lo..hi) } else { lo }.clamp(-85.0, 85.0).to_radians();
        let (dlo, dhi) = self.distance_range;
        let d = if dhi > dlo { rng.random_range(dlo..dhi) } else { dlo };
        let dir = Vector3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
        let mut cam = Self::look(target + dir * d, target, self.focal, principal_point);
        if self.max_roll_deg > 0.0 {
            let roll = rng.random_range(-self.max_roll_deg..=self.max_roll_deg).to_radians();
            let (s, c) = roll.sin_cos();
            let rz = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
            let r = rz * cam.rotation_matrix();
            let t = rz * cam.translation_vector();
            cam.set_rotation(&r);
            cam.translation = t.into();
        }
        cam
    }

    fn look(eye: Vector3<f64>, target: Vector3<f64>, focal: f64, pp: [f64; 2]) -> CameraParams {
        CameraParams::look_at(eye, target, Vector3::y(), focal, pp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn on_axis_point_hits_principal_point() {
        let cam = CameraParams::identity(100.0, [50.0, 50.0]);
        let uv = project_pinhole(&[Vector3::new(0.0, 0.0, 1.0)], &cam).unwrap();
        assert_eq!(uv[0], [50.0, 50.0]);
    }

    #[test]
    fn off_axis_point() {
        let cam = CameraParams::identity(100.0, [0.0, 0.0]);
        let uv = project_pinhole(&[Vector3::new(1.0, 0.0, 2.0)], &cam).unwrap();
        assert_eq!(uv[0], [50.0, 0.0]);
    }

    #[test]
    fn doubling_depth_halves_offset() {
        let cam = CameraParams::identity(80.0, [10.0, 20.0]);
        let p = Vector3::new(0.3, -0.7, 1.3);
        let uv = project_pinhole(&[p, Vector3::new(p.x, p.y, 2.0 * p.z)], &cam).unwrap();
        for a in 0..2 {
            let near = uv[0][a] - cam.principal_point[a];
            let far = uv[1][a] - cam.principal_point[a];
            assert!((near - 2.0 * far).abs() < 1e-9);
        }
    }

    #[test]
    fn behind_camera_names_joint() {
        let cam = CameraParams::identity(80.0, [0.0, 0.0]);
        let err = project_pinhole(&[Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, -1.0)], &cam).unwrap_err();
        assert!(matches!(err, Error::Projection { joint: 1, .. }));
    }

    #[test]
    fn look_at_centres_target_and_keeps_up() {
        let target = Vector3::new(0.1, 0.2, 0.0);
        let cam = CameraParams::look_at(Vector3::new(1.0, 0.5, 2.0), target, Vector3::y(), 100.0, [32.0, 32.0]);
        let uv = project_pinhole(&[target, target + Vector3::y() * 0.1], &cam).unwrap();
        assert!((uv[0][0] - 32.0).abs() < 1e-9 && (uv[0][1] - 32.0).abs() < 1e-9);
        assert!(uv[1][1] < uv[0][1], "world up should be image up");
        let r = cam.rotation_matrix();
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }
}
