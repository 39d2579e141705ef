//! Coordinate frames, rigid transforms, and camera models.
//!
//! Conventions used throughout the crate:
//! - Ego frame: x forward, y left, z up, meters (right-handed).
//! - Pixel coordinates: (u, v) = (column, row), origin top-left, continuous
//!   coordinates; the center of integer pixel (c, r) is (c + 0.5, r + 0.5).
//! - Camera frame: x right, y down, z along the optical axis.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = [f64; 3];

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("rotation is not orthonormal (|R^T R - I| = {0:.3e})")]
    NotOrthonormal(f64),
    #[error("rotation determinant is {0:.6}, expected +1")]
    NotProperRotation(f64),
    #[error("camera intrinsics invalid: {0}")]
    BadIntrinsics(String),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
}

/// Rigid transform: p' = R * p + T.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Se3Pose {
    /// Row-major 3x3 rotation.
    pub rotation: [[f64; 3]; 3],
    /// Translation in meters.
    pub translation: Vec3,
}

impl Se3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: [[f64; 3]; 3], translation: Vec3) -> Result<Self, GeomError> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    /// Rotation about +z (yaw), then translation.
    pub fn from_yaw_translation(yaw: f64, translation: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation,
        }
    }

    /// Checks R^T R = I and det(R) = +1 within 1e-9.
    pub fn validate(&self) -> Result<(), GeomError> {
        let r = &self.rotation;
        let mut max_dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((dot - expect).abs());
            }
        }
        if max_dev > 1e-9 {
            return Err(GeomError::NotOrthonormal(max_dev));
        }
        let det = self.det();
        if (det - 1.0).abs() > 1e-9 {
            return Err(GeomError::NotProperRotation(det));
        }
        Ok(())
    }

    fn det(&self) -> f64 {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// Rotation only, no translation.
    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    /// self ∘ other: applies `other` first, then `self`.
    pub fn compose(&self, other: &Se3Pose) -> Se3Pose {
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = (0..3).map(|k| self.rotation[i][k] * other.rotation[k][j]).sum();
            }
        }
        Se3Pose {
            rotation,
            translation: self.apply(other.translation),
        }
    }

    /// Analytic inverse: R^T, -R^T T.
    pub fn inverse(&self) -> Se3Pose {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = self.translation;
        let inv_t = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Se3Pose {
            rotation: rt,
            translation: inv_t,
        }
    }
}

/// Applies `pose` to every point: R * p + T.
pub fn transform_points(points: &[Vec3], pose: &Se3Pose) -> Vec<Vec3> {
    points.iter().map(|&p| pose.apply(p)).collect()
}

/// Timestamp relative to sequence start, seconds.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Timestamp(pub f64);

/// Pinhole camera with an ego-to-camera extrinsic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraModel {
    /// Row-major upper-triangular intrinsics, pixels.
    pub intrinsics: [[f64; 3]; 3],
    /// Maps ego-frame points into the camera frame.
    pub cam_from_ego: Se3Pose,
    pub width: usize,
    pub height: usize,
}

/// Projection result for an in-frustum point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelHit {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl CameraModel {
    pub fn new(
        intrinsics: [[f64; 3]; 3],
        cam_from_ego: Se3Pose,
        width: usize,
        height: usize,
    ) -> Result<Self, GeomError> {
        let k = &intrinsics;
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 || (k[2][2] - 1.0).abs() > 1e-12 {
            return Err(GeomError::BadIntrinsics(
                "K must be upper-triangular with K[2][2] = 1".into(),
            ));
        }
        if k[0][0] <= 0.0 || k[1][1] <= 0.0 {
            return Err(GeomError::BadIntrinsics("focal lengths must be positive".into()));
        }
        let (cx, cy) = (k[0][2], k[1][2]);
        if cx < 0.0 || cx > width as f64 || cy < 0.0 || cy > height as f64 {
            return Err(GeomError::BadIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        cam_from_ego.validate()?;
        Ok(Self {
            intrinsics,
            cam_from_ego,
            width,
            height,
        })
    }

    /// Forward-looking camera with the given focal length, principal point at
    /// the image center, mounted at `position` in the ego frame.
    pub fn forward(focal: f64, width: usize, height: usize, position: Vec3) -> Self {
        let intrinsics = [
            [focal, 0.0, width as f64 / 2.0],
            [0.0, focal, height as f64 / 2.0],
            [0.0, 0.0, 1.0],
        ];
        // Camera axes from ego axes: x_cam = -y_ego, y_cam = -z_ego, z_cam = x_ego.
        let rotation = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
        let ego_to_cam_rot = Se3Pose {
            rotation,
            translation: [0.0; 3],
        };
        let t = ego_to_cam_rot.rotate([-position[0], -position[1], -position[2]]);
        let cam_from_ego = Se3Pose {
            rotation,
            translation: t,
        };
        Self::new(intrinsics, cam_from_ego, width, height).expect("forward camera is valid")
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[0][0]
    }
    pub fn fy(&self) -> f64 {
        self.intrinsics[1][1]
    }
    pub fn cx(&self) -> f64 {
        self.intrinsics[0][2]
    }
    pub fn cy(&self) -> f64 {
        self.intrinsics[1][2]
    }

    /// Flattened calibration (fx, fy, cx, cy, R, T): 16 values, the camera
    /// embedding input.
    pub fn calibration_vector(&self) -> [f64; 16] {
        let mut v = [0.0; 16];
        v[0] = self.fx();
        v[1] = self.fy();
        v[2] = self.cx();
        v[3] = self.cy();
        let mut idx = 4;
        for row in &self.cam_from_ego.rotation {
            for &x in row {
                v[idx] = x;
                idx += 1;
            }
        }
        v[13..16].copy_from_slice(&self.cam_from_ego.translation);
        v
    }
}

/// Projects an ego-frame point into the image. Points behind the camera or
/// outside the frame project to `None`.
pub fn project_to_image(point_ego: Vec3, cam: &CameraModel) -> Option<PixelHit> {
    let p = cam.cam_from_ego.apply(point_ego);
    let depth = p[2];
    if depth <= 0.0 {
        return None;
    }
    let u = cam.fx() * p[0] / depth + cam.cx();
    let v = cam.fy() * p[1] / depth + cam.cy();
    if u < 0.0 || u >= cam.width as f64 || v < 0.0 || v >= cam.height as f64 {
        return None;
    }
    Some(PixelHit { u, v, depth })
}

/// Lifts a continuous pixel coordinate at the given depth back into the ego
/// frame: depth * K^-1 * (u, v, 1), then the inverse extrinsic.
pub fn unproject_pixel(u: f64, v: f64, depth: f64, cam: &CameraModel) -> Result<Vec3, GeomError> {
    if depth <= 0.0 {
        return Err(GeomError::NonPositiveDepth(depth));
    }
    let x = (u - cam.cx()) / cam.fx() * depth;
    let y = (v - cam.cy()) / cam.fy() * depth;
    Ok(cam.cam_from_ego.inverse().apply([x, y, depth]))
}

/// One frame's ego pose as stored on disk: `{"t": s, "R": [9], "T": [3]}`.
#[derive(Debug, Clone)]
pub struct PoseRecord {
    pub t: f64,
    /// Row-major rotation.
    pub r: [f64; 9],
    pub translation: [f64; 3],
}

impl PoseRecord {
    pub fn from_pose(t: f64, pose: &Se3Pose) -> Self {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = pose.rotation[i][j];
            }
        }
        Self {
            t,
            r,
            translation: pose.translation,
        }
    }

    pub fn pose(&self) -> Se3Pose {
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = self.r[i * 3 + j];
            }
        }
        Se3Pose {
            rotation,
            translation: self.translation,
        }
    }
}

impl PoseRecord {
    pub fn to_json(&self) -> String {
        serde_json::json!({"t": self.t, "R": self.r.to_vec(), "T": self.translation.to_vec()})
            .to_string()
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        struct Raw {
            t: f64,
            #[serde(rename = "R")]
            r: Vec<f64>,
            #[serde(rename = "T")]
            translation: Vec<f64>,
        }
        let raw: Raw = serde_json::from_str(s)?;
        let mut r = [0.0; 9];
        r.copy_from_slice(&raw.r[..9]);
        let mut translation = [0.0; 3];
        translation.copy_from_slice(&raw.translation[..3]);
        Ok(Self {
            t: raw.t,
            r,
            translation,
        })
    }
}

pub fn vec3_sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn vec3_add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn vec3_scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn vec3_dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn vec3_norm(a: Vec3) -> f64 {
    vec3_dot(a, a).sqrt()
}

pub fn vec3_normalize(a: Vec3) -> Vec3 {
    let n = vec3_norm(a);
    if n == 0.0 {
        [0.0; 3]
    } else {
        vec3_scale(a, 1.0 / n)
    }
}
