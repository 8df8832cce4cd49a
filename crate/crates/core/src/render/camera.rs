//! Pinhole cameras in the OpenCV convention: +x right, +y down, +z forward.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{orthonormality_error, Mat3, Rigid, Vec3};

const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// World-from-camera transform.
    pub extrinsics: Rigid,
    pub width: usize,
    pub height: usize,
}

/// On-disk camera record; matrices are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, extrinsics: Rigid, width: usize, height: usize) -> Result<Self> {
        let cam = Camera {
            intrinsics,
            extrinsics,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) || !k.cx.is_finite() || !k.cy.is_finite() {
            return Err(Error::Parameter(format!("focal lengths must be positive, got {} {}", k.fx, k.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Parameter("camera image is empty".into()));
        }
        let (e, det) = orthonormality_error(&self.extrinsics.rotation);
        if !(e <= ORTHONORMAL_TOLERANCE && (det - 1.0).abs() <= ORTHONORMAL_TOLERANCE) {
            return Err(Error::Parameter(format!(
                "camera rotation is not a rotation (orthonormality error {e:e}, det {det})"
            )));
        }
        if !self.extrinsics.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera translation"));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with `up` pointing up in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, intrinsics: Intrinsics, width: usize, height: usize) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or(Error::Degenerate("camera eye coincides with its target"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or(Error::Degenerate("camera up vector is parallel to the view direction"))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        Camera::new(intrinsics, Rigid::new(rotation, eye), width, height)
    }

    /// Intrinsics for a centered principal point and a vertical field of view.
    pub fn centered(width: usize, height: usize, fov_y: f64) -> Intrinsics {
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Intrinsics {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
        }
    }

    /// `count` cameras evenly spaced in azimuth on a horizontal circle around `target`,
    /// starting in front of the body (+z).
    pub fn orbit(count: usize, radius: f64, target: Vec3, elevation: f64, size: usize, fov_y: f64) -> Result<Vec<Camera>> {
        (0..count)
            .map(|i| {
                let phi = std::f64::consts::TAU * i as f64 / count as f64;
                let eye = target + Vec3::new(radius * phi.sin(), elevation, radius * phi.cos());
                Camera::look_at(eye, target, Vec3::y(), Camera::centered(size, size, fov_y), size, size)
            })
            .collect()
    }

    pub fn center(&self) -> Vec3 {
        self.extrinsics.translation
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Unit world-space direction through continuous image coordinates `(u, v)`.
    pub fn direction(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        let d = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        (self.extrinsics.rotation * d).normalize()
    }

    /// Direction through the center of pixel `index` (row-major).
    pub fn pixel_direction(&self, index: usize) -> Vec3 {
        let (row, col) = (index / self.width, index % self.width);
        self.direction(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Projection of a world point to continuous image coordinates, if in front of the camera.
    pub fn project(&self, x: &Vec3) -> Option<(f64, f64)> {
        let c = self.extrinsics.rotation.transpose() * (x - self.extrinsics.translation);
        if c.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy))
    }

    /// Same view at a different resolution, scaling the intrinsics.
    pub fn resized(&self, width: usize, height: usize) -> Result<Camera> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let k = &self.intrinsics;
        Camera::new(
            Intrinsics {
                fx: k.fx * sx,
                fy: k.fy * sy,
                cx: k.cx * sx,
                cy: k.cy * sy,
            },
            self.extrinsics,
            width,
            height,
        )
    }

    /// The camera moved rigidly with the world: `g ∘ world_from_camera`.
    pub fn transformed(&self, g: &Rigid) -> Camera {
        Camera {
            extrinsics: g.compose(&self.extrinsics),
            ..*self
        }
    }

    pub fn to_file(&self) -> CameraFile {
        let r = &self.extrinsics.rotation;
        let t = &self.extrinsics.translation;
        CameraFile {
            width: self.width,
            height: self.height,
            intrinsics: self.intrinsics,
            rotation: std::array::from_fn(|i| r[(i / 3, i % 3)]),
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn from_file(f: &CameraFile) -> Result<Camera> {
        Camera::new(
            f.intrinsics,
            Rigid::new(Mat3::from_row_slice(&f.rotation), Vec3::from(f.translation)),
            f.width,
            f.height,
        )
    }
}

/// Reads one camera or a JSON array of cameras.
pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::malformed(path, e))?;
    let files: Vec<CameraFile> = if value.is_array() {
        serde_json::from_value(value).map_err(|e| Error::malformed(path, e))?
    } else {
        vec![serde_json::from_value(value).map_err(|e| Error::malformed(path, e))?]
    };
    files.iter().map(Camera::from_file).collect()
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let files: Vec<CameraFile> = cameras.iter().map(Camera::to_file).collect();
    let text = serde_json::to_string_pretty(&files).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
