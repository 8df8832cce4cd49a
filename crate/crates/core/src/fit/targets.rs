//! Oracle images of the analytic capsule body, made by sphere tracing its exact SDF.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{forward_kinematics, BodyParams, CapsuleBody, PosedCapsules};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::render::{Camera, CameraFile, Image};

pub const TARGET_SET_VERSION: u32 = 1;
const TRACE_EPS: f64 = 1e-9;
const TRACE_STEPS: usize = 4096;
const TRACE_FAR: f64 = 100.0;

/// Smooth procedural color of a canonical point, in [0.15, 0.85].
pub fn albedo(x: &Vec3) -> [f64; 3] {
    let tau = std::f64::consts::TAU;
    [
        0.55 + 0.3 * (tau * (1.1 * x.x + 0.6 * x.y) + 0.3).sin(),
        0.5 + 0.3 * (tau * (0.8 * x.y - 0.9 * x.z) + 1.7).sin(),
        0.45 + 0.3 * (tau * (0.7 * x.x + 1.2 * x.z - 0.5 * x.y) + 4.0).sin(),
    ]
}

/// First hit of a unit ray on the capsule union: `(t, capsule index)`.
pub fn trace_capsules(posed: &PosedCapsules, origin: &Vec3, dir: &Vec3) -> Option<(f64, usize)> {
    let mut t = 0.0;
    for _ in 0..TRACE_STEPS {
        let x = origin + dir * t;
        let d = posed.sdf(&x);
        if d < TRACE_EPS {
            return Some((t, posed.nearest(&x)));
        }
        t += d;
        if t > TRACE_FAR {
            return None;
        }
    }
    None
}

/// Foreground mask of the analytic body as seen by `camera`.
pub fn analytic_silhouette(body: &CapsuleBody, params: &BodyParams, camera: &Camera) -> Result<Vec<bool>> {
    let posed = body.pose(params)?;
    let o = camera.center();
    Ok((0..camera.pixel_count())
        .into_par_iter()
        .map(|p| trace_capsules(&posed, &o, &camera.pixel_direction(p)).is_some())
        .collect())
}

/// One view: camera, the body parameters it shows, and the oracle images.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub camera: Camera,
    pub params: BodyParams,
    /// 8-bit-exact RGB, white background.
    pub rgb: Image,
    /// 1 on the body, 0 elsewhere.
    pub mask: Image,
    /// Ray distance to the surface, `+∞` on background.
    pub depth: Image,
}

impl Target {
    pub fn foreground(&self) -> Vec<bool> {
        self.mask.data.iter().map(|m| *m > 0.5).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TargetSet {
    pub targets: Vec<Target>,
}

fn quantize8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render_target(body: &CapsuleBody, params: &BodyParams, camera: &Camera) -> Result<Target> {
    camera.validate()?;
    let posed = body.pose(params)?;
    let fk = forward_kinematics(&body.skeleton, params)?;
    let o = camera.center();
    let pixels: Vec<([f64; 3], f64, f64)> = (0..camera.pixel_count())
        .into_par_iter()
        .map(|p| {
            let dir = camera.pixel_direction(p);
            match trace_capsules(&posed, &o, &dir) {
                Some((t, i)) => {
                    let g = fk.transforms[posed.capsules[i].joint];
                    let canonical = g.inverse().apply(&(o + dir * t));
                    (albedo(&canonical).map(quantize8), 1.0, t)
                }
                None => ([1.0; 3], 0.0, f64::INFINITY),
            }
        })
        .collect();
    let (w, h) = (camera.width, camera.height);
    Ok(Target {
        camera: *camera,
        params: params.clone(),
        rgb: Image::new(w, h, 3, pixels.iter().flat_map(|p| p.0).collect())?,
        mask: Image::new(w, h, 1, pixels.iter().map(|p| p.1).collect())?,
        depth: Image::new(w, h, 1, pixels.iter().map(|p| p.2).collect())?,
    })
}

/// Targets for each camera; a single pose is shared by all cameras.
pub fn make_synthetic_targets(body: &CapsuleBody, poses: &[BodyParams], cameras: &[Camera]) -> Result<TargetSet> {
    if cameras.is_empty() {
        return Err(Error::Parameter("no cameras for the target set".into()));
    }
    if poses.len() != 1 && poses.len() != cameras.len() {
        return Err(Error::Parameter(format!(
            "{} poses for {} cameras (give one pose or one per camera)",
            poses.len(),
            cameras.len()
        )));
    }
    let targets = cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| render_target(body, &poses[if poses.len() == 1 { 0 } else { i }], cam))
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetSet { targets })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewRecord {
    camera: CameraFile,
    params: BodyParams,
    rgb: String,
    mask: String,
    depth: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    views: Vec<ViewRecord>,
}

pub const MANIFEST_NAME: &str = "targets.json";

impl TargetSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Writes `targets.json` plus PPM/PFM images into `dir` (created if missing).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut views = Vec::new();
        for (i, t) in self.targets.iter().enumerate() {
            let rec = ViewRecord {
                camera: t.camera.to_file(),
                params: t.params.clone(),
                rgb: format!("view_{i:03}.ppm"),
                mask: format!("view_{i:03}_mask.ppm"),
                depth: format!("view_{i:03}_depth.pfm"),
            };
            t.rgb.write_ppm(&dir.join(&rec.rgb))?;
            t.mask.write_ppm(&dir.join(&rec.mask))?;
            t.depth.write_pfm(&dir.join(&rec.depth))?;
            views.push(rec);
        }
        let manifest = Manifest {
            version: TARGET_SET_VERSION,
            views,
        };
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<TargetSet> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::malformed(&path, e))?;
        let found = header.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != TARGET_SET_VERSION {
            return Err(Error::Version {
                path,
                found,
                expected: TARGET_SET_VERSION,
            });
        }
        let manifest: Manifest = serde_json::from_value(header).map_err(|e| Error::malformed(&path, e))?;
        if manifest.views.is_empty() {
            return Err(Error::malformed(&path, "target set has no views"));
        }
        let mut targets = Vec::new();
        for v in &manifest.views {
            let camera = Camera::from_file(&v.camera)?;
            let rgb = Image::read_ppm(&dir.join(&v.rgb))?;
            let mask_rgb = Image::read_ppm(&dir.join(&v.mask))?;
            let depth = Image::read_pfm(&dir.join(&v.depth))?;
            let dims = |img: &Image| (img.width, img.height) == (camera.width, camera.height);
            if !dims(&rgb) || !dims(&mask_rgb) || !dims(&depth) || depth.channels != 1 {
                return Err(Error::malformed(&path, format!("images of {} do not match the camera", v.rgb)));
            }
            let mask: Vec<f64> = (0..mask_rgb.pixel_count()).map(|p| mask_rgb.pixel(p)[0]).collect();
            if mask.iter().any(|m| *m != 0.0 && *m != 1.0) {
                return Err(Error::malformed(&path, format!("mask {} is not binary", v.mask)));
            }
            targets.push(Target {
                camera,
                params: v.params.clone(),
                rgb,
                mask: Image::new(camera.width, camera.height, 1, mask)?,
                depth,
            });
        }
        Ok(TargetSet { targets })
    }
}
