//! Volume rendering of signed distance fields.

mod camera;
mod image;
mod rays;
mod volume;

pub use camera::{read_cameras, write_cameras, Camera, CameraFile, Intrinsics};
pub use image::Image;
pub use rays::{generate_rays, sample_ray, Obb, Ray, RaySamples};
pub use volume::{
    density_with_derivatives, integrate, integrate_backward, sdf_to_density, Composite, CompositeAdjoint, DEPTH_EPS,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{BodyParams, TemplateBody};
use crate::canonical::{shell_geometry, PosedBody, ShellSample};
use crate::error::{Error, Result};
use crate::field::{field_forward, Scene};
use crate::math::Vec3;

/// Default samples per ray.
pub const DEFAULT_SAMPLES: usize = 48;
/// Growth of the body's root-frame box when used for near/far clipping.
pub const BOX_EXPAND: f64 = 0.15;
/// Pixels whose alpha stays below this get the background depth.
pub const DEPTH_ALPHA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub samples: usize,
    pub stratified: bool,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples: DEFAULT_SAMPLES,
            stratified: false,
            background: [1.0; 3],
            seed: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Parameter("samples per ray must be at least 1".into()));
        }
        if !self.background.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("background color"));
        }
        Ok(())
    }
}

/// Random stream for one pixel; independent of scheduling.
pub fn pixel_rng(seed: u64, pixel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel as u64);
    rng
}

/// A signed distance field with color, queried in world space.
pub trait SdfField: Sync {
    /// Density sharpness `α`.
    fn alpha(&self) -> f64;
    /// Box used for near/far; `None` renders nothing.
    fn bounds(&self) -> Option<Obb>;
    fn query(&self, points: &[Vec3], sdf: &mut [f64], rgb: &mut [[f64; 3]]) -> Result<()>;
}

/// Infinite plane `n·x = offset` with the positive side empty.
#[derive(Debug, Clone, Copy)]
pub struct PlaneField {
    pub normal: Vec3,
    pub offset: f64,
    pub color: [f64; 3],
    pub alpha: f64,
    pub bounds: Obb,
}

impl SdfField for PlaneField {
    fn alpha(&self) -> f64 {
        self.alpha
    }
    fn bounds(&self) -> Option<Obb> {
        Some(self.bounds)
    }
    fn query(&self, points: &[Vec3], sdf: &mut [f64], rgb: &mut [[f64; 3]]) -> Result<()> {
        for (i, p) in points.iter().enumerate() {
            sdf[i] = self.offset - self.normal.dot(p);
            rgb[i] = self.color;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SphereField {
    pub center: Vec3,
    pub radius: f64,
    pub color: [f64; 3],
    pub alpha: f64,
    pub bounds: Obb,
}

impl SdfField for SphereField {
    fn alpha(&self) -> f64 {
        self.alpha
    }
    fn bounds(&self) -> Option<Obb> {
        Some(self.bounds)
    }
    fn query(&self, points: &[Vec3], sdf: &mut [f64], rgb: &mut [[f64; 3]]) -> Result<()> {
        for (i, p) in points.iter().enumerate() {
            sdf[i] = (p - self.center).norm() - self.radius;
            rgb[i] = self.color;
        }
        Ok(())
    }
}

/// Nothing at all.
#[derive(Debug, Clone, Copy)]
pub struct EmptyField;

impl SdfField for EmptyField {
    fn alpha(&self) -> f64 {
        1.0
    }
    fn bounds(&self) -> Option<Obb> {
        None
    }
    fn query(&self, _: &[Vec3], sdf: &mut [f64], _: &mut [[f64; 3]]) -> Result<()> {
        sdf.iter_mut().for_each(|d| *d = f64::INFINITY);
        Ok(())
    }
}

/// Near/far box of a posed body: its root-frame bounds, grown by [`BOX_EXPAND`].
pub fn body_bounds(posed: &PosedBody) -> Result<Obb> {
    Obb::around(posed.root_frame(), posed.mesh().vertices(), BOX_EXPAND)
}

/// The full avatar: canonical map, field, and body prior under one parameter set.
pub struct SceneField<'a> {
    pub scene: &'a Scene,
    pub posed: &'a PosedBody,
    conditioning: Vec<f64>,
    bounds: Obb,
}

impl<'a> SceneField<'a> {
    pub fn new(scene: &'a Scene, posed: &'a PosedBody) -> Result<Self> {
        Ok(SceneField {
            scene,
            posed,
            conditioning: scene.conditioning(&posed.params)?,
            bounds: body_bounds(posed)?,
        })
    }

    pub fn conditioning(&self) -> &[f64] {
        &self.conditioning
    }
}

impl SdfField for SceneField<'_> {
    fn alpha(&self) -> f64 {
        self.scene.alpha()
    }

    fn bounds(&self) -> Option<Obb> {
        Some(self.bounds)
    }

    fn query(&self, points: &[Vec3], sdf: &mut [f64], rgb: &mut [[f64; 3]]) -> Result<()> {
        let mut inside = Vec::new();
        let mut slots = Vec::new();
        for (i, p) in points.iter().enumerate() {
            match shell_geometry(p, self.posed, self.scene)? {
                ShellSample::Outside(d) => {
                    sdf[i] = d;
                    rgb[i] = [0.0; 3];
                }
                ShellSample::Inside(g) => {
                    inside.push(g);
                    slots.push(i);
                }
            }
        }
        if inside.is_empty() {
            return Ok(());
        }
        let fwd = field_forward(self.scene, &inside, &self.conditioning, Some(self.posed), false, true)?;
        for (k, &i) in slots.iter().enumerate() {
            sdf[i] = fwd.sdf[k];
            rgb[i] = fwd.color[k];
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// RGB in [0, 1], background composited.
    pub rgb: Image,
    /// Expected depth along the ray, `+∞` on background.
    pub depth: Image,
    pub alpha: Image,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    /// Pixels with alpha above one half.
    pub fn silhouette(&self) -> Vec<bool> {
        self.alpha.data.iter().map(|&a| a > 0.5).collect()
    }
}

/// What a render was made with, for reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderMetadata {
    pub samples_per_ray: usize,
    pub stratified: bool,
    pub seed: u64,
    pub background: [f64; 3],
    pub density_alpha: f64,
    pub near_far: String,
    pub bounds: Option<Obb>,
    pub width: usize,
    pub height: usize,
}

impl RenderMetadata {
    pub fn new(field: &dyn SdfField, camera: &Camera, config: &RenderConfig) -> Self {
        RenderMetadata {
            samples_per_ray: config.samples,
            stratified: config.stratified,
            seed: config.seed,
            background: config.background,
            density_alpha: field.alpha(),
            near_far: "bounding-box".into(),
            bounds: field.bounds(),
            width: camera.width,
            height: camera.height,
        }
    }
}

/// Per-pixel composite for one ray; empty rays give background.
pub fn shade_ray(
    field: &dyn SdfField,
    ray: &Ray,
    pixel: usize,
    config: &RenderConfig,
) -> Result<(Composite, RaySamples)> {
    let mut rng = pixel_rng(config.seed, pixel);
    let samples = sample_ray(ray, config.samples, config.stratified, &mut rng)?;
    let n = samples.len();
    let mut sdf = vec![0.0; n];
    let mut rgb = vec![[0.0; 3]; n];
    if n > 0 {
        field.query(&samples.points, &mut sdf, &mut rgb)?;
    }
    let comp = composite(field.alpha(), &samples, &sdf, &rgb, config.background)?;
    Ok((comp, samples))
}

fn composite(alpha: f64, samples: &RaySamples, sdf: &[f64], rgb: &[[f64; 3]], bg: [f64; 3]) -> Result<Composite> {
    let sigma: Vec<f64> = sdf.iter().map(|&d| sdf_to_density(d, alpha)).collect::<Result<_>>()?;
    integrate(&sigma, &samples.delta, &samples.t, rgb, bg)
}

/// Renders any field; rows are processed in parallel and reassembled in order.
pub fn render_field(field: &dyn SdfField, camera: &Camera, config: &RenderConfig) -> Result<RenderOutput> {
    config.validate()?;
    camera.validate()?;
    let alpha = field.alpha();
    if !(alpha > 0.0) {
        return Err(Error::Parameter(format!("density sharpness must be positive, got {alpha}")));
    }
    let bounds = field.bounds();
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<(usize, Composite)>> = (0..h)
        .into_par_iter()
        .map(|r| {
            let pixels: Vec<usize> = (r * w..(r + 1) * w).collect();
            let rays = generate_rays(camera, &pixels, bounds.as_ref())?;
            let mut batch = Vec::with_capacity(w);
            let mut points = Vec::new();
            for (ray, &p) in rays.iter().zip(&pixels) {
                let mut rng = pixel_rng(config.seed, p);
                let s = sample_ray(ray, config.samples, config.stratified, &mut rng)?;
                points.extend_from_slice(&s.points);
                batch.push(s);
            }
            let mut sdf = vec![0.0; points.len()];
            let mut rgb = vec![[0.0; 3]; points.len()];
            if !points.is_empty() {
                field.query(&points, &mut sdf, &mut rgb)?;
            }
            let mut offset = 0;
            batch
                .iter()
                .zip(&pixels)
                .map(|(s, &p)| {
                    let n = s.len();
                    let c = composite(alpha, s, &sdf[offset..offset + n], &rgb[offset..offset + n], config.background)?;
                    offset += n;
                    Ok((p, c))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out = RenderOutput {
        rgb: Image::filled(w, h, 3, 0.0),
        depth: Image::filled(w, h, 1, f64::INFINITY),
        alpha: Image::filled(w, h, 1, 0.0),
    };
    for (p, c) in rows.into_iter().flatten() {
        out.rgb.data[3 * p..3 * p + 3].copy_from_slice(&c.rgb);
        out.alpha.data[p] = c.alpha;
        if c.alpha >= DEPTH_ALPHA_FLOOR {
            out.depth.data[p] = c.depth;
        }
    }
    Ok(out)
}

/// Renders the avatar under `params`.
pub fn render(scene: &Scene, body: &TemplateBody, params: &BodyParams, camera: &Camera, config: &RenderConfig) -> Result<RenderOutput> {
    let posed = PosedBody::new(body, params)?;
    render_posed(scene, &posed, camera, config)
}

pub fn render_posed(scene: &Scene, posed: &PosedBody, camera: &Camera, config: &RenderConfig) -> Result<RenderOutput> {
    let field = SceneField::new(scene, posed)?;
    render_field(&field, camera, config)
}

/// Expected-depth image, `+∞` where nothing is hit.
pub fn render_depth(scene: &Scene, body: &TemplateBody, params: &BodyParams, camera: &Camera, config: &RenderConfig) -> Result<Image> {
    Ok(render(scene, body, params, camera, config)?.depth)
}

/// Intersection over union of two masks; two empty masks score 1.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
