//! Direct fitting of a scene to a target set.
//!
//! Training rays use bin-center samples, so the inverse-skinning geometry of every pixel is
//! computed once per resolution level and reused. Each step draws its rays from a ChaCha8
//! stream keyed by `(seed, step)`; work is split into fixed chunks whose gradients are
//! summed in chunk order, so results do not depend on the thread count or on resuming.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::adam::Adam;
use super::targets::TargetSet;
use crate::body::TemplateBody;
use crate::canonical::{shell_geometry, PosedBody, SampleGeometry, ShellSample};
use crate::error::{Error, Result};
use crate::field::{
    field_backward, field_forward, read_checkpoint, write_checkpoint, FieldAdjoint, ParamGroup, Scene, SceneGrad,
    SdfScheme,
};
use crate::math::Vec3;
use crate::objectives::{
    deform_reg_loss_grad, eikonal_loss_grad, minsurf_loss_grad, prior_loss_grad, prior_weight, total_loss, LossReport, LossTerms,
    LossWeights, PriorNorm, SampleCounts, MINSURF_SHARPNESS,
};
use crate::render::{
    body_bounds, density_with_derivatives, generate_rays, integrate, integrate_backward, render_posed, sample_ray,
    Camera, CompositeAdjoint, Obb, RenderConfig, RenderOutput,
};

const CHUNK_RAYS: usize = 64;
const CHUNK_EIKONAL: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub triplane: f64,
    pub network: f64,
    pub style: f64,
    pub log_alpha: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            triplane: 1e-2,
            network: 1e-3,
            style: 1e-3,
            log_alpha: 1e-3,
        }
    }
}

impl LearningRates {
    fn of(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::TriPlane => self.triplane,
            ParamGroup::Network => self.network,
            ParamGroup::Style => self.style,
            ParamGroup::Alpha => self.log_alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub rates: LearningRates,
    pub rays_per_step: usize,
    pub samples: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Share of the iterations spent at the coarse level.
    pub coarse_fraction: f64,
    /// Side of the coarse level; must divide the target resolution.
    pub coarse_size: usize,
    /// Share of each ray batch drawn from inside the target masks.
    pub foreground_fraction: f64,
    pub eikonal_points: usize,
    /// Steps over which the rates ramp linearly up from zero.
    pub warmup_steps: usize,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 600,
            rates: LearningRates::default(),
            rays_per_step: 1024,
            samples: crate::render::DEFAULT_SAMPLES,
            seed: 0,
            weights: LossWeights::default(),
            coarse_fraction: 0.3,
            coarse_size: 32,
            foreground_fraction: 0.5,
            eikonal_points: 256,
            warmup_steps: 100,
            divergence_factor: 10.0,
            divergence_patience: 200,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let r = &self.rates;
        if ![r.triplane, r.network, r.style, r.log_alpha].iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(Error::Parameter("learning rates must be positive and finite".into()));
        }
        if self.rays_per_step == 0 || self.samples == 0 {
            return Err(Error::Parameter("rays per step and samples per ray must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.coarse_fraction) || !(0.0..=1.0).contains(&self.foreground_fraction) {
            return Err(Error::Parameter("schedule and foreground fractions must lie in [0, 1]".into()));
        }
        if !(self.divergence_factor > 1.0) || self.divergence_patience == 0 {
            return Err(Error::Parameter("divergence guard needs factor > 1 and patience ≥ 1".into()));
        }
        self.weights.validate()
    }

    /// First step run at full resolution.
    pub fn coarse_steps(&self) -> usize {
        (self.coarse_fraction * self.iterations as f64).ceil() as usize
    }
}

/// One line of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub resolution: usize,
    pub alpha: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

struct PixelCache {
    target: [f64; 4],
    t: Vec<f64>,
    delta: Vec<f64>,
    samples: Vec<ShellSample>,
    inside: usize,
}

struct ViewCache {
    posed: usize,
    bounds: Obb,
    pixels: Vec<PixelCache>,
    foreground: Vec<usize>,
}

struct Level {
    size: usize,
    views: Vec<ViewCache>,
}

fn downsample(data: &[f64], size: usize, channels: usize, factor: usize) -> Vec<f64> {
    let out = size / factor;
    let mut res = vec![0.0; out * out * channels];
    let norm = 1.0 / (factor * factor) as f64;
    for y in 0..size {
        for x in 0..size {
            let o = ((y / factor) * out + x / factor) * channels;
            let i = (y * size + x) * channels;
            for c in 0..channels {
                res[o + c] += data[i + c] * norm;
            }
        }
    }
    res
}

fn build_level(
    scene: &Scene,
    targets: &TargetSet,
    posed: &[PosedBody],
    view_posed: &[usize],
    size: usize,
    samples: usize,
) -> Result<Level> {
    let views = targets
        .targets
        .iter()
        .zip(view_posed)
        .map(|(t, &pi)| {
            let full = t.camera.width;
            let factor = full / size;
            let (camera, rgb, mask) = if factor == 1 {
                (t.camera, t.rgb.data.clone(), t.mask.data.clone())
            } else {
                (
                    t.camera.resized(size, size)?,
                    downsample(&t.rgb.data, full, 3, factor),
                    downsample(&t.mask.data, full, 1, factor),
                )
            };
            let body = &posed[pi];
            let bounds = body_bounds(body)?;
            let all: Vec<usize> = (0..camera.pixel_count()).collect();
            let rays = generate_rays(&camera, &all, Some(&bounds))?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let ray_samples = rays
                .iter()
                .map(|r| sample_ray(r, samples, false, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let pixels = ray_samples
                .into_par_iter()
                .enumerate()
                .map(|(p, mut s)| {
                    let mut shell = Vec::with_capacity(s.len());
                    for x in &s.points {
                        let g = shell_geometry(x, body, scene)?;
                        shell.push(g);
                        // deep inside the prior body: fixed density, nothing behind it is visible
                        if matches!(g, ShellSample::Outside(d) if d < 0.0) {
                            break;
                        }
                    }
                    s.t.truncate(shell.len());
                    s.delta.truncate(shell.len());
                    Ok(PixelCache {
                        target: [rgb[3 * p], rgb[3 * p + 1], rgb[3 * p + 2], mask[p]],
                        inside: shell.iter().filter(|g| matches!(g, ShellSample::Inside(_))).count(),
                        t: s.t,
                        delta: s.delta,
                        samples: shell,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let foreground = (0..pixels.len()).filter(|&p| mask[p] > 0.0).collect();
            Ok(ViewCache {
                posed: pi,
                bounds,
                pixels,
                foreground,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Level { size, views })
}

enum Task {
    Rays { view: usize, pixels: Vec<usize> },
    Eikonal { view: usize, points: Vec<SampleGeometry> },
}

#[derive(Default)]
struct TaskOut {
    photometric: f64,
    prior: f64,
    minsurf: f64,
    deform: f64,
    eikonal: f64,
}

/// Normalizers shared by all chunks of a step.
struct Norms {
    rays: f64,
    samples: f64,
    inside: f64,
    eikonal: f64,
}

/// A fit in progress: scene, optimizer state and the cached ray geometry.
pub struct FitSession<'a> {
    targets: &'a TargetSet,
    config: FitConfig,
    pub scene: Scene,
    adam: Adam,
    step: usize,
    initial_loss: Option<f64>,
    over: usize,
    posed: Vec<PosedBody>,
    view_posed: Vec<usize>,
    levels: Vec<Level>,
}

impl<'a> FitSession<'a> {
    pub fn new(body: &TemplateBody, targets: &'a TargetSet, config: FitConfig, scene: Scene) -> Result<Self> {
        config.validate()?;
        if targets.is_empty() {
            return Err(Error::Parameter("fitting needs at least one target view".into()));
        }
        let size = targets.targets[0].camera.width;
        for t in &targets.targets {
            if t.camera.width != size || t.camera.height != size {
                return Err(Error::Parameter("target views must be square and share one resolution".into()));
            }
        }
        let coarse = config.coarse_steps() > 0 && config.coarse_size < size;
        if coarse && (config.coarse_size == 0 || size % config.coarse_size != 0) {
            return Err(Error::Parameter(format!(
                "coarse size {} does not divide the target resolution {size}",
                config.coarse_size
            )));
        }
        let mut posed: Vec<PosedBody> = Vec::new();
        let mut view_posed = Vec::new();
        for t in &targets.targets {
            match posed.iter().position(|p| p.params == t.params) {
                Some(i) => view_posed.push(i),
                None => {
                    posed.push(PosedBody::new(body, &t.params)?);
                    view_posed.push(posed.len() - 1);
                }
            }
        }
        let mut levels = Vec::new();
        if coarse {
            levels.push(build_level(&scene, targets, &posed, &view_posed, config.coarse_size, config.samples)?);
        }
        levels.push(build_level(&scene, targets, &posed, &view_posed, size, config.samples)?);
        let sizes: Vec<usize> = scene.blocks().iter().map(|b| b.data.len()).collect();
        Ok(FitSession {
            targets,
            config,
            scene,
            adam: Adam::new(&sizes),
            step: 0,
            initial_loss: None,
            over: 0,
            posed,
            view_posed,
            levels,
        })
    }

    /// Continues from a checkpoint written by [`FitSession::save`].
    pub fn resume(body: &TemplateBody, targets: &'a TargetSet, path: &Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        let state = ck.extra.get("fit").cloned().ok_or_else(|| Error::malformed(path, "checkpoint has no fit state"))?;
        let state: FitState = serde_json::from_value(state).map_err(|e| Error::malformed(path, e))?;
        let mut session = FitSession::new(body, targets, state.config, ck.scene)?;
        let n = session.adam.m.len();
        if ck.extra_blocks.len() != 2 * n {
            return Err(Error::malformed(path, "optimizer state does not match the scene"));
        }
        for (k, (name, data)) in ck.extra_blocks.into_iter().enumerate() {
            let slot = if k < n { &mut session.adam.m[k] } else { &mut session.adam.v[k - n] };
            if data.len() != slot.len() {
                return Err(Error::malformed(path, format!("optimizer block {name} has the wrong size")));
            }
            *slot = data;
        }
        session.adam.step = state.adam_step;
        session.step = state.step;
        session.initial_loss = state.initial_loss;
        session.over = state.over;
        Ok(session)
    }

    pub fn config(&self) -> &FitConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.iterations
    }

    /// Writes scene plus optimizer and guard state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let state = FitState {
            step: self.step,
            adam_step: self.adam.step,
            initial_loss: self.initial_loss,
            over: self.over,
            config: self.config.clone(),
        };
        let extra = json!({ "fit": state });
        let mut blocks: Vec<(String, &[f64])> = Vec::new();
        for (k, m) in self.adam.m.iter().enumerate() {
            blocks.push((format!("adam.m.{k}"), m));
        }
        for (k, v) in self.adam.v.iter().enumerate() {
            blocks.push((format!("adam.v.{k}"), v));
        }
        write_checkpoint(path, &self.scene, &extra, &blocks)
    }

    fn level(&self) -> &Level {
        if self.step < self.config.coarse_steps() {
            &self.levels[0]
        } else {
            self.levels.last().expect("at least one level")
        }
    }

    /// Loss and gradient for the current step, without updating parameters.
    pub fn evaluate(&self) -> Result<(LossReport, SceneGrad)> {
        let level = self.level();
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(self.step as u64);

        let nviews = level.views.len();
        let fg_views: Vec<usize> = (0..nviews).filter(|&v| !level.views[v].foreground.is_empty()).collect();
        let fg_rays = if fg_views.is_empty() {
            0
        } else {
            (cfg.rays_per_step as f64 * cfg.foreground_fraction).round() as usize
        };
        let mut picks = Vec::with_capacity(cfg.rays_per_step);
        for i in 0..cfg.rays_per_step {
            if i < fg_rays {
                let v = fg_views[rng.random_range(0..fg_views.len())];
                let fg = &level.views[v].foreground;
                picks.push((v, fg[rng.random_range(0..fg.len())]));
            } else {
                let v = rng.random_range(0..nviews);
                picks.push((v, rng.random_range(0..level.views[v].pixels.len())));
            }
        }
        picks.sort_unstable();

        let mut tasks = Vec::new();
        let mut ray_inside = Vec::new();
        for group in picks.chunk_by(|a, b| a.0 == b.0) {
            for chunk in group.chunks(CHUNK_RAYS) {
                let view = chunk[0].0;
                for &(_, p) in chunk {
                    for s in &level.views[view].pixels[p].samples {
                        if let ShellSample::Inside(g) = s {
                            ray_inside.push((view, *g));
                        }
                    }
                }
                tasks.push(Task::Rays {
                    view,
                    pixels: chunk.iter().map(|x| x.1).collect(),
                });
            }
        }

        let mut eik: Vec<(usize, SampleGeometry)> = Vec::new();
        if cfg.weights.eikonal > 0.0 && cfg.eikonal_points > 0 {
            let from_rays = cfg.eikonal_points / 2;
            if !ray_inside.is_empty() {
                for _ in 0..from_rays {
                    eik.push(ray_inside[rng.random_range(0..ray_inside.len())]);
                }
            }
            for _ in from_rays..cfg.eikonal_points {
                let v = rng.random_range(0..nviews);
                let view = &level.views[v];
                let x = view.bounds.sample(&mut rng);
                if let ShellSample::Inside(g) = shell_geometry(&x, &self.posed[view.posed], &self.scene)? {
                    eik.push((v, g));
                }
            }
            eik.sort_by_key(|e| e.0);
            for group in eik.chunk_by(|a, b| a.0 == b.0) {
                for chunk in group.chunks(CHUNK_EIKONAL) {
                    tasks.push(Task::Eikonal {
                        view: chunk[0].0,
                        points: chunk.iter().map(|e| e.1).collect(),
                    });
                }
            }
        }

        let mut samples = 0;
        let mut inside = 0;
        for &(v, p) in &picks {
            samples += level.views[v].pixels[p].samples.len();
            inside += level.views[v].pixels[p].inside;
        }
        let norms = Norms {
            rays: picks.len() as f64,
            samples: samples as f64,
            inside: inside as f64,
            eikonal: eik.len() as f64,
        };

        let conditioning = self
            .view_posed
            .iter()
            .map(|&pi| self.scene.conditioning(&self.posed[pi].params))
            .collect::<Result<Vec<_>>>()?;
        let outs = tasks
            .par_iter()
            .map(|task| self.run_task(level, task, &conditioning, &norms))
            .collect::<Result<Vec<_>>>()?;

        let mut grad = SceneGrad::zeros(&self.scene);
        let mut sum = TaskOut::default();
        for (g, o) in outs {
            grad.add_assign(&g);
            sum.photometric += o.photometric;
            sum.prior += o.prior;
            sum.minsurf += o.minsurf;
            sum.deform += o.deform;
            sum.eikonal += o.eikonal;
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("scene gradient"));
        }
        let w = &cfg.weights;
        let terms = LossTerms {
            photometric: Some(sum.photometric),
            prior: (w.prior > 0.0 && self.scene.config.sdf_scheme != SdfScheme::NoPrior && samples > 0)
                .then_some(sum.prior),
            eikonal: (!eik.is_empty()).then_some(sum.eikonal),
            minsurf: (w.minsurf > 0.0 && samples > 0).then_some(sum.minsurf),
            deform: (w.deform > 0.0 && inside > 0).then_some(sum.deform),
        };
        let counts = SampleCounts {
            rays: picks.len(),
            samples,
            field_samples: inside,
            eikonal_points: eik.len(),
        };
        Ok((total_loss(terms, counts, w)?, grad))
    }

    fn run_task(&self, level: &Level, task: &Task, conditioning: &[Vec<f64>], norms: &Norms) -> Result<(SceneGrad, TaskOut)> {
        let mut grad = SceneGrad::zeros(&self.scene);
        let mut out = TaskOut::default();
        let w = &self.config.weights;
        match task {
            Task::Eikonal { view, points } => {
                let vi = self.view_posed[*view];
                let fwd = field_forward(&self.scene, points, &conditioning[*view], Some(&self.posed[vi]), true, false)?;
                let scale = points.len() as f64 / norms.eikonal;
                out.eikonal = fwd.sdf_grad.iter().map(|g| (g.norm() - 1.0).powi(2)).sum::<f64>() / norms.eikonal;
                let adj = FieldAdjoint {
                    sdf_grad: eikonal_loss_grad(&fwd.sdf_grad).iter().map(|g| g * (w.eikonal * scale)).collect(),
                    ..Default::default()
                };
                field_backward(&self.scene, points, &fwd, &adj, &mut grad)?;
            }
            Task::Rays { view, pixels } => {
                let cache = &level.views[*view];
                let vi = self.view_posed[*view];
                let mut geoms = Vec::new();
                for &p in pixels {
                    for s in &cache.pixels[p].samples {
                        if let ShellSample::Inside(g) = s {
                            geoms.push(*g);
                        }
                    }
                }
                let fwd = if geoms.is_empty() {
                    None
                } else {
                    Some(field_forward(&self.scene, &geoms, &conditioning[*view], Some(&self.posed[vi]), false, true)?)
                };
                let n_in = geoms.len();
                let mut adj_sdf = vec![0.0; n_in];
                let mut adj_color = vec![[0.0; 3]; n_in];
                let mut adj_delta = vec![Vec3::zeros(); n_in];
                let alpha = self.scene.alpha();
                let bg = [1.0; 3];
                let use_prior = w.prior > 0.0 && self.scene.config.sdf_scheme != SdfScheme::NoPrior;
                let mut slot = 0;
                for &p in pixels {
                    let px = &cache.pixels[p];
                    let n = px.samples.len();
                    let mut sdf = Vec::with_capacity(n);
                    let mut prior = Vec::with_capacity(n);
                    let mut rgb = Vec::with_capacity(n);
                    let mut slots = Vec::with_capacity(n);
                    for s in &px.samples {
                        match s {
                            ShellSample::Outside(d) => {
                                sdf.push(*d);
                                prior.push(*d);
                                rgb.push([0.0; 3]);
                                slots.push(None);
                            }
                            ShellSample::Inside(g) => {
                                let f = fwd.as_ref().expect("inside samples were evaluated");
                                sdf.push(f.sdf[slot]);
                                prior.push(g.prior);
                                rgb.push(f.color[slot]);
                                slots.push(Some(slot));
                                slot += 1;
                            }
                        }
                    }
                    let dens: Vec<(f64, f64, f64)> = sdf.iter().map(|&d| density_with_derivatives(d, alpha)).collect();
                    let sigma: Vec<f64> = dens.iter().map(|x| x.0).collect();
                    let comp = integrate(&sigma, &px.delta, &px.t, &rgb, bg)?;
                    let rendered = [comp.rgb[0], comp.rgb[1], comp.rgb[2], comp.alpha];
                    let mut adj = CompositeAdjoint::default();
                    for c in 0..4 {
                        let r = rendered[c] - px.target[c];
                        out.photometric += r * r / (4.0 * norms.rays);
                        let g = w.photometric * 2.0 * r / (4.0 * norms.rays);
                        if c < 3 {
                            adj.rgb[c] = g;
                        } else {
                            adj.alpha = g;
                        }
                    }
                    if n == 0 {
                        continue;
                    }
                    let (d_sigma, d_color) = integrate_backward(&comp, &px.delta, &px.t, &rgb, bg, &adj);
                    let scale = n as f64 / norms.samples;
                    let prior_g = prior_loss_grad(&sdf, &prior, w.kappa, w.prior_norm);
                    let minsurf_g = minsurf_loss_grad(&sdf);
                    for i in 0..n {
                        if use_prior {
                            let r = sdf[i] - prior[i];
                            let pw = prior_weight(prior[i], w.kappa);
                            out.prior += pw
                                * match w.prior_norm {
                                    PriorNorm::L1 => r.abs(),
                                    PriorNorm::L2 => r * r,
                                }
                                / norms.samples;
                        }
                        out.minsurf += (-MINSURF_SHARPNESS * sdf[i].abs()).exp() / norms.samples;
                        grad.log_alpha += d_sigma[i] * dens[i].2;
                        if let Some(k) = slots[i] {
                            let mut a = d_sigma[i] * dens[i].1;
                            if use_prior {
                                a += w.prior * prior_g[i] * scale;
                            }
                            if w.minsurf > 0.0 {
                                a += w.minsurf * minsurf_g[i] * scale;
                            }
                            adj_sdf[k] = a;
                            adj_color[k] = d_color[i];
                        }
                    }
                }
                if let Some(f) = &fwd {
                    if w.deform > 0.0 && norms.inside > 0.0 {
                        let scale = n_in as f64 / norms.inside;
                        out.deform = f.delta.iter().map(|d| d.norm()).sum::<f64>() / norms.inside;
                        for (a, g) in adj_delta.iter_mut().zip(deform_reg_loss_grad(&f.delta)) {
                            *a = g * (w.deform * scale);
                        }
                    }
                    let adj = FieldAdjoint {
                        sdf: adj_sdf,
                        sdf_grad: Vec::new(),
                        color: adj_color,
                        delta: adj_delta,
                    };
                    field_backward(&self.scene, &geoms, f, &adj, &mut grad)?;
                }
            }
        }
        Ok((grad, out))
    }

    /// One optimizer step; returns its loss record.
    pub fn advance(&mut self) -> Result<StepRecord> {
        let (report, grad) = self.evaluate()?;
        let record = StepRecord {
            step: self.step,
            resolution: self.level().size,
            alpha: self.scene.alpha(),
            report,
        };
        let initial = *self.initial_loss.get_or_insert(report.total);
        if report.total > self.config.divergence_factor * initial {
            self.over += 1;
            if self.over >= self.config.divergence_patience {
                return Err(Error::Diverged {
                    step: self.step,
                    loss: report.total,
                    initial,
                });
            }
        } else {
            self.over = 0;
        }
        let ramp = if self.step < self.config.warmup_steps {
            (self.step + 1) as f64 / self.config.warmup_steps as f64
        } else {
            1.0
        };
        let rates: Vec<f64> = self.scene.blocks().iter().map(|b| ramp * self.config.rates.of(b.group)).collect();
        let grads = grad.blocks();
        let mut params = self.scene.blocks_mut();
        self.adam.update(&mut params, &grads, &rates)?;
        self.step += 1;
        Ok(record)
    }

    /// Runs until `step` (capped at the configured iterations), reporting each record.
    pub fn run_until(&mut self, step: usize, mut on_step: impl FnMut(&StepRecord, &Self) -> Result<()>) -> Result<()> {
        let end = step.min(self.config.iterations);
        while self.step < end {
            let rec = self.advance()?;
            on_step(&rec, self)?;
        }
        Ok(())
    }

    /// Renders view `index` of the targets with the current scene.
    pub fn render_view(&self, index: usize, config: &RenderConfig) -> Result<RenderOutput> {
        let t = self
            .targets
            .targets
            .get(index)
            .ok_or_else(|| Error::Parameter(format!("no target view {index}")))?;
        render_posed(&self.scene, &self.posed[self.view_posed[index]], &t.camera, config)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitState {
    step: usize,
    adam_step: u64,
    initial_loss: Option<f64>,
    over: usize,
    config: FitConfig,
}

/// Fitted scene and its loss history.
pub struct FitResult {
    pub scene: Scene,
    pub history: Vec<StepRecord>,
}

/// Fits `scene` to the targets from scratch.
pub fn fit_scene(body: &TemplateBody, targets: &TargetSet, config: &FitConfig, scene: Scene) -> Result<FitResult> {
    let mut session = FitSession::new(body, targets, config.clone(), scene)?;
    let mut history = Vec::with_capacity(config.iterations);
    session.run_until(config.iterations, |r, _| {
        history.push(*r);
        Ok(())
    })?;
    Ok(FitResult {
        scene: session.scene,
        history,
    })
}

/// Renders a fitted scene under new body parameters.
pub fn reanimate(
    scene: &Scene,
    body: &TemplateBody,
    params: &crate::body::BodyParams,
    camera: &Camera,
    config: &RenderConfig,
) -> Result<RenderOutput> {
    crate::render::render(scene, body, params, camera, config)
}

/// History as JSON lines.
pub fn history_jsonl(history: &[StepRecord]) -> Result<String> {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}
