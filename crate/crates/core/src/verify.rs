//! Property and oracle suites: inverse-skinning round trip, mesh SDF accuracy, the Eikonal
//! property, finite-difference gradient checks, volume-rendering conservation and the
//! SDF-to-density map. Each suite returns checks with their measured value and limit.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::body::{generate_test_body, BodyParams, BodySpec, CapsuleBody, TemplateBody};
use crate::canonical::{canonical_map_points, sample_geometry, PosedBody};
use crate::error::{Error, Result};
use crate::field::{field_gradient, Mlp, MlpGrad, ModelConfig, Scene};
use crate::fit::{make_synthetic_targets, FitConfig, FitSession};
use crate::geometry::{icosphere, SpatialIndex};
use crate::math::Vec3;
use crate::objectives::{eikonal_loss, PriorNorm};
use crate::render::{integrate, render_field, sdf_to_density, Camera, Obb, PlaneField, RenderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Roundtrip,
    Sdf,
    Eikonal,
    Gradcheck,
    Renderer,
    Density,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Roundtrip,
        Suite::Sdf,
        Suite::Eikonal,
        Suite::Gradcheck,
        Suite::Renderer,
        Suite::Density,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Roundtrip => "roundtrip",
            Suite::Sdf => "sdf",
            Suite::Eikonal => "eikonal",
            Suite::Gradcheck => "gradcheck",
            Suite::Renderer => "renderer",
            Suite::Density => "density",
        }
    }

    /// Suites named by `name`; `all` selects every suite.
    pub fn select(name: &str) -> Result<Vec<Suite>> {
        if name == "all" {
            return Ok(Suite::ALL.to_vec());
        }
        Ok(vec![name.parse()?])
    }

    pub fn run(self) -> Result<SuiteReport> {
        let start = Instant::now();
        let checks = match self {
            Suite::Roundtrip => roundtrip()?,
            Suite::Sdf => sdf_accuracy()?,
            Suite::Eikonal => eikonal()?,
            Suite::Gradcheck => gradcheck()?,
            Suite::Renderer => renderer()?,
            Suite::Density => density()?,
        };
        let mut report = SuiteReport {
            suite: self,
            checks,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(limit) = self.time_limit() {
            report.checks.push(Check::at_most("runtime_seconds", report.seconds, limit));
        }
        Ok(report)
    }

    fn time_limit(self) -> Option<f64> {
        match self {
            Suite::Roundtrip => Some(5.0),
            Suite::Sdf => Some(2.0),
            Suite::Gradcheck => Some(30.0),
            _ => None,
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown suite {s:?}")))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bound {
    /// `value < limit`
    Below,
    /// `value <= limit`
    AtMost,
    /// `value >= limit`
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub bound: Bound,
    pub pass: bool,
}

impl Check {
    pub fn new(name: &str, value: f64, limit: f64, bound: Bound) -> Self {
        let pass = match bound {
            Bound::Below => value < limit,
            Bound::AtMost => value <= limit,
            Bound::AtLeast => value >= limit,
        };
        Check {
            name: name.to_string(),
            value,
            limit,
            bound,
            pass,
        }
    }

    pub fn below(name: &str, value: f64, limit: f64) -> Self {
        Check::new(name, value, limit, Bound::Below)
    }

    pub fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Check::new(name, value, limit, Bound::AtMost)
    }

    pub fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Check::new(name, value, limit, Bound::AtLeast)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.bound {
            Bound::Below => "<",
            Bound::AtMost => "<=",
            Bound::AtLeast => ">=",
        };
        write!(
            f,
            "{} {} = {:.6e} (need {op} {:.3e})",
            if self.pass { "ok  " } else { "FAIL" },
            self.name,
            self.value,
            self.limit
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} {} ({:.2} s)",
            if self.pass() { "PASS" } else { "FAIL" },
            self.suite,
            self.seconds
        )?;
        for c in &self.checks {
            writeln!(f, "  {c}")?;
        }
        Ok(())
    }
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Every vertex of the test body, posed by skinning and mapped back through `canonical_map`
/// with `k = 1` and an all-zero residual network.
pub fn roundtrip() -> Result<Vec<Check>> {
    let body = generate_test_body(&BodySpec::default())?;
    let cfg = ModelConfig {
        triplane_resolution: 2,
        triplane_channels: 1,
        style_dim: 1,
        deform_hidden: 4,
        deform_layers: 1,
        decoder_hidden: 2,
        decoder_layers: 1,
        pe_frequencies: 1,
        knn: 1,
        ..ModelConfig::default()
    };
    let scene = Scene::new(cfg, &body, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst: f64 = 0.0;
    let template = body.mesh()?;
    for _ in 0..100 {
        let mut params = BodyParams::for_body(&body);
        for t in &mut params.theta {
            *t = [0, 1, 2].map(|_| rng.random_range(-0.6..0.6));
        }
        params.root_translation = [0, 1, 2].map(|_| rng.random_range(-0.5..0.5));
        let posed = PosedBody::new(&body, &params)?;
        let back = canonical_map_points(posed.mesh().vertices(), &posed, &scene)?;
        for (b, v) in back.iter().zip(template.vertices()) {
            worst = worst.max((b.point - v).norm());
        }
    }
    Ok(vec![Check::below("max_roundtrip_error_m", worst, 1e-5)])
}

/// Unit icosphere (4 subdivisions) against `|x| − 1`.
///
/// The mesh is inscribed in the sphere, so a thin band just inside the sphere is legitimately
/// outside the mesh. Sign agreement is counted where the analytic distance clears the
/// accuracy bound.
pub fn sdf_accuracy() -> Result<Vec<Check>> {
    const TOL: f64 = 5e-3;
    let index = SpatialIndex::build(icosphere(4))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5df);
    let (mut worst, mut counted, mut agree) = (0.0f64, 0usize, 0usize);
    for _ in 0..10_000 {
        let dir = loop {
            let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                break v / n;
            }
        };
        let x = dir * rng.random_range(0.2..2.0);
        let analytic = x.norm() - 1.0;
        let d = index.signed_distance(&x)?;
        worst = worst.max((d - analytic).abs());
        if analytic.abs() >= TOL {
            counted += 1;
            agree += usize::from(d.signum() == analytic.signum());
        }
    }
    Ok(vec![
        Check::below("max_abs_error_m", worst, TOL),
        Check::at_least("sign_agreement", agree as f64 / counted as f64, 1.0),
    ])
}

/// Finite-difference gradient norm of the posed body's signed distance, and the Eikonal loss
/// of a freshly initialized scene.
pub fn eikonal() -> Result<Vec<Check>> {
    let body = generate_test_body(&BodySpec::default())?;
    let mut params = BodyParams::for_body(&body);
    params.theta[4] = [0.0, 0.0, 0.5];
    params.theta[11] = [0.4, 0.0, 0.0];
    let posed = PosedBody::new(&body, &params)?;
    let index = &posed.index;
    let (lo, hi) = bounds(posed.mesh().vertices());
    let mut rng = ChaCha8Rng::seed_from_u64(0xe1c);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut found = 0usize;
    let mut tries = 0usize;
    while found < 1000 {
        tries += 1;
        if tries > 1_000_000 {
            return Err(Error::Invariant("too few admissible Eikonal points".into()));
        }
        let x = random_in(&mut rng, &lo, &hi, 0.1);
        let center = index.closest_point(&x)?;
        if center.distance < 2.0 * h {
            continue;
        }
        let mut values = [0.0; 6];
        let mut same = true;
        for (k, v) in values.iter_mut().enumerate() {
            let mut p = x;
            p[k / 2] += if k % 2 == 0 { h } else { -h };
            same &= index.closest_point(&p)?.triangle == center.triangle;
            *v = index.signed_distance(&p)?;
        }
        if !same {
            continue;
        }
        let g = Vec3::new(values[0] - values[1], values[2] - values[3], values[4] - values[5]) / (2.0 * h);
        worst = worst.max((g.norm() - 1.0).abs());
        found += 1;
    }

    let scene = Scene::new(ModelConfig::default(), &body, 0)?;
    let cond = scene.conditioning(&params)?;
    let mut grads = Vec::new();
    while grads.len() < 256 {
        let x = random_in(&mut rng, &lo, &hi, 0.1);
        let geom = sample_geometry(&x, &posed, &scene)?;
        if geom.prior.abs() <= scene.config.shell {
            grads.push(field_gradient(&scene, &geom, &cond, Some(&posed))?);
        }
    }
    Ok(vec![
        Check::at_most("max_fd_gradient_norm_deviation", worst, 1e-2),
        Check::below("zero_init_eikonal_loss", eikonal_loss(&grads)?, 1e-3),
    ])
}

fn bounds(points: &[Vec3]) -> (Vec3, Vec3) {
    points.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    )
}

fn random_in(rng: &mut ChaCha8Rng, lo: &Vec3, hi: &Vec3, pad: f64) -> Vec3 {
    Vec3::from_fn(|i, _| rng.random_range(lo[i] - pad..hi[i] + pad))
}

/// Central differences against backward for each network of a miniature scene, then the full
/// fitting loss against every parameter block.
pub fn gradcheck() -> Result<Vec<Check>> {
    let caps = CapsuleBody::new(BodySpec {
        resolution: 28,
        ..BodySpec::default()
    })?;
    let body = caps.template()?;
    let mut scene = miniature_scene(&body, 5)?;
    let mut checks = Vec::new();
    for (name, net) in [
        ("color_net", &mut scene.color_net),
        ("sdf_net", &mut scene.sdf_net),
        ("deform_net", &mut scene.deform_net),
    ] {
        checks.push(Check::below(&format!("{name}_max_rel_error"), mlp_gradcheck(net, 11)?, 1e-4));
    }
    checks.push(Check::below("loss_chain_max_rel_error", chain_gradcheck(&caps, &body, scene)?, 1e-3));
    Ok(checks)
}

fn miniature_scene(body: &TemplateBody, seed: u64) -> Result<Scene> {
    let cfg = ModelConfig {
        triplane_resolution: 8,
        triplane_channels: 4,
        style_dim: 3,
        deform_hidden: 8,
        deform_layers: 2,
        decoder_hidden: 8,
        pe_frequencies: 2,
        alpha_init: 0.05,
        ..ModelConfig::default()
    };
    let mut scene = Scene::new(cfg, body, seed)?;
    // the zero-initialized output layers would hide every upstream gradient
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for net in [&mut scene.sdf_net, &mut scene.deform_net] {
        let l = net.layers_mut().last_mut().expect("networks have layers");
        l.weight.iter_mut().for_each(|w| *w = rng.random_range(-0.05..0.05));
        l.bias.iter_mut().for_each(|w| *w = rng.random_range(-0.01..0.01));
    }
    Ok(scene)
}

/// Worst relative error over every weight, bias and input of `net` for a scalar objective
/// that mixes primal and tangent outputs.
fn mlp_gradcheck(net: &mut Mlp, seed: u64) -> Result<f64> {
    let (rows, tangents) = (3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input: Vec<f64> = (0..rows * (1 + tangents) * net.input_width())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let coef: Vec<f64> = (0..rows * (1 + tangents) * net.output_width())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let objective = |n: &Mlp, x: &[f64]| -> Result<f64> {
        let c = n.forward(x, rows, tangents)?;
        Ok(c.output().iter().zip(&coef).map(|(o, k)| o * k + 0.5 * o * o).sum())
    };
    let cache = net.forward(&input, rows, tangents)?;
    let upstream: Vec<f64> = cache.output().iter().zip(&coef).map(|(o, k)| k + o).collect();
    let mut grad = MlpGrad::zeros(net);
    let grad_input = net.backward(&cache, &upstream, &mut grad)?;

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for li in 0..net.layers().len() {
        for (is_bias, len) in [(false, net.layers()[li].weight.len()), (true, net.layers()[li].bias.len())] {
            for i in 0..len {
                let orig = *param(net, li, is_bias, i);
                *param(net, li, is_bias, i) = orig + h;
                let up = objective(net, &input)?;
                *param(net, li, is_bias, i) = orig - h;
                let down = objective(net, &input)?;
                *param(net, li, is_bias, i) = orig;
                let analytic = if is_bias { grad.bias[li][i] } else { grad.weight[li][i] };
                worst = worst.max(rel((up - down) / (2.0 * h), analytic, 1e-6));
            }
        }
    }
    for i in 0..input.len() {
        let mut x = input.clone();
        x[i] = input[i] + h;
        let up = objective(net, &x)?;
        x[i] = input[i] - h;
        let down = objective(net, &x)?;
        worst = worst.max(rel((up - down) / (2.0 * h), grad_input[i], 1e-6));
    }
    Ok(worst)
}

fn param(net: &mut Mlp, layer: usize, bias: bool, i: usize) -> &mut f64 {
    let l = &mut net.layers_mut()[layer];
    if bias {
        &mut l.bias[i]
    } else {
        &mut l.weight[i]
    }
}

/// Fitting loss of one batch against central differences on four entries of every block.
fn chain_gradcheck(caps: &CapsuleBody, body: &TemplateBody, scene: Scene) -> Result<f64> {
    let mut params = BodyParams::for_body(body);
    params.theta[4] = [0.0, 0.0, 0.4];
    let cams = Camera::orbit(3, 2.0, Vec3::new(0.0, 0.9, 0.0), 0.1, 16, 0.9)?;
    let targets = make_synthetic_targets(caps, &[params], &cams)?;
    let mut cfg = FitConfig {
        iterations: 4,
        rays_per_step: 48,
        samples: 12,
        coarse_size: 8,
        coarse_fraction: 0.0,
        eikonal_points: 16,
        warmup_steps: 2,
        ..FitConfig::default()
    };
    // the L1 prior has a kink at zero residual
    cfg.weights.prior_norm = PriorNorm::L2;
    let mut session = FitSession::new(body, &targets, cfg, scene)?;
    let (_, grad) = session.evaluate()?;
    let analytic: Vec<Vec<f64>> = grad.blocks().iter().map(|b| b.to_vec()).collect();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (b, block) in analytic.iter().enumerate() {
        let len = block.len();
        for i in [0, len / 3, len / 2, len - 1] {
            let orig = session.scene.blocks()[b].data[i];
            session.scene.blocks_mut()[b][i] = orig + h;
            let up = session.evaluate()?.0.total;
            session.scene.blocks_mut()[b][i] = orig - h;
            let down = session.evaluate()?.0.total;
            session.scene.blocks_mut()[b][i] = orig;
            let fd = (up - down) / (2.0 * h);
            // entries whose gradient is at round-off level carry no signal
            if fd.abs().max(block[i].abs()) > 1e-7 {
                worst = worst.max(rel(fd, block[i], 0.0));
            }
        }
    }
    Ok(worst)
}

/// Weight conservation on random sample configurations, the two-sample hand case and the
/// expected depth of a flat wall.
pub fn renderer() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e4);
    let (mut high, mut low) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut sigma = Vec::with_capacity(64);
    let mut delta = Vec::with_capacity(64);
    let mut t = Vec::with_capacity(64);
    let colors = [[0.5; 3]; 64];
    for _ in 0..1_000_000 {
        let n = rng.random_range(1..=64usize);
        sigma.clear();
        delta.clear();
        t.clear();
        let mut at = rng.random_range(0.0..2.0);
        for _ in 0..n {
            // log-uniform density spans empty space to hard surfaces
            sigma.push(if rng.random_bool(0.1) { 0.0 } else { 10f64.powf(rng.random_range(-4.0..6.0)) });
            let d = 10f64.powf(rng.random_range(-4.0..0.0));
            t.push(at);
            delta.push(d);
            at += d;
        }
        let c = integrate(&sigma, &delta, &t, &colors[..n], [1.0; 3])?;
        let s: f64 = c.weights.iter().sum();
        high = high.max(s);
        low = low.min(c.weights.iter().copied().fold(s, f64::min));
    }

    let ln2 = std::f64::consts::LN_2;
    let hand = integrate(&[ln2, ln2], &[1.0, 1.0], &[1.0, 2.0], &[[1.0; 3]; 2], [0.0; 3])?;
    let hand_err = (hand.weights[0] - 0.5).abs().max((hand.weights[1] - 0.25).abs());

    let mut checks = vec![
        Check::at_most("max_weight_sum", high, 1.0 + 1e-6),
        Check::at_least("min_weight_or_sum", low, 0.0),
        Check::at_most("hand_case_error", hand_err, 1e-12),
    ];
    for n in [12, 24, 36, 48] {
        checks.push(Check::at_most(&format!("wall_depth_error_in_steps_n{n}"), wall_error(n)?, 0.5));
    }
    Ok(checks)
}

/// Worst `|depth − analytic| / δ` over a small image of a wall three meters away,
/// with the ray box spanning two meters.
fn wall_error(n: usize) -> Result<f64> {
    let cam = Camera::look_at(
        Vec3::new(0.0, 0.0, 3.0),
        Vec3::zeros(),
        Vec3::y(),
        Camera::centered(8, 8, 0.3),
        8,
        8,
    )?;
    let step = 2.0 / n as f64;
    let field = PlaneField {
        normal: -Vec3::z(),
        offset: 0.0,
        color: [0.2, 0.3, 0.4],
        alpha: step / 20.0,
        bounds: Obb::axis_aligned(Vec3::new(-2.0, -2.0, -1.0), Vec3::new(2.0, 2.0, 1.0)),
    };
    let cfg = RenderConfig {
        samples: n,
        ..RenderConfig::default()
    };
    let out = render_field(&field, &cam, &cfg)?;
    let mut worst: f64 = 0.0;
    for p in 0..cam.pixel_count() {
        let cos = cam.pixel_direction(p).dot(&-Vec3::z());
        let err = (out.depth.data[p] - 3.0 / cos).abs();
        worst = worst.max(err / (step / cos));
    }
    Ok(worst)
}

pub fn density() -> Result<Vec<Check>> {
    let center = (sdf_to_density(0.0, 0.1)? - 5.0).abs();
    let mut rises = 0usize;
    let mut last = f64::INFINITY;
    for i in 0..1000 {
        let d = -1.0 + 2.0 * i as f64 / 999.0;
        let s = sdf_to_density(d, 0.1)?;
        rises += usize::from(s >= last);
        last = s;
    }
    Ok(vec![
        Check::at_most("center_density_error", center, 1e-12),
        Check::at_most("non_decreasing_steps", rises as f64, 0.0),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert_eq!(Suite::select("all").unwrap().len(), 6);
        assert!(Suite::select("nope").is_err());
    }

    #[test]
    fn checks_compare_as_stated() {
        assert!(Check::below("a", 1.0, 2.0).pass);
        assert!(!Check::below("a", 2.0, 2.0).pass);
        assert!(Check::at_most("a", 2.0, 2.0).pass);
        assert!(!Check::at_least("a", f64::NAN, 0.0).pass);
    }

    #[test]
    fn density_suite_passes() {
        assert!(Suite::Density.run().unwrap().pass());
    }

    #[test]
    fn scene_networks_pass_the_mlp_check() {
        let body = generate_test_body(&BodySpec {
            resolution: 16,
            ..BodySpec::default()
        })
        .unwrap();
        let mut scene = miniature_scene(&body, 1).unwrap();
        assert!(mlp_gradcheck(&mut scene.sdf_net, 2).unwrap() < 1e-4);
    }
}
