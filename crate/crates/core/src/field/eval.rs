//! Batched evaluation of the canonical field at observation-space samples.
//!
//! The forward pass chains the residual deformation, tri-plane lookup and both decoders.
//! With tangents enabled it also carries `∂/∂x_k` for the three coordinate axes through the
//! whole chain, giving `∇_x d`; `field_backward` then differentiates values and spatial
//! gradients with respect to every scene parameter.

use super::mlp::MlpCache;
use super::scene::{Scene, SceneGrad, SdfScheme};
use crate::canonical::{deform_input, DeformationScheme, PosedBody, SampleGeometry};
use crate::error::{Error, Result};
use crate::math::Vec3;

/// Outputs of [`field_forward`] plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct FieldForward {
    pub rows: usize,
    pub tangents: bool,
    /// Canonical points `x̄`.
    pub points: Vec<Vec3>,
    /// Residual deformation `Δx̄`.
    pub delta: Vec<Vec3>,
    pub sdf: Vec<f64>,
    /// `∇_x d` (present when tangents are on).
    pub sdf_grad: Vec<Vec3>,
    /// RGB in [0, 1] (present when color is requested).
    pub color: Vec<[f64; 3]>,
    dirs: Vec<[Vec3; 3]>,
    prior_grad_canonical: Vec<Vec3>,
    deform: Option<MlpCache>,
    sdf_cache: MlpCache,
    color_cache: Option<MlpCache>,
}

/// Upstream gradients for [`field_backward`]; empty vectors mean zero.
#[derive(Debug, Clone, Default)]
pub struct FieldAdjoint {
    pub sdf: Vec<f64>,
    pub sdf_grad: Vec<Vec3>,
    pub color: Vec<[f64; 3]>,
    pub delta: Vec<Vec3>,
}

/// How the prior enters: `(input to MLP_d, whether it is added to the output)`.
fn prior_usage(scheme: SdfScheme) -> (bool, bool) {
    match scheme {
        SdfScheme::ObservationResidual | SdfScheme::CanonicalResidual => (true, true),
        SdfScheme::ObservationRaw => (true, false),
        SdfScheme::NoPrior => (false, false),
    }
}

fn axis(k: usize) -> Vec3 {
    let mut e = Vec3::zeros();
    e[k] = 1.0;
    e
}

pub fn field_forward(
    scene: &Scene,
    geoms: &[SampleGeometry],
    conditioning: &[f64],
    posed: Option<&PosedBody>,
    tangents: bool,
    with_color: bool,
) -> Result<FieldForward> {
    let cfg = &scene.config;
    let n = geoms.len();
    let t = if tangents { 3 } else { 0 };
    let blocks = 1 + t;

    let deform = if cfg.deformation != DeformationScheme::SkinningOnly {
        let width = scene.deform_net.input_width();
        let pe = cfg.encoding();
        let pw = pe.width();
        if pw + conditioning.len() != width {
            return Err(Error::Shape(format!(
                "deformation network takes {width} inputs, got {}",
                pw + conditioning.len()
            )));
        }
        let mut input = vec![0.0; n * blocks * width];
        for (i, g) in geoms.iter().enumerate() {
            deform_input(scene, &g.x, conditioning, &mut input[i * width..(i + 1) * width]);
            for k in 0..t {
                let row = ((k + 1) * n + i) * width;
                pe.encode_tangent(&g.x, &axis(k), &mut input[row..row + pw]);
            }
        }
        Some(scene.deform_net.forward(&input, n, t)?)
    } else {
        None
    };

    let mut points = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    let mut dirs = Vec::with_capacity(if tangents { n } else { 0 });
    for (i, g) in geoms.iter().enumerate() {
        let d = deform.as_ref().map_or(Vec3::zeros(), |c| {
            let o = &c.primal()[3 * i..3 * i + 3];
            Vec3::new(o[0], o[1], o[2])
        });
        points.push(g.skinned + d);
        delta.push(d);
        if tangents {
            dirs.push(std::array::from_fn(|k| {
                let dt = deform.as_ref().map_or(Vec3::zeros(), |c| {
                    let o = &c.tangent(k)[3 * i..3 * i + 3];
                    Vec3::new(o[0], o[1], o[2])
                });
                g.jacobian.column(k).into_owned() + dt
            }));
        }
    }

    let (feed_prior, add_prior) = prior_usage(cfg.sdf_scheme);
    let mut prior = vec![0.0; n];
    let mut prior_dot = vec![[0.0; 3]; n];
    let mut prior_grad_canonical = Vec::new();
    if cfg.sdf_scheme == SdfScheme::CanonicalResidual {
        let index = posed
            .ok_or_else(|| Error::Parameter("canonical-residual scheme needs the posed body".into()))?
            .canonical_index()?;
        for i in 0..n {
            let sd = index.signed_distance_with_gradient(&points[i])?;
            prior[i] = sd.distance;
            if tangents {
                prior_dot[i] = std::array::from_fn(|k| sd.gradient.dot(&dirs[i][k]));
            }
            prior_grad_canonical.push(sd.gradient);
        }
    } else if feed_prior {
        for (i, g) in geoms.iter().enumerate() {
            prior[i] = g.prior;
            prior_dot[i] = [g.prior_gradient.x, g.prior_gradient.y, g.prior_gradient.z];
        }
    }

    let c = scene.triplane.channels();
    let w = c + 1;
    let mut sdf_in = vec![0.0; n * blocks * w];
    let mut tangent_buf = vec![0.0; t * c];
    for i in 0..n {
        let row = &mut sdf_in[i * w..(i + 1) * w];
        let dir_list: &[Vec3] = if tangents { &dirs[i] } else { &[] };
        scene.triplane.sample_into(&points[i], dir_list, &mut row[..c], &mut tangent_buf);
        row[c] = prior[i];
        for k in 0..t {
            let r = ((k + 1) * n + i) * w;
            sdf_in[r..r + c].copy_from_slice(&tangent_buf[k * c..(k + 1) * c]);
            sdf_in[r + c] = prior_dot[i][k];
        }
    }
    let sdf_cache = scene.sdf_net.forward(&sdf_in, n, t)?;
    let add = if add_prior { 1.0 } else { 0.0 };
    let sdf: Vec<f64> = (0..n).map(|i| add * prior[i] + sdf_cache.primal()[i]).collect();
    let sdf_grad = if tangents {
        (0..n)
            .map(|i| Vec3::from_fn(|k, _| add * prior_dot[i][k] + sdf_cache.tangent(k)[i]))
            .collect()
    } else {
        Vec::new()
    };

    let (color, color_cache) = if with_color {
        let mut feat = vec![0.0; n * c];
        for i in 0..n {
            feat[i * c..(i + 1) * c].copy_from_slice(&sdf_in[i * w..i * w + c]);
        }
        let cache = scene.color_net.forward(&feat, n, 0)?;
        let rgb = cache.output().chunks(3).map(|o| [o[0], o[1], o[2]]).collect();
        (rgb, Some(cache))
    } else {
        (Vec::new(), None)
    };

    Ok(FieldForward {
        rows: n,
        tangents,
        points,
        delta,
        sdf,
        sdf_grad,
        color,
        dirs,
        prior_grad_canonical,
        deform,
        sdf_cache,
        color_cache,
    })
}

/// Accumulates parameter gradients of `Σ adj · outputs` into `grad`.
pub fn field_backward(
    scene: &Scene,
    geoms: &[SampleGeometry],
    fwd: &FieldForward,
    adj: &FieldAdjoint,
    grad: &mut SceneGrad,
) -> Result<()> {
    let n = fwd.rows;
    if geoms.len() != n {
        return Err(Error::Shape("field backward called with a different batch".into()));
    }
    let t = if fwd.tangents { 3 } else { 0 };
    let blocks = 1 + t;
    let cfg = &scene.config;
    let (_, add_prior) = prior_usage(cfg.sdf_scheme);
    let add = if add_prior { 1.0 } else { 0.0 };
    let canonical = cfg.sdf_scheme == SdfScheme::CanonicalResidual;

    let mut adj_g = vec![0.0; n * blocks];
    if !adj.sdf.is_empty() {
        adj_g[..n].copy_from_slice(&adj.sdf);
    }
    if t > 0 && !adj.sdf_grad.is_empty() {
        for i in 0..n {
            for k in 0..3 {
                adj_g[(k + 1) * n + i] = adj.sdf_grad[i][k];
            }
        }
    }
    let adj_in = scene.sdf_net.backward(&fwd.sdf_cache, &adj_g, &mut grad.sdf)?;
    let c = scene.triplane.channels();
    let w = c + 1;

    let adj_color_in = match (&fwd.color_cache, adj.color.is_empty()) {
        (Some(cache), false) => {
            let flat: Vec<f64> = adj.color.iter().flatten().copied().collect();
            Some(scene.color_net.backward(cache, &flat, &mut grad.color)?)
        }
        _ => None,
    };

    let mut adj_points = vec![Vec3::zeros(); n];
    let mut adj_dirs = vec![[Vec3::zeros(); 3]; if t > 0 { n } else { 0 }];
    let mut adj_f = vec![0.0; c];
    let mut adj_ft = vec![0.0; t * c];
    for i in 0..n {
        adj_f.copy_from_slice(&adj_in[i * w..i * w + c]);
        if let Some(ac) = &adj_color_in {
            adj_f.iter_mut().zip(&ac[i * c..(i + 1) * c]).for_each(|(a, b)| *a += b);
        }
        for k in 0..t {
            let r = ((k + 1) * n + i) * w;
            adj_ft[k * c..(k + 1) * c].copy_from_slice(&adj_in[r..r + c]);
        }
        let dir_list: &[Vec3] = if t > 0 { &fwd.dirs[i] } else { &[] };
        let (gx, gd) = scene
            .triplane
            .backward(&fwd.points[i], dir_list, &adj_f, &adj_ft, &mut grad.triplane);
        adj_points[i] += gx;
        for k in 0..t {
            adj_dirs[i][k] += gd[k];
        }
        if canonical {
            let gc = fwd.prior_grad_canonical[i];
            let a0 = adj.sdf.get(i).copied().unwrap_or(0.0) * add + adj_in[i * w + c];
            adj_points[i] += gc * a0;
            for k in 0..t {
                let ak = adj.sdf_grad.get(i).map_or(0.0, |g| g[k]) * add + adj_in[((k + 1) * n + i) * w + c];
                adj_dirs[i][k] += gc * ak;
            }
        }
    }

    if let Some(cache) = &fwd.deform {
        let mut adj_d = vec![0.0; n * blocks * 3];
        for i in 0..n {
            let mut a = adj_points[i];
            if let Some(d) = adj.delta.get(i) {
                a += d;
            }
            adj_d[3 * i..3 * i + 3].copy_from_slice(a.as_slice());
            for k in 0..t {
                let r = 3 * ((k + 1) * n + i);
                adj_d[r..r + 3].copy_from_slice(adj_dirs[i][k].as_slice());
            }
        }
        let adj_input = scene.deform_net.backward(cache, &adj_d, &mut grad.deform)?;
        let width = scene.deform_net.input_width();
        let pw = cfg.encoding().width();
        let sd = scene.style.len();
        for i in 0..n {
            let row = &adj_input[i * width + pw..i * width + pw + sd];
            grad.style.iter_mut().zip(row).for_each(|(g, a)| *g += a);
        }
    }
    Ok(())
}

/// Color and signed distance at a canonical point for a given prior value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub color: [f64; 3],
    pub sdf: f64,
}

/// `f = MLP_f(F(x̄))`, `d = d_o + MLP_d(F(x̄), d_o)` (per the scene's SDF scheme).
pub fn field_eval(scene: &Scene, point: &Vec3, prior: f64) -> Result<FieldSample> {
    if !point.iter().all(|v| v.is_finite()) || !prior.is_finite() {
        return Err(Error::NonFinite("field query"));
    }
    let (feed, add) = prior_usage(scene.config.sdf_scheme);
    let features = scene.triplane.sample(point);
    let mut input = features.clone();
    input.push(if feed { prior } else { 0.0 });
    let g = scene.sdf_net.eval(&input)?[0];
    let rgb = scene.color_net.eval(&features)?;
    Ok(FieldSample {
        color: [rgb[0], rgb[1], rgb[2]],
        sdf: if add { prior + g } else { g },
    })
}

/// `∇_x d` at one observation-space sample.
pub fn field_gradient(
    scene: &Scene,
    geom: &SampleGeometry,
    conditioning: &[f64],
    posed: Option<&PosedBody>,
) -> Result<Vec3> {
    let fwd = field_forward(scene, std::slice::from_ref(geom), conditioning, posed, true, false)?;
    Ok(fwd.sdf_grad[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{generate_test_body, BodyParams, BodySpec, TemplateBody};
    use crate::canonical::sample_geometry;
    use crate::field::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn body() -> TemplateBody {
        generate_test_body(&BodySpec {
            resolution: 32,
            ..BodySpec::default()
        })
        .unwrap()
    }

    fn scene(body: &TemplateBody, scheme: SdfScheme, seed: u64) -> Scene {
        let cfg = ModelConfig {
            triplane_resolution: 8,
            triplane_channels: 4,
            style_dim: 3,
            deform_hidden: 8,
            deform_layers: 2,
            decoder_hidden: 8,
            pe_frequencies: 2,
            sdf_scheme: scheme,
            ..ModelConfig::default()
        };
        let mut s = Scene::new(cfg, body, seed).unwrap();
        // wake up the zero-initialized output layers
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for net in [&mut s.sdf_net, &mut s.deform_net] {
            let l = net.layers_mut().last_mut().unwrap();
            l.weight.iter_mut().for_each(|w| *w = rng.random_range(-0.05..0.05));
            l.bias.iter_mut().for_each(|w| *w = rng.random_range(-0.01..0.01));
        }
        s
    }

    #[test]
    fn zero_init_reproduces_the_prior() {
        let body = body();
        let s = Scene::new(ModelConfig::default(), &body, 0).unwrap();
        for d in [-0.3, 0.0, 0.05] {
            let out = field_eval(&s, &Vec3::new(0.1, 1.0, 0.0), d).unwrap();
            assert_eq!(out.sdf, d);
            assert!(out.color.iter().all(|c| (0.0..=1.0).contains(c)));
        }
        assert_eq!(
            field_eval(&s, &Vec3::new(0.1, 1.0, 0.0), 0.1).unwrap(),
            field_eval(&s, &Vec3::new(0.1, 1.0, 0.0), 0.1).unwrap()
        );
    }

    #[test]
    fn zero_init_gradient_is_the_prior_gradient() {
        let body = body();
        let s = Scene::new(ModelConfig::default(), &body, 0).unwrap();
        let p = BodyParams::for_body(&body);
        let posed = PosedBody::new(&body, &p).unwrap();
        let cond = s.conditioning(&p).unwrap();
        let g = sample_geometry(&Vec3::new(0.3, 1.2, 0.1), &posed, &s).unwrap();
        let grad = field_gradient(&s, &g, &cond, Some(&posed)).unwrap();
        assert_eq!(grad, g.prior_gradient);
        assert!((grad.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_residual_with_frozen_prior_has_zero_gradient() {
        let body = body();
        let mut s = scene(&body, SdfScheme::ObservationRaw, 4);
        // make MLP_d ignore its input entirely
        let first = &mut s.sdf_net.layers_mut()[0];
        first.weight.iter_mut().for_each(|w| *w = 0.0);
        let p = BodyParams::for_body(&body);
        let posed = PosedBody::new(&body, &p).unwrap();
        let cond = s.conditioning(&p).unwrap();
        let mut g = sample_geometry(&Vec3::new(0.3, 1.2, 0.1), &posed, &s).unwrap();
        g.prior_gradient = Vec3::zeros();
        let grad = field_gradient(&s, &g, &cond, Some(&posed)).unwrap();
        assert_eq!(grad, Vec3::zeros());
    }

    fn sdf_at(s: &Scene, posed: &PosedBody, cond: &[f64], x: &Vec3) -> f64 {
        let g = sample_geometry(x, posed, s).unwrap();
        field_forward(s, &[g], cond, Some(posed), false, false).unwrap().sdf[0]
    }

    #[test]
    fn spatial_gradient_matches_differences() {
        let body = body();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = BodyParams::for_body(&body);
        p.theta[5] = [0.0, 0.0, 0.5];
        p.theta[0] = [0.1, 0.2, 0.0];
        for scheme in [SdfScheme::ObservationResidual, SdfScheme::ObservationRaw, SdfScheme::NoPrior] {
            let s = scene(&body, scheme, 7);
            let posed = PosedBody::new(&body, &p).unwrap();
            let cond = s.conditioning(&p).unwrap();
            let mut checked = 0;
            while checked < 20 {
                let v = posed.mesh().vertices()[rng.random_range(0..body.vertices.len())];
                let x = v + Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
                let g = sample_geometry(&x, &posed, &s).unwrap();
                let h = 1e-6;
                // skip samples whose nearest vertex or region flips inside the stencil
                let stable = (0..3).all(|k| {
                    let mut e = Vec3::zeros();
                    e[k] = h;
                    let a = sample_geometry(&(x + e), &posed, &s).unwrap();
                    let b = sample_geometry(&(x - e), &posed, &s).unwrap();
                    a.jacobian == g.jacobian && b.jacobian == g.jacobian && ((a.prior - b.prior) / (2.0 * h) - g.prior_gradient[k]).abs() < 1e-5
                });
                if !stable {
                    continue;
                }
                let grad = field_gradient(&s, &g, &cond, Some(&posed)).unwrap();
                for k in 0..3 {
                    let mut e = Vec3::zeros();
                    e[k] = h;
                    let fd = (sdf_at(&s, &posed, &cond, &(x + e)) - sdf_at(&s, &posed, &cond, &(x - e))) / (2.0 * h);
                    assert!((fd - grad[k]).abs() <= 1e-3 * grad.norm().max(1e-3), "{scheme:?}: {fd} vs {}", grad[k]);
                }
                checked += 1;
            }
        }
    }
}
