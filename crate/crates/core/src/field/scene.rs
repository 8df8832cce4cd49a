use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::encoding::PositionalEncoding;
use super::mlp::{Activation, Mlp, MlpGrad};
use super::triplane::TriPlane;
use crate::body::{BodyParams, TemplateBody};
use crate::canonical::{DeformationScheme, InverseMode, PriorDistance};
use crate::error::{Error, Result};
use crate::math::Vec3;

/// How the final signed distance relates to the body prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdfScheme {
    /// `d = d_o(x) + MLP_d(F, d_o(x))` with the posed-body distance.
    ObservationResidual,
    /// `d = d_c(x̄) + MLP_d(F, d_c(x̄))` with the distance to the canonical body.
    CanonicalResidual,
    /// `d = MLP_d(F, d_o(x))`: the prior is an input only.
    ObservationRaw,
    /// `d = MLP_d(F, 0)`: no body prior at all.
    NoPrior,
}

/// Architecture and canonical-mapping settings; everything a checkpoint needs to rebuild a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub triplane_resolution: usize,
    pub triplane_channels: usize,
    pub triplane_init_std: f64,
    /// Relative growth of the canonical box beyond the body bounds, per axis.
    pub box_margin: f64,
    pub style_dim: usize,
    pub pe_frequencies: usize,
    pub deform_hidden: usize,
    pub deform_layers: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    pub alpha_init: f64,
    pub sdf_scheme: SdfScheme,
    pub deformation: DeformationScheme,
    pub inverse: InverseMode,
    pub prior_distance: PriorDistance,
    /// Nearest posed vertices that contribute skinning weights.
    pub knn: usize,
    /// Samples with `|d_o|` beyond this distance (meters) take `d = d_o` without querying the field.
    pub shell: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            triplane_resolution: 64,
            triplane_channels: 32,
            triplane_init_std: 0.1,
            box_margin: 0.15,
            style_dim: 64,
            pe_frequencies: 6,
            deform_hidden: 128,
            deform_layers: 4,
            decoder_hidden: 64,
            decoder_layers: 2,
            alpha_init: 5e-4,
            sdf_scheme: SdfScheme::ObservationResidual,
            deformation: DeformationScheme::Combined,
            inverse: InverseMode::BlendedMatrix,
            prior_distance: PriorDistance::Surface,
            knn: 1,
            shell: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("triplane_resolution", self.triplane_resolution >= 2),
            ("triplane_channels", self.triplane_channels >= 1),
            ("style_dim", self.style_dim >= 1),
            ("deform_hidden", self.deform_hidden >= 1),
            ("deform_layers", self.deform_layers >= 1),
            ("decoder_hidden", self.decoder_hidden >= 1),
            ("decoder_layers", self.decoder_layers >= 1),
            ("knn", self.knn >= 1),
            ("alpha_init", self.alpha_init > 0.0 && self.alpha_init.is_finite()),
            ("triplane_init_std", self.triplane_init_std >= 0.0),
            ("box_margin", self.box_margin >= 0.0),
            ("shell", self.shell > 0.0),
        ];
        match positive.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(Error::Parameter(format!("model setting {name} is out of range"))),
            None => Ok(()),
        }
    }

    pub fn encoding(&self) -> PositionalEncoding {
        PositionalEncoding::new(self.pe_frequencies, true)
    }
}

/// Optimizer learning-rate group of a parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    TriPlane,
    Network,
    Style,
    Alpha,
}

/// Named view of one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamBlock<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Everything the fitter optimizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: ModelConfig,
    pub joints: usize,
    pub shapes: usize,
    pub triplane: TriPlane,
    pub color_net: Mlp,
    pub sdf_net: Mlp,
    pub deform_net: Mlp,
    pub style: Vec<f64>,
    pub log_alpha: f64,
}

fn decoder_widths(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(std::iter::repeat_n(hidden, layers))
        .chain(std::iter::once(output))
        .collect()
}

/// Rounds to the nearest single-precision value, the storage precision of checkpoints.
#[inline]
pub fn round_to_storage(v: f64) -> f64 {
    v as f32 as f64
}

impl Scene {
    /// Fresh scene for `body`; the canonical box is the template's bounds grown by `box_margin`.
    pub fn new(config: ModelConfig, body: &TemplateBody, seed: u64) -> Result<Self> {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &body.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        if body.vertices.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let grow = (hi - lo) * (config.box_margin / 2.0);
        Self::with_bounds(config, lo - grow, hi + grow, body.joint_count(), body.shape_count(), seed)
    }

    pub fn with_bounds(config: ModelConfig, lo: Vec3, hi: Vec3, joints: usize, shapes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.triplane_channels;
        let triplane = TriPlane::random(
            config.triplane_resolution,
            c,
            lo,
            hi,
            config.triplane_init_std.max(0.0),
            &mut rng,
        )?;
        let h = config.decoder_hidden;
        let color_net = Mlp::new(
            &decoder_widths(c, h, config.decoder_layers, 3),
            Activation::Softplus,
            Activation::Sigmoid,
            &mut rng,
        )?;
        let mut sdf_net = Mlp::new(
            &decoder_widths(c + 1, h, config.decoder_layers, 1),
            Activation::Softplus,
            Activation::Identity,
            &mut rng,
        )?;
        sdf_net.zero_output_layer();
        let deform_in = config.encoding().width() + config.style_dim + 3 * joints + shapes;
        let mut deform_net = Mlp::new(
            &decoder_widths(deform_in, config.deform_hidden, config.deform_layers, 3),
            Activation::Softplus,
            Activation::Identity,
            &mut rng,
        )?;
        deform_net.zero_output_layer();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let style = (0..config.style_dim).map(|_| normal.sample(&mut rng)).collect();
        let log_alpha = config.alpha_init.ln();
        let mut scene = Scene {
            config,
            joints,
            shapes,
            triplane,
            color_net,
            sdf_net,
            deform_net,
            style,
            log_alpha,
        };
        scene.round_parameters();
        Ok(scene)
    }

    /// Density sharpness; positive for every finite `log_alpha`.
    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp().max(f64::MIN_POSITIVE)
    }

    /// `[w, θ, β]`, the non-positional part of every deformation-network input.
    pub fn conditioning(&self, params: &BodyParams) -> Result<Vec<f64>> {
        if params.theta.len() != self.joints || params.beta.len() != self.shapes {
            return Err(Error::Shape(format!(
                "scene expects {} joints and {} shapes, got {} and {}",
                self.joints,
                self.shapes,
                params.theta.len(),
                params.beta.len()
            )));
        }
        Ok(self.style.iter().copied().chain(params.flatten()).collect())
    }

    fn mlp_blocks<'a>(prefix: &str, net: &'a Mlp, out: &mut Vec<ParamBlock<'a>>) {
        for (i, l) in net.layers().iter().enumerate() {
            out.push(ParamBlock {
                name: format!("{prefix}.{i}.weight"),
                group: ParamGroup::Network,
                shape: vec![l.outputs, l.inputs],
                data: &l.weight,
            });
            out.push(ParamBlock {
                name: format!("{prefix}.{i}.bias"),
                group: ParamGroup::Network,
                shape: vec![l.outputs],
                data: &l.bias,
            });
        }
    }

    /// All parameter tensors in a fixed order.
    pub fn blocks(&self) -> Vec<ParamBlock<'_>> {
        let r = self.triplane.resolution();
        let c = self.triplane.channels();
        let mut out = Vec::new();
        for (name, plane) in ["triplane.xy", "triplane.xz", "triplane.yz"].iter().zip(&self.triplane.planes) {
            out.push(ParamBlock {
                name: (*name).into(),
                group: ParamGroup::TriPlane,
                shape: vec![r, r, c],
                data: plane,
            });
        }
        Self::mlp_blocks("color", &self.color_net, &mut out);
        Self::mlp_blocks("sdf", &self.sdf_net, &mut out);
        Self::mlp_blocks("deform", &self.deform_net, &mut out);
        out.push(ParamBlock {
            name: "style".into(),
            group: ParamGroup::Style,
            shape: vec![self.style.len()],
            data: &self.style,
        });
        out.push(ParamBlock {
            name: "log_alpha".into(),
            group: ParamGroup::Alpha,
            shape: vec![1],
            data: std::slice::from_ref(&self.log_alpha),
        });
        out
    }

    /// Mutable views in the order of [`Scene::blocks`].
    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for p in &mut self.triplane.planes {
            out.push(p);
        }
        for net in [&mut self.color_net, &mut self.sdf_net, &mut self.deform_net] {
            for l in net.layers_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.style);
        out.push(std::slice::from_mut(&mut self.log_alpha));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.data.len()).sum()
    }

    /// Snaps every parameter to storage precision.
    pub fn round_parameters(&mut self) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v = round_to_storage(*v));
        }
    }

    /// Euclidean distance between the parameter vectors of two scenes of equal shape.
    pub fn parameter_distance(&self, other: &Scene) -> f64 {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .flat_map(|(a, b)| a.data.iter().zip(b.data).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradient buffer mirroring [`Scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrad {
    pub triplane: [Vec<f64>; 3],
    pub color: MlpGrad,
    pub sdf: MlpGrad,
    pub deform: MlpGrad,
    pub style: Vec<f64>,
    pub log_alpha: f64,
}

impl SceneGrad {
    pub fn zeros(scene: &Scene) -> Self {
        SceneGrad {
            triplane: scene.triplane.zero_grad(),
            color: MlpGrad::zeros(&scene.color_net),
            sdf: MlpGrad::zeros(&scene.sdf_net),
            deform: MlpGrad::zeros(&scene.deform_net),
            style: vec![0.0; scene.style.len()],
            log_alpha: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &SceneGrad) {
        for (a, b) in self.triplane.iter_mut().zip(&other.triplane) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.color.add_assign(&other.color);
        self.sdf.add_assign(&other.sdf);
        self.deform.add_assign(&other.deform);
        self.style.iter_mut().zip(&other.style).for_each(|(x, y)| *x += y);
        self.log_alpha += other.log_alpha;
    }

    /// Views in the order of [`Scene::blocks`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.triplane.iter().map(Vec::as_slice).collect();
        for g in [&self.color, &self.sdf, &self.deform] {
            for (w, b) in g.weight.iter().zip(&g.bias) {
                out.push(w);
                out.push(b);
            }
        }
        out.push(&self.style);
        out.push(std::slice::from_ref(&self.log_alpha));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{generate_test_body, BodySpec};

    fn scene() -> Scene {
        let body = generate_test_body(&BodySpec {
            resolution: 24,
            ..BodySpec::default()
        })
        .unwrap();
        let config = ModelConfig {
            triplane_resolution: 8,
            triplane_channels: 4,
            style_dim: 8,
            deform_hidden: 16,
            decoder_hidden: 8,
            ..ModelConfig::default()
        };
        Scene::new(config, &body, 3).unwrap()
    }

    #[test]
    fn blocks_and_gradients_align() {
        let s = scene();
        let g = SceneGrad::zeros(&s);
        let (a, b) = (s.blocks(), g.blocks());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data.len(), y.len());
            assert_eq!(x.shape.iter().product::<usize>(), y.len());
        }
        let mut s2 = s.clone();
        assert_eq!(s2.blocks_mut().len(), a.len());
    }

    #[test]
    fn parameters_are_stored_at_single_precision() {
        let s = scene();
        for b in s.blocks() {
            assert!(b.data.iter().all(|&v| round_to_storage(v) == v));
        }
    }

    #[test]
    fn alpha_is_positive_for_any_log_alpha() {
        let mut s = scene();
        for la in [-1e6, -700.0, -5.0, 0.0, 3.0, 700.0] {
            s.log_alpha = la;
            assert!(s.alpha() > 0.0);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let body = generate_test_body(&BodySpec {
            resolution: 24,
            ..BodySpec::default()
        })
        .unwrap();
        let config = ModelConfig {
            knn: 0,
            ..ModelConfig::default()
        };
        assert!(Scene::new(config, &body, 0).is_err());
    }
}
