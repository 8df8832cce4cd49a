//! Observation-to-canonical mapping: inverse skinning guided by the posed body mesh,
//! plus the learned residual deformation.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::body::{pose_vertices, BodyParams, JointTransforms, SkinWeights, TemplateBody};
use crate::error::{Error, Result};
use crate::field::Scene;
use crate::geometry::{SignedDistance, SpatialIndex, TriMesh};
use crate::math::{Mat3, Rigid, Vec3};

/// Below this |det| the blended skinning matrix is treated as singular.
const SINGULAR_DET: f64 = 1e-8;
/// Softening of inverse-distance blending when `k > 1`, meters.
const KNN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeformationScheme {
    /// Inverse skinning followed by the residual network.
    Combined,
    SkinningOnly,
    ResidualOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InverseMode {
    /// Invert the blended matrix `Σ s_j [R_j | t_j]`.
    BlendedMatrix,
    /// Blend the per-joint inverses `Σ s_j [R_j | t_j]⁻¹`.
    PerJoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorDistance {
    /// Exact point-to-surface distance.
    Surface,
    /// Distance to the nearest mesh vertex.
    NearestVertex,
}

/// The body under one parameter set, with spatial indices over its posed and canonical meshes.
#[derive(Debug)]
pub struct PosedBody {
    pub params: BodyParams,
    /// Shaped canonical vertices.
    pub shaped: Vec<Vec3>,
    pub transforms: JointTransforms,
    pub skin_weights: SkinWeights,
    pub index: SpatialIndex,
    triangles: Vec<[u32; 3]>,
    canonical: OnceLock<Result<SpatialIndex, String>>,
}

impl PosedBody {
    pub fn new(body: &TemplateBody, params: &BodyParams) -> Result<Self> {
        let posed = pose_vertices(body, params)?;
        let mesh = TriMesh::new(posed.posed, body.triangles.clone())?;
        Ok(PosedBody {
            params: params.clone(),
            shaped: posed.shaped,
            transforms: posed.transforms,
            skin_weights: body.skin_weights.clone(),
            index: SpatialIndex::build(mesh)?,
            triangles: body.triangles.clone(),
            canonical: OnceLock::new(),
        })
    }

    pub fn mesh(&self) -> &TriMesh {
        self.index.mesh()
    }

    /// World transform of the root joint (posed frame of the body).
    pub fn root_frame(&self) -> Rigid {
        let g = self.transforms.transforms[0];
        Rigid::new(g.rotation, self.transforms.positions[0])
    }

    /// Index over the shaped canonical mesh, built on first use.
    pub fn canonical_index(&self) -> Result<&SpatialIndex> {
        self.canonical
            .get_or_init(|| {
                TriMesh::new(self.shaped.clone(), self.triangles.clone())
                    .and_then(SpatialIndex::build)
                    .map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| Error::Invariant(e.clone()))
    }

    /// Body prior `d_o(x)` under the selected distance.
    pub fn prior_distance(&self, x: &Vec3, mode: PriorDistance) -> Result<SignedDistance> {
        match mode {
            PriorDistance::Surface => self.index.signed_distance_with_gradient(x),
            PriorDistance::NearestVertex => self.index.signed_vertex_distance(x),
        }
    }
}

/// Skinning weights transferred from the nearest posed vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinningSample {
    pub point: Vec3,
    pub weights: Vec<f64>,
    pub vertices: Vec<usize>,
    pub coefficients: Vec<f64>,
}

pub fn skinning_sample(posed: &PosedBody, x: &Vec3, k: usize) -> Result<SkinningSample> {
    let near = posed.index.knn_vertices(x, k)?;
    let coefficients: Vec<f64> = if near.len() == 1 {
        vec![1.0]
    } else {
        let raw: Vec<f64> = near.iter().map(|(_, d)| 1.0 / (KNN_EPS + d)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|r| r / s).collect()
    };
    let j = posed.skin_weights.joints();
    let mut weights = vec![0.0; j];
    for ((v, _), c) in near.iter().zip(&coefficients) {
        weights.iter_mut().zip(posed.skin_weights.row(*v)).for_each(|(w, s)| *w += c * s);
    }
    if near.len() > 1 {
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
    }
    Ok(SkinningSample {
        point: *x,
        weights,
        vertices: near.iter().map(|(v, _)| *v).collect(),
        coefficients,
    })
}

/// Inverse-skinned point `x̄′` and its Jacobian with respect to `x` (weights held fixed).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseSkin {
    pub point: Vec3,
    pub jacobian: Mat3,
}

fn per_joint_inverse(x: &Vec3, weights: &[f64], transforms: &JointTransforms) -> InverseSkin {
    let mut point = Vec3::zeros();
    let mut jacobian = Mat3::zeros();
    for (w, g) in weights.iter().zip(&transforms.transforms) {
        if *w != 0.0 {
            let rt = g.rotation.transpose();
            point += rt * (x - g.translation) * *w;
            jacobian += rt * *w;
        }
    }
    InverseSkin { point, jacobian }
}

pub fn inverse_skin_weights(x: &Vec3, weights: &[f64], transforms: &JointTransforms, mode: InverseMode) -> InverseSkin {
    if mode == InverseMode::BlendedMatrix {
        let (a, b) = transforms.blend(weights);
        if a.determinant().abs() >= SINGULAR_DET {
            if let Some(inv) = a.try_inverse() {
                return InverseSkin {
                    point: inv * (x - b),
                    jacobian: inv,
                };
            }
        }
    }
    per_joint_inverse(x, weights, transforms)
}

pub fn inverse_skin(x: &Vec3, posed: &PosedBody, k: usize, mode: InverseMode) -> Result<InverseSkin> {
    let s = skinning_sample(posed, x, k)?;
    Ok(inverse_skin_weights(x, &s.weights, &posed.transforms, mode))
}

/// Deformation-network input row for `x` with precomputed conditioning `[w, θ, β]`.
pub fn deform_input(scene: &Scene, x: &Vec3, conditioning: &[f64], out: &mut [f64]) {
    let pe = scene.config.encoding();
    let w = pe.width();
    pe.encode(x, &mut out[..w]);
    out[w..].copy_from_slice(conditioning);
}

/// `Δx̄ = MLP(PE(x), w, θ, β)`.
pub fn residual_deform(x: &Vec3, scene: &Scene, params: &BodyParams) -> Result<Vec3> {
    if !x.iter().all(|c| c.is_finite()) {
        return Err(Error::NonFinite("deformation query point"));
    }
    let cond = scene.conditioning(params)?;
    let width = scene.config.encoding().width() + cond.len();
    if width != scene.deform_net.input_width() {
        return Err(Error::Shape(format!(
            "deformation network takes {} inputs, encoded width is {width}",
            scene.deform_net.input_width()
        )));
    }
    let mut input = vec![0.0; width];
    deform_input(scene, x, &cond, &mut input);
    let out = scene.deform_net.eval(&input)?;
    Ok(Vec3::new(out[0], out[1], out[2]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalMapResult {
    /// `x̄′`, the inverse-skinned point (equal to `x` when skinning is disabled).
    pub skinned: Vec3,
    pub residual: Vec3,
    /// `x̄ = x̄′ + Δx̄`
    pub point: Vec3,
}

pub fn canonical_map(x: &Vec3, posed: &PosedBody, scene: &Scene) -> Result<CanonicalMapResult> {
    let cfg = &scene.config;
    let skinned = match cfg.deformation {
        DeformationScheme::ResidualOnly => *x,
        _ => inverse_skin(x, posed, cfg.knn, cfg.inverse)?.point,
    };
    let residual = match cfg.deformation {
        DeformationScheme::SkinningOnly => Vec3::zeros(),
        _ => residual_deform(x, scene, &posed.params)?,
    };
    Ok(CanonicalMapResult {
        skinned,
        residual,
        point: skinned + residual,
    })
}

/// [`canonical_map`] over many points, with one batched pass through the deformation network.
pub fn canonical_map_points(points: &[Vec3], posed: &PosedBody, scene: &Scene) -> Result<Vec<CanonicalMapResult>> {
    let cfg = &scene.config;
    if !points.iter().flat_map(|x| x.iter()).all(|c| c.is_finite()) {
        return Err(Error::NonFinite("deformation query point"));
    }
    let skinned = points
        .iter()
        .map(|x| match cfg.deformation {
            DeformationScheme::ResidualOnly => Ok(*x),
            _ => Ok(inverse_skin(x, posed, cfg.knn, cfg.inverse)?.point),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut residual = vec![Vec3::zeros(); points.len()];
    if cfg.deformation != DeformationScheme::SkinningOnly && !points.is_empty() {
        let cond = scene.conditioning(&posed.params)?;
        let width = scene.config.encoding().width() + cond.len();
        if width != scene.deform_net.input_width() {
            return Err(Error::Shape(format!(
                "deformation network takes {} inputs, encoded width is {width}",
                scene.deform_net.input_width()
            )));
        }
        let mut input = vec![0.0; width * points.len()];
        for (x, row) in points.iter().zip(input.chunks_exact_mut(width)) {
            deform_input(scene, x, &cond, row);
        }
        let cache = scene.deform_net.forward(&input, points.len(), 0)?;
        for (r, o) in residual.iter_mut().zip(cache.output().chunks_exact(3)) {
            *r = Vec3::new(o[0], o[1], o[2]);
        }
    }
    Ok(skinned
        .into_iter()
        .zip(residual)
        .map(|(skinned, residual)| CanonicalMapResult {
            skinned,
            residual,
            point: skinned + residual,
        })
        .collect())
}

/// Parameter-independent geometry of one observation-space sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleGeometry {
    pub x: Vec3,
    /// `x̄′` and `∂x̄′/∂x`
    pub skinned: Vec3,
    pub jacobian: Mat3,
    /// Posed-body prior `d_o(x)` and its gradient.
    pub prior: f64,
    pub prior_gradient: Vec3,
}

pub fn sample_geometry(x: &Vec3, posed: &PosedBody, scene: &Scene) -> Result<SampleGeometry> {
    let cfg = &scene.config;
    let sd = posed.prior_distance(x, cfg.prior_distance)?;
    let inv = match cfg.deformation {
        DeformationScheme::ResidualOnly => InverseSkin {
            point: *x,
            jacobian: Mat3::identity(),
        },
        _ => inverse_skin(x, posed, cfg.knn, cfg.inverse)?,
    };
    Ok(SampleGeometry {
        x: *x,
        skinned: inv.point,
        jacobian: inv.jacobian,
        prior: sd.distance,
        prior_gradient: sd.gradient,
    })
}

/// Only the body prior, for samples outside the field shell.
pub fn prior_only(x: &Vec3, posed: &PosedBody, scene: &Scene) -> Result<f64> {
    Ok(posed.prior_distance(x, scene.config.prior_distance)?.distance)
}

/// A sample either far from the body (prior only) or inside the field shell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShellSample {
    Outside(f64),
    Inside(SampleGeometry),
}

impl ShellSample {
    pub fn prior(&self) -> f64 {
        match self {
            ShellSample::Outside(d) => *d,
            ShellSample::Inside(g) => g.prior,
        }
    }
}

/// Like [`sample_geometry`], but skips inverse skinning when `|d_o|` exceeds the shell width.
pub fn shell_geometry(x: &Vec3, posed: &PosedBody, scene: &Scene) -> Result<ShellSample> {
    let cfg = &scene.config;
    let sd = posed.prior_distance(x, cfg.prior_distance)?;
    if sd.distance.abs() > cfg.shell {
        return Ok(ShellSample::Outside(sd.distance));
    }
    let inv = match cfg.deformation {
        DeformationScheme::ResidualOnly => InverseSkin {
            point: *x,
            jacobian: Mat3::identity(),
        },
        _ => inverse_skin(x, posed, cfg.knn, cfg.inverse)?,
    };
    Ok(ShellSample::Inside(SampleGeometry {
        x: *x,
        skinned: inv.point,
        jacobian: inv.jacobian,
        prior: sd.distance,
        prior_gradient: sd.gradient,
    }))
}
