//! Parametric articulated body: shape blending, forward kinematics and linear blend skinning.

mod asset;
mod poses;
mod procedural;

pub use asset::{load_body_asset, save_body_asset, BODY_ASSET_VERSION};
pub use poses::{interpolate_keyframes, read_poses, write_poses};
pub use procedural::{generate_test_body, BodySpec, Capsule, CapsuleBody, PosedCapsules, GIRTH_RATE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TriMesh;
use crate::math::{rodrigues, to_vec3, Mat3, Rigid, Vec3};

/// Tolerance on skin-weight row sums for in-memory bodies.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

/// Default clamp on |beta_i|.
pub const DEFAULT_BETA_LIMIT: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Offset from the parent joint in the rest pose (absolute position for the root), meters.
    pub rest_offset: [f64; 3],
}

/// Topologically ordered joint hierarchy with a single root at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    joints: Vec<Joint>,
    rest_positions: Vec<Vec3>,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::Invariant("skeleton needs at least one joint".into()));
        }
        for (i, j) in joints.iter().enumerate() {
            match (i, j.parent) {
                (0, None) => {}
                (0, Some(_)) => {
                    return Err(Error::Invariant("joint 0 must be the root".into()));
                }
                (_, None) => {
                    return Err(Error::Invariant(format!(
                        "joint {i} ({}) is a second root",
                        j.name
                    )));
                }
                (_, Some(p)) if p >= i => {
                    return Err(Error::Invariant(format!(
                        "joint {i} ({}) has parent {p}; parents must precede children",
                        j.name
                    )));
                }
                _ => {}
            }
            if !j.rest_offset.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinite("joint rest offset"));
            }
        }
        let mut rest_positions: Vec<Vec3> = Vec::with_capacity(joints.len());
        for j in &joints {
            let base = j.parent.map_or(Vec3::zeros(), |p| rest_positions[p]);
            rest_positions.push(base + to_vec3(j.rest_offset));
        }
        Ok(Skeleton {
            joints,
            rest_positions,
        })
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    /// World positions of every joint in the rest pose.
    pub fn rest_positions(&self) -> &[Vec3] {
        &self.rest_positions
    }
}

/// Dense `N × J` row-stochastic skinning matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinWeights {
    joints: usize,
    data: Vec<f64>,
}

impl SkinWeights {
    pub fn from_rows(rows: &[Vec<f64>], joints: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * joints);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != joints {
                return Err(Error::Shape(format!(
                    "skin-weight row {i} has {} entries, skeleton has {joints} joints",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(SkinWeights { joints, data })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.joints.max(1)
    }

    #[inline]
    pub fn row(&self, v: usize) -> &[f64] {
        &self.data[v * self.joints..(v + 1) * self.joints]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.joints).map(<[f64]>::to_vec).collect()
    }

    /// Index of the first row violating non-negativity or unit sum by more than `tol`.
    pub fn first_invalid_row(&self, tol: f64) -> Option<usize> {
        (0..self.rows()).find(|&v| {
            let r = self.row(v);
            r.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || (r.iter().sum::<f64>() - 1.0).abs() > tol
        })
    }

    pub(crate) fn normalize_rows(&mut self) {
        let j = self.joints;
        for row in self.data.chunks_mut(j) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > WEIGHT_SUM_TOLERANCE && s > 0.0 {
                row.iter_mut().for_each(|w| *w /= s);
            }
        }
    }
}

/// Canonical-pose mesh with skeleton, skinning weights and linear shape directions.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBody {
    pub skeleton: Skeleton,
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub skin_weights: SkinWeights,
    /// `B` blend shapes, each one displacement per vertex.
    pub shape_dirs: Vec<Vec<Vec3>>,
}

impl TemplateBody {
    pub fn new(
        skeleton: Skeleton,
        vertices: Vec<Vec3>,
        triangles: Vec<[u32; 3]>,
        skin_weights: SkinWeights,
        shape_dirs: Vec<Vec<Vec3>>,
    ) -> Result<Self> {
        let body = TemplateBody {
            skeleton,
            vertices,
            triangles,
            skin_weights,
            shape_dirs,
        };
        body.validate(WEIGHT_SUM_TOLERANCE)?;
        Ok(body)
    }

    pub(crate) fn validate(&self, weight_tol: f64) -> Result<()> {
        let n = self.vertices.len();
        if self.skin_weights.joints() != self.skeleton.len() {
            return Err(Error::Shape(format!(
                "skin weights cover {} joints, skeleton has {}",
                self.skin_weights.joints(),
                self.skeleton.len()
            )));
        }
        if self.skin_weights.rows() != n {
            return Err(Error::Shape(format!(
                "{} skin-weight rows for {n} vertices",
                self.skin_weights.rows()
            )));
        }
        if let Some(v) = self.skin_weights.first_invalid_row(weight_tol) {
            return Err(Error::Invariant(format!(
                "skin-weight row {v} is not a probability vector (sum {})",
                self.skin_weights.row(v).iter().sum::<f64>()
            )));
        }
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i as usize >= n)) {
            return Err(Error::Invariant(format!("triangle {t:?} out of range for {n} vertices")));
        }
        if let Some(b) = self.shape_dirs.iter().position(|d| d.len() != n) {
            return Err(Error::Shape(format!("shape direction {b} does not cover {n} vertices")));
        }
        Ok(())
    }

    pub fn joint_count(&self) -> usize {
        self.skeleton.len()
    }

    pub fn shape_count(&self) -> usize {
        self.shape_dirs.len()
    }

    /// Canonical mesh (template vertices, no shape applied).
    pub fn mesh(&self) -> Result<TriMesh> {
        TriMesh::new(self.vertices.clone(), self.triangles.clone())
    }
}

/// Pose `theta` (axis-angle per joint, radians), shape `beta` and root translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub theta: Vec<[f64; 3]>,
    pub beta: Vec<f64>,
    #[serde(default)]
    pub root_translation: [f64; 3],
}

impl BodyParams {
    /// Rest pose, zero shape.
    pub fn rest(joints: usize, shapes: usize) -> Self {
        BodyParams {
            theta: vec![[0.0; 3]; joints],
            beta: vec![0.0; shapes],
            root_translation: [0.0; 3],
        }
    }

    pub fn for_body(body: &TemplateBody) -> Self {
        Self::rest(body.joint_count(), body.shape_count())
    }

    pub fn check_finite(&self) -> Result<()> {
        let finite = self.theta.iter().flatten().all(|c| c.is_finite())
            && self.beta.iter().all(|c| c.is_finite())
            && self.root_translation.iter().all(|c| c.is_finite());
        if finite {
            Ok(())
        } else {
            Err(Error::Parameter("body parameters contain non-finite values".into()))
        }
    }

    /// Copy with every |beta_i| clamped to `limit`.
    pub fn clamped(&self, limit: f64) -> Self {
        let mut out = self.clone();
        out.beta.iter_mut().for_each(|b| *b = b.clamp(-limit, limit));
        out
    }

    /// Pose and shape flattened as `[theta..., beta...]` (network conditioning).
    pub fn flatten(&self) -> Vec<f64> {
        self.theta.iter().flatten().copied().chain(self.beta.iter().copied()).collect()
    }

    /// Component-wise linear interpolation between two parameter sets.
    pub fn lerp(&self, other: &BodyParams, t: f64) -> Result<BodyParams> {
        if self.theta.len() != other.theta.len() || self.beta.len() != other.beta.len() {
            return Err(Error::Shape("cannot interpolate parameter sets of different sizes".into()));
        }
        let mix = |a: f64, b: f64| a + (b - a) * t;
        Ok(BodyParams {
            theta: self
                .theta
                .iter()
                .zip(&other.theta)
                .map(|(a, b)| std::array::from_fn(|k| mix(a[k], b[k])))
                .collect(),
            beta: self.beta.iter().zip(&other.beta).map(|(&a, &b)| mix(a, b)).collect(),
            root_translation: std::array::from_fn(|k| mix(self.root_translation[k], other.root_translation[k])),
        })
    }
}

/// Canonical→posed rigid map per joint, plus posed joint positions.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTransforms {
    pub transforms: Vec<Rigid>,
    pub positions: Vec<Vec3>,
}

impl JointTransforms {
    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    /// Weighted blend `(Σ s_j R_j, Σ s_j t_j)` of the joint maps.
    #[inline]
    pub fn blend(&self, weights: &[f64]) -> (Mat3, Vec3) {
        let mut a = Mat3::zeros();
        let mut b = Vec3::zeros();
        for (w, g) in weights.iter().zip(&self.transforms) {
            if *w != 0.0 {
                a += g.rotation * *w;
                b += g.translation * *w;
            }
        }
        (a, b)
    }
}

/// `vertices + Σ_b beta_b · shape_dirs[b]`.
pub fn apply_shape(body: &TemplateBody, beta: &[f64]) -> Result<Vec<Vec3>> {
    if beta.len() != body.shape_count() {
        return Err(Error::Parameter(format!(
            "{} shape coefficients for a body with {} shape directions",
            beta.len(),
            body.shape_count()
        )));
    }
    let mut out = body.vertices.clone();
    for (b, dirs) in beta.iter().zip(&body.shape_dirs) {
        if *b != 0.0 {
            out.iter_mut().zip(dirs).for_each(|(v, d)| *v += d * *b);
        }
    }
    Ok(out)
}

/// Composes per-joint rotations root to leaf; the rest pose yields identity maps.
pub fn forward_kinematics(skeleton: &Skeleton, params: &BodyParams) -> Result<JointTransforms> {
    if params.theta.len() != skeleton.len() {
        return Err(Error::Parameter(format!(
            "{} joint rotations for a skeleton with {} joints",
            params.theta.len(),
            skeleton.len()
        )));
    }
    params.check_finite()?;
    let rest = skeleton.rest_positions();
    let mut world: Vec<Rigid> = Vec::with_capacity(skeleton.len());
    for (j, joint) in skeleton.joints().iter().enumerate() {
        let local = rodrigues(&to_vec3(params.theta[j]));
        let g = match joint.parent {
            None => Rigid::new(local, rest[0] + to_vec3(params.root_translation)),
            Some(p) => {
                let parent = world[p];
                Rigid::new(
                    parent.rotation * local,
                    parent.translation + parent.rotation * to_vec3(joint.rest_offset),
                )
            }
        };
        world.push(g);
    }
    let transforms = world
        .iter()
        .zip(rest)
        .map(|(g, r)| Rigid::new(g.rotation, g.translation - g.rotation * r))
        .collect();
    Ok(JointTransforms {
        transforms,
        positions: world.iter().map(|g| g.translation).collect(),
    })
}

/// Applies `Σ_j s_j (R_j v + t_j)` to every vertex.
pub fn skin_vertices(vertices: &[Vec3], weights: &SkinWeights, transforms: &JointTransforms) -> Vec<Vec3> {
    vertices
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (a, b) = transforms.blend(weights.row(i));
            a * v + b
        })
        .collect()
}

/// Shaped and posed vertices together with the joint maps that produced them.
#[derive(Debug, Clone)]
pub struct PosedVertices {
    pub shaped: Vec<Vec3>,
    pub posed: Vec<Vec3>,
    pub transforms: JointTransforms,
}

pub fn pose_vertices(body: &TemplateBody, params: &BodyParams) -> Result<PosedVertices> {
    let shaped = apply_shape(body, &params.beta)?;
    let transforms = forward_kinematics(&body.skeleton, params)?;
    let posed = skin_vertices(&shaped, &body.skin_weights, &transforms);
    Ok(PosedVertices {
        shaped,
        posed,
        transforms,
    })
}

/// Posed mesh with the body's topology.
pub fn lbs_pose(body: &TemplateBody, params: &BodyParams) -> Result<TriMesh> {
    let posed = pose_vertices(body, params)?;
    TriMesh::new(posed.posed, body.triangles.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{axis_angle, orthonormality_error};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn chain() -> Skeleton {
        Skeleton::new(vec![
            Joint {
                name: "root".into(),
                parent: None,
                rest_offset: [0.0; 3],
            },
            Joint {
                name: "tip".into(),
                parent: Some(0),
                rest_offset: [0.0, 1.0, 0.0],
            },
        ])
        .unwrap()
    }

    fn two_joint_body(weights: Vec<Vec<f64>>, verts: Vec<Vec3>) -> TemplateBody {
        let n = verts.len();
        let shape = vec![vec![Vec3::new(0.1, 0.0, 0.0); n]];
        TemplateBody::new(
            chain(),
            verts,
            vec![],
            SkinWeights::from_rows(&weights, 2).unwrap(),
            shape,
        )
        .unwrap()
    }

    #[test]
    fn skeleton_rejects_bad_topology() {
        let mut joints = chain().joints().to_vec();
        joints[1].parent = Some(1);
        assert!(Skeleton::new(joints.clone()).is_err());
        joints[1].parent = None;
        assert!(Skeleton::new(joints).is_err());
        assert!(Skeleton::new(vec![]).is_err());
    }

    #[test]
    fn shape_blending_is_linear() {
        let body = two_joint_body(vec![vec![1.0, 0.0]; 3], vec![Vec3::zeros(), Vec3::y(), Vec3::z()]);
        assert_eq!(apply_shape(&body, &[0.0]).unwrap(), body.vertices);
        let one = apply_shape(&body, &[1.0]).unwrap();
        let two = apply_shape(&body, &[2.0]).unwrap();
        for ((v0, v1), v2) in body.vertices.iter().zip(&one).zip(&two) {
            assert_relative_eq!(v1 - v0, Vec3::new(0.1, 0.0, 0.0), epsilon = 1e-15);
            assert_relative_eq!(v2 - v0, (v1 - v0) * 2.0, epsilon = 1e-15);
        }
        assert!(matches!(apply_shape(&body, &[1.0, 2.0]), Err(Error::Parameter(_))));
    }

    #[test]
    fn rest_pose_is_identity() {
        let fk = forward_kinematics(&chain(), &BodyParams::rest(2, 0)).unwrap();
        for g in &fk.transforms {
            assert_eq!(*g, Rigid::identity());
        }
    }

    #[test]
    fn two_link_quarter_turn() {
        let mut p = BodyParams::rest(2, 0);
        p.theta[0] = [0.0, 0.0, FRAC_PI_2];
        let fk = forward_kinematics(&chain(), &p).unwrap();
        assert_relative_eq!(fk.positions[1], Vec3::new(-1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn pure_translation() {
        let mut p = BodyParams::rest(2, 0);
        p.root_translation = [0.3, 0.0, 0.0];
        let fk = forward_kinematics(&chain(), &p).unwrap();
        for g in &fk.transforms {
            assert_eq!(g.rotation, Mat3::identity());
            assert_relative_eq!(g.translation, Vec3::new(0.3, 0.0, 0.0), epsilon = 1e-15);
        }
    }

    #[test]
    fn non_finite_rotation_is_rejected() {
        let mut p = BodyParams::rest(2, 0);
        p.theta[1][2] = f64::NAN;
        assert!(matches!(forward_kinematics(&chain(), &p), Err(Error::Parameter(_))));
    }

    #[test]
    fn one_hot_and_half_blend() {
        let verts = vec![Vec3::new(0.2, 0.4, 0.0), Vec3::new(1.0, 2.0, 3.0)];
        let body = two_joint_body(vec![vec![0.0, 1.0], vec![0.5, 0.5]], verts.clone());
        let transforms = JointTransforms {
            transforms: vec![
                Rigid::new(Mat3::identity(), Vec3::new(1.0, 0.0, 0.0)),
                Rigid::new(Mat3::identity(), Vec3::new(0.0, 1.0, 0.0)),
            ],
            positions: vec![Vec3::zeros(); 2],
        };
        let out = skin_vertices(&verts, &body.skin_weights, &transforms);
        assert_relative_eq!(out[0], verts[0] + Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(out[1], verts[1] + Vec3::new(0.5, 0.5, 0.0), epsilon = 1e-15);

        let mut p = BodyParams::rest(2, 1);
        p.theta[1] = [0.3, -0.2, 0.9];
        let fk = forward_kinematics(&body.skeleton, &p).unwrap();
        let posed = skin_vertices(&verts, &body.skin_weights, &fk);
        assert_relative_eq!(posed[0], fk.transforms[1].apply(&verts[0]), epsilon = 1e-14);
    }

    #[test]
    fn lerp_midpoint() {
        let a = BodyParams::rest(2, 1);
        let mut b = a.clone();
        b.theta[1] = [0.2, 0.4, 0.6];
        b.beta[0] = 1.0;
        let m = a.lerp(&b, 0.5).unwrap();
        assert_eq!(m.theta[1], [0.1, 0.2, 0.3]);
        assert_eq!(m.beta[0], 0.5);
    }

    proptest! {
        #[test]
        fn fk_rotations_stay_orthonormal(
            t in proptest::collection::vec(-3.0f64..3.0, 6),
        ) {
            let p = BodyParams {
                theta: vec![[t[0], t[1], t[2]], [t[3], t[4], t[5]]],
                beta: vec![],
                root_translation: [0.0; 3],
            };
            let fk = forward_kinematics(&chain(), &p).unwrap();
            for g in &fk.transforms {
                let (err, det) = orthonormality_error(&g.rotation);
                prop_assert!(err < 1e-12);
                prop_assert!((det - 1.0).abs() < 1e-12);
            }
            // root rotation survives the round trip through matrix form
            let back = axis_angle(&fk.transforms[0].rotation);
            prop_assert!((rodrigues(&back) - fk.transforms[0].rotation).amax() < 1e-12);
        }

        #[test]
        fn shape_superposition(b1 in -3.0f64..3.0, b2 in -3.0f64..3.0) {
            let body = two_joint_body(vec![vec![1.0, 0.0]; 2], vec![Vec3::zeros(), Vec3::y()]);
            let s1 = apply_shape(&body, &[b1]).unwrap();
            let s2 = apply_shape(&body, &[b2]).unwrap();
            let s12 = apply_shape(&body, &[b1 + b2]).unwrap();
            for i in 0..2 {
                let lhs = s12[i] - body.vertices[i];
                let rhs = (s1[i] - body.vertices[i]) + (s2[i] - body.vertices[i]);
                prop_assert!((lhs - rhs).amax() < 1e-12);
            }
        }
    }
}
