//! Capsule-limb humanoid with an analytic signed distance.

use serde::{Deserialize, Serialize};

use super::{forward_kinematics, BodyParams, Joint, Skeleton, SkinWeights, TemplateBody};
use crate::error::{Error, Result};
use crate::geometry::{marching_cubes, Grid};
use crate::math::{Rigid, Vec3};

/// Radial growth of every capsule per unit of the girth coefficient, meters.
pub const GIRTH_RATE: f64 = 0.01;

/// Joint layout is authored for this stature and scaled to `BodySpec::height`.
const REFERENCE_HEIGHT: f64 = 1.75;
const WEIGHT_EPS: f64 = 1e-4;
const WEIGHT_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BodySpec {
    /// Standing height, meters.
    pub height: f64,
    /// Multiplier on every limb radius.
    pub girth: f64,
    /// Grid nodes along the vertical axis used to mesh the body.
    pub resolution: usize,
}

impl Default for BodySpec {
    fn default() -> Self {
        BodySpec {
            height: REFERENCE_HEIGHT,
            girth: 1.0,
            resolution: 64,
        }
    }
}

impl BodySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.height.is_finite() && self.height > 0.2) {
            return Err(Error::Parameter(format!("body height {} must exceed 0.2 m", self.height)));
        }
        if !(self.girth.is_finite() && self.girth > 0.0 && self.girth < 2.5) {
            return Err(Error::Parameter(format!("girth {} must lie in (0, 2.5)", self.girth)));
        }
        if self.resolution < 16 {
            return Err(Error::Parameter(format!(
                "resolution {} too coarse (need at least 16)",
                self.resolution
            )));
        }
        Ok(())
    }
}

/// Line segment `a`–`b` swept by a sphere of `radius`, rigidly attached to `joint`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
    pub joint: usize,
}

impl Capsule {
    /// Closest point on the axis segment.
    #[inline]
    pub fn axis_point(&self, x: &Vec3) -> Vec3 {
        let ab = self.b - self.a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 {
            ((x - self.a).dot(&ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        self.a + ab * t
    }

    #[inline]
    pub fn sdf(&self, x: &Vec3) -> f64 {
        (x - self.axis_point(x)).norm() - self.radius
    }

    pub fn transformed(&self, g: &Rigid) -> Capsule {
        Capsule {
            a: g.apply(&self.a),
            b: g.apply(&self.b),
            ..*self
        }
    }

    /// Ray parameters of the entry and exit points, if the ray hits.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        // exact hits from the two hemispheres and the cylinder wall
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut add = |t: f64| {
            lo = lo.min(t);
            hi = hi.max(t);
        };
        let r2 = self.radius * self.radius;
        for c in [self.a, self.b] {
            let oc = origin - c;
            let b = oc.dot(dir);
            let disc = b * b - (oc.norm_squared() - r2);
            if disc >= 0.0 {
                let s = disc.sqrt();
                add(-b - s);
                add(-b + s);
            }
        }
        let axis = self.b - self.a;
        let len = axis.norm();
        if len > 0.0 {
            let u = axis / len;
            let oa = origin - self.a;
            let dp = dir - u * dir.dot(&u);
            let op = oa - u * oa.dot(&u);
            let qa = dp.norm_squared();
            if qa > 1e-300 {
                let qb = dp.dot(&op);
                let disc = qb * qb - qa * (op.norm_squared() - r2);
                if disc >= 0.0 {
                    let s = disc.sqrt();
                    for t in [(-qb - s) / qa, (-qb + s) / qa] {
                        let along = (oa + dir * t).dot(&u);
                        if (0.0..=len).contains(&along) {
                            add(t);
                        }
                    }
                }
            }
        }
        (lo <= hi).then_some((lo, hi))
    }
}

fn union_sdf(capsules: &[Capsule], x: &Vec3, grow: f64) -> f64 {
    capsules
        .iter()
        .map(|c| c.sdf(x) - grow)
        .fold(f64::INFINITY, f64::min)
}

/// The analytic body: skeleton plus capsules in the canonical pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleBody {
    pub spec: BodySpec,
    pub skeleton: Skeleton,
    pub capsules: Vec<Capsule>,
}

impl CapsuleBody {
    pub fn new(spec: BodySpec) -> Result<Self> {
        spec.validate()?;
        let s = spec.height / REFERENCE_HEIGHT;
        let g = spec.girth * s;
        let p = |x: f64, y: f64, z: f64| Vec3::new(x, y, z) * s;

        // (name, parent, rest position at reference height)
        let layout: [(&str, Option<usize>, Vec3); 16] = [
            ("pelvis", None, p(0.0, 0.95, 0.0)),
            ("spine", Some(0), p(0.0, 1.15, 0.0)),
            ("chest", Some(1), p(0.0, 1.35, 0.0)),
            ("neck", Some(2), p(0.0, 1.52, 0.0)),
            ("l_shoulder", Some(2), p(0.18, 1.45, 0.0)),
            ("l_elbow", Some(4), p(0.46, 1.45, 0.0)),
            ("l_wrist", Some(5), p(0.72, 1.45, 0.0)),
            ("r_shoulder", Some(2), p(-0.18, 1.45, 0.0)),
            ("r_elbow", Some(7), p(-0.46, 1.45, 0.0)),
            ("r_wrist", Some(8), p(-0.72, 1.45, 0.0)),
            ("l_hip", Some(0), p(0.12, 0.90, 0.0)),
            ("l_knee", Some(10), p(0.13, 0.50, 0.0)),
            ("l_ankle", Some(11), p(0.14, 0.10, 0.0)),
            ("r_hip", Some(0), p(-0.12, 0.90, 0.0)),
            ("r_knee", Some(13), p(-0.13, 0.50, 0.0)),
            ("r_ankle", Some(14), p(-0.14, 0.10, 0.0)),
        ];
        let joints = layout
            .iter()
            .map(|(name, parent, pos)| {
                let base = parent.map_or(Vec3::zeros(), |q| layout[q].2);
                let off = pos - base;
                Joint {
                    name: (*name).into(),
                    parent: *parent,
                    rest_offset: [off.x, off.y, off.z],
                }
            })
            .collect();
        let skeleton = Skeleton::new(joints)?;
        let j = |i: usize| layout[i].2;
        let cap = |a: Vec3, b: Vec3, r: f64, joint: usize| Capsule {
            a,
            b,
            radius: r * g,
            joint,
        };
        let mut capsules = vec![
            cap(j(0), j(1), 0.13, 0),
            cap(j(10), j(13), 0.10, 0),
            cap(j(1), j(2), 0.12, 1),
            cap(j(2), j(3), 0.12, 2),
            cap(j(4), j(7), 0.065, 2),
            cap(p(0.0, 1.56, 0.0), p(0.0, 1.66, 0.01), 0.09, 3),
        ];
        for (shoulder, sign) in [(4usize, 1.0), (7, -1.0)] {
            let (elbow, wrist) = (shoulder + 1, shoulder + 2);
            capsules.push(cap(j(shoulder), j(elbow), 0.05, shoulder));
            capsules.push(cap(j(elbow), j(wrist), 0.04, elbow));
            capsules.push(cap(j(wrist), p(0.80 * sign, 1.45, 0.0), 0.035, wrist));
        }
        for (hip, sign) in [(10usize, 1.0), (13, -1.0)] {
            let (knee, ankle) = (hip + 1, hip + 2);
            capsules.push(cap(j(hip), j(knee), 0.07, hip));
            capsules.push(cap(j(knee), j(ankle), 0.055, knee));
            capsules.push(cap(j(ankle), p(0.14 * sign, 0.07, 0.12), 0.045, ankle));
        }
        Ok(CapsuleBody {
            spec,
            skeleton,
            capsules,
        })
    }

    /// Canonical signed distance; `girth_beta` is the coefficient of the girth direction.
    pub fn sdf(&self, x: &Vec3, girth_beta: f64) -> f64 {
        union_sdf(&self.capsules, x, GIRTH_RATE * girth_beta)
    }

    /// Capsules rigidly carried by their owning joints.
    pub fn pose(&self, params: &BodyParams) -> Result<PosedCapsules> {
        let fk = forward_kinematics(&self.skeleton, params)?;
        let grow = params.beta.first().copied().unwrap_or(0.0) * GIRTH_RATE;
        Ok(PosedCapsules {
            capsules: self
                .capsules
                .iter()
                .map(|c| {
                    let mut t = c.transformed(&fk.transforms[c.joint]);
                    t.radius += grow;
                    t
                })
                .collect(),
        })
    }

    /// Axis-aligned bounds of the canonical capsules.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        capsule_bounds(&self.capsules)
    }

    /// Meshes the union surface and derives skin weights and the girth direction.
    pub fn template(&self) -> Result<TemplateBody> {
        let (lo, hi) = self.bounds();
        let n = self.spec.resolution;
        let h = (hi.y - lo.y) / (n - 4) as f64;
        // irrational shifts keep grid nodes off the surface
        let shift = Vec3::new(0.318_309_886, 0.577_215_665, 0.414_213_562) * h;
        let start = lo - Vec3::repeat(2.0 * h) - shift;
        let count = |k: usize| ((hi[k] - start[k]) / h).ceil() as usize + 3;
        let res = [count(0), count(1), count(2)];
        let grid = Grid {
            resolution: res,
            lo: start,
            hi: start + Vec3::new((res[0] - 1) as f64, (res[1] - 1) as f64, (res[2] - 1) as f64) * h,
        };
        let mesh = marching_cubes(|x| self.sdf(x, 0.0), &grid, 0.0)?;
        if !mesh.is_watertight() {
            return Err(Error::Invariant("meshed test body is not watertight".into()));
        }
        let vertices = mesh.vertices().to_vec();
        let jn = self.skeleton.len();

        let mut rows = Vec::with_capacity(vertices.len());
        let mut girth = Vec::with_capacity(vertices.len());
        for v in &vertices {
            let mut dist = vec![f64::INFINITY; jn];
            let mut owner = (f64::INFINITY, Vec3::zeros());
            for c in &self.capsules {
                let axis = c.axis_point(v);
                let sd = (v - axis).norm() - c.radius;
                dist[c.joint] = dist[c.joint].min(sd.max(0.0));
                if sd.abs() < owner.0 {
                    owner = (sd.abs(), v - axis);
                }
            }
            rows.push(falloff_weights(&dist));
            let radial = owner.1.try_normalize(1e-12).unwrap_or_else(Vec3::y);
            girth.push(radial * GIRTH_RATE);
        }
        let skin_weights = SkinWeights::from_rows(&rows, jn)?;
        TemplateBody::new(
            self.skeleton.clone(),
            vertices,
            mesh.triangles().to_vec(),
            skin_weights,
            vec![girth],
        )
    }
}

/// `1/(eps + d²)` weights, normalized, sparsified below `WEIGHT_FLOOR`, renormalized.
fn falloff_weights(dist: &[f64]) -> Vec<f64> {
    let mut w: Vec<f64> = dist.iter().map(|d| 1.0 / (WEIGHT_EPS + d * d)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| {
        *x /= s;
        if *x < WEIGHT_FLOOR {
            *x = 0.0;
        }
    });
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

fn capsule_bounds(capsules: &[Capsule]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for c in capsules {
        for e in [c.a, c.b] {
            lo = lo.inf(&(e - Vec3::repeat(c.radius)));
            hi = hi.sup(&(e + Vec3::repeat(c.radius)));
        }
    }
    (lo, hi)
}

/// Capsules in observation space for one set of body parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedCapsules {
    pub capsules: Vec<Capsule>,
}

impl PosedCapsules {
    pub fn sdf(&self, x: &Vec3) -> f64 {
        union_sdf(&self.capsules, x, 0.0)
    }

    /// Index of the capsule realizing the union distance.
    pub fn nearest(&self, x: &Vec3) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.capsules.iter().enumerate() {
            let d = c.sdf(x);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Outward unit normal of the nearest capsule.
    pub fn normal(&self, x: &Vec3) -> Vec3 {
        let c = &self.capsules[self.nearest(x)];
        (x - c.axis_point(x)).try_normalize(1e-15).unwrap_or_else(Vec3::y)
    }

    /// Closest ray parameter where the ray enters the union, with the capsule hit.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, c) in self.capsules.iter().enumerate() {
            if let Some((t0, t1)) = c.intersect(origin, dir) {
                if t1 < 0.0 {
                    continue;
                }
                let t = t0.max(0.0);
                if best.is_none_or(|(b, _)| t < b) {
                    best = Some((t, i));
                }
            }
        }
        best
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        capsule_bounds(&self.capsules)
    }
}

/// Default-proportioned procedural humanoid.
pub fn generate_test_body(spec: &BodySpec) -> Result<TemplateBody> {
    CapsuleBody::new(*spec)?.template()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::WEIGHT_SUM_TOLERANCE;
    use approx::assert_relative_eq;

    fn coarse() -> BodySpec {
        BodySpec {
            resolution: 48,
            ..BodySpec::default()
        }
    }

    #[test]
    fn default_body_is_valid() {
        let body = generate_test_body(&BodySpec::default()).unwrap();
        assert_eq!(body.joint_count(), 16);
        assert_eq!(body.shape_count(), 1);
        assert!(body.skin_weights.first_invalid_row(WEIGHT_SUM_TOLERANCE).is_none());
        let mesh = body.mesh().unwrap();
        assert!(mesh.is_watertight());
        assert_eq!(mesh.euler_characteristic(), 2);
        assert!(mesh.signed_volume() > 0.0);
    }

    #[test]
    fn finer_resolution_adds_vertices() {
        let a = generate_test_body(&coarse()).unwrap();
        let b = generate_test_body(&BodySpec {
            resolution: 96,
            ..coarse()
        })
        .unwrap();
        assert!(b.vertices.len() > a.vertices.len());
        assert!(b.skin_weights.first_invalid_row(WEIGHT_SUM_TOLERANCE).is_none());
    }

    #[test]
    fn degenerate_spec_is_rejected() {
        for spec in [
            BodySpec {
                height: 0.0,
                ..coarse()
            },
            BodySpec {
                girth: -1.0,
                ..coarse()
            },
            BodySpec {
                resolution: 2,
                ..coarse()
            },
        ] {
            assert!(matches!(generate_test_body(&spec), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn mesh_vertices_lie_on_the_analytic_surface() {
        let cb = CapsuleBody::new(coarse()).unwrap();
        let body = cb.template().unwrap();
        let h = (cb.bounds().1.y - cb.bounds().0.y) / 44.0;
        for v in &body.vertices {
            assert!(cb.sdf(v, 0.0).abs() < h);
        }
    }

    #[test]
    fn girth_direction_grows_the_surface() {
        let cb = CapsuleBody::new(coarse()).unwrap();
        let body = cb.template().unwrap();
        for (v, d) in body.vertices.iter().zip(&body.shape_dirs[0]) {
            assert_relative_eq!(d.norm(), GIRTH_RATE, epsilon = 1e-12);
            // moving along the direction raises the distance at roughly unit rate
            let step = cb.sdf(&(v + d), 0.0) - cb.sdf(v, 0.0);
            assert!(step > 0.0);
        }
    }

    #[test]
    fn capsule_ray_hit_matches_sdf() {
        let c = Capsule {
            a: Vec3::new(0.0, -0.5, 0.0),
            b: Vec3::new(0.0, 0.5, 0.0),
            radius: 0.2,
            joint: 0,
        };
        let o = Vec3::new(0.0, 0.1, -3.0);
        let (t0, t1) = c.intersect(&o, &Vec3::z()).unwrap();
        assert_relative_eq!(t0, 2.8, epsilon = 1e-12);
        assert_relative_eq!(t1, 3.2, epsilon = 1e-12);
        // through the top hemisphere
        let o = Vec3::new(0.0, 3.0, 0.0);
        let (t0, _) = c.intersect(&o, &-Vec3::y()).unwrap();
        assert_relative_eq!(t0, 2.3, epsilon = 1e-12);
        assert!(c.intersect(&Vec3::new(1.0, 0.0, -3.0), &Vec3::z()).is_none());
    }

    #[test]
    fn posing_carries_capsules_rigidly() {
        let cb = CapsuleBody::new(coarse()).unwrap();
        let mut p = BodyParams::rest(16, 1);
        p.root_translation = [0.0, 0.0, 1.0];
        let posed = cb.pose(&p).unwrap();
        let x = Vec3::new(0.0, 1.0, 1.0);
        assert_relative_eq!(posed.sdf(&x), cb.sdf(&Vec3::new(0.0, 1.0, 0.0), 0.0), epsilon = 1e-12);
        p.beta[0] = 2.0;
        let fat = cb.pose(&p).unwrap();
        assert_relative_eq!(fat.sdf(&x), posed.sdf(&x) - 2.0 * GIRTH_RATE, epsilon = 1e-12);
    }
}
