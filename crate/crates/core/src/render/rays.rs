//! Ray construction, bounding-box clipping and sample placement.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::camera::Camera;
use crate::error::{Error, Result};
use crate::math::{Rigid, Vec3};

/// Oriented box: `frame` maps box-local coordinates to world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obb {
    #[serde(with = "rigid_serde")]
    pub frame: Rigid,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

mod rigid_serde {
    use super::*;
    use crate::math::Mat3;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        rotation: [f64; 9],
        translation: [f64; 3],
    }

    pub fn serialize<S: Serializer>(g: &Rigid, s: S) -> Result<S::Ok, S::Error> {
        Repr {
            rotation: std::array::from_fn(|i| g.rotation[(i / 3, i % 3)]),
            translation: [g.translation.x, g.translation.y, g.translation.z],
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rigid, D::Error> {
        let r = Repr::deserialize(d)?;
        Ok(Rigid::new(Mat3::from_row_slice(&r.rotation), Vec3::from(r.translation)))
    }
}

impl Obb {
    pub fn axis_aligned(lo: Vec3, hi: Vec3) -> Self {
        Obb {
            frame: Rigid::identity(),
            lo: lo.into(),
            hi: hi.into(),
        }
    }

    /// Tight box of `points` in `frame`, each half-extent grown by the fraction `expand`.
    pub fn around(frame: Rigid, points: &[Vec3], expand: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let inv = frame.inverse();
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            let q = inv.apply(p);
            lo = lo.inf(&q);
            hi = hi.sup(&q);
        }
        let center = (lo + hi) * 0.5;
        let half = (hi - lo) * (0.5 * (1.0 + expand));
        Ok(Obb {
            frame,
            lo: (center - half).into(),
            hi: (center + half).into(),
        })
    }

    /// Entry and exit distances along a unit ray, clipped to `t ≥ 0`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let rt = self.frame.rotation.transpose();
        let o = rt * (origin - self.frame.translation);
        let d = rt * dir;
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if d[k] == 0.0 {
                if o[k] < self.lo[k] || o[k] > self.hi[k] {
                    return None;
                }
                continue;
            }
            let a = (self.lo[k] - o[k]) / d[k];
            let b = (self.hi[k] - o[k]) / d[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 < t1).then_some((t0, t1))
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        let q = self.frame.inverse().apply(x);
        (0..3).all(|k| q[k] >= self.lo[k] && q[k] <= self.hi[k])
    }

    /// Uniform point inside the box.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let q = Vec3::from_fn(|k, _| rng.random_range(self.lo[k]..=self.hi[k]));
        self.frame.apply(&q)
    }

    /// The box moved rigidly with the world.
    pub fn transformed(&self, g: &Rigid) -> Obb {
        Obb {
            frame: g.compose(&self.frame),
            ..*self
        }
    }
}

/// A camera ray clipped to the scene box; `near == far` marks a miss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn is_empty(&self) -> bool {
        self.near >= self.far
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// One ray per requested pixel center, clipped to `bounds` (`None` is an empty scene).
pub fn generate_rays(camera: &Camera, pixels: &[usize], bounds: Option<&Obb>) -> Result<Vec<Ray>> {
    camera.validate()?;
    let origin = camera.center();
    pixels
        .iter()
        .map(|&p| {
            if p >= camera.pixel_count() {
                return Err(Error::Parameter(format!("pixel {p} outside a {}x{} image", camera.width, camera.height)));
            }
            let direction = camera.pixel_direction(p);
            let (near, far) = bounds.and_then(|b| b.intersect(&origin, &direction)).unwrap_or((0.0, 0.0));
            Ok(Ray {
                origin,
                direction,
                near,
                far,
            })
        })
        .collect()
}

/// Sample distances `t_i`, spacings `δ_i` and positions `x_i` along one ray.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub points: Vec<Vec3>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// `n` samples in `[near, far]`: bin centers, or uniformly jittered within equal bins.
/// `δ_1 = t_1 − near` and `δ_i = t_i − t_{i−1}` afterwards.
pub fn sample_ray<R: Rng + ?Sized>(ray: &Ray, n: usize, stratified: bool, rng: &mut R) -> Result<RaySamples> {
    if n == 0 {
        return Err(Error::Parameter("samples per ray must be at least 1".into()));
    }
    if ray.is_empty() {
        return Ok(RaySamples::default());
    }
    let h = (ray.far - ray.near) / n as f64;
    let mut out = RaySamples {
        t: Vec::with_capacity(n),
        delta: Vec::with_capacity(n),
        points: Vec::with_capacity(n),
    };
    let mut prev = ray.near;
    for i in 0..n {
        let u = if stratified {
            rng.random_range(f64::EPSILON..1.0)
        } else {
            0.5
        };
        let t = ray.near + (i as f64 + u) * h;
        out.t.push(t);
        out.delta.push(t - prev);
        out.points.push(ray.at(t));
        prev = t;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ray(near: f64, far: f64) -> Ray {
        Ray {
            origin: Vec3::zeros(),
            direction: Vec3::z(),
            near,
            far,
        }
    }

    #[test]
    fn single_sample_is_the_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_ray(&ray(1.0, 3.0), 1, false, &mut rng).unwrap();
        assert_eq!(s.t, vec![2.0]);
        assert_eq!(s.delta, vec![1.0]);
    }

    #[test]
    fn unstratified_samples_are_bin_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_ray(&ray(0.0, 8.0), 4, false, &mut rng).unwrap();
        assert_eq!(s.t, vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(s.delta, vec![1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn stratified_is_deterministic_per_seed() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_ray(&ray(0.5, 2.5), 48, true, &mut rng).unwrap()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn zero_samples_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_ray(&ray(0.0, 1.0), 0, false, &mut rng).is_err());
    }

    #[test]
    fn rays_missing_the_box_have_no_samples() {
        let cam = crate::render::Camera::look_at(
            Vec3::new(0.0, 0.0, 5.0),
            Vec3::zeros(),
            Vec3::y(),
            crate::render::Camera::centered(16, 16, 0.5),
            16,
            16,
        )
        .unwrap();
        let b = Obb::axis_aligned(Vec3::new(10.0, 10.0, -1.0), Vec3::new(11.0, 11.0, 1.0));
        let rays = generate_rays(&cam, &[0, 17, 255], Some(&b)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for r in &rays {
            assert!(r.is_empty());
            assert!(sample_ray(r, 48, true, &mut rng).unwrap().is_empty());
        }
        assert!(generate_rays(&cam, &[256], Some(&b)).is_err());
    }

    #[test]
    fn box_clipping() {
        let b = Obb::axis_aligned(Vec3::repeat(-1.0), Vec3::repeat(1.0));
        let (t0, t1) = b.intersect(&Vec3::new(0.0, 0.0, -5.0), &Vec3::z()).unwrap();
        assert_relative_eq!(t0, 4.0);
        assert_relative_eq!(t1, 6.0);
        // starting inside clips at the origin
        let (t0, t1) = b.intersect(&Vec3::zeros(), &Vec3::x()).unwrap();
        assert_eq!((t0, t1), (0.0, 1.0));
        assert!(b.intersect(&Vec3::new(0.0, 0.0, 5.0), &Vec3::z()).is_none());
        assert!(b.intersect(&Vec3::new(2.0, 0.0, -5.0), &Vec3::z()).is_none());
    }

    #[test]
    fn around_covers_points_in_its_frame() {
        let g = Rigid::new(crate::math::rodrigues(&Vec3::new(0.2, -0.7, 0.4)), Vec3::new(1.0, 2.0, 3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..50).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let b = Obb::around(g, &pts, 0.15).unwrap();
        assert!(pts.iter().all(|p| b.contains(p)));
        let moved = b.transformed(&g);
        assert!(pts.iter().all(|p| moved.contains(&g.apply(p))));
    }

    proptest! {
        #[test]
        fn samples_increase_and_stay_in_range(near in 0.0f64..3.0, len in 1e-3f64..4.0, n in 1usize..64, seed in any::<u64>(), strat in any::<bool>()) {
            let r = ray(near, near + len);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample_ray(&r, n, strat, &mut rng).unwrap();
            prop_assert_eq!(s.len(), n);
            for i in 0..n {
                prop_assert!(s.t[i] > r.near && s.t[i] <= r.far);
                prop_assert!(s.delta[i] > 0.0);
                if i > 0 {
                    prop_assert!(s.t[i] > s.t[i - 1]);
                    prop_assert!((((s.points[i] - s.points[i - 1]).norm()) - s.delta[i]).abs() < 1e-12);
                }
            }
        }
    }
}
