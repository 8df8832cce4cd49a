//! Three axis-aligned feature planes over a canonical bounding box.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math::Vec3;

/// Axes spanned by each plane: xy, xz, yz.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Each plane stores `resolution × resolution` nodes of `channels` features,
/// indexed `(v * resolution + u) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriPlane {
    resolution: usize,
    channels: usize,
    lo: Vec3,
    hi: Vec3,
    pub planes: [Vec<f64>; 3],
}

/// Bilinear footprint of one point on one plane.
#[derive(Debug, Clone, Copy)]
struct Footprint {
    base: [usize; 4],
    fu: f64,
    fv: f64,
    /// Grid units per meter along u and v; zero where the coordinate is clamped.
    su: f64,
    sv: f64,
}

impl Footprint {
    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (fu, fv) = (self.fu, self.fv);
        [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv]
    }

    #[inline]
    fn du(&self) -> [f64; 4] {
        let fv = self.fv;
        [-(1.0 - fv), 1.0 - fv, -fv, fv]
    }

    #[inline]
    fn dv(&self) -> [f64; 4] {
        let fu = self.fu;
        [-(1.0 - fu), -fu, 1.0 - fu, fu]
    }
}

const DUV: [f64; 4] = [1.0, -1.0, -1.0, 1.0];

impl TriPlane {
    pub fn zeros(resolution: usize, channels: usize, lo: Vec3, hi: Vec3) -> Result<Self> {
        if resolution < 2 || channels == 0 {
            return Err(Error::Parameter(format!(
                "tri-plane needs resolution >= 2 and channels >= 1 (got {resolution}, {channels})"
            )));
        }
        if (0..3).any(|k| !(hi[k] > lo[k]) || !lo[k].is_finite() || !hi[k].is_finite()) {
            return Err(Error::Parameter("tri-plane box must have positive finite extent".into()));
        }
        let n = resolution * resolution * channels;
        Ok(TriPlane {
            resolution,
            channels,
            lo,
            hi,
            planes: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        })
    }

    pub fn random<R: Rng + ?Sized>(
        resolution: usize,
        channels: usize,
        lo: Vec3,
        hi: Vec3,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut tp = Self::zeros(resolution, channels, lo, hi)?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
        for p in &mut tp.planes {
            p.iter_mut().for_each(|v| *v = normal.sample(rng));
        }
        Ok(tp)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        (self.lo, self.hi)
    }

    /// World position of node `(u, v)` on plane `p`, with the third coordinate taken from `fill`.
    pub fn node_position(&self, p: usize, u: usize, v: usize, fill: &Vec3) -> Vec3 {
        let (a, b) = PLANE_AXES[p];
        let step = |k: usize, i: usize| self.lo[k] + (self.hi[k] - self.lo[k]) * i as f64 / (self.resolution - 1) as f64;
        let mut x = *fill;
        x[a] = step(a, u);
        x[b] = step(b, v);
        x
    }

    #[inline]
    fn grid_coord(&self, x: &Vec3, k: usize) -> (usize, f64, f64) {
        let r = (self.resolution - 1) as f64;
        let scale = r / (self.hi[k] - self.lo[k]);
        let s = (x[k] - self.lo[k]) * scale;
        let (s, ds) = if s <= 0.0 {
            (0.0, 0.0)
        } else if s >= r {
            (r, 0.0)
        } else {
            (s, scale)
        };
        let i = (s.floor() as usize).min(self.resolution - 2);
        (i, s - i as f64, ds)
    }

    #[inline]
    fn footprint(&self, x: &Vec3, p: usize) -> Footprint {
        let (a, b) = PLANE_AXES[p];
        let (iu, fu, su) = self.grid_coord(x, a);
        let (iv, fv, sv) = self.grid_coord(x, b);
        let c = self.channels;
        let r = self.resolution;
        let n00 = (iv * r + iu) * c;
        Footprint {
            base: [n00, n00 + c, n00 + r * c, n00 + r * c + c],
            fu,
            fv,
            su,
            sv,
        }
    }

    /// Summed bilinear features at `x` (clamped to the box).
    pub fn sample(&self, x: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_into(x, &[], &mut out, &mut []);
        out
    }

    /// Features at `x` plus their directional derivatives along each of `dirs`.
    /// `out_t` holds `dirs.len()` blocks of `channels`.
    pub fn sample_into(&self, x: &Vec3, dirs: &[Vec3], out: &mut [f64], out_t: &mut [f64]) {
        let c = self.channels;
        out.iter_mut().for_each(|v| *v = 0.0);
        out_t.iter_mut().for_each(|v| *v = 0.0);
        for (p, plane) in self.planes.iter().enumerate() {
            let fp = self.footprint(x, p);
            let w = fp.weights();
            for (corner, &base) in fp.base.iter().enumerate() {
                let node = &plane[base..base + c];
                out.iter_mut().zip(node).for_each(|(o, v)| *o += w[corner] * v);
            }
            if dirs.is_empty() {
                continue;
            }
            let (a, b) = PLANE_AXES[p];
            let (du, dv) = (fp.du(), fp.dv());
            for (k, d) in dirs.iter().enumerate() {
                let (ud, vd) = (fp.su * d[a], fp.sv * d[b]);
                if ud == 0.0 && vd == 0.0 {
                    continue;
                }
                let slot = &mut out_t[k * c..(k + 1) * c];
                for (corner, &base) in fp.base.iter().enumerate() {
                    let coef = du[corner] * ud + dv[corner] * vd;
                    let node = &plane[base..base + c];
                    slot.iter_mut().zip(node).for_each(|(o, v)| *o += coef * v);
                }
            }
        }
    }

    /// Reverse mode of [`sample_into`]: accumulates node gradients into `grad`
    /// and returns the adjoints of `x` and of each direction.
    pub fn backward(
        &self,
        x: &Vec3,
        dirs: &[Vec3],
        adj: &[f64],
        adj_t: &[f64],
        grad: &mut [Vec<f64>; 3],
    ) -> (Vec3, Vec<Vec3>) {
        let c = self.channels;
        let mut gx = Vec3::zeros();
        let mut gdirs = vec![Vec3::zeros(); dirs.len()];
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for (p, plane) in self.planes.iter().enumerate() {
            let fp = self.footprint(x, p);
            let (a, b) = PLANE_AXES[p];
            let (w, du, dv) = (fp.weights(), fp.du(), fp.dv());
            let g = &mut grad[p];
            let mut adj_fu = 0.0;
            let mut adj_fv = 0.0;
            for (corner, &base) in fp.base.iter().enumerate() {
                let node = &plane[base..base + c];
                let slot = &mut g[base..base + c];
                slot.iter_mut().zip(adj).for_each(|(s, v)| *s += w[corner] * v);
                let va = dot(node, adj);
                adj_fu += du[corner] * va;
                adj_fv += dv[corner] * va;
                for (k, d) in dirs.iter().enumerate() {
                    let at = &adj_t[k * c..(k + 1) * c];
                    let (ud, vd) = (fp.su * d[a], fp.sv * d[b]);
                    let coef = du[corner] * ud + dv[corner] * vd;
                    if coef != 0.0 {
                        slot.iter_mut().zip(at).for_each(|(s, v)| *s += coef * v);
                    }
                    let vt = dot(node, at);
                    adj_fu += DUV[corner] * vd * vt;
                    adj_fv += DUV[corner] * ud * vt;
                    gdirs[k][a] += fp.su * du[corner] * vt;
                    gdirs[k][b] += fp.sv * dv[corner] * vt;
                }
            }
            gx[a] += fp.su * adj_fu;
            gx[b] += fp.sv * adj_fv;
        }
        (gx, gdirs)
    }

    pub fn zero_grad(&self) -> [Vec<f64>; 3] {
        let n = self.planes[0].len();
        [vec![0.0; n], vec![0.0; n], vec![0.0; n]]
    }
}
