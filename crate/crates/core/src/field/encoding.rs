//! Sinusoidal positional encoding of 3-D points.

use std::f64::consts::PI;

use crate::math::Vec3;

/// Frequency bands plus an optional copy of the raw coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionalEncoding {
    pub frequencies: usize,
    pub include_input: bool,
}

impl PositionalEncoding {
    pub fn new(frequencies: usize, include_input: bool) -> Self {
        PositionalEncoding {
            frequencies,
            include_input,
        }
    }

    /// With zero frequencies the raw point is always emitted.
    fn raw(&self) -> bool {
        self.include_input || self.frequencies == 0
    }

    pub fn width(&self) -> usize {
        6 * self.frequencies + if self.raw() { 3 } else { 0 }
    }

    /// Layout: `[x, y, z]` (if raw), then per band `l`: `sin(2^l π x_a)` for a = 0..3,
    /// followed by `cos(2^l π x_a)` for a = 0..3.
    pub fn encode(&self, x: &Vec3, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.width());
        let mut o = 0;
        if self.raw() {
            out[..3].copy_from_slice(x.as_slice());
            o = 3;
        }
        let mut scale = PI;
        for _ in 0..self.frequencies {
            for a in 0..3 {
                let (s, c) = (scale * x[a]).sin_cos();
                out[o + a] = s;
                out[o + 3 + a] = c;
            }
            o += 6;
            scale *= 2.0;
        }
    }

    /// Directional derivative of the encoding along `dir`.
    pub fn encode_tangent(&self, x: &Vec3, dir: &Vec3, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.width());
        let mut o = 0;
        if self.raw() {
            out[..3].copy_from_slice(dir.as_slice());
            o = 3;
        }
        let mut scale = PI;
        for _ in 0..self.frequencies {
            for a in 0..3 {
                let (s, c) = (scale * x[a]).sin_cos();
                out[o + a] = scale * c * dir[a];
                out[o + 3 + a] = -scale * s * dir[a];
            }
            o += 6;
            scale *= 2.0;
        }
    }

    pub fn encode_vec(&self, x: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.width()];
        self.encode(x, &mut out);
        out
    }
}
