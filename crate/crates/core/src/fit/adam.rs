//! Adam with bias correction; state and parameters kept at storage precision.

use crate::error::{Error, Result};
use crate::field::round_to_storage;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    /// Zeroed moments for blocks of the given sizes.
    pub fn new(sizes: &[usize]) -> Self {
        Adam {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update of every block with its own rate; returns an error on shape mismatch.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], rates: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || rates.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} blocks, got {} parameters, {} gradients, {} rates",
                self.m.len(),
                params.len(),
                grads.len(),
                rates.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[k].len() || g.len() != p.len() {
                return Err(Error::Shape(format!("block {k}: {} parameters, {} gradients", p.len(), g.len())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g, lr) = (&mut self.m[k], &mut self.v[k], grads[k], rates[k]);
            for i in 0..p.len() {
                m[i] = round_to_storage(BETA1 * m[i] + (1.0 - BETA1) * g[i]);
                v[i] = round_to_storage(BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i]);
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] = round_to_storage(p[i] - lr * mh / (vh.sqrt() + EPSILON));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_parameters_and_decays_moments() {
        let mut adam = Adam::new(&[2]);
        let mut p = vec![0.5, -0.25];
        adam.update(&mut [&mut p], &[&[1.0, 1.0]], &[1e-3]).unwrap();
        let after_first = p.clone();
        let m0 = adam.m[0][0];
        let v0 = adam.v[0][0];
        let mut adam2 = adam.clone();
        let mut q = p.clone();
        adam2.update(&mut [&mut q], &[&[0.0, 0.0]], &[0.0]).unwrap();
        assert_eq!(q, after_first);
        assert!(adam2.m[0][0] < m0 && adam2.v[0][0] < v0);
    }

    #[test]
    fn constant_gradient_steps_at_the_rate() {
        // with g constant, m̂ = g and v̂ = g², so each step moves by lr·g/(|g| + ε)
        let mut adam = Adam::new(&[1]);
        let mut p = vec![0.0];
        let lr = 1e-3;
        let mut last = p[0];
        for i in 0..200 {
            adam.update(&mut [&mut p], &[&[0.37]], &[lr]).unwrap();
            let step = last - p[0];
            if i > 5 {
                assert!((step - lr).abs() < 1e-6 * 4.0, "step {i}: {step}");
            }
            last = p[0];
        }
    }

    #[test]
    fn identical_runs_match() {
        let run = || {
            let mut adam = Adam::new(&[3]);
            let mut p = vec![0.1, 0.2, 0.3];
            for k in 0..50 {
                let g: Vec<f64> = p.iter().map(|x| x - 0.01 * k as f64).collect();
                adam.update(&mut [&mut p], &[&g], &[1e-2]).unwrap();
            }
            (p, adam)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut adam = Adam::new(&[2]);
        let mut p = vec![0.0; 3];
        assert!(adam.update(&mut [&mut p], &[&[0.0; 3]], &[1e-3]).is_err());
        assert!(adam.update(&mut [], &[], &[]).is_err());
    }
}
