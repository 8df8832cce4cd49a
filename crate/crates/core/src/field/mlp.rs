//! Dense MLPs with batched forward passes, forward-mode tangents and exact reverse mode.
//!
//! A batch holds `rows` primal inputs followed by `tangents` blocks of `rows` directional
//! derivatives each. Tangents ride through the network alongside the primal values, and
//! `backward` differentiates the primal outputs *and* the tangent outputs, which is what
//! an Eikonal penalty on input gradients needs.

use matrixmultiply::dgemm;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    /// `ln(1 + e^z)`
    Softplus,
    Sigmoid,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// First and second derivatives at `z`.
    #[inline]
    pub fn derivatives(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Identity => (1.0, 0.0),
            Activation::Softplus => {
                let s = sigmoid(z);
                (s, s * (1.0 - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                let d = s * (1.0 - s);
                (d, d * (1.0 - 2.0 * s))
            }
        }
    }

    /// Value with first and second derivatives, sharing one exponential.
    #[inline]
    pub fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Identity => (z, 1.0, 0.0),
            Activation::Softplus => {
                let e = (-z.abs()).exp();
                let s = if z >= 0.0 { 1.0 } else { e } / (1.0 + e);
                (z.max(0.0) + (1.0 + e).ln(), s, s * (1.0 - s))
            }
            Activation::Sigmoid => {
                let e = (-z.abs()).exp();
                let s = if z >= 0.0 { 1.0 } else { e } / (1.0 + e);
                let d = s * (1.0 - s);
                (s, d, d * (1.0 - 2.0 * s))
            }
        }
    }

    /// Global Lipschitz constant.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Identity | Activation::Softplus => 1.0,
            Activation::Sigmoid => 0.25,
        }
    }
}

/// `y = act(W x + b)` with `W` stored row-major as `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Per-layer inputs, pre-activations and activation slopes of one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    rows: usize,
    tangents: usize,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    slopes: Vec<Vec<(f64, f64)>>,
    output: Vec<f64>,
}

impl MlpCache {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn tangents(&self) -> usize {
        self.tangents
    }

    /// Stacked outputs: primal block, then one block per tangent.
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    fn width(&self) -> usize {
        self.output.len() / (self.rows * (1 + self.tangents)).max(1)
    }

    pub fn primal(&self) -> &[f64] {
        &self.output[..self.rows * self.width()]
    }

    pub fn tangent(&self, k: usize) -> &[f64] {
        let n = self.rows * self.width();
        &self.output[(k + 1) * n..(k + 2) * n]
    }
}

/// Gradients with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl MlpGrad {
    pub fn zeros(net: &Mlp) -> Self {
        MlpGrad {
            weight: net.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// `C (m × n) = A (m × k) · B (k × n)` with explicit strides, overwriting or accumulating.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every slice covers the extents implied by its dimensions and strides.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Mlp {
    /// Xavier-normal weights, zero biases. `widths` lists every layer width, input first.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Parameter(format!("invalid MLP widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let std = (2.0 / (w[0] + w[1]) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                Layer {
                    inputs: w[0],
                    outputs: w[1],
                    weight: (0..w[0] * w[1]).map(|_| normal.sample(rng)).collect(),
                    bias: vec![0.0; w[1]],
                    activation: if i + 2 == widths.len() { output } else { hidden },
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Shape(format!("layer {i} parameter sizes disagree with its widths")));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(Error::Shape(format!(
                    "layer {i} takes {} inputs but the previous layer emits {}",
                    l.inputs,
                    layers[i - 1].outputs
                )));
            }
            if !l.weight.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(Error::NonFinite("MLP parameter"));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Zeroes the last layer so the network initially outputs `act(0)` everywhere.
    pub fn zero_output_layer(&mut self) {
        let l = self.layers.last_mut().expect("non-empty");
        l.weight.iter_mut().for_each(|w| *w = 0.0);
        l.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    /// Single-input evaluation.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input, 1, 0)?.output)
    }

    pub fn forward(&self, input: &[f64], rows: usize, tangents: usize) -> Result<MlpCache> {
        let blocks = 1 + tangents;
        let m = rows * blocks;
        if input.len() != m * self.input_width() {
            return Err(Error::Shape(format!(
                "MLP input has {} values, expected {} rows of width {}",
                input.len(),
                m,
                self.input_width()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut slopes = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for l in &self.layers {
            let (ni, no) = (l.inputs, l.outputs);
            let mut z = vec![0.0; m * no];
            gemm(m, ni, no, &x, (ni as isize, 1), &l.weight, (1, ni as isize), &mut z, false);
            let primal = rows * no;
            for row in z[..primal].chunks_mut(no) {
                row.iter_mut().zip(&l.bias).for_each(|(v, b)| *v += b);
            }
            let mut h = vec![0.0; m * no];
            let mut d = Vec::new();
            if l.activation == Activation::Identity {
                h.copy_from_slice(&z);
            } else {
                d.reserve_exact(primal);
                for i in 0..primal {
                    let (v, d1, d2) = l.activation.eval(z[i]);
                    h[i] = v;
                    d.push((d1, d2));
                }
                for k in 1..blocks {
                    for i in 0..primal {
                        h[k * primal + i] = d[i].0 * z[k * primal + i];
                    }
                }
            }
            inputs.push(x);
            pre.push(z);
            slopes.push(d);
            x = h;
        }
        Ok(MlpCache {
            rows,
            tangents,
            inputs,
            pre,
            slopes,
            output: x,
        })
    }

    /// Accumulates parameter gradients into `grad` and returns the stacked input gradient.
    pub fn backward(&self, cache: &MlpCache, grad_output: &[f64], grad: &mut MlpGrad) -> Result<Vec<f64>> {
        if cache.inputs.len() != self.layers.len() || grad_output.len() != cache.output.len() {
            return Err(Error::Shape("MLP backward cache or gradient does not match the network".into()));
        }
        let rows = cache.rows;
        let blocks = 1 + cache.tangents;
        let m = rows * blocks;
        let mut adj = grad_output.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let (ni, no) = (l.inputs, l.outputs);
            let z = &cache.pre[li];
            let primal = rows * no;
            if l.activation != Activation::Identity {
                let slopes = &cache.slopes[li];
                for i in 0..primal {
                    let (d1, d2) = slopes[i];
                    let mut a = adj[i] * d1;
                    for k in 1..blocks {
                        let j = k * primal + i;
                        a += adj[j] * d2 * z[j];
                        adj[j] *= d1;
                    }
                    adj[i] = a;
                }
            }
            let x = &cache.inputs[li];
            // dW += adjᵀ · X over every stacked row
            gemm(no, m, ni, &adj, (1, no as isize), x, (ni as isize, 1), &mut grad.weight[li], true);
            for row in adj[..primal].chunks(no) {
                grad.bias[li].iter_mut().zip(row).for_each(|(g, a)| *g += a);
            }
            let mut next = vec![0.0; m * ni];
            gemm(m, no, ni, &adj, (no as isize, 1), &l.weight, (ni as isize, 1), &mut next, false);
            adj = next;
        }
        Ok(adj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(widths: &[usize], hidden: Activation, out: Activation, seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = Mlp::new(widths, hidden, out, &mut rng).unwrap();
        // non-zero biases exercise every term
        for l in n.layers_mut() {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        n
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn linear_layer_gradients() {
        let l = Layer {
            inputs: 2,
            outputs: 2,
            weight: vec![1.0, 2.0, 3.0, 4.0],
            bias: vec![0.5, -0.5],
            activation: Activation::Identity,
        };
        let n = Mlp::from_layers(vec![l]).unwrap();
        let x = [1.0, -2.0];
        let cache = n.forward(&x, 1, 0).unwrap();
        assert_eq!(cache.output(), &[-2.5, -5.5]);
        let g = [1.0, 10.0];
        let mut grad = MlpGrad::zeros(&n);
        let gi = n.backward(&cache, &g, &mut grad).unwrap();
        // Wᵀg and g xᵀ
        assert_eq!(gi, vec![31.0, 42.0]);
        assert_eq!(grad.weight[0], vec![1.0, -2.0, 10.0, -20.0]);
        assert_eq!(grad.bias[0], vec![1.0, 10.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let n = net(&[3, 5, 2], Activation::Softplus, Activation::Sigmoid, 1);
        let cache = n.forward(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 1, 1).unwrap();
        let mut grad = MlpGrad::zeros(&n);
        let gi = n.backward(&cache, &[0.0; 4], &mut grad).unwrap();
        assert!(gi.iter().all(|&v| v == 0.0));
        assert_eq!(grad, MlpGrad::zeros(&n));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let n = net(&[3, 4, 1], Activation::Softplus, Activation::Identity, 2);
        assert!(n.forward(&[1.0, 2.0], 1, 0).is_err());
        let cache = n.forward(&[1.0, 2.0, 3.0], 1, 0).unwrap();
        let mut grad = MlpGrad::zeros(&n);
        assert!(n.backward(&cache, &[1.0, 2.0], &mut grad).is_err());
        let bad = Layer {
            inputs: 2,
            outputs: 1,
            weight: vec![0.0; 2],
            bias: vec![0.0],
            activation: Activation::Identity,
        };
        let mut layers = n.layers().to_vec();
        layers.push(bad);
        assert!(Mlp::from_layers(layers).is_err());
    }

    #[test]
    fn tangents_are_directional_derivatives() {
        let n = net(&[4, 8, 8, 3], Activation::Softplus, Activation::Sigmoid, 3);
        let x = [0.3, -0.2, 0.9, 0.1];
        let d = [0.5, 0.1, -0.7, 0.2];
        let mut input = x.to_vec();
        input.extend_from_slice(&d);
        let cache = n.forward(&input, 1, 1).unwrap();
        let h = 1e-6;
        let shift = |s: f64| -> Vec<f64> {
            let p: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + s * b).collect();
            n.eval(&p).unwrap()
        };
        let (p, m) = (shift(h), shift(-h));
        for o in 0..3 {
            let fd = (p[o] - m[o]) / (2.0 * h);
            assert!(rel(fd, cache.tangent(0)[o]) < 1e-6);
        }
    }

    /// Scalar objective mixing primal and tangent outputs, so backward exercises both paths.
    fn objective(n: &Mlp, input: &[f64], rows: usize, tangents: usize, coef: &[f64]) -> f64 {
        let c = n.forward(input, rows, tangents).unwrap();
        c.output().iter().zip(coef).map(|(o, k)| o * k + 0.5 * o * o).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (widths, hidden, out, tangents) in [
            (vec![3usize, 6, 5, 2], Activation::Softplus, Activation::Identity, 0usize),
            (vec![3, 6, 5, 3], Activation::Softplus, Activation::Sigmoid, 2),
            (vec![5, 7, 7, 1], Activation::Sigmoid, Activation::Identity, 3),
        ] {
            let mut n = net(&widths, hidden, out, 4);
            let rows = 3;
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let input: Vec<f64> = (0..rows * (1 + tangents) * widths[0])
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let out_len = rows * (1 + tangents) * widths[widths.len() - 1];
            let coef: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

            let cache = n.forward(&input, rows, tangents).unwrap();
            let g: Vec<f64> = cache.output().iter().zip(&coef).map(|(o, k)| k + o).collect();
            let mut grad = MlpGrad::zeros(&n);
            let gi = n.backward(&cache, &g, &mut grad).unwrap();

            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for li in 0..n.layers().len() {
                for wi in 0..n.layers()[li].weight.len() {
                    let orig = n.layers()[li].weight[wi];
                    n.layers_mut()[li].weight[wi] = orig + h;
                    let p = objective(&n, &input, rows, tangents, &coef);
                    n.layers_mut()[li].weight[wi] = orig - h;
                    let m = objective(&n, &input, rows, tangents, &coef);
                    n.layers_mut()[li].weight[wi] = orig;
                    worst = worst.max(rel((p - m) / (2.0 * h), grad.weight[li][wi]));
                }
                for bi in 0..n.layers()[li].bias.len() {
                    let orig = n.layers()[li].bias[bi];
                    n.layers_mut()[li].bias[bi] = orig + h;
                    let p = objective(&n, &input, rows, tangents, &coef);
                    n.layers_mut()[li].bias[bi] = orig - h;
                    let m = objective(&n, &input, rows, tangents, &coef);
                    n.layers_mut()[li].bias[bi] = orig;
                    worst = worst.max(rel((p - m) / (2.0 * h), grad.bias[li][bi]));
                }
            }
            for i in 0..input.len() {
                let mut ip = input.clone();
                ip[i] += h;
                let mut im = input.clone();
                im[i] -= h;
                let fd = (objective(&n, &ip, rows, tangents, &coef) - objective(&n, &im, rows, tangents, &coef))
                    / (2.0 * h);
                worst = worst.max(rel(fd, gi[i]));
            }
            assert!(worst < 1e-4, "{widths:?}: worst relative error {worst:e}");
        }
    }

    #[test]
    fn lipschitz_bound_holds() {
        let n = net(&[6, 16, 16, 3], Activation::Softplus, Activation::Identity, 7);
        let bound: f64 = n
            .layers()
            .iter()
            .map(|l| {
                let w = DMatrix::from_row_slice(l.outputs, l.inputs, &l.weight);
                w.singular_values().max() * l.activation.lipschitz()
            })
            .product();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let d: Vec<f64> = (0..6).map(|_| rng.random_range(-0.1..0.1)).collect();
            let y: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
            let (fx, fy) = (n.eval(&x).unwrap(), n.eval(&y).unwrap());
            let dout = fx.iter().zip(&fy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let din = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(dout <= bound * din * (1.0 + 1e-9));
        }
    }

    #[test]
    fn activations_are_stable() {
        assert_eq!(Activation::Softplus.apply(-800.0), 0.0);
        assert_eq!(Activation::Softplus.apply(800.0), 800.0);
        assert!((Activation::Softplus.apply(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert!(Activation::Sigmoid.apply(-800.0) >= 0.0);
    }
}
