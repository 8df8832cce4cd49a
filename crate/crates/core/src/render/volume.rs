//! Signed distance to density, and alpha compositing along a ray.

use crate::error::{Error, Result};

/// Denominator floor of the expected depth.
pub const DEPTH_EPS: f64 = 1e-10;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `σ = Sigmoid(−d/α) / α`.
pub fn sdf_to_density(d: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!("density sharpness must be positive, got {alpha}")));
    }
    if d.is_nan() {
        return Err(Error::NonFinite("signed distance"));
    }
    Ok(density(d, alpha))
}

#[inline]
pub(crate) fn density(d: f64, alpha: f64) -> f64 {
    sigmoid(-d / alpha) / alpha
}

/// `(σ, ∂σ/∂d, ∂σ/∂ln α)`.
#[inline]
pub fn density_with_derivatives(d: f64, alpha: f64) -> (f64, f64, f64) {
    let s = sigmoid(-d / alpha);
    let sp = s * (1.0 - s);
    let sigma = s / alpha;
    let dd = -sp / (alpha * alpha);
    // α ∂σ/∂α = −s/α + s(1−s) d/α²
    let dlog = -sigma + sp * d / (alpha * alpha);
    (sigma, dd, dlog)
}

/// Compositing result for one ray.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Composite {
    pub weights: Vec<f64>,
    /// `T_i`, with one trailing entry for the transmittance past the last sample.
    pub transmittance: Vec<f64>,
    pub rgb: [f64; 3],
    pub depth: f64,
    pub alpha: f64,
}

/// `w_i = T_i(1 − e^{−σ_i δ_i})`, `T_i = Π_{j<i} e^{−σ_j δ_j}`; the background fills `1 − Σw`.
pub fn integrate(sigma: &[f64], delta: &[f64], t: &[f64], colors: &[[f64; 3]], background: [f64; 3]) -> Result<Composite> {
    let n = sigma.len();
    if delta.len() != n || t.len() != n || colors.len() != n {
        return Err(Error::Shape(format!(
            "compositing {n} densities with {} spacings, {} depths and {} colors",
            delta.len(),
            t.len(),
            colors.len()
        )));
    }
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n + 1);
    let mut acc = 0.0f64;
    let mut rgb = [0.0; 3];
    let mut depth = 0.0;
    let mut alpha = 0.0;
    transmittance.push(1.0);
    for i in 0..n {
        if !(delta[i] > 0.0) {
            return Err(Error::Parameter(format!("sample spacing must be positive, got {}", delta[i])));
        }
        let tau = sigma[i] * delta[i];
        let ti = (-acc).exp();
        acc += tau;
        let next = (-acc).exp();
        // T_i − T_{i+1} equals T_i (1 − e^{−τ}) without cancellation on small τ
        let w = ti * -(-tau).exp_m1();
        weights.push(w);
        transmittance.push(next);
        for c in 0..3 {
            rgb[c] += w * colors[i][c];
        }
        depth += w * t[i];
        alpha += w;
    }
    for c in 0..3 {
        rgb[c] += (1.0 - alpha) * background[c];
    }
    Ok(Composite {
        depth: depth / alpha.max(DEPTH_EPS),
        weights,
        transmittance,
        rgb,
        alpha,
    })
}

/// Upstream gradients of one composited pixel.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompositeAdjoint {
    pub rgb: [f64; 3],
    pub alpha: f64,
    pub depth: f64,
}

/// Gradients of `adj · (rgb, alpha, depth)` with respect to `σ_i` and the sample colors.
pub fn integrate_backward(
    comp: &Composite,
    delta: &[f64],
    t: &[f64],
    colors: &[[f64; 3]],
    background: [f64; 3],
    adj: &CompositeAdjoint,
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = comp.weights.len();
    let denom = comp.alpha.max(DEPTH_EPS);
    let depth_active = comp.alpha > DEPTH_EPS;
    // g_k = ∂L/∂w_k
    let g: Vec<f64> = (0..n)
        .map(|k| {
            let mut gk = adj.alpha;
            for c in 0..3 {
                gk += adj.rgb[c] * (colors[k][c] - background[c]);
            }
            let dd = if depth_active {
                (t[k] - comp.depth) / denom
            } else {
                t[k] / denom
            };
            gk + adj.depth * dd
        })
        .collect();
    // ∂L/∂σ_i = δ_i (g_i T_{i+1} − Σ_{k>i} g_k w_k)
    let mut d_sigma = vec![0.0; n];
    let mut tail = 0.0;
    for i in (0..n).rev() {
        d_sigma[i] = delta[i] * (g[i] * comp.transmittance[i + 1] - tail);
        tail += g[i] * comp.weights[i];
    }
    let d_color = comp
        .weights
        .iter()
        .map(|w| [w * adj.rgb[0], w * adj.rgb[1], w * adj.rgb[2]])
        .collect();
    (d_sigma, d_color)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    const BLACK: [f64; 3] = [0.0; 3];

    #[test]
    fn density_examples() {
        assert_eq!(sdf_to_density(0.0, 0.1).unwrap(), 5.0);
        let d = -0.1 * 3f64.ln();
        assert_relative_eq!(sdf_to_density(d, 0.1).unwrap(), 7.5, epsilon = 1e-12);
        assert!(sdf_to_density(1e6, 0.1).unwrap() < 1e-300);
        assert!(sdf_to_density(0.0, 0.0).is_err());
        assert!(sdf_to_density(0.0, -1.0).is_err());
        assert!(sdf_to_density(f64::NAN, 0.1).is_err());
    }

    #[test]
    fn density_derivatives_match_differences() {
        for &(d, a) in &[(0.0, 0.1), (0.03, 0.02), (-0.05, 0.05), (0.2, 0.01)] {
            let (s, dd, dl) = density_with_derivatives(d, a);
            assert_eq!(s, density(d, a));
            let h = 1e-7;
            let fd = (density(d + h, a) - density(d - h, a)) / (2.0 * h);
            assert_relative_eq!(dd, fd, max_relative = 1e-6, epsilon = 1e-9);
            let la = a.ln();
            let fl = (density(d, (la + h).exp()) - density(d, (la - h).exp())) / (2.0 * h);
            assert_relative_eq!(dl, fl, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn empty_density_shows_the_background() {
        let c = integrate(&[0.0; 3], &[0.1; 3], &[1.0, 1.1, 1.2], &[[0.3; 3]; 3], [1.0, 0.5, 0.25]).unwrap();
        assert!(c.weights.iter().all(|&w| w == 0.0));
        assert_eq!(c.alpha, 0.0);
        assert_eq!(c.rgb, [1.0, 0.5, 0.25]);
    }

    #[test]
    fn opaque_sample_takes_everything() {
        let c = integrate(&[1e300], &[1.0], &[2.5], &[[0.2, 0.4, 0.6]], [1.0; 3]).unwrap();
        assert_eq!(c.weights, vec![1.0]);
        assert_eq!(c.rgb, [0.2, 0.4, 0.6]);
        assert_eq!(c.depth, 2.5);
    }

    #[test]
    fn two_sample_hand_case() {
        let c = integrate(&[LN_2, LN_2], &[1.0, 1.0], &[1.0, 2.0], &[[1.0; 3]; 2], BLACK).unwrap();
        assert!((c.weights[0] - 0.5).abs() <= 1e-12);
        assert!((c.weights[1] - 0.25).abs() <= 1e-12);
        assert!((c.alpha - 0.75).abs() <= 1e-12);
    }

    #[test]
    fn mismatched_lengths_and_bad_spacing_fail() {
        assert!(integrate(&[1.0], &[1.0, 1.0], &[1.0], &[BLACK], BLACK).is_err());
        assert!(integrate(&[1.0], &[0.0], &[1.0], &[BLACK], BLACK).is_err());
    }

    #[test]
    fn backward_matches_differences() {
        let sigma = [0.3, 4.0, 0.0, 12.0, 1.5];
        let delta = [0.2, 0.1, 0.3, 0.05, 0.2];
        let t = [1.0, 1.1, 1.4, 1.45, 1.65];
        let colors = [[0.1, 0.2, 0.3], [0.9, 0.1, 0.5], [0.4, 0.4, 0.4], [0.0, 1.0, 0.2], [0.7, 0.3, 0.6]];
        let bg = [1.0, 0.8, 0.6];
        let adj = CompositeAdjoint {
            rgb: [0.7, -1.1, 0.4],
            alpha: 0.3,
            depth: -0.9,
        };
        let objective = |s: &[f64], c: &[[f64; 3]]| {
            let r = integrate(s, &delta, &t, c, bg).unwrap();
            (0..3).map(|k| adj.rgb[k] * r.rgb[k]).sum::<f64>() + adj.alpha * r.alpha + adj.depth * r.depth
        };
        let comp = integrate(&sigma, &delta, &t, &colors, bg).unwrap();
        let (ds, dc) = integrate_backward(&comp, &delta, &t, &colors, bg, &adj);
        let h = 1e-6;
        for i in 0..sigma.len() {
            let mut p = sigma;
            let mut m = sigma;
            p[i] += h;
            m[i] -= h;
            let fd = (objective(&p, &colors) - objective(&m, &colors)) / (2.0 * h);
            assert_relative_eq!(ds[i], fd, epsilon = 1e-7, max_relative = 1e-6);
            for k in 0..3 {
                let mut p = colors;
                let mut m = colors;
                p[i][k] += h;
                m[i][k] -= h;
                let fd = (objective(&sigma, &p) - objective(&sigma, &m)) / (2.0 * h);
                assert_relative_eq!(dc[i][k], fd, epsilon = 1e-7, max_relative = 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn weights_are_a_sub_partition(sd in prop::collection::vec((0.0f64..50.0, 1e-4f64..0.5), 1..64)) {
            let sigma: Vec<f64> = sd.iter().map(|p| p.0).collect();
            let delta: Vec<f64> = sd.iter().map(|p| p.1).collect();
            let t: Vec<f64> = delta.iter().scan(0.0, |a, d| { *a += d; Some(*a) }).collect();
            let c = integrate(&sigma, &delta, &t, &vec![BLACK; sigma.len()], BLACK).unwrap();
            prop_assert!(c.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
            prop_assert!(c.alpha <= 1.0 + 1e-6 && c.alpha >= 0.0);
            prop_assert!(c.transmittance.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn density_is_bounded_and_decreasing(d in -5.0f64..5.0, step in 1e-6f64..1.0, a in 1e-3f64..1.0) {
            prop_assume!(d.abs() / a < 30.0);
            let s0 = sdf_to_density(d, a).unwrap();
            let s1 = sdf_to_density(d + step, a).unwrap();
            prop_assert!(s0 > 0.0 && s0 < 1.0 / a);
            prop_assert!(s1 <= s0);
        }
    }
}
