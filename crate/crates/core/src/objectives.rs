//! Geometric regularizers and the photometric fitting loss.
//!
//! Every loss is a mean over its points, and each `*_grad` function returns the derivative
//! of that mean with respect to the per-point inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

/// Decay rate of the minimal-surface term.
pub const MINSURF_SHARPNESS: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorNorm {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub eikonal: f64,
    pub minsurf: f64,
    pub deform: f64,
    pub prior: f64,
    pub photometric: f64,
    /// Prior decay `κ`, m².
    pub kappa: f64,
    pub prior_norm: PriorNorm,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            eikonal: 1e-3,
            minsurf: 0.05,
            deform: 10.0,
            prior: 1.0,
            photometric: 1.0,
            kappa: 2e-3,
            prior_norm: PriorNorm::L1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.eikonal, self.minsurf, self.deform, self.prior, self.photometric];
        if !all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            return Err(Error::Parameter(format!("loss weights must be non-negative, got {all:?}")));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Parameter(format!("kappa must be positive, got {}", self.kappa)));
        }
        Ok(())
    }
}

fn check_nonempty(n: usize, what: &'static str) -> Result<f64> {
    if n == 0 {
        return Err(Error::Degenerate(what));
    }
    Ok(n as f64)
}

/// `w(d_o) = exp(−d_o²/κ)`
pub fn prior_weight(prior: f64, kappa: f64) -> f64 {
    (-prior * prior / kappa).exp()
}

/// Mean of `exp(−d_o²/κ)·‖d − d_o‖`.
pub fn prior_loss(sdf: &[f64], prior: &[f64], kappa: f64, norm: PriorNorm) -> Result<f64> {
    if sdf.len() != prior.len() {
        return Err(Error::Shape(format!("{} distances against {} priors", sdf.len(), prior.len())));
    }
    let n = check_nonempty(sdf.len(), "prior loss over no samples")?;
    let s: f64 = sdf
        .iter()
        .zip(prior)
        .map(|(d, o)| {
            let r = d - o;
            prior_weight(*o, kappa)
                * match norm {
                    PriorNorm::L1 => r.abs(),
                    PriorNorm::L2 => r * r,
                }
        })
        .sum();
    Ok(s / n)
}

/// `∂ prior_loss / ∂d_i` (zero subgradient where `d = d_o` under L1).
pub fn prior_loss_grad(sdf: &[f64], prior: &[f64], kappa: f64, norm: PriorNorm) -> Vec<f64> {
    let n = sdf.len().max(1) as f64;
    sdf.iter()
        .zip(prior)
        .map(|(d, o)| {
            let r = d - o;
            let g = match norm {
                PriorNorm::L1 => {
                    if r > 0.0 {
                        1.0
                    } else if r < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                PriorNorm::L2 => 2.0 * r,
            };
            prior_weight(*o, kappa) * g / n
        })
        .collect()
}

/// Mean of `(‖∇d‖ − 1)²`.
pub fn eikonal_loss(gradients: &[Vec3]) -> Result<f64> {
    let n = check_nonempty(gradients.len(), "Eikonal loss over no points")?;
    if !gradients.iter().all(|g| g.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("SDF gradient"));
    }
    Ok(gradients.iter().map(|g| (g.norm() - 1.0).powi(2)).sum::<f64>() / n)
}

pub fn eikonal_loss_grad(gradients: &[Vec3]) -> Vec<Vec3> {
    let n = gradients.len().max(1) as f64;
    gradients
        .iter()
        .map(|g| {
            let l = g.norm();
            if l > 0.0 {
                g * (2.0 * (l - 1.0) / (l * n))
            } else {
                Vec3::zeros()
            }
        })
        .collect()
}

/// Mean of `exp(−100|d|)`.
pub fn minsurf_loss(sdf: &[f64]) -> Result<f64> {
    let n = check_nonempty(sdf.len(), "minimal-surface loss over no points")?;
    Ok(sdf.iter().map(|d| (-MINSURF_SHARPNESS * d.abs()).exp()).sum::<f64>() / n)
}

pub fn minsurf_loss_grad(sdf: &[f64]) -> Vec<f64> {
    let n = sdf.len().max(1) as f64;
    sdf.iter()
        .map(|d| {
            let s = if *d > 0.0 {
                1.0
            } else if *d < 0.0 {
                -1.0
            } else {
                0.0
            };
            -MINSURF_SHARPNESS * s * (-MINSURF_SHARPNESS * d.abs()).exp() / n
        })
        .collect()
}

/// Mean of `‖Δx̄‖`.
pub fn deform_reg_loss(residuals: &[Vec3]) -> Result<f64> {
    let n = check_nonempty(residuals.len(), "deformation loss over no points")?;
    Ok(residuals.iter().map(|r| r.norm()).sum::<f64>() / n)
}

pub fn deform_reg_loss_grad(residuals: &[Vec3]) -> Vec<Vec3> {
    let n = residuals.len().max(1) as f64;
    residuals
        .iter()
        .map(|r| {
            let l = r.norm();
            if l > 0.0 {
                r / (l * n)
            } else {
                Vec3::zeros()
            }
        })
        .collect()
}

/// Mean squared error over the masked pixels of RGB plus alpha.
pub fn photometric_loss(rendered: &[[f64; 4]], target: &[[f64; 4]], mask: &[bool]) -> Result<f64> {
    if rendered.len() != target.len() || mask.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} rendered pixels, {} targets, {} mask entries",
            rendered.len(),
            target.len(),
            mask.len()
        )));
    }
    let m = check_nonempty(mask.iter().filter(|m| **m).count(), "photometric loss with an empty mask")?;
    let mut s = 0.0;
    for ((r, t), _) in rendered.iter().zip(target).zip(mask).filter(|(_, m)| **m) {
        for c in 0..4 {
            s += (r[c] - t[c]).powi(2);
        }
    }
    Ok(s / (4.0 * m))
}

pub fn photometric_loss_grad(rendered: &[[f64; 4]], target: &[[f64; 4]], mask: &[bool]) -> Vec<[f64; 4]> {
    let m = mask.iter().filter(|m| **m).count().max(1) as f64;
    rendered
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((r, t), on)| {
            if *on {
                std::array::from_fn(|c| 2.0 * (r[c] - t[c]) / (4.0 * m))
            } else {
                [0.0; 4]
            }
        })
        .collect()
}

/// Unweighted term values; `None` marks a term that was not evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub photometric: Option<f64>,
    pub prior: Option<f64>,
    pub eikonal: Option<f64>,
    pub minsurf: Option<f64>,
    pub deform: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub rays: usize,
    pub samples: usize,
    /// Samples inside the field shell, the ones that reach the networks.
    #[serde(default)]
    pub field_samples: usize,
    pub eikonal_points: usize,
}

/// Per-term values, their weighted sum, and how many samples fed them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: LossTerms,
    pub total: f64,
    pub counts: SampleCounts,
}

/// `Σ λ·term` over the evaluated terms.
pub fn total_loss(terms: LossTerms, counts: SampleCounts, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let pairs = [
        (terms.photometric, weights.photometric),
        (terms.prior, weights.prior),
        (terms.eikonal, weights.eikonal),
        (terms.minsurf, weights.minsurf),
        (terms.deform, weights.deform),
    ];
    let mut total = 0.0;
    for (v, w) in pairs {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::NonFinite("loss term"));
            }
            total += w * v;
        }
    }
    Ok(LossReport { terms, total, counts })
}
