//! Image-space scores of a render against an oracle target.

use super::targets::Target;
use crate::error::{Error, Result};
use crate::render::{iou, RenderOutput};

/// PSNR (peak 1) of RGB over the target's foreground pixels.
pub fn masked_psnr(render: &RenderOutput, target: &Target) -> Result<f64> {
    check_dims(render, target)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..target.mask.pixel_count() {
        if target.mask.data[p] > 0.5 {
            for c in 0..3 {
                sum += (render.rgb.data[3 * p + c] - target.rgb.data[3 * p + c]).powi(2);
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("PSNR over an empty mask"));
    }
    let mse = sum / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Mean absolute depth error over pixels that are foreground in both the target and the render.
pub fn depth_mae(render: &RenderOutput, target: &Target) -> Result<f64> {
    check_dims(render, target)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..target.mask.pixel_count() {
        let (a, b) = (render.depth.data[p], target.depth.data[p]);
        if target.mask.data[p] > 0.5 && a.is_finite() && b.is_finite() {
            sum += (a - b).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("depth error with no shared foreground"));
    }
    Ok(sum / n as f64)
}

/// Silhouette IoU of the render (alpha > 0.5) against the target mask.
pub fn silhouette_iou(render: &RenderOutput, target: &Target) -> Result<f64> {
    check_dims(render, target)?;
    Ok(iou(&render.silhouette(), &target.foreground()))
}

fn check_dims(render: &RenderOutput, target: &Target) -> Result<()> {
    if render.width() != target.camera.width || render.height() != target.camera.height {
        return Err(Error::Shape(format!(
            "render is {}x{}, target {}x{}",
            render.width(),
            render.height(),
            target.camera.width,
            target.camera.height
        )));
    }
    Ok(())
}
