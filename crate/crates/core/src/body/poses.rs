//! Pose files: one JSON `BodyParams` record per line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::BodyParams;
use crate::error::{Error, Result};

/// Reads a pose sequence. Blank lines are skipped; a file holding a single pretty-printed
/// record is accepted too.
pub fn read_poses(path: &Path) -> Result<Vec<BodyParams>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text).map_err(|reason| Error::malformed(path, reason))
}

fn parse_poses(text: &str) -> std::result::Result<Vec<BodyParams>, String> {
    if let Ok(one) = serde_json::from_str::<BodyParams>(text) {
        return Ok(vec![one]);
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: BodyParams = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        p.check_finite().map_err(|e| format!("line {}: {e}", i + 1))?;
        out.push(p);
    }
    if out.is_empty() {
        return Err("no pose records".into());
    }
    Ok(out)
}

pub fn write_poses(path: &Path, poses: &[BodyParams]) -> Result<()> {
    let mut text = String::new();
    for p in poses {
        let line = serde_json::to_string(p).map_err(|e| Error::Format(e.to_string()))?;
        let _ = writeln!(text, "{line}");
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Keyframes with `inbetweens` linearly interpolated records between each consecutive pair.
pub fn interpolate_keyframes(keys: &[BodyParams], inbetweens: usize) -> Result<Vec<BodyParams>> {
    let mut out = Vec::with_capacity(keys.len() + keys.len().saturating_sub(1) * inbetweens);
    for pair in keys.windows(2) {
        out.push(pair[0].clone());
        for k in 1..=inbetweens {
            out.push(pair[0].lerp(&pair[1], k as f64 / (inbetweens + 1) as f64)?);
        }
    }
    out.extend(keys.last().cloned());
    Ok(out)
}
