//! JSON body assets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Joint, Skeleton, SkinWeights, TemplateBody, WEIGHT_SUM_TOLERANCE};
use crate::error::{Error, Result};
use crate::math::{to_vec3, Vec3};

pub const BODY_ASSET_VERSION: u32 = 1;

/// Rows further than this from unit sum are rejected on load; closer ones are renormalized.
const LOAD_WEIGHT_TOLERANCE: f64 = 1e-4;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BodyAsset {
    version: u32,
    joint_count: usize,
    shape_count: usize,
    joints: Vec<Joint>,
    vertices: Vec<[f64; 3]>,
    triangles: Vec<[u32; 3]>,
    skin_weights: Vec<Vec<f64>>,
    shape_dirs: Vec<Vec<[f64; 3]>>,
}

#[derive(Deserialize)]
struct Header {
    version: u32,
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

pub fn save_body_asset(body: &TemplateBody, path: &Path) -> Result<()> {
    let asset = BodyAsset {
        version: BODY_ASSET_VERSION,
        joint_count: body.joint_count(),
        shape_count: body.shape_count(),
        joints: body.skeleton.joints().to_vec(),
        vertices: body.vertices.iter().map(arr).collect(),
        triangles: body.triangles.clone(),
        skin_weights: body.skin_weights.to_rows(),
        shape_dirs: body
            .shape_dirs
            .iter()
            .map(|d| d.iter().map(arr).collect())
            .collect(),
    };
    let text = serde_json::to_string(&asset).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_body_asset(path: &Path) -> Result<TemplateBody> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::malformed(path, e))?;
    if header.version != BODY_ASSET_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: header.version,
            expected: BODY_ASSET_VERSION,
        });
    }
    let asset: BodyAsset = serde_json::from_str(&text).map_err(|e| Error::malformed(path, e))?;
    if asset.joints.len() != asset.joint_count || asset.shape_dirs.len() != asset.shape_count {
        return Err(Error::malformed(path, "header counts disagree with the arrays"));
    }
    let skeleton = Skeleton::new(asset.joints)?;
    let mut skin_weights = SkinWeights::from_rows(&asset.skin_weights, skeleton.len())?;
    if let Some(v) = skin_weights.first_invalid_row(LOAD_WEIGHT_TOLERANCE) {
        return Err(Error::Invariant(format!(
            "skin-weight row {v} sums to {}",
            skin_weights.row(v).iter().sum::<f64>()
        )));
    }
    skin_weights.normalize_rows();
    let body = TemplateBody {
        skeleton,
        vertices: asset.vertices.into_iter().map(to_vec3).collect(),
        triangles: asset.triangles,
        skin_weights,
        shape_dirs: asset
            .shape_dirs
            .into_iter()
            .map(|d| d.into_iter().map(to_vec3).collect())
            .collect(),
    };
    body.validate(WEIGHT_SUM_TOLERANCE)?;
    Ok(body)
}
