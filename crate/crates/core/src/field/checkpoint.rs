//! Binary checkpoint container.
//!
//! Layout (little endian): magic `AVGN`, `u32` version, `u32` length + JSON metadata,
//! `u32` block count, then per block: `u32` name length, name, `u32` rank, `u32` dims,
//! and the values as `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::scene::{ModelConfig, Scene};
use crate::error::{Error, Result};
use crate::math::{to_vec3, Vec3};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"AVGN";

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    joints: usize,
    shapes: usize,
    bounds: [[f64; 3]; 2],
    #[serde(default)]
    extra: Value,
}

/// A scene plus any auxiliary state stored alongside it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub scene: Scene,
    pub extra: Value,
    pub extra_blocks: Vec<(String, Vec<f64>)>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit the container")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_block(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    put_u32(buf, name.len())?;
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, shape.len())?;
    for &d in shape {
        put_u32(buf, d)?;
    }
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

pub fn write_checkpoint(path: &Path, scene: &Scene, extra: &Value, extra_blocks: &[(String, &[f64])]) -> Result<()> {
    let (lo, hi) = scene.triplane.bounds();
    let meta = Meta {
        model: scene.config.clone(),
        joints: scene.joints,
        shapes: scene.shapes,
        bounds: [[lo.x, lo.y, lo.z], [hi.x, hi.y, hi.z]],
        extra: extra.clone(),
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, meta.len())?;
    buf.extend_from_slice(&meta);
    let blocks = scene.blocks();
    put_u32(&mut buf, blocks.len() + extra_blocks.len())?;
    for b in &blocks {
        put_block(&mut buf, &b.name, &b.shape, b.data)?;
    }
    for (name, data) in extra_blocks {
        put_block(&mut buf, name, &[data.len()], data)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(scene: &Scene, path: &Path) -> Result<()> {
    write_checkpoint(path, scene, &Value::Null, &[])
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::malformed(self.path, "unexpected end of checkpoint"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { data: &data, pos: 0, path };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = r.u32()?;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::malformed(path, e))?;
    let lo: Vec3 = to_vec3(meta.bounds[0]);
    let hi: Vec3 = to_vec3(meta.bounds[1]);
    let mut scene = Scene::with_bounds(meta.model, lo, hi, meta.joints, meta.shapes, 0)?;

    let count = r.u32()?;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| Error::malformed(path, e))?;
        let rank = r.u32()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::malformed(path, "block too large"))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect::<Vec<_>>();
        blocks.push((name, shape, values));
    }
    if r.pos != data.len() {
        return Err(Error::malformed(path, "trailing bytes after the last block"));
    }

    let expected: Vec<(String, Vec<usize>)> = scene.blocks().into_iter().map(|b| (b.name, b.shape)).collect();
    if blocks.len() < expected.len() {
        return Err(Error::malformed(path, "missing parameter blocks"));
    }
    let mut rest = blocks.split_off(expected.len());
    for ((name, shape), (got_name, got_shape, _)) in expected.iter().zip(&blocks) {
        if name != got_name || shape != got_shape {
            return Err(Error::malformed(
                path,
                format!("block {got_name} {got_shape:?} where {name} {shape:?} was expected"),
            ));
        }
    }
    for (dst, (_, _, values)) in scene.blocks_mut().into_iter().zip(blocks) {
        dst.copy_from_slice(&values);
    }
    Ok(Checkpoint {
        scene,
        extra: meta.extra,
        extra_blocks: rest.drain(..).map(|(n, _, v)| (n, v)).collect(),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Scene> {
    Ok(read_checkpoint(path)?.scene)
}
