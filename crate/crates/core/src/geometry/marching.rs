//! Iso-surface extraction on a regular grid.
//!
//! Every cube is split into six tetrahedra around its main diagonal. Neighbouring cubes
//! then agree on the diagonal of each shared face, so the extracted surface has no cracks
//! and no ambiguous configurations.

use std::collections::HashMap;

use rayon::prelude::*;

use super::mesh::TriMesh;
use crate::error::{Error, Result};
use crate::math::Vec3;

/// Regular sampling lattice: `resolution[k]` nodes along axis `k`, spanning `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub resolution: [usize; 3],
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Grid {
    pub fn cube(resolution: usize, lo: Vec3, hi: Vec3) -> Self {
        Grid {
            resolution: [resolution; 3],
            lo,
            hi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution.iter().any(|&r| r < 2) {
            return Err(Error::Parameter(format!(
                "grid resolution {:?} needs at least 2 nodes per axis",
                self.resolution
            )));
        }
        if (0..3).any(|k| !(self.hi[k] > self.lo[k])) {
            return Err(Error::Parameter("grid bounds must have positive extent".into()));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> Vec3 {
        let [nx, ny, nz] = self.resolution;
        let e = self.hi - self.lo;
        Vec3::new(e.x / (nx - 1) as f64, e.y / (ny - 1) as f64, e.z / (nz - 1) as f64)
    }

    pub fn node_count(&self) -> usize {
        self.resolution.iter().product()
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    #[inline]
    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let c = self.cell_size();
        self.lo + Vec3::new(i as f64 * c.x, j as f64 * c.y, k as f64 * c.z)
    }

    /// All node positions in index order (x fastest).
    pub fn node_positions(&self) -> Vec<Vec3> {
        let [nx, ny, nz] = self.resolution;
        let mut out = Vec::with_capacity(self.node_count());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    out.push(self.node_position(i, j, k));
                }
            }
        }
        out
    }
}

/// Cube corners are numbered by bits (x = 1, y = 2, z = 4); each tetrahedron walks
/// from corner 0 to corner 7 along one axis permutation.
const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

/// Extracts the `iso` level set of `field`; the field is evaluated once per node.
pub fn marching_cubes<F>(field: F, grid: &Grid, iso: f64) -> Result<TriMesh>
where
    F: Fn(&Vec3) -> f64 + Sync,
{
    grid.validate()?;
    let values: Vec<f64> = grid.node_positions().par_iter().map(&field).collect();
    marching_cubes_values(&values, grid, iso)
}

/// Same as [`marching_cubes`] on precomputed node values (x-fastest order).
///
/// Triangles are oriented so their normals point toward larger field values.
pub fn marching_cubes_values(values: &[f64], grid: &Grid, iso: f64) -> Result<TriMesh> {
    grid.validate()?;
    if values.len() != grid.node_count() {
        return Err(Error::Shape(format!(
            "{} field values for {} grid nodes",
            values.len(),
            grid.node_count()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("field value on grid"));
    }

    let [nx, ny, nz] = grid.resolution;
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut lookup: HashMap<(usize, usize), u32> = HashMap::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();

    let mut crossing = |inside: usize, outside: usize, pin: &Vec3, pout: &Vec3, verts: &mut Vec<Vec3>| {
        let (fi, fo) = (values[inside], values[outside]);
        // a node sitting exactly on the level set owns the vertex
        let key = if fo == iso { (outside, outside) } else { (inside, outside) };
        *lookup.entry(key).or_insert_with(|| {
            let t = (iso - fi) / (fo - fi);
            verts.push(pin + (pout - pin) * t);
            (verts.len() - 1) as u32
        })
    };

    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let ids: [usize; 8] = std::array::from_fn(|c| {
                    grid.node_index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1))
                });
                let inside_mask = ids.iter().fold(0u8, |m, &id| (m << 1) | u8::from(values[id] < iso));
                if inside_mask == 0 || inside_mask == 0xff {
                    continue;
                }
                let pos: [Vec3; 8] = std::array::from_fn(|c| {
                    grid.node_position(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1))
                });
                for tet in &TETS {
                    let (ins, outs): (Vec<usize>, Vec<usize>) =
                        tet.iter().partition(|&&c| values[ids[c]] < iso);
                    if ins.is_empty() || outs.is_empty() {
                        continue;
                    }
                    let reference = outs.iter().map(|&c| pos[c]).sum::<Vec3>() / outs.len() as f64
                        - ins.iter().map(|&c| pos[c]).sum::<Vec3>() / ins.len() as f64;
                    let mut edge = |a: usize, b: usize, verts: &mut Vec<Vec3>| {
                        crossing(ids[a], ids[b], &pos[a], &pos[b], verts)
                    };
                    let polygon: Vec<u32> = match (ins.len(), outs.len()) {
                        (1, 3) => outs.iter().map(|&o| edge(ins[0], o, &mut vertices)).collect(),
                        (3, 1) => ins.iter().map(|&n| edge(n, outs[0], &mut vertices)).collect(),
                        _ => vec![
                            edge(ins[0], outs[0], &mut vertices),
                            edge(ins[0], outs[1], &mut vertices),
                            edge(ins[1], outs[1], &mut vertices),
                            edge(ins[1], outs[0], &mut vertices),
                        ],
                    };
                    for fan in 1..polygon.len() - 1 {
                        let mut tri = [polygon[0], polygon[fan], polygon[fan + 1]];
                        let [a, b, c] = tri.map(|v| vertices[v as usize]);
                        if (b - a).cross(&(c - a)).dot(&reference) < 0.0 {
                            tri.swap(1, 2);
                        }
                        triangles.push(tri);
                    }
                }
            }
        }
    }
    TriMesh::new(vertices, triangles)
}
