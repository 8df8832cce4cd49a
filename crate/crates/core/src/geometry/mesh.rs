use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Vec3;

/// Twice the area below which a triangle is treated as degenerate and dropped.
const DEGENERATE_AREA2: f64 = 1e-18;

/// Indexed triangle mesh with face normals and angle-weighted pseudo-normals.
///
/// Unreferenced vertices carry a zero pseudo-normal; every other normal is unit length.
#[derive(Debug, Clone)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    face_normals: Vec<Vec3>,
    vertex_normals: Vec<Vec3>,
    /// Pseudo-normal of edge `k` (vertices `k`, `k+1 mod 3`) of each triangle.
    edge_normals: Vec<[Vec3; 3]>,
    dropped: usize,
}

impl TriMesh {
    /// Builds a mesh, dropping zero-area triangles. Fails on out-of-range indices.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len();
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("mesh vertex"));
        }
        let mut kept = Vec::with_capacity(triangles.len());
        let mut face_normals = Vec::with_capacity(triangles.len());
        for t in &triangles {
            if t.iter().any(|&i| i as usize >= n) {
                return Err(Error::Invariant(format!(
                    "triangle {t:?} references a vertex outside 0..{n}"
                )));
            }
            let [a, b, c] = t.map(|i| vertices[i as usize]);
            let cross = (b - a).cross(&(c - a));
            let area2 = cross.norm();
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] || area2 <= DEGENERATE_AREA2 {
                continue;
            }
            kept.push(*t);
            face_normals.push(cross / area2);
        }
        let dropped = triangles.len() - kept.len();

        let mut vertex_normals = vec![Vec3::zeros(); n];
        // (edge, face, corner) triples sorted by edge, so each edge's faces are adjacent
        let mut edges: Vec<(u64, u32)> = Vec::with_capacity(kept.len() * 3);
        for (f, (t, fnormal)) in kept.iter().zip(&face_normals).enumerate() {
            for k in 0..3 {
                let i = t[k] as usize;
                let p = vertices[i];
                let e1 = vertices[t[(k + 1) % 3] as usize] - p;
                let e2 = vertices[t[(k + 2) % 3] as usize] - p;
                let angle = e1.angle(&e2);
                vertex_normals[i] += fnormal * angle;
                let (a, b) = edge_key(t[k], t[(k + 1) % 3]);
                edges.push(((a as u64) << 32 | b as u64, (f as u32) << 2 | k as u32));
            }
        }
        edges.sort_unstable();
        let mut edge_normals = vec![[Vec3::zeros(); 3]; kept.len()];
        for group in edges.chunk_by(|a, b| a.0 == b.0) {
            let s: Vec3 = group.iter().map(|&(_, fk)| face_normals[(fk >> 2) as usize]).sum();
            let len = s.norm();
            for &(_, fk) in group {
                let (f, k) = ((fk >> 2) as usize, (fk & 3) as usize);
                // opposite faces cancel on a folded edge; fall back to the face itself
                edge_normals[f][k] = if len > 1e-12 { s / len } else { face_normals[f] };
            }
        }
        for nrm in &mut vertex_normals {
            let len = nrm.norm();
            if len > 0.0 {
                *nrm /= len;
            }
        }

        Ok(TriMesh {
            vertices,
            triangles: kept,
            face_normals,
            vertex_normals,
            edge_normals,
            dropped,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn face_normal(&self, tri: usize) -> Vec3 {
        self.face_normals[tri]
    }

    pub fn face_normals(&self) -> &[Vec3] {
        &self.face_normals
    }

    pub fn vertex_normal(&self, v: usize) -> Vec3 {
        self.vertex_normals[v]
    }

    pub fn vertex_normals(&self) -> &[Vec3] {
        &self.vertex_normals
    }

    pub fn edge_normal(&self, tri: usize, edge: usize) -> Vec3 {
        self.edge_normals[tri][edge]
    }

    /// Number of degenerate triangles removed at construction.
    pub fn dropped_triangles(&self) -> usize {
        self.dropped
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_points(&self, tri: usize) -> [Vec3; 3] {
        self.triangles[tri].map(|i| self.vertices[i as usize])
    }

    /// Axis-aligned bounds `(min, max)` of the vertex set.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }

    /// Number of distinct undirected edges.
    pub fn edge_count(&self) -> usize {
        let mut edges: Vec<(u32, u32)> = self
            .triangles
            .iter()
            .flat_map(|t| (0..3).map(move |k| edge_key(t[k], t[(k + 1) % 3])))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges.len()
    }

    /// `V - E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i as usize] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_count() as i64 + self.triangles.len() as i64
    }

    /// True when every edge is shared by exactly two triangles with opposite orientation.
    pub fn is_watertight(&self) -> bool {
        let mut directed: HashMap<(u32, u32), i32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &count)| count == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// Signed volume via the divergence theorem (positive for outward orientation).
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn to_obj_string(&self, with_normals: bool) -> String {
        let mut out = String::with_capacity(self.vertices.len() * 48 + self.triangles.len() * 24);
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", sig9(v.x), sig9(v.y), sig9(v.z));
        }
        if with_normals {
            for n in &self.vertex_normals {
                let _ = writeln!(out, "vn {} {} {}", sig9(n.x), sig9(n.y), sig9(n.z));
            }
        }
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| i + 1);
            if with_normals {
                let _ = writeln!(out, "f {a}//{a} {b}//{b} {c}//{c}");
            } else {
                let _ = writeln!(out, "f {a} {b} {c}");
            }
        }
        out
    }

    pub fn write_obj(&self, path: &Path, with_normals: bool) -> Result<()> {
        std::fs::write(path, self.to_obj_string(with_normals)).map_err(|e| Error::io(path, e))
    }

    /// Parses `v` and `f` records; polygons are fan-triangulated, normals recomputed.
    pub fn from_obj_str(text: &str, origin: &Path) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let bad = |what: &str| Error::malformed(origin, format!("line {}: {what}", lineno + 1));
            match parts.next() {
                Some("v") => {
                    let coords: Vec<f64> = parts
                        .take(3)
                        .map(|s| s.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("bad vertex coordinate"))?;
                    if coords.len() != 3 {
                        return Err(bad("vertex needs three coordinates"));
                    }
                    vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
                }
                Some("f") => {
                    let idx: Vec<u32> = parts
                        .map(|tok| {
                            let first = tok.split('/').next().unwrap_or("");
                            let i: i64 = first.parse().map_err(|_| bad("bad face index"))?;
                            let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                            u32::try_from(resolved).map_err(|_| bad("face index out of range"))
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(bad("face needs at least three vertices"));
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        TriMesh::new(vertices, triangles)
    }

    pub fn read_obj(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_obj_str(&text, path)
    }
}

#[inline]
fn edge_key(a: u32, b: u32) -> (u32, u32) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Decimal rendering with nine significant digits.
pub(crate) fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).clamp(0, 40) as usize;
    format!("{x:.decimals$}")
}

/// Unit icosphere (radius 1) after `subdivisions` rounds of 4-to-1 splitting.
pub fn icosphere(subdivisions: u32) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(u32, u32), u32> = HashMap::new();
        let mut mid = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            *midpoint.entry(edge_key(a, b)).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalize());
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TriMesh::new(vertices, faces).expect("icosphere is well formed")
}

/// Axis-aligned cube `[lo, hi]^3` with outward-facing triangles.
pub fn cube(lo: f64, hi: f64) -> TriMesh {
    let v = |x: usize, y: usize, z: usize| {
        let pick = |b: usize| if b == 0 { lo } else { hi };
        Vec3::new(pick(x), pick(y), pick(z))
    };
    let vertices: Vec<Vec3> = (0..8).map(|i| v(i & 1, (i >> 1) & 1, (i >> 2) & 1)).collect();
    let quads = [
        [0, 2, 3, 1], // z = lo
        [4, 5, 7, 6], // z = hi
        [0, 1, 5, 4], // y = lo
        [2, 6, 7, 3], // y = hi
        [0, 4, 6, 2], // x = lo
        [1, 3, 7, 5], // x = hi
    ];
    let triangles = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    TriMesh::new(vertices, triangles).expect("cube is well formed")
}
