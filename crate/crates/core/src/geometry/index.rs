//! Bounding-volume hierarchy over triangles plus a kd-tree over vertices.
//!
//! Both structures only prune subtrees whose lower bound is strictly worse than the
//! current best candidate, and break distance ties by the lower element id, so query
//! results coincide with exhaustive search.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::OnceLock;

use super::closest::{closest_point_on_triangle, Region};
use super::mesh::TriMesh;
use crate::error::{Error, Result};
use crate::math::Vec3;

const TRI_LEAF: usize = 4;
const VERT_LEAF: usize = 8;

/// Nearest surface point of a mesh for a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPointResult {
    pub point: Vec3,
    pub triangle: usize,
    pub barycentric: [f64; 3],
    pub distance: f64,
    pub region: Region,
}

/// Signed distance plus its spatial gradient (unit, pointing away from the surface).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignedDistance {
    pub distance: f64,
    pub gradient: Vec3,
    pub closest: ClosestPointResult,
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            lo: Vec3::repeat(f64::INFINITY),
            hi: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    #[inline]
    fn grow(&mut self, p: &Vec3) {
        for k in 0..3 {
            self.lo[k] = self.lo[k].min(p[k]);
            self.hi[k] = self.hi[k].max(p[k]);
        }
    }

    fn union(&self, other: &Aabb) -> Aabb {
        let mut out = *self;
        out.grow(&other.lo);
        out.grow(&other.hi);
        out
    }

    #[inline]
    fn dist2(&self, p: &Vec3) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let gap = (self.lo[k] - p[k]).max(p[k] - self.hi[k]).max(0.0);
            d2 += gap * gap;
        }
        d2
    }

    fn longest_axis(&self) -> usize {
        let e = self.hi - self.lo;
        if e.x >= e.y && e.x >= e.z {
            0
        } else if e.y >= e.z {
            1
        } else {
            2
        }
    }
}

/// Lower bound `bound` can still beat (or tie) `best`.
#[inline]
fn may_contain(bound: f64, best: f64) -> bool {
    bound <= best * (1.0 + 1e-9) + 1e-300
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    /// Leaf: `start..end` into the item order. Internal: children at `left`, `left + 1`..
    start: u32,
    end: u32,
    left: u32,
    leaf: bool,
}

/// Generic static hierarchy over items with bounding boxes.
#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
    order: Vec<u32>,
}

impl Tree {
    fn build(boxes: &[Aabb], centers: &[Vec3], leaf_size: usize) -> Tree {
        let mut order: Vec<u32> = (0..boxes.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * boxes.len() / leaf_size + 1);
        nodes.push(Node {
            bounds: Aabb::empty(),
            start: 0,
            end: boxes.len() as u32,
            left: 0,
            leaf: true,
        });
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let (start, end) = (nodes[ni].start as usize, nodes[ni].end as usize);
            if end - start <= leaf_size {
                let mut bounds = Aabb::empty();
                for &i in &order[start..end] {
                    bounds = bounds.union(&boxes[i as usize]);
                }
                nodes[ni].bounds = bounds;
                continue;
            }
            let mut cbounds = Aabb::empty();
            for &i in &order[start..end] {
                cbounds.grow(&centers[i as usize]);
            }
            let axis = cbounds.longest_axis();
            let mid = (start + end) / 2;
            order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
                centers[a as usize][axis].total_cmp(&centers[b as usize][axis]).then(a.cmp(&b))
            });
            let left = nodes.len();
            for (s, e) in [(start, mid), (mid, end)] {
                nodes.push(Node {
                    bounds: Aabb::empty(),
                    start: s as u32,
                    end: e as u32,
                    left: 0,
                    leaf: true,
                });
            }
            nodes[ni].leaf = false;
            nodes[ni].left = left as u32;
            stack.push(left);
            stack.push(left + 1);
        }
        // children always sit after their parent
        for ni in (0..nodes.len()).rev() {
            if !nodes[ni].leaf {
                let l = nodes[ni].left as usize;
                nodes[ni].bounds = nodes[l].bounds.union(&nodes[l + 1].bounds);
            }
        }
        Tree { nodes, order }
    }

    fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.leaf).count()
    }
}

/// Spatial acceleration over a mesh's triangles (closest point) and vertices (k-NN).
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    mesh: TriMesh,
    /// Built on the first closest-point query; k-NN users never pay for it.
    tris: OnceLock<Tree>,
    verts: Tree,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    id: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl SpatialIndex {
    pub fn build(mesh: TriMesh) -> Result<Self> {
        if mesh.is_empty() || mesh.vertices().is_empty() {
            return Err(Error::EmptyMesh);
        }
        let vboxes: Vec<Aabb> = mesh.vertices().iter().map(|v| Aabb { lo: *v, hi: *v }).collect();
        let verts = Tree::build(&vboxes, mesh.vertices(), VERT_LEAF);
        Ok(SpatialIndex {
            mesh,
            tris: OnceLock::new(),
            verts,
        })
    }

    fn tris(&self) -> &Tree {
        self.tris.get_or_init(|| {
            let mesh = &self.mesh;
            let (boxes, centers): (Vec<Aabb>, Vec<Vec3>) = (0..mesh.triangles().len())
                .map(|t| {
                    let pts = mesh.triangle_points(t);
                    let mut b = Aabb::empty();
                    pts.iter().for_each(|p| b.grow(p));
                    (b, (pts[0] + pts[1] + pts[2]) / 3.0)
                })
                .unzip();
            Tree::build(&boxes, &centers, TRI_LEAF)
        })
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn triangle_leaf_count(&self) -> usize {
        self.tris().leaf_count()
    }

    /// Globally nearest surface point; ties go to the lowest triangle id.
    pub fn closest_point(&self, x: &Vec3) -> Result<ClosestPointResult> {
        check_finite(x)?;
        let mut best = Candidate {
            d2: f64::INFINITY,
            id: u32::MAX,
        };
        let mut best_hit = None;
        let tris = self.tris();
        let mut stack = Vec::with_capacity(64);
        stack.push(0u32);
        while let Some(ni) = stack.pop() {
            let node = &tris.nodes[ni as usize];
            if !may_contain(node.bounds.dist2(x), best.d2) {
                continue;
            }
            if node.leaf {
                for &t in &tris.order[node.start as usize..node.end as usize] {
                    let [a, b, c] = self.mesh.triangle_points(t as usize);
                    let (p, bary, region) = closest_point_on_triangle(x, &a, &b, &c);
                    let cand = Candidate {
                        d2: (x - p).norm_squared(),
                        id: t,
                    };
                    if cand < best {
                        best = cand;
                        best_hit = Some((p, bary, region));
                    }
                }
            } else {
                let (l, r) = (node.left, node.left + 1);
                let dl = tris.nodes[l as usize].bounds.dist2(x);
                let dr = tris.nodes[r as usize].bounds.dist2(x);
                // nearer child on top of the stack
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        let (point, barycentric, region) = best_hit.expect("non-empty mesh has a closest triangle");
        Ok(ClosestPointResult {
            point,
            triangle: best.id as usize,
            barycentric,
            distance: best.d2.sqrt(),
            region,
        })
    }

    /// Angle-weighted pseudo-normal of the feature a closest point lies on.
    pub fn pseudo_normal(&self, hit: &ClosestPointResult) -> Vec3 {
        let t = hit.triangle;
        match hit.region {
            Region::Face => self.mesh.face_normal(t),
            Region::Edge(k) => self.mesh.edge_normal(t, k as usize),
            Region::Vertex(k) => {
                self.mesh.vertex_normal(self.mesh.triangles()[t][k as usize] as usize)
            }
        }
    }

    /// Signed distance to the surface, negative inside.
    pub fn signed_distance(&self, x: &Vec3) -> Result<f64> {
        Ok(self.signed_distance_with_gradient(x)?.distance)
    }

    pub fn signed_distance_with_gradient(&self, x: &Vec3) -> Result<SignedDistance> {
        let hit = self.closest_point(x)?;
        let normal = self.pseudo_normal(&hit);
        let offset = x - hit.point;
        let sign = if offset.dot(&normal) < 0.0 { -1.0 } else { 1.0 };
        let gradient = if hit.distance > 0.0 {
            offset * (sign / hit.distance)
        } else {
            normal
        };
        Ok(SignedDistance {
            distance: sign * hit.distance,
            gradient,
            closest: hit,
        })
    }

    /// Distance to the nearest vertex, signed by that vertex's pseudo-normal.
    pub fn signed_vertex_distance(&self, x: &Vec3) -> Result<SignedDistance> {
        let (v, dist) = self.knn_vertices(x, 1)?[0];
        let p = self.mesh.vertices()[v];
        let normal = self.mesh.vertex_normal(v);
        let offset = x - p;
        let sign = if offset.dot(&normal) < 0.0 { -1.0 } else { 1.0 };
        let gradient = if dist > 0.0 { offset * (sign / dist) } else { normal };
        Ok(SignedDistance {
            distance: sign * dist,
            gradient,
            closest: ClosestPointResult {
                point: p,
                triangle: usize::MAX,
                barycentric: [1.0, 0.0, 0.0],
                distance: dist,
                region: Region::Vertex(0),
            },
        })
    }

    /// `k` nearest vertices as `(id, distance)`, ascending, ties by id.
    pub fn knn_vertices(&self, x: &Vec3, k: usize) -> Result<Vec<(usize, f64)>> {
        check_finite(x)?;
        let n = self.mesh.vertices().len();
        if k == 0 || k > n {
            return Err(Error::Parameter(format!("k = {k} must lie in 1..={n}")));
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        let mut stack = Vec::with_capacity(64);
        stack.push(0u32);
        while let Some(ni) = stack.pop() {
            let node = &self.verts.nodes[ni as usize];
            let worst = if heap.len() == k {
                heap.peek().map_or(f64::INFINITY, |c| c.d2)
            } else {
                f64::INFINITY
            };
            if !may_contain(node.bounds.dist2(x), worst) {
                continue;
            }
            if node.leaf {
                for &v in &self.verts.order[node.start as usize..node.end as usize] {
                    let cand = Candidate {
                        d2: (x - self.mesh.vertices()[v as usize]).norm_squared(),
                        id: v,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            } else {
                let (l, r) = (node.left, node.left + 1);
                let dl = self.verts.nodes[l as usize].bounds.dist2(x);
                let dr = self.verts.nodes[r as usize].bounds.dist2(x);
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| (c.id as usize, c.d2.sqrt()))
            .collect())
    }
}

fn check_finite(x: &Vec3) -> Result<()> {
    if x.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("spatial query point"))
    }
}

/// Exhaustive closest point, used as a reference for the hierarchy.
pub fn brute_force_closest(mesh: &TriMesh, x: &Vec3) -> ClosestPointResult {
    let mut best: Option<(Candidate, ClosestPointResult)> = None;
    for t in 0..mesh.triangles().len() {
        let [a, b, c] = mesh.triangle_points(t);
        let (p, bary, region) = closest_point_on_triangle(x, &a, &b, &c);
        let cand = Candidate {
            d2: (x - p).norm_squared(),
            id: t as u32,
        };
        if best.as_ref().is_none_or(|(b, _)| cand < *b) {
            best = Some((
                cand,
                ClosestPointResult {
                    point: p,
                    triangle: t,
                    barycentric: bary,
                    distance: cand.d2.sqrt(),
                    region,
                },
            ));
        }
    }
    best.expect("mesh has triangles").1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mesh::{cube, icosphere};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_square() -> TriMesh {
        let v = vec![
            Vec3::new(-1.0, -1.0, 0.0),
            Vec3::new(1.0, -1.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(-1.0, 1.0, 0.0),
        ];
        TriMesh::new(v, vec![[0, 1, 2], [0, 2, 3]]).unwrap()
    }

    #[test]
    fn single_triangle_has_one_leaf() {
        let m = TriMesh::new(vec![Vec3::zeros(), Vec3::x(), Vec3::y()], vec![[0, 1, 2]]).unwrap();
        let idx = SpatialIndex::build(m.clone()).unwrap();
        assert_eq!(idx.triangle_leaf_count(), 1);
        let q = Vec3::new(0.3, 0.3, 0.5);
        let direct = closest_point_on_triangle(&q, &Vec3::zeros(), &Vec3::x(), &Vec3::y());
        let hit = idx.closest_point(&q).unwrap();
        assert_eq!(hit.point, direct.0);
        assert_eq!(hit.distance, 0.5);
    }

    #[test]
    fn empty_mesh_is_rejected() {
        let m = TriMesh::new(vec![], vec![]).unwrap();
        assert!(matches!(SpatialIndex::build(m), Err(Error::EmptyMesh)));
    }

    #[test]
    fn foot_point_above_square() {
        let idx = SpatialIndex::build(unit_square()).unwrap();
        let hit = idx.closest_point(&Vec3::new(0.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(hit.point, Vec3::zeros(), epsilon = 1e-15);
        assert_relative_eq!(hit.distance, 2.0, epsilon = 1e-15);
        // The origin lies on the shared diagonal: both triangles tie, lowest id wins.
        assert_eq!(hit.triangle, 0);
    }

    #[test]
    fn query_on_vertex_returns_vertex() {
        let idx = SpatialIndex::build(icosphere(2)).unwrap();
        let v = idx.mesh().vertices()[17];
        let hit = idx.closest_point(&v).unwrap();
        assert_eq!(hit.distance, 0.0);
        assert_eq!(hit.point, v);
        assert_eq!(idx.signed_distance(&v).unwrap(), 0.0);
        let knn = idx.knn_vertices(&v, 1).unwrap();
        assert_eq!(knn, vec![(17, 0.0)]);
    }

    #[test]
    fn non_finite_query_is_rejected() {
        let idx = SpatialIndex::build(icosphere(0)).unwrap();
        assert!(idx.closest_point(&Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
        assert!(idx.knn_vertices(&Vec3::new(0.0, f64::INFINITY, 0.0), 1).is_err());
    }

    #[test]
    fn cube_centroid_is_half_inside() {
        let idx = SpatialIndex::build(cube(-0.5, 0.5)).unwrap();
        assert_relative_eq!(idx.signed_distance(&Vec3::zeros()).unwrap(), -0.5, epsilon = 1e-12);
        assert_relative_eq!(
            idx.signed_distance(&Vec3::new(0.9, 0.9, 0.9)).unwrap(),
            (3.0f64 * 0.4 * 0.4).sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn hierarchy_matches_brute_force_bitwise() {
        let m = icosphere(3);
        let idx = SpatialIndex::build(m.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let q = Vec3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
            );
            let a = idx.closest_point(&q).unwrap();
            let b = brute_force_closest(&m, &q);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn knn_matches_sorted_brute_force() {
        let m = icosphere(3);
        let idx = SpatialIndex::build(m.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let q = Vec3::new(
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
            );
            let mut all: Vec<(f64, usize)> = m
                .vertices()
                .iter()
                .enumerate()
                .map(|(i, v)| ((q - v).norm_squared(), i))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expect: Vec<(usize, f64)> = all[..4].iter().map(|&(d2, i)| (i, d2.sqrt())).collect();
            assert_eq!(idx.knn_vertices(&q, 4).unwrap(), expect);
        }
    }

    #[test]
    fn knn_all_vertices_sorted() {
        let m = icosphere(1);
        let n = m.vertices().len();
        let idx = SpatialIndex::build(m).unwrap();
        let all = idx.knn_vertices(&Vec3::new(0.1, 0.2, 0.3), n).unwrap();
        assert_eq!(all.len(), n);
        assert!(all.windows(2).all(|w| w[0].1 <= w[1].1));
        assert!(idx.knn_vertices(&Vec3::zeros(), n + 1).is_err());
        assert!(idx.knn_vertices(&Vec3::zeros(), 0).is_err());
    }
}
