//! Triangle-mesh spatial queries and iso-surface extraction.

mod closest;
mod index;
mod marching;
mod mesh;

pub use closest::{closest_point_on_triangle, Region};
pub use index::{brute_force_closest, ClosestPointResult, SignedDistance, SpatialIndex};
pub use marching::{marching_cubes, marching_cubes_values, Grid};
pub use mesh::{cube, icosphere, TriMesh};
#[allow(unused_imports)]
pub(crate) use mesh::sig9;
