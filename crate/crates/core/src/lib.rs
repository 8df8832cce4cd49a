//! Deformable neural signed-distance human avatars.
//!
//! A parametric capsule body drives an inverse-skinning map from observation space into a
//! canonical space, where a tri-plane feature grid and small MLPs hold color and a residual
//! on top of the body's own signed distance. Images come from SDF-based volume rendering,
//! and the whole chain is differentiable so a scene can be fitted to multi-view targets.

pub mod body;
pub mod canonical;
pub mod error;
pub mod field;
pub mod fit;
pub mod geometry;
pub mod math;
pub mod objectives;
pub mod render;
pub mod verify;

pub use error::{Error, Result};
