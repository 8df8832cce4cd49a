//! Canonical avatar representation: tri-plane features, positional encoding and MLP decoders.

mod checkpoint;
mod encoding;
mod eval;
mod mlp;
mod scene;
mod triplane;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use encoding::PositionalEncoding;
pub use eval::{field_backward, field_eval, field_forward, field_gradient, FieldAdjoint, FieldForward, FieldSample};
pub use mlp::{Activation, Layer, Mlp, MlpCache, MlpGrad};
pub use scene::{round_to_storage, ModelConfig, ParamBlock, ParamGroup, Scene, SceneGrad, SdfScheme};
pub use triplane::{TriPlane, PLANE_AXES};
