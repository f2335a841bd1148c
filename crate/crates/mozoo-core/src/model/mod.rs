//! The miniature diffusion transformer: configuration, patch tokenization,
//! sequence packing, the forward pass and checkpoint serialization.

mod checkpoint;
mod config;
mod dit;
mod patch;

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use dit::{
    forward, pack_sequence, sinusoid_embedding, timestep_embed, unpack_target, BlockModulation,
    ConditioningBundle, Modulation,
};
pub(crate) use dit::forward_graph;
pub use patch::{patchify, unpatchify, TokenSite};
