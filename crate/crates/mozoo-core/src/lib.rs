//! Desk-scale reference-conditioned video diffusion.
//!
//! A miniature diffusion transformer generates a target video from a
//! packed four-segment token sequence (target, mesh, mask, reference) under
//! role-aware rotary coordinates and asymmetric decoupled attention, trained
//! with a rectified-flow objective on procedurally generated paired
//! triplets. Everything runs on CPU in f32 with deterministic seeding.

pub mod attention;
pub mod data;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod rope;
pub mod tensor;

pub use attention::{
    blockwise_attention, build_ada_mask, count_attended_pairs, dense_masked_attention, AttnMask,
    DenseMask, Segment, SegmentLayout,
};
pub use error::{Error, Result};
pub use model::{Checkpoint, ConditioningBundle, ModelConfig};
pub use rope::{assign_coords, rope_rotate, RefModality, Role, RoleCoord, RopeConfig};
pub use tensor::{Gradients, Graph, NodeId, OptimState, Tensor};
