//! Segment layout bookkeeping, asymmetric decoupled attention masks, the
//! dense oracle path, the blockwise efficient path, and attended-pair
//! accounting.

mod kernels;
mod layout;
mod mask;

pub use kernels::{blockwise_attention, dense_masked_attention};
pub(crate) use kernels::{block_bwd, block_fwd, dense_bwd, dense_fwd, BlockAux, DenseAux};
pub use layout::{Segment, SegmentLayout};
pub use mask::{build_ada_mask, count_attended_pairs, AttnMask, DenseMask, MaskGroup};
