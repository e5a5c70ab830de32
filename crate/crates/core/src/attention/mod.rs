//! Attention numerics.
//!
//! [`dense`] holds the masked reference implementation used as the oracle;
//! [`sparse`] is the block-sparse streaming-softmax kernel that runs over the
//! gist-shift layout (or any other [`BlockPattern`]).

mod count;
mod dense;
mod sparse;
mod tensors;

pub use count::{attended_entry_count, EntryCount};
pub use dense::{dense_masked_attention, dense_masked_attention_backward};
pub use sparse::{sparse_backward, sparse_forward, sparse_row_weight_sums, BlockPattern, CausalLayout};
pub use tensors::{AttentionGrads, AttentionOutput, AttentionTensors, Scalar};
