//! Gist-token sequence compression.
//!
//! The crate builds the gist-augmented token layout, the unified sparse
//! visibility rule, a gist-shifted block-sparse attention kernel with a dense
//! oracle, a small decoder-only transformer that trains in one pass under that
//! rule, and a KV-cache engine that drops raw tokens once they leave the
//! local window.

pub mod attention;
pub mod error;
pub mod gistshift;
pub mod harness;
pub mod inference;
pub mod layout;
pub mod model;
pub mod visibility;

pub use error::{Error, Result};
pub use gistshift::{gist_shift, inblock_mask, visible_blocks, BlockLayout, ShiftPermutation, TileKind};
pub use layout::{augment, pad_to_ratio, AugmentedSequence, CompressionConfig, SpecialTokens, TokenKind, TokenSlot};
pub use visibility::{build_chunk_mask, build_unified_mask, visible_set, ChunkBaselineSpec, DenseMask};
