//! Paired activation shards, the corpus manifest, and a synthetic two-model
//! generator with planted ground-truth latents.
//!
//! A shard file is a fixed 24-byte little-endian header followed by the
//! row-major `f32` payload:
//!
//! | offset | size | field                        |
//! |-------:|-----:|------------------------------|
//! | 0      | 4    | magic `XDSH`                 |
//! | 4      | 4    | version (`u32`, currently 1) |
//! | 8      | 4    | dtype code (`u32`, 0 = f32)  |
//! | 12     | 4    | `d_model` (`u32`)            |
//! | 16     | 8    | `n_tokens` (`u64`)           |
//! | 24     | ...  | payload                      |

mod format;
mod manifest;
mod reader;
mod synth;

pub use format::{read_header, read_shard, write_matrix_shard, write_shard, ShardHeader, SHARD_HEADER_LEN, SHARD_MAGIC};
pub use manifest::{Document, Manifest};
pub use reader::{read_pair, BatchSource, InMemoryPairs, PairedReader};
pub use synth::{generate_synthetic, SynthConfig, SynthGroundTruth, SyntheticCorpus};
