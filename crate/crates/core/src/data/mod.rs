//! Interaction ingestion, binary click matrices, user-level splits and
//! synthetic data.

mod ingest;
mod matrix;
mod split;
mod synth;

pub use ingest::{
    ingest, read_interactions, summary, write_interactions, IngestConfig, Ingested, Interaction,
};
pub use matrix::{parse_key_values, ClickMatrix};
pub use split::{split, HeldoutPair, Split, SplitConfig, SplitSpec};
pub use synth::{
    cluster_block, cluster_distribution, synthesize, SynthConfig, Synthetic, IN_BLOCK_MASS,
};
