//! Corpus ingestion: vocabularies, frequency bands, BPE, blocks and batches.

pub mod binfile;
pub mod blocks;
pub mod bpe;
pub mod partition;
pub mod vocab;

pub use blocks::{make_batches, make_blocks, shuffle_batches, Batch, Block, BlockMode};
pub use bpe::{invert_units, learn_bpe, BpeModel, Segmentation};
pub use partition::{partition_vocab, ClusterPartition};
pub use vocab::{Vocabulary, EOS, UNK};

/// Reads a corpus file into lines.
pub fn read_lines(path: &std::path::Path) -> crate::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}
