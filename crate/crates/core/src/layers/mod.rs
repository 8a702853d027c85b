//! Input representations: adaptive input embeddings, fixed-size embeddings
//! with an optional dimension adapter, and a character CNN encoder.

pub mod adaptive_input;
pub mod charcnn;
pub mod fixed;

pub use adaptive_input::AdaptiveInputEmbedding;
pub use charcnn::{highway, CharCnnEncoder, CharInventory, Highway, CHAR_DIM, FILTER_FEATURES};
pub use fixed::FixedEmbedding;

use crate::error::{Error, Result};

pub(crate) fn check_ids(ids: &[u32], size: usize) -> Result<()> {
    match ids.iter().find(|&&id| id as usize >= size) {
        Some(&id) => Err(Error::TokenOutOfRange { id: id as usize, size }),
        None => Ok(()),
    }
}
