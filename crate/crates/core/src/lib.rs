//! Language modeling with adaptive input embeddings and adaptive softmax.

pub mod config;
pub mod corpus;
pub mod decoder;
mod error;
pub mod eval;
pub mod layers;
pub mod layout;
pub mod model;
pub mod output;
pub mod trainer;

pub use error::{Error, Result};
