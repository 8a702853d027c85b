//! Perplexity, word-level perplexity for sub-word models, frequency-binned
//! losses and parameter accounting.

pub mod binning;
pub mod params;
pub mod report;

pub use binning::{bin_index, bin_loss, target_counts, Bin, BinMode, BinnedLoss, BIN_BOUNDS, BIN_LABELS};
pub use params::ParamBreakdown;
pub use report::{evaluate, unigram_perplexity, EvalOptions, EvalReport, TokenLoss};
