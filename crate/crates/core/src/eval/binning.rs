//! Mean loss binned by word frequency, keyed on the scored word or on the
//! word before it.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::eval::report::EvalReport;

/// Upper bounds of the frequency bins; the last bin is unbounded.
pub const BIN_BOUNDS: [u64; 6] = [10, 100, 1_000, 10_000, 100_000, 1_000_000];
pub const BIN_LABELS: [&str; 7] = ["10", "100", "1K", "10K", "100K", "1M", "1M+"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinMode {
    CurrentWord,
    PreviousWord,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bin {
    pub label: &'static str,
    pub types: usize,
    pub tokens: usize,
    pub loss_sum: f64,
}

impl Bin {
    pub fn mean_loss(&self) -> f64 {
        if self.tokens == 0 {
            f64::NAN
        } else {
            self.loss_sum / self.tokens as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinnedLoss {
    pub mode: BinMode,
    pub bins: Vec<Bin>,
    /// Tokens without a predecessor, left out in previous-word mode.
    pub excluded: usize,
}

/// Index of the first bin whose upper bound is at least `count`.
pub fn bin_index(count: u64) -> usize {
    BIN_BOUNDS.iter().position(|&b| count <= b).unwrap_or(BIN_BOUNDS.len())
}

/// Bins the scored tokens of `report`; `freq[id]` is the frequency used for
/// word `id` (normally its training count).
pub fn bin_loss(report: &EvalReport, freq: &[u64], mode: BinMode) -> BinnedLoss {
    let mut bins: Vec<Bin> = BIN_LABELS
        .iter()
        .map(|&label| Bin {
            label,
            ..Bin::default()
        })
        .collect();
    let mut seen: Vec<HashSet<u32>> = vec![HashSet::new(); bins.len()];
    let mut excluded = 0;
    for t in &report.tokens {
        let key = match mode {
            BinMode::CurrentWord => t.target,
            BinMode::PreviousWord => match t.prev {
                Some(p) => p,
                None => {
                    excluded += 1;
                    continue;
                }
            },
        };
        let b = bin_index(freq.get(key as usize).copied().unwrap_or(0));
        bins[b].tokens += 1;
        bins[b].loss_sum += t.loss;
        seen[b].insert(key);
    }
    for (bin, s) in bins.iter_mut().zip(&seen) {
        bin.types = s.len();
    }
    BinnedLoss { mode, bins, excluded }
}

/// Frequencies of each id among the scored targets, for test-set binning.
pub fn target_counts(report: &EvalReport, vocab_size: usize) -> Vec<u64> {
    let mut counts = vec![0u64; vocab_size];
    for t in &report.tokens {
        counts[t.target as usize] += 1;
    }
    counts
}

impl BinnedLoss {
    pub fn total_tokens(&self) -> usize {
        self.bins.iter().map(|b| b.tokens).sum()
    }

    /// `bin_bound,types,token_count,mean_loss`, one row per bin.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_bound,types,token_count,mean_loss\n");
        for b in &self.bins {
            let mean = if b.tokens == 0 {
                "nan".to_string()
            } else {
                format!("{:.6}", b.mean_loss())
            };
            writeln!(s, "{},{},{},{}", b.label, b.types, b.tokens, mean).unwrap();
        }
        s
    }
}
