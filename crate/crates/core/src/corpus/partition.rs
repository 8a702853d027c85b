//! Frequency bands of the vocabulary with geometrically shrinking capacity.

use crate::corpus::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Split of a frequency-ordered vocabulary into contiguous bands. Band `i`
/// has dimension `head_dim / factor^i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterPartition {
    band_sizes: Vec<usize>,
    head_dim: usize,
    factor: usize,
    band_dims: Vec<usize>,
    offsets: Vec<usize>,
}

impl ClusterPartition {
    pub fn new(band_sizes: &[usize], head_dim: usize, factor: usize) -> Result<Self> {
        if band_sizes.is_empty() {
            return Err(Error::Partition("no bands".into()));
        }
        if let Some(i) = band_sizes.iter().position(|&s| s == 0) {
            return Err(Error::Partition(format!("band {i} is empty")));
        }
        if head_dim == 0 || factor == 0 {
            return Err(Error::Partition(format!(
                "head dim {head_dim} and factor {factor} must be positive"
            )));
        }
        let mut band_dims = Vec::with_capacity(band_sizes.len());
        let mut div = 1usize;
        for i in 0..band_sizes.len() {
            if i > 0 {
                div = div
                    .checked_mul(factor)
                    .ok_or_else(|| Error::Partition("factor overflow".into()))?;
            }
            if head_dim % div != 0 || head_dim / div == 0 {
                return Err(Error::Partition(format!(
                    "band {i}: dimension {head_dim}/{factor}^{i} is not a positive integer"
                )));
            }
            band_dims.push(head_dim / div);
        }
        let mut offsets = vec![0];
        for &s in band_sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        Ok(Self {
            band_sizes: band_sizes.to_vec(),
            head_dim,
            factor,
            band_dims,
            offsets,
        })
    }

    pub fn num_bands(&self) -> usize {
        self.band_sizes.len()
    }

    pub fn band_sizes(&self) -> &[usize] {
        &self.band_sizes
    }

    pub fn band_dims(&self) -> &[usize] {
        &self.band_dims
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn vocab_size(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// First id of band `b`.
    pub fn band_start(&self, b: usize) -> usize {
        self.offsets[b]
    }

    /// Band containing `id` and the id's index within it.
    pub fn locate(&self, id: usize) -> Option<(usize, usize)> {
        if id >= self.vocab_size() {
            return None;
        }
        let b = self.offsets.partition_point(|&o| o <= id) - 1;
        Some((b, id - self.offsets[b]))
    }

    /// Human-readable list of fields that differ from `other`.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let mut out = Vec::new();
        if self.band_sizes != other.band_sizes {
            out.push(format!("band sizes {:?} vs {:?}", self.band_sizes, other.band_sizes));
        }
        if self.head_dim != other.head_dim {
            out.push(format!("head dim {} vs {}", self.head_dim, other.head_dim));
        }
        if self.factor != other.factor {
            out.push(format!("factor {} vs {}", self.factor, other.factor));
        }
        out
    }
}

/// Partitions `vocab`; the band sizes must cover it exactly.
pub fn partition_vocab(
    vocab: &Vocabulary,
    band_sizes: &[usize],
    head_dim: usize,
    factor: usize,
) -> Result<ClusterPartition> {
    let actual: usize = band_sizes.iter().sum();
    if actual != vocab.len() {
        return Err(Error::BandSum {
            expected: vocab.len(),
            actual,
        });
    }
    ClusterPartition::new(band_sizes, head_dim, factor)
}
