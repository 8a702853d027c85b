//! Character CNN word encoder: character embeddings, a bank of convolution
//! filters with max-pooling over positions, highway layers and a projection.

use std::collections::{BTreeMap, HashMap};

use alm_tensor::{Init, ParamId, Real, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::layers::check_ids;
use crate::layout::Layout;

pub const CHAR_DIM: usize = 128;
/// Output features of the filters of width 1 through 7.
pub const FILTER_FEATURES: [usize; 7] = [128, 256, 384, 512, 512, 512, 512];

/// Character ids; id 0 stands for characters outside the inventory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CharInventory {
    ids: BTreeMap<char, u32>,
}

impl CharInventory {
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut chars: Vec<char> = words.into_iter().flat_map(str::chars).collect();
        chars.sort_unstable();
        chars.dedup();
        Self {
            ids: chars.into_iter().zip(1..).collect(),
        }
    }

    /// Number of character ids including the unknown one.
    pub fn len(&self) -> usize {
        self.ids.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, word: &str) -> Vec<u32> {
        word.chars().map(|c| self.ids.get(&c).copied().unwrap_or(0)).collect()
    }
}

/// Parameters of one highway layer over `dim` features.
#[derive(Clone, Debug, PartialEq)]
pub struct Highway {
    pub transform: ParamId,
    pub transform_bias: ParamId,
    pub gate: ParamId,
    pub gate_bias: ParamId,
}

impl Highway {
    pub fn new(layout: &mut Layout, prefix: &str, dim: usize) -> Self {
        Self {
            transform: layout.param(format!("{prefix}.transform"), &[dim, dim], Init::fan_in(dim)),
            transform_bias: layout.param(format!("{prefix}.transform_bias"), &[dim], Init::Zeros),
            gate: layout.param(format!("{prefix}.gate"), &[dim, dim], Init::fan_in(dim)),
            // start out mostly carrying the input through
            gate_bias: layout.param(format!("{prefix}.gate_bias"), &[dim], Init::Constant(-2.0)),
        }
    }
}

/// `y = t * relu(x W_h + b_h) + (1 - t) * x` with `t = sigmoid(x W_t + b_t)`,
/// row-wise over `x: [n x dim]`.
pub fn highway<T: Real>(tape: &mut Tape<T>, layer: &Highway, x: Var) -> Result<Var> {
    let (wh, bh) = (tape.param(layer.transform), tape.param(layer.transform_bias));
    let (wt, bt) = (tape.param(layer.gate), tape.param(layer.gate_bias));
    let h = tape.matmul(x, wh)?;
    let h = tape.add(h, bh)?;
    let g = tape.relu(h);
    let t = tape.matmul(x, wt)?;
    let t = tape.add(t, bt)?;
    let t = tape.sigmoid(t);
    let neg_x = tape.scale(x, -1.0);
    let diff = tape.add(g, neg_x)?;
    let gated = tape.mul(t, diff)?;
    Ok(tape.add(x, gated)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CharCnnEncoder {
    num_chars: usize,
    model_dim: usize,
    char_table: ParamId,
    /// `(width, [width*128 x features], [features])`.
    filters: Vec<(usize, ParamId, ParamId)>,
    highways: Vec<Highway>,
    /// `[2816 x e]`.
    projection: ParamId,
    /// Character ids of every vocabulary word.
    words: Vec<Vec<u32>>,
}

impl CharCnnEncoder {
    pub fn new(layout: &mut Layout, prefix: &str, num_chars: usize, highway_layers: usize, model_dim: usize) -> Self {
        let char_table = layout.param(
            format!("{prefix}.chars"),
            &[num_chars, CHAR_DIM],
            Init::Normal {
                std: (CHAR_DIM as f64).powf(-0.5),
            },
        );
        let filters = FILTER_FEATURES
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let w = i + 1;
                let fan = w * CHAR_DIM;
                (
                    w,
                    layout.param(format!("{prefix}.filter.{w}"), &[fan, f], Init::fan_in(fan)),
                    layout.param(format!("{prefix}.filter_bias.{w}"), &[f], Init::Zeros),
                )
            })
            .collect();
        let features = Self::features();
        let highways = (0..highway_layers)
            .map(|i| Highway::new(layout, &format!("{prefix}.highway.{i}"), features))
            .collect();
        let projection = layout.param(format!("{prefix}.proj"), &[features, model_dim], Init::fan_in(features));
        Self {
            num_chars,
            model_dim,
            char_table,
            filters,
            highways,
            projection,
            words: Vec::new(),
        }
    }

    /// Total convolution features, the sum over the filter bank.
    pub fn features() -> usize {
        FILTER_FEATURES.iter().sum()
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    pub fn num_highways(&self) -> usize {
        self.highways.len()
    }

    /// Binds vocabulary ids to character sequences.
    pub fn set_words(&mut self, words: Vec<Vec<u32>>) -> Result<()> {
        if let Some(c) = words.iter().flatten().find(|&&c| c as usize >= self.num_chars) {
            return Err(Error::TokenOutOfRange {
                id: *c as usize,
                size: self.num_chars,
            });
        }
        self.words = words;
        Ok(())
    }

    /// Encodes vocabulary ids; each distinct word goes through the CNN once.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ids: &[u32]) -> Result<Var> {
        check_ids(ids, self.words.len())?;
        let mut unique: Vec<u32> = Vec::new();
        let mut pos: HashMap<u32, usize> = HashMap::new();
        let rows: Vec<usize> = ids
            .iter()
            .map(|&id| {
                *pos.entry(id).or_insert_with(|| {
                    unique.push(id);
                    unique.len() - 1
                })
            })
            .collect();
        let words: Vec<&[u32]> = unique.iter().map(|&id| self.words[id as usize].as_slice()).collect();
        let pad = words.iter().map(|w| w.len()).max().unwrap_or(0);
        let encoded = self.encode_chars(tape, &words, pad)?;
        Ok(tape.embedding_lookup(encoded, &rows)?)
    }

    /// `[n x e]` encodings of character sequences padded to `pad_len`.
    pub fn encode_chars<T: Real>(&self, tape: &mut Tape<T>, words: &[&[u32]], pad_len: usize) -> Result<Var> {
        if let Some(i) = words.iter().position(|w| w.is_empty()) {
            return Err(Error::InvalidArgument(format!("word {i} has no characters")));
        }
        if words.is_empty() {
            return Err(Error::InvalidArgument("no words to encode".into()));
        }
        let max_len = words.iter().map(|w| w.len()).max().unwrap();
        if pad_len < max_len {
            return Err(Error::InvalidArgument(format!(
                "pad length {pad_len} below word length {max_len}"
            )));
        }
        let n = words.len();
        let pad_id = self.num_chars;
        let mut chars = Vec::with_capacity(n * pad_len);
        for w in words {
            if let Some(&c) = w.iter().find(|&&c| c as usize >= self.num_chars) {
                return Err(Error::TokenOutOfRange {
                    id: c as usize,
                    size: self.num_chars,
                });
            }
            chars.extend(w.iter().map(|&c| c as usize));
            chars.extend(std::iter::repeat_n(pad_id, pad_len - w.len()));
        }
        // padding looks up a constant zero row
        let table = tape.param(self.char_table);
        let zero = tape.constant(Tensor::zeros(&[1, CHAR_DIM]));
        let table = tape.concat(&[table, zero], 0)?;
        let x = tape.embedding_lookup(table, &chars)?;
        let x = tape.reshape(x, &[n, pad_len, CHAR_DIM])?;

        let mut pooled = Vec::with_capacity(self.filters.len());
        for &(w, filter, bias) in &self.filters {
            let windows = pad_len.max(w) - w + 1;
            let u = tape.unfold(x, w)?;
            let u = tape.reshape(u, &[n * windows, w * CHAR_DIM])?;
            let (f, b) = (tape.param(filter), tape.param(bias));
            let c = tape.matmul(u, f)?;
            let c = tape.add(c, b)?;
            let c = tape.tanh(c);
            let features = tape.shape(c)[1];
            let c = tape.reshape(c, &[n, windows, features])?;
            let mut mask = Vec::with_capacity(n * windows);
            for word in words {
                let valid = (word.len().max(w) - w + 1).min(windows);
                mask.extend((0..windows).map(|p| if p < valid { 0.0 } else { f64::NEG_INFINITY }));
            }
            let mask = tape.constant(Tensor::from_f64(&[n, windows, 1], &mask)?);
            let c = tape.add(c, mask)?;
            pooled.push(tape.max_over_axis(c, 1)?);
        }
        let mut h = tape.concat(&pooled, 1)?;
        for layer in &self.highways {
            h = highway(tape, layer, h)?;
        }
        let proj = tape.param(self.projection);
        Ok(tape.matmul(h, proj)?)
    }
}
