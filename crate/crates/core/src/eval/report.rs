//! Perplexity evaluation over blocks with context-only positions.

use alm_tensor::{ParamStore, Real, Tape};

use crate::corpus::{Batch, Block};
use crate::error::{Error, Result};
use crate::model::LanguageModel;

/// Loss of one scored stream token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenLoss {
    /// Offset in the evaluated stream.
    pub position: usize,
    pub target: u32,
    /// The token before it, when the stream has one.
    pub prev: Option<u32>,
    /// Negative log-likelihood, natural log.
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub tokens: Vec<TokenLoss>,
}

impl EvalReport {
    pub fn from_tokens(tokens: Vec<TokenLoss>) -> Self {
        Self { tokens }
    }

    pub fn count(&self) -> usize {
        self.tokens.len()
    }

    pub fn total_nll(&self) -> f64 {
        self.tokens.iter().map(|t| t.loss).sum()
    }

    pub fn mean_nll(&self) -> f64 {
        self.total_nll() / self.count() as f64
    }

    pub fn perplexity(&self) -> f64 {
        self.mean_nll().exp()
    }

    /// Word-level report for a sub-word stream: a word's loss is the sum of
    /// its units' losses. `word_end[p]` marks stream positions that finish a
    /// word. Each word entry carries the position and id of its last unit.
    pub fn word_level(&self, word_end: &[bool]) -> Result<EvalReport> {
        let mut words = Vec::new();
        let mut acc = 0.0;
        let mut open: Option<usize> = None;
        for t in &self.tokens {
            if t.position >= word_end.len() {
                return Err(Error::InvalidArgument(format!(
                    "word boundary map covers {} positions, token at {}",
                    word_end.len(),
                    t.position
                )));
            }
            if let Some(p) = open {
                if t.position != p + 1 {
                    return Err(Error::InvalidArgument(format!(
                        "word continuing at {p} is not scored at {}",
                        p + 1
                    )));
                }
            }
            acc += t.loss;
            if word_end[t.position] {
                words.push(TokenLoss { loss: acc, ..*t });
                acc = 0.0;
                open = None;
            } else {
                open = Some(t.position);
            }
        }
        if open.is_some() {
            return Err(Error::InvalidArgument("scored stream ends inside a word".into()));
        }
        Ok(EvalReport { tokens: words })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Blocks per forward pass.
    pub max_rows: usize,
    /// Worker threads; blocks are split between them and merged in order.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_rows: 8,
            threads: 1,
        }
    }
}

fn score_batch<T: Real>(
    model: &LanguageModel,
    store: &ParamStore<T>,
    blocks: &[Block],
    pad: u32,
) -> Result<Vec<TokenLoss>> {
    let refs: Vec<&Block> = blocks.iter().collect();
    let batch = Batch::from_blocks(&refs, pad);
    let mut out = Vec::with_capacity(batch.scored_tokens());
    if batch.scored_tokens() == 0 {
        return Ok(out);
    }
    let mut tape = Tape::with_params(store);
    let (nll, positions) = model.token_losses(&mut tape, &batch)?;
    let losses = tape.value(nll).data();
    for (&flat, &loss) in positions.iter().zip(losses) {
        let (r, j) = (flat / batch.len, flat % batch.len);
        let block = &blocks[r];
        out.push(TokenLoss {
            position: block.start + j,
            target: block.targets[j],
            prev: block.has_predecessor(j).then_some(block.inputs[j]),
            loss: loss.as_f64(),
        });
    }
    Ok(out)
}

/// Scores every flagged position of `blocks` in evaluation mode.
pub fn evaluate<T: Real>(
    model: &LanguageModel,
    store: &ParamStore<T>,
    blocks: &[Block],
    pad: u32,
    options: EvalOptions,
) -> Result<EvalReport> {
    let rows = options.max_rows.max(1);
    let chunks: Vec<&[Block]> = blocks.chunks(rows).collect();
    let threads = options.threads.clamp(1, chunks.len().max(1));
    let per_thread = chunks.len().div_ceil(threads);
    let results: Vec<Result<Vec<TokenLoss>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per_thread.max(1))
            .map(|work| {
                s.spawn(move || {
                    let mut out = Vec::new();
                    for chunk in work {
                        out.extend(score_batch(model, store, chunk, pad)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut tokens = Vec::new();
    for r in results {
        tokens.extend(r?);
    }
    Ok(EvalReport { tokens })
}

/// Perplexity of an add-one smoothed unigram model estimated from
/// `train_counts` on `targets`.
pub fn unigram_perplexity(train_counts: &[u64], targets: &[u32]) -> f64 {
    let total: f64 = train_counts.iter().map(|&c| c as f64).sum::<f64>() + train_counts.len() as f64;
    let nll: f64 = targets
        .iter()
        .map(|&t| -(((train_counts[t as usize] + 1) as f64) / total).ln())
        .sum();
    (nll / targets.len() as f64).exp()
}

const LOSSES_MAGIC: &[u8; 4] = b"ALML";

impl EvalReport {
    /// Per-token losses as a little-endian sidecar: magic, u64 count, then
    /// per token u64 position, u32 target, i64 previous id (-1 for none) and
    /// f64 loss.
    pub fn encode_losses(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.tokens.len() * 28);
        out.extend_from_slice(LOSSES_MAGIC);
        out.extend_from_slice(&(self.tokens.len() as u64).to_le_bytes());
        for t in &self.tokens {
            out.extend_from_slice(&(t.position as u64).to_le_bytes());
            out.extend_from_slice(&t.target.to_le_bytes());
            out.extend_from_slice(&t.prev.map_or(-1i64, i64::from).to_le_bytes());
            out.extend_from_slice(&t.loss.to_le_bytes());
        }
        out
    }

    pub fn decode_losses(bytes: &[u8]) -> Result<EvalReport> {
        let bad = || Error::Format("truncated or malformed loss file".into());
        if bytes.len() < 12 || &bytes[..4] != LOSSES_MAGIC {
            return Err(bad());
        }
        let n = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != n.checked_mul(28).ok_or_else(bad)? {
            return Err(bad());
        }
        let tokens = body
            .chunks_exact(28)
            .map(|c| {
                let prev = i64::from_le_bytes(c[12..20].try_into().unwrap());
                TokenLoss {
                    position: u64::from_le_bytes(c[..8].try_into().unwrap()) as usize,
                    target: u32::from_le_bytes(c[8..12].try_into().unwrap()),
                    prev: u32::try_from(prev).ok(),
                    loss: f64::from_le_bytes(c[20..28].try_into().unwrap()),
                }
            })
            .collect();
        Ok(EvalReport { tokens })
    }
}
