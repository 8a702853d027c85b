//! Training blocks, evaluation blocks with context, and token-budget batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A span of the token stream. Position `j` predicts `targets[j]` from
/// `inputs[j]`, the stream token just before it, and everything earlier in
/// the block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    /// Stream offset of `targets[0]`.
    pub start: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    /// Positions whose loss counts; the others only provide context.
    pub score: Vec<bool>,
}

impl Block {
    fn from_stream(stream: &[u32], eos: u32, start: usize, len: usize, context: usize) -> Self {
        let inputs = (start..start + len)
            .map(|p| if p == 0 { eos } else { stream[p - 1] })
            .collect();
        Self {
            start,
            inputs,
            targets: stream[start..start + len].to_vec(),
            score: (0..len).map(|j| j >= context).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn scored(&self) -> usize {
        self.score.iter().filter(|&&s| s).count()
    }

    /// Whether position `j`'s input is a real stream token rather than the
    /// synthetic predecessor of the first token.
    pub fn has_predecessor(&self, j: usize) -> bool {
        self.start + j > 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockMode {
    /// Consecutive `block_size` spans ignoring sentence boundaries.
    TrainContiguous { keep_partial: bool },
    /// One sentence per block, split at `block_size` when longer.
    TrainSentences,
    /// Complete sentences scored once each, preceded by up to `context`
    /// already-scored tokens.
    EvalSentenceAligned { context: usize },
}

/// `(start, len)` of each sentence, the terminating `eos` included.
fn sentence_spans(stream: &[u32], eos: u32) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut s = 0;
    for (i, &t) in stream.iter().enumerate() {
        if t == eos {
            spans.push((s, i + 1 - s));
            s = i + 1;
        }
    }
    if s < stream.len() {
        spans.push((s, stream.len() - s));
    }
    spans
}

/// Cuts an id stream (sentences terminated by `eos`) into blocks.
pub fn make_blocks(stream: &[u32], eos: u32, block_size: usize, mode: BlockMode) -> Result<Vec<Block>> {
    if block_size == 0 {
        return Err(Error::InvalidArgument("block size must be positive".into()));
    }
    match mode {
        BlockMode::TrainContiguous { keep_partial } => {
            let mut blocks = Vec::new();
            let mut start = 0;
            while start < stream.len() {
                let len = block_size.min(stream.len() - start);
                if len < block_size && !keep_partial {
                    break;
                }
                blocks.push(Block::from_stream(stream, eos, start, len, 0));
                start += len;
            }
            Ok(blocks)
        }
        BlockMode::TrainSentences => Ok(sentence_spans(stream, eos)
            .into_iter()
            .flat_map(|(start, len)| {
                (0..len)
                    .step_by(block_size)
                    .map(move |off| (start + off, block_size.min(len - off)))
            })
            .map(|(s, l)| Block::from_stream(stream, eos, s, l, 0))
            .collect()),
        BlockMode::EvalSentenceAligned { context } => {
            if context >= block_size {
                return Err(Error::InvalidArgument(format!(
                    "context size {context} must be smaller than block size {block_size}"
                )));
            }
            let capacity = block_size - context;
            let sentences = sentence_spans(stream, eos);
            // score regions: greedy runs of whole sentences, long ones hard-split
            let mut regions: Vec<(usize, usize)> = Vec::new();
            let mut cur: Option<(usize, usize)> = None;
            for (start, len) in sentences {
                if len > capacity {
                    log::warn!("sentence at token {start} has {len} tokens, splitting at {capacity}");
                    if let Some(r) = cur.take() {
                        regions.push(r);
                    }
                    let mut off = 0;
                    while off < len {
                        let l = capacity.min(len - off);
                        regions.push((start + off, l));
                        off += l;
                    }
                    continue;
                }
                match cur {
                    Some((rs, rl)) if rl + len <= capacity => cur = Some((rs, rl + len)),
                    Some(r) => {
                        regions.push(r);
                        cur = Some((start, len));
                    }
                    None => cur = Some((start, len)),
                }
            }
            regions.extend(cur);
            Ok(regions
                .into_iter()
                .map(|(rs, rl)| {
                    let c = context.min(rs);
                    Block::from_stream(stream, eos, rs - c, rl + c, c)
                })
                .collect())
        }
    }
}

/// Groups examples by length so each group, padded to its longest member,
/// stays within `token_budget`. Returns example indices per batch, shortest
/// examples first.
pub fn make_batches(lengths: &[usize], token_budget: usize) -> Result<Vec<Vec<usize>>> {
    if let Some((index, &len)) = lengths.iter().enumerate().find(|(_, &l)| l > token_budget) {
        return Err(Error::ExampleTooLong {
            index,
            len,
            budget: token_budget,
        });
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| lengths[i]);
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    for i in order {
        // sorted ascending, so the newcomer is the longest
        if !cur.is_empty() && (cur.len() + 1) * lengths[i] > token_budget {
            batches.push(std::mem::take(&mut cur));
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    Ok(batches)
}

/// Deterministic per-epoch batch order.
pub fn shuffle_batches<T>(batches: &mut [T], seed: u64, epoch: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    batches.shuffle(&mut rng);
}

/// Blocks padded to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub len: usize,
    /// Row-major `[rows, len]`; padding uses `pad_id`.
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    /// True at real (non-padding) positions.
    pub valid: Vec<bool>,
    /// True at valid positions whose loss counts.
    pub score: Vec<bool>,
}

impl Batch {
    pub fn from_blocks(blocks: &[&Block], pad_id: u32) -> Self {
        let rows = blocks.len();
        let len = blocks.iter().map(|b| b.len()).max().unwrap_or(0);
        let mut batch = Self {
            rows,
            len,
            inputs: vec![pad_id; rows * len],
            targets: vec![pad_id; rows * len],
            valid: vec![false; rows * len],
            score: vec![false; rows * len],
        };
        for (r, b) in blocks.iter().enumerate() {
            let o = r * len;
            batch.inputs[o..o + b.len()].copy_from_slice(&b.inputs);
            batch.targets[o..o + b.len()].copy_from_slice(&b.targets);
            batch.valid[o..o + b.len()].iter_mut().for_each(|v| *v = true);
            batch.score[o..o + b.len()].copy_from_slice(&b.score);
        }
        batch
    }

    /// Padded size, the quantity bounded by the token budget.
    pub fn padded_tokens(&self) -> usize {
        self.rows * self.len
    }

    pub fn scored_tokens(&self) -> usize {
        self.score.iter().filter(|&&s| s).count()
    }
}
