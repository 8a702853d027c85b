//! Pre-norm self-attention decoder with sinusoidal positions.

use alm_tensor::{Init, ParamId, Real, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::layout::Layout;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub num_blocks: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub relu_dropout: f64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dimension {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "model dimension {} must be even",
                self.model_dim
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn dimension must be positive".into()));
        }
        for (name, rate) in [
            ("dropout", self.dropout),
            ("attention dropout", self.attn_dropout),
            ("relu dropout", self.relu_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} {rate} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Parameters of one block: attention `4e² + 4e`, FFN `2·e·e_ff + e_ff + e`,
    /// and two layer norms `4e`.
    pub fn block_parameters(&self) -> usize {
        let (e, f) = (self.model_dim, self.ffn_dim);
        4 * e * e + 4 * e + 2 * e * f + f + e + 4 * e
    }
}

/// `[len x dim]` with `sin(pos / 10000^(2i/dim))` at column `2i` and the
/// matching cosine at `2i + 1`.
pub fn sinusoidal_positions<T: Real>(len: usize, dim: usize) -> Result<Tensor<T>> {
    if dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("position dimension {dim} must be even")));
    }
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data.push(T::from_f64_lossy(angle.sin()));
            data.push(T::from_f64_lossy(angle.cos()));
        }
    }
    Ok(Tensor::new(vec![len, dim], data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub attn_norm: (ParamId, ParamId),
    /// `[e x 3e]` fused query, key and value projections.
    pub qkv: ParamId,
    pub qkv_bias: ParamId,
    pub out: ParamId,
    pub out_bias: ParamId,
    pub ffn_norm: (ParamId, ParamId),
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    config: DecoderConfig,
    blocks: Vec<DecoderBlock>,
    final_norm: (ParamId, ParamId),
}

fn norm_params(layout: &mut Layout, prefix: &str, e: usize) -> (ParamId, ParamId) {
    (
        layout.param(format!("{prefix}.gain"), &[e], Init::Ones),
        layout.param(format!("{prefix}.bias"), &[e], Init::Zeros),
    )
}

impl Decoder {
    pub fn new(layout: &mut Layout, prefix: &str, config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let (e, f) = (config.model_dim, config.ffn_dim);
        let blocks = (0..config.num_blocks)
            .map(|i| {
                let p = format!("{prefix}.block.{i}");
                DecoderBlock {
                    attn_norm: norm_params(layout, &format!("{p}.attn_norm"), e),
                    qkv: layout.param(format!("{p}.qkv"), &[e, 3 * e], Init::fan_in(e)),
                    qkv_bias: layout.param(format!("{p}.qkv_bias"), &[3 * e], Init::Zeros),
                    out: layout.param(format!("{p}.out"), &[e, e], Init::fan_in(e)),
                    out_bias: layout.param(format!("{p}.out_bias"), &[e], Init::Zeros),
                    ffn_norm: norm_params(layout, &format!("{p}.ffn_norm"), e),
                    w1: layout.param(format!("{p}.ffn1"), &[e, f], Init::fan_in(e)),
                    b1: layout.param(format!("{p}.ffn1_bias"), &[f], Init::Zeros),
                    w2: layout.param(format!("{p}.ffn2"), &[f, e], Init::fan_in(f)),
                    b2: layout.param(format!("{p}.ffn2_bias"), &[e], Init::Zeros),
                }
            })
            .collect();
        let final_norm = norm_params(layout, &format!("{prefix}.final_norm"), e);
        Ok(Self {
            config,
            blocks,
            final_norm,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[DecoderBlock] {
        &self.blocks
    }

    fn norm<T: Real>(tape: &mut Tape<T>, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
        let (g, b) = (tape.param(p.0), tape.param(p.1));
        Ok(tape.layer_norm(x, Some(g), Some(b))?)
    }

    fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (tape.param(w), tape.param(b));
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }

    /// Multi-head causal self-attention over `x: [rows*len x e]`.
    pub fn self_attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        block: &DecoderBlock,
        x: Var,
        rows: usize,
        len: usize,
    ) -> Result<Var> {
        let (e, h) = (self.config.model_dim, self.config.heads);
        let dh = e / h;
        let qkv = Self::linear(tape, x, block.qkv, block.qkv_bias)?;
        let qkv = tape.reshape(qkv, &[rows, len, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [None; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let s = tape.slice(qkv, 0, i, 1)?;
            *part = Some(tape.reshape(s, &[rows * h, len, dh])?);
        }
        let [q, k, v] = parts.map(Option::unwrap);
        let scores = tape.matmul_t(q, k, false, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = tape.causal_mask(scores)?;
        let weights = tape.softmax(scores)?;
        let weights = tape.dropout(weights, self.config.attn_dropout);
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.reshape(ctx, &[rows, h, len, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[rows * len, e])?;
        Self::linear(tape, ctx, block.out, block.out_bias)
    }

    pub fn feed_forward<T: Real>(&self, tape: &mut Tape<T>, block: &DecoderBlock, x: Var) -> Result<Var> {
        let y = Self::linear(tape, x, block.w1, block.b1)?;
        let y = tape.relu(y);
        let y = tape.dropout(y, self.config.relu_dropout);
        Self::linear(tape, y, block.w2, block.b2)
    }

    /// Hidden states for `x: [rows*len x e]` holding `rows` sequences of
    /// `len` positions, positional signal already added.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, rows: usize, len: usize) -> Result<Var> {
        let mut x = x;
        for block in &self.blocks {
            let y = Self::norm(tape, x, block.attn_norm)?;
            let y = self.self_attention(tape, block, y, rows, len)?;
            let y = tape.dropout(y, self.config.dropout);
            x = tape.add(x, y)?;
            let y = Self::norm(tape, x, block.ffn_norm)?;
            let y = self.feed_forward(tape, block, y)?;
            let y = tape.dropout(y, self.config.dropout);
            x = tape.add(x, y)?;
        }
        Self::norm(tape, x, self.final_norm)
    }
}
