//! Full softmax over the whole vocabulary, optionally tied to a fixed-size
//! input table.

use alm_tensor::{Init, ParamId, Real, Tape, Var};

use crate::error::{Error, Result};
use crate::layers::{check_ids, FixedEmbedding};
use crate::layout::{Layout, WeightRef};
use crate::output::apply_weight;

#[derive(Clone, Debug, PartialEq)]
pub struct FullSoftmax {
    vocab_size: usize,
    /// `[e x d_out]`, present iff the hidden size differs from `d_out`.
    adapter: Option<ParamId>,
    /// `[d_out x |V|]`.
    weight: WeightRef,
}

impl FullSoftmax {
    pub fn new(layout: &mut Layout, prefix: &str, vocab_size: usize, dim: usize, model_dim: usize) -> Self {
        let adapter = Self::adapter(layout, prefix, dim, model_dim);
        let weight = WeightRef::owned(layout.param(
            format!("{prefix}.weight"),
            &[dim, vocab_size],
            Init::Normal {
                std: (dim as f64).powf(-0.5),
            },
        ));
        Self {
            vocab_size,
            adapter,
            weight,
        }
    }

    /// Shares the input table, viewed transposed.
    pub fn tied(
        layout: &mut Layout,
        prefix: &str,
        input: &FixedEmbedding,
        vocab_size: usize,
        model_dim: usize,
    ) -> Result<Self> {
        let table = layout.spec(input.table()).shape.clone();
        if table[0] != vocab_size {
            return Err(Error::Config(format!(
                "cannot tie a {vocab_size}-word output layer to a {}-word input table",
                table[0]
            )));
        }
        let adapter = Self::adapter(layout, prefix, input.dim(), model_dim);
        let weight = layout.alias(format!("{prefix}.weight"), input.table(), true);
        Ok(Self {
            vocab_size,
            adapter,
            weight,
        })
    }

    fn adapter(layout: &mut Layout, prefix: &str, dim: usize, model_dim: usize) -> Option<ParamId> {
        (dim != model_dim)
            .then(|| layout.param(format!("{prefix}.adapter"), &[model_dim, dim], Init::fan_in(model_dim)))
    }

    pub fn weight(&self) -> WeightRef {
        self.weight
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        let h = match self.adapter {
            Some(a) => {
                let a = tape.param(a);
                tape.matmul(h, a)?
            }
            None => h,
        };
        apply_weight(tape, h, self.weight)
    }

    pub fn log_probs<T: Real>(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        let logits = self.logits(tape, h)?;
        Ok(tape.log_softmax(logits)?)
    }

    pub fn token_nll<T: Real>(&self, tape: &mut Tape<T>, h: Var, targets: &[u32]) -> Result<Var> {
        check_ids(targets, self.vocab_size)?;
        let lsm = self.log_probs(tape, h)?;
        let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        let picked = tape.pick(lsm, &idx)?;
        Ok(tape.scale(picked, -1.0))
    }

    /// Mean cross-entropy over `targets`.
    pub fn loss<T: Real>(&self, tape: &mut Tape<T>, h: Var, targets: &[u32]) -> Result<Var> {
        let nll = self.token_nll(tape, h, targets)?;
        let total = tape.sum(nll);
        Ok(tape.scale(total, 1.0 / targets.len().max(1) as f64))
    }
}
