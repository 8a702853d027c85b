//! Fixed-size word embeddings with an optional bias-free adapter to the model
//! dimension.

use alm_tensor::{Init, ParamId, Real, Tape, Var};

use crate::error::Result;
use crate::layers::check_ids;
use crate::layout::Layout;

#[derive(Clone, Debug, PartialEq)]
pub struct FixedEmbedding {
    vocab_size: usize,
    dim: usize,
    /// `[|V| x d_in]`.
    table: ParamId,
    /// `[d_in x e]`, present iff `d_in != e`.
    adapter: Option<ParamId>,
}

impl FixedEmbedding {
    pub fn new(layout: &mut Layout, prefix: &str, vocab_size: usize, dim: usize, model_dim: usize) -> Self {
        let table = layout.param(
            format!("{prefix}.table"),
            &[vocab_size, dim],
            Init::Normal {
                std: (dim as f64).powf(-0.5),
            },
        );
        let adapter =
            (dim != model_dim).then(|| layout.param(format!("{prefix}.adapter"), &[dim, model_dim], Init::fan_in(dim)));
        Self {
            vocab_size,
            dim,
            table,
            adapter,
        }
    }

    pub fn table(&self) -> ParamId {
        self.table
    }

    pub fn adapter(&self) -> Option<ParamId> {
        self.adapter
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ids: &[u32]) -> Result<Var> {
        check_ids(ids, self.vocab_size)?;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let table = tape.param(self.table);
        let x = tape.embedding_lookup(table, &idx)?;
        Ok(match self.adapter {
            Some(a) => {
                let a = tape.param(a);
                tape.matmul(x, a)?
            }
            None => x,
        })
    }
}
