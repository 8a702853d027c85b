//! Output layers: adaptive softmax with tail dropout, full softmax, and the
//! rules for sharing their weights with the input layer.

pub mod adaptive;
pub mod full;

pub use adaptive::AdaptiveSoftmax;
pub use full::FullSoftmax;

use alm_tensor::{Real, Tape, Var};

use crate::error::{Error, Result};
use crate::layout::WeightRef;

/// Which input-layer weights the output layer reuses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TyingConfig {
    pub tie_embeddings: bool,
    /// Tail projections only; the head projection is never shared.
    pub tie_projections: bool,
}

impl TyingConfig {
    pub const NONE: Self = Self {
        tie_embeddings: false,
        tie_projections: false,
    };
    pub const EMBEDDINGS: Self = Self {
        tie_embeddings: true,
        tie_projections: false,
    };
    pub const ALL: Self = Self {
        tie_embeddings: true,
        tie_projections: true,
    };

    pub fn validate(&self) -> Result<()> {
        if self.tie_projections && !self.tie_embeddings {
            return Err(Error::Config("tying projections requires tying embeddings".into()));
        }
        Ok(())
    }
}

/// `x · W` where `W` may be stored transposed.
pub(crate) fn apply_weight<T: Real>(tape: &mut Tape<T>, x: Var, w: WeightRef) -> Result<Var> {
    let p = tape.param(w.id);
    Ok(tape.matmul_t(x, p, false, w.transposed)?)
}
