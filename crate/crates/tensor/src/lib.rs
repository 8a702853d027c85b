//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! Values are eager; each primitive applied through a [`Tape`] records what
//! [`Tape::backward`] needs. Parameters live in a [`ParamStore`] and enter a
//! tape through [`Tape::param`], which is how layers share storage.

mod error;
pub mod gradcheck;
mod params;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport};
pub use params::{Gradients, Init, ParamId, ParamSpec, ParamStore};
pub use real::Real;
pub use tape::{prim, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{numel, Tensor};
