//! Global-norm gradient clipping and Nesterov momentum.

use alm_tensor::{Gradients, ParamStore, Real};

use crate::error::{Error, Result};

/// Rescales `grads` so their joint 2-norm is at most `threshold`. Returns the
/// norm before clipping; a non-finite norm leaves `grads` untouched.
pub fn clip_gradients<T: Real>(grads: &mut Gradients<T>, threshold: f64) -> Result<f64> {
    let norm = grads.norm_sq().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {norm}")));
    }
    if norm > threshold {
        let factor = threshold / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = T::from_f64_lossy(v.as_f64() * factor);
            }
        }
    }
    Ok(norm)
}

/// Velocity buffers, one per stored parameter. Tied weights share a stored
/// parameter and therefore one buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Vec<T>>,
    pub momentum: f64,
    pub step: usize,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64) -> Self {
        Self {
            velocity: store.ids().map(|id| vec![T::zero(); store.get(id).numel()]).collect(),
            momentum,
            step: 0,
        }
    }
}

/// One Nesterov update in the corrected form:
/// `v <- mu v - lr g`, then `p <- p + mu v - lr g` with the new `v`.
pub fn nesterov_step<T: Real>(store: &mut ParamStore<T>, grads: &Gradients<T>, state: &mut OptimizerState<T>, lr: f64) {
    let mu = T::from_f64_lossy(state.momentum);
    let lr = T::from_f64_lossy(lr);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let g = grads.get(id);
        let v = &mut state.velocity[id.0];
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            let step = lr * g[i];
            v[i] = mu * v[i] - step;
            p[i] = p[i] + mu * v[i] - step;
        }
    }
    state.step += 1;
}
