//! Named parameter storage shared between layers.
//!
//! Layers hold [`ParamId`]s rather than values, so two layers referring to the
//! same id share storage: a write through either is visible through both.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Normal {
        std: f64,
    },
    /// Uniform on `[-bound, bound]`.
    Uniform {
        bound: f64,
    },
}

impl Init {
    /// Uniform fan-in initialization with unit variance gain.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform {
            bound: (3.0 / fan_in.max(1) as f64).sqrt(),
        }
    }
}

/// Shape and initializer of one parameter tensor, without storage.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    /// Allocates and initializes every spec in order from a seeded generator.
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::empty();
        for spec in specs {
            let n = spec.numel();
            let data: Vec<T> = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Constant(c) => vec![T::from_f64_lossy(c); n],
                Init::Normal { std } => {
                    let dist =
                        Normal::new(0.0, std).map_err(|e| TensorError::Invalid(format!("{}: {e}", spec.name)))?;
                    (0..n).map(|_| T::from_f64_lossy(dist.sample(&mut rng))).collect()
                }
                Init::Uniform { bound } => {
                    let dist = Uniform::new_inclusive(-bound, bound)
                        .map_err(|e| TensorError::Invalid(format!("{}: {e}", spec.name)))?;
                    (0..n).map(|_| T::from_f64_lossy(dist.sample(&mut rng))).collect()
                }
            };
            store.insert(&spec.name, Tensor::new(spec.shape.clone(), data)?)?;
        }
        Ok(store)
    }

    pub fn empty() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters, each storage counted once.
    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient accumulators aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    bufs: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            bufs: store.values.iter().map(|v| vec![T::zero(); v.numel()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.bufs[id.0]
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.bufs.iter().map(|b| b.as_slice())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.bufs.iter_mut()
    }

    pub fn scale(&mut self, c: T) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|x| *x = *x * c);
        }
    }

    /// Squared global 2-norm, accumulated in 64-bit.
    pub fn norm_sq(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| {
                let v = x.as_f64();
                v * v
            })
            .sum()
    }
}
