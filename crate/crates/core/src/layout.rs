//! Parameter layout: every tensor a model owns plus the views it shares.
//!
//! A layout is built before any storage exists, so parameter counts are
//! available for full-size configurations without allocating them.

use alm_tensor::{Init, ParamId, ParamSpec, ParamStore, Real};

use crate::error::Result;

/// A parameter as seen by one layer, possibly through a transposed view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeightRef {
    pub id: ParamId,
    pub transposed: bool,
}

impl WeightRef {
    pub fn owned(id: ParamId) -> Self {
        Self { id, transposed: false }
    }
}

/// A named view onto a parameter owned elsewhere in the layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alias {
    pub name: String,
    pub target: ParamId,
    pub transposed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub aliases: Vec<Alias>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares an owned parameter. Ids follow declaration order, matching
    /// [`ParamStore::from_specs`].
    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn alias(&mut self, name: impl Into<String>, target: ParamId, transposed: bool) -> WeightRef {
        self.aliases.push(Alias {
            name: name.into(),
            target,
            transposed,
        });
        WeightRef { id: target, transposed }
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    /// Owned parameter elements; shared views are not counted again.
    pub fn total(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Owned elements whose names start with `prefix`.
    pub fn total_with_prefix(&self, prefix: &str) -> usize {
        self.specs
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(ParamSpec::numel)
            .sum()
    }

    /// Elements reachable through aliases, i.e. counted once but used twice.
    pub fn shared(&self) -> usize {
        self.aliases.iter().map(|a| self.specs[a.target.0].numel()).sum()
    }

    pub fn allocate<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        Ok(ParamStore::from_specs(&self.specs, seed)?)
    }
}
