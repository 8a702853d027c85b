//! Adaptive input embeddings: one table per frequency band with shrinking
//! dimension, each projected to the common model dimension.

use alm_tensor::{Init, ParamId, Real, Tape, Var};

use crate::corpus::ClusterPartition;
use crate::error::{Error, Result};
use crate::layers::check_ids;
use crate::layout::Layout;

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveInputEmbedding {
    partition: ClusterPartition,
    /// `[|V_i| x d_i]` per band.
    tables: Vec<ParamId>,
    /// `[d_i x d]` per band, head included.
    projections: Vec<ParamId>,
}

impl AdaptiveInputEmbedding {
    pub fn new(layout: &mut Layout, prefix: &str, partition: ClusterPartition) -> Self {
        let d = partition.head_dim();
        let mut tables = Vec::new();
        let mut projections = Vec::new();
        for (i, (&size, &dim)) in partition.band_sizes().iter().zip(partition.band_dims()).enumerate() {
            tables.push(layout.param(
                format!("{prefix}.table.{i}"),
                &[size, dim],
                Init::Normal {
                    std: (dim as f64).powf(-0.5),
                },
            ));
            projections.push(layout.param(format!("{prefix}.proj.{i}"), &[dim, d], Init::fan_in(dim)));
        }
        Self {
            partition,
            tables,
            projections,
        }
    }

    pub fn partition(&self) -> &ClusterPartition {
        &self.partition
    }

    pub fn tables(&self) -> &[ParamId] {
        &self.tables
    }

    pub fn projections(&self) -> &[ParamId] {
        &self.projections
    }

    pub fn output_dim(&self) -> usize {
        self.partition.head_dim()
    }

    /// `[T x d]` embeddings in input order.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ids: &[u32]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("no input ids".into()));
        }
        check_ids(ids, self.partition.vocab_size())?;
        let n = self.partition.num_bands();
        let mut locals: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut slot = vec![(0usize, 0usize); ids.len()];
        for (t, &id) in ids.iter().enumerate() {
            let (band, local) = self.partition.locate(id as usize).expect("checked id");
            slot[t] = (band, locals[band].len());
            locals[band].push(local);
        }
        let mut parts = Vec::new();
        let mut offsets = vec![0usize; n];
        let mut rows = 0;
        for (i, local) in locals.iter().enumerate() {
            offsets[i] = rows;
            if local.is_empty() {
                continue;
            }
            let table = tape.param(self.tables[i]);
            let proj = tape.param(self.projections[i]);
            let e = tape.embedding_lookup(table, local)?;
            parts.push(tape.matmul(e, proj)?);
            rows += local.len();
        }
        let grouped = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts, 0)?
        };
        let order: Vec<usize> = slot.iter().map(|&(b, j)| offsets[b] + j).collect();
        Ok(tape.embedding_lookup(grouped, &order)?)
    }
}
