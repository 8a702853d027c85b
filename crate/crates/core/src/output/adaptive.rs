//! Adaptive softmax: the head scores frequent words plus one logit per tail
//! cluster; each tail cluster scores its words through a reduced-dimension
//! projection.

use alm_tensor::{Init, ParamId, Real, Tape, Tensor, Var};

use crate::corpus::ClusterPartition;
use crate::error::{Error, Result};
use crate::layers::{check_ids, AdaptiveInputEmbedding};
use crate::layout::{Layout, WeightRef};
use crate::output::{apply_weight, TyingConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveSoftmax {
    partition: ClusterPartition,
    /// `[d x |V_1|]`.
    head_words: WeightRef,
    /// `[d x (n-1)]`, one column per tail cluster.
    head_clusters: Option<ParamId>,
    /// `[d x d_i]` per tail band.
    tail_projections: Vec<WeightRef>,
    /// `[d_i x |V_i|]` per tail band.
    tail_tables: Vec<WeightRef>,
    tail_dropout: f64,
}

impl AdaptiveSoftmax {
    /// An output layer with its own weights.
    pub fn new(layout: &mut Layout, prefix: &str, partition: ClusterPartition, tail_dropout: f64) -> Self {
        let d = partition.head_dim();
        let head_words = WeightRef::owned(layout.param(
            format!("{prefix}.head"),
            &[d, partition.band_sizes()[0]],
            Init::Normal {
                std: (d as f64).powf(-0.5),
            },
        ));
        let mut tail_projections = Vec::new();
        let mut tail_tables = Vec::new();
        for i in 1..partition.num_bands() {
            let (size, dim) = (partition.band_sizes()[i], partition.band_dims()[i]);
            tail_projections.push(WeightRef::owned(layout.param(
                format!("{prefix}.tail_proj.{i}"),
                &[d, dim],
                Init::fan_in(d),
            )));
            tail_tables.push(WeightRef::owned(layout.param(
                format!("{prefix}.tail_table.{i}"),
                &[dim, size],
                Init::Normal {
                    std: (dim as f64).powf(-0.5),
                },
            )));
        }
        let head_clusters = Self::cluster_columns(layout, prefix, &partition);
        Self {
            partition,
            head_words,
            head_clusters,
            tail_projections,
            tail_tables,
            tail_dropout,
        }
    }

    /// An output layer sharing storage with `input` as selected by `tying`.
    /// Shared weights are viewed transposed; cluster logits and, without
    /// projection tying, tail projections stay private.
    pub fn tied(
        layout: &mut Layout,
        prefix: &str,
        partition: ClusterPartition,
        input: &AdaptiveInputEmbedding,
        tying: TyingConfig,
        tail_dropout: f64,
    ) -> Result<Self> {
        tying.validate()?;
        let diff = input.partition().diff(&partition);
        if !diff.is_empty() {
            return Err(Error::PartitionMismatch(diff.join("; ")));
        }
        if !tying.tie_embeddings {
            return Ok(Self::new(layout, prefix, partition, tail_dropout));
        }
        let d = partition.head_dim();
        let head_words = layout.alias(format!("{prefix}.head"), input.tables()[0], true);
        let mut tail_projections = Vec::new();
        let mut tail_tables = Vec::new();
        for i in 1..partition.num_bands() {
            tail_projections.push(if tying.tie_projections {
                layout.alias(format!("{prefix}.tail_proj.{i}"), input.projections()[i], true)
            } else {
                WeightRef::owned(layout.param(
                    format!("{prefix}.tail_proj.{i}"),
                    &[d, partition.band_dims()[i]],
                    Init::fan_in(d),
                ))
            });
            tail_tables.push(layout.alias(format!("{prefix}.tail_table.{i}"), input.tables()[i], true));
        }
        let head_clusters = Self::cluster_columns(layout, prefix, &partition);
        Ok(Self {
            partition,
            head_words,
            head_clusters,
            tail_projections,
            tail_tables,
            tail_dropout,
        })
    }

    fn cluster_columns(layout: &mut Layout, prefix: &str, partition: &ClusterPartition) -> Option<ParamId> {
        let d = partition.head_dim();
        (partition.num_bands() > 1).then(|| {
            layout.param(
                format!("{prefix}.clusters"),
                &[d, partition.num_bands() - 1],
                Init::Normal {
                    std: (d as f64).powf(-0.5),
                },
            )
        })
    }

    pub fn partition(&self) -> &ClusterPartition {
        &self.partition
    }

    pub fn tail_dropout(&self) -> f64 {
        self.tail_dropout
    }

    pub fn head_words(&self) -> WeightRef {
        self.head_words
    }

    pub fn head_clusters(&self) -> Option<ParamId> {
        self.head_clusters
    }

    pub fn tail_projections(&self) -> &[WeightRef] {
        &self.tail_projections
    }

    pub fn tail_tables(&self) -> &[WeightRef] {
        &self.tail_tables
    }

    /// `[T x (|V_1| + n - 1)]` unnormalized head scores.
    pub fn head_logits<T: Real>(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        let words = apply_weight(tape, h, self.head_words)?;
        match self.head_clusters {
            Some(c) => {
                let c = tape.param(c);
                let clusters = tape.matmul(h, c)?;
                Ok(tape.concat(&[words, clusters], 1)?)
            }
            None => Ok(words),
        }
    }

    /// Dropout on a tail projection output; identity outside training.
    pub fn apply_tail_dropout<T: Real>(&self, tape: &mut Tape<T>, projected: Var) -> Var {
        tape.dropout(projected, self.tail_dropout)
    }

    fn tail_log_softmax<T: Real>(&self, tape: &mut Tape<T>, h: Var, band: usize) -> Result<Var> {
        let p = apply_weight(tape, h, self.tail_projections[band - 1])?;
        let p = self.apply_tail_dropout(tape, p);
        let logits = apply_weight(tape, p, self.tail_tables[band - 1])?;
        Ok(tape.log_softmax(logits)?)
    }

    /// `[T x |V|]` log-probabilities over the whole vocabulary.
    pub fn log_probs<T: Real>(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        let head = self.head_logits(tape, h)?;
        let head = tape.log_softmax(head)?;
        let v1 = self.partition.band_sizes()[0];
        if self.partition.num_bands() == 1 {
            return Ok(head);
        }
        let mut parts = vec![tape.slice(head, 1, 0, v1)?];
        for band in 1..self.partition.num_bands() {
            let cluster = tape.slice(head, 1, v1 + band - 1, 1)?;
            let within = self.tail_log_softmax(tape, h, band)?;
            parts.push(tape.add(within, cluster)?);
        }
        Ok(tape.concat(&parts, 1)?)
    }

    /// Per-token negative log-likelihood `[T]`. Only the head and the tail
    /// clusters containing some target are evaluated.
    pub fn token_nll<T: Real>(&self, tape: &mut Tape<T>, h: Var, targets: &[u32]) -> Result<Var> {
        check_ids(targets, self.partition.vocab_size())?;
        let v1 = self.partition.band_sizes()[0];
        let n = self.partition.num_bands();
        let mut head_cols = Vec::with_capacity(targets.len());
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut locals: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (t, &target) in targets.iter().enumerate() {
            let (band, local) = self.partition.locate(target as usize).expect("checked id");
            if band == 0 {
                head_cols.push(local);
            } else {
                head_cols.push(v1 + band - 1);
                rows[band].push(t);
                locals[band].push(local);
            }
        }
        let head = self.head_logits(tape, h)?;
        let head = tape.log_softmax(head)?;
        let mut logp = tape.pick(head, &head_cols)?;
        if rows.iter().any(|r| !r.is_empty()) {
            // scatter tail terms back into token order; head tokens read row 0
            let mut parts = vec![tape.constant(Tensor::zeros(&[1]))];
            let mut gather = vec![0usize; targets.len()];
            let mut offset = 1;
            for band in 1..n {
                if rows[band].is_empty() {
                    continue;
                }
                let hb = tape.embedding_lookup(h, &rows[band])?;
                let lsm = self.tail_log_softmax(tape, hb, band)?;
                parts.push(tape.pick(lsm, &locals[band])?);
                for (j, &t) in rows[band].iter().enumerate() {
                    gather[t] = offset + j;
                }
                offset += rows[band].len();
            }
            let all = tape.concat(&parts, 0)?;
            let all = tape.reshape(all, &[offset, 1])?;
            let tail = tape.embedding_lookup(all, &gather)?;
            let tail = tape.reshape(tail, &[targets.len()])?;
            logp = tape.add(logp, tail)?;
        }
        Ok(tape.scale(logp, -1.0))
    }

    /// Mean negative log-likelihood over `targets`.
    pub fn nll_loss<T: Real>(&self, tape: &mut Tape<T>, h: Var, targets: &[u32]) -> Result<Var> {
        let nll = self.token_nll(tape, h, targets)?;
        let total = tape.sum(nll);
        Ok(tape.scale(total, 1.0 / targets.len().max(1) as f64))
    }
}
