//! Gradient accumulation, clipping and optimizer updates over a resumable
//! data stream.

use std::time::Instant;

use alm_tensor::{Gradients, ParamStore, Real, Tape};

use crate::corpus::{make_batches, shuffle_batches, Batch, Block};
use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::model::LanguageModel;
use crate::trainer::checkpoint::{Checkpoint, DataState};
use crate::trainer::optim::{clip_gradients, nesterov_step, OptimizerState};
use crate::trainer::schedule::LrSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    /// Updates to run; 0 means the schedule's total.
    pub total_steps: usize,
    pub accumulation_steps: usize,
    pub clip: f64,
    pub momentum: f64,
    pub token_budget: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn steps(&self) -> usize {
        if self.total_steps == 0 {
            self.schedule.total_steps()
        } else {
            self.total_steps
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let mut problems = Vec::new();
        if self.accumulation_steps == 0 {
            problems.push("accumulation steps must be positive".to_string());
        }
        if !(self.clip > 0.0) {
            problems.push(format!("clip threshold {} must be positive", self.clip));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.token_budget == 0 {
            problems.push("token budget must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Endless batch stream: each epoch regroups the examples by length and
/// shuffles the batches under `seed + epoch`.
#[derive(Clone, Debug)]
pub struct DataIterator {
    blocks: Vec<Block>,
    groups: Vec<Vec<usize>>,
    seed: u64,
    pad_id: u32,
    state: DataState,
    order: Vec<usize>,
}

impl DataIterator {
    pub fn new(blocks: Vec<Block>, token_budget: usize, seed: u64, pad_id: u32) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let lengths: Vec<usize> = blocks.iter().map(Block::len).collect();
        let groups = make_batches(&lengths, token_budget)?;
        let mut it = Self {
            blocks,
            groups,
            seed,
            pad_id,
            state: DataState::default(),
            order: Vec::new(),
        };
        it.shuffle();
        Ok(it)
    }

    fn shuffle(&mut self) {
        self.order = (0..self.groups.len()).collect();
        shuffle_batches(&mut self.order, self.seed, self.state.epoch);
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.groups.len()
    }

    pub fn state(&self) -> DataState {
        self.state
    }

    pub fn set_state(&mut self, state: DataState) -> Result<()> {
        if state.position as usize >= self.groups.len() {
            return Err(Error::Format(format!(
                "data position {} beyond {} batches",
                state.position,
                self.groups.len()
            )));
        }
        self.state = state;
        self.shuffle();
        Ok(())
    }

    pub fn next_batch(&mut self) -> Batch {
        let group = &self.groups[self.order[self.state.position as usize]];
        let blocks: Vec<&Block> = group.iter().map(|&i| &self.blocks[i]).collect();
        let batch = Batch::from_blocks(&blocks, self.pad_id);
        self.state.position += 1;
        if self.state.position as usize == self.groups.len() {
            self.state.position = 0;
            self.state.epoch += 1;
            self.shuffle();
        }
        batch
    }
}

/// What one update did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// 1-based update counter after the update.
    pub step: usize,
    pub lr: f64,
    /// Mean per-token loss over the accumulated batches.
    pub loss: f64,
    /// Gradient norm before clipping.
    pub gnorm: f64,
    pub tokens: usize,
    pub seconds: f64,
}

impl StepStats {
    pub fn words_per_second(&self) -> f64 {
        if self.seconds > 0.0 {
            self.tokens as f64 / self.seconds
        } else {
            0.0
        }
    }

    /// `step<TAB>lr<TAB>loss<TAB>gnorm<TAB>wps`.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.1}",
            self.step,
            self.lr,
            self.loss,
            self.gnorm,
            self.words_per_second()
        )
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined inputs
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Trainer<'m, T: Real> {
    model: &'m LanguageModel,
    pub store: ParamStore<T>,
    pub optimizer: OptimizerState<T>,
    grads: Gradients<T>,
    config: TrainConfig,
}

impl<'m, T: Real> Trainer<'m, T> {
    pub fn new(model: &'m LanguageModel, store: ParamStore<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(&store, config.momentum);
        let grads = Gradients::zeros_like(&store);
        Ok(Self {
            model,
            store,
            optimizer,
            grads,
            config,
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(model: &'m LanguageModel, ckpt: Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        ckpt.check_layout(model.layout())?;
        let mut trainer = Self::new(model, ckpt.params, config)?;
        if let Some(opt) = ckpt.optimizer {
            trainer.optimizer = opt;
        }
        trainer.optimizer.step = ckpt.step;
        Ok(trainer)
    }

    pub fn model(&self) -> &LanguageModel {
        self.model
    }

    pub fn layout(&self) -> &Layout {
        self.model.layout()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Updates completed so far.
    pub fn step(&self) -> usize {
        self.optimizer.step
    }

    pub fn is_done(&self) -> bool {
        self.step() >= self.config.steps()
    }

    /// One update from `batches`: summed losses are backpropagated per batch,
    /// gradients accumulated, divided by the total scored tokens, clipped,
    /// and applied.
    pub fn update(&mut self, batches: &[Batch]) -> Result<StepStats> {
        let start = Instant::now();
        let step = self.step();
        self.grads.zero();
        let mut total = 0.0;
        let mut tokens = 0;
        for (micro, batch) in batches.iter().enumerate() {
            let mut tape = Tape::with_params(&self.store).train(mix(self.config.seed, step as u64, micro as u64));
            let (loss, n) = self.model.loss_sum(&mut tape, batch)?;
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss {value} at update {}", step + 1)));
            }
            tape.backward(loss)?;
            tape.accumulate_param_grads(&mut self.grads);
            total += value;
            tokens += n;
        }
        if tokens == 0 {
            return Err(Error::InvalidArgument("update has no scored tokens".into()));
        }
        self.grads.scale(T::from_f64_lossy(1.0 / tokens as f64));
        let gnorm = clip_gradients(&mut self.grads, self.config.clip)
            .map_err(|e| Error::NonFinite(format!("{e} at update {}", step + 1)))?;
        let lr = self.config.schedule.lr_at(step);
        nesterov_step(&mut self.store, &self.grads, &mut self.optimizer, lr);
        Ok(StepStats {
            step: self.step(),
            lr,
            loss: total / tokens as f64,
            gnorm,
            tokens,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Pulls `accumulation_steps` batches from `data` and updates.
    pub fn train_step(&mut self, data: &mut DataIterator) -> Result<StepStats> {
        let batches: Vec<Batch> = (0..self.config.accumulation_steps).map(|_| data.next_batch()).collect();
        self.update(&batches)
    }

    pub fn checkpoint(&self, config_text: &str, data: DataState) -> Checkpoint<T> {
        Checkpoint {
            config: config_text.to_string(),
            step: self.step(),
            data,
            params: self.store.clone(),
            aliases: self.model.layout().aliases.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }
}
