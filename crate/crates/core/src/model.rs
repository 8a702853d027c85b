//! The composed language model: input layer, decoder, output layer.

use std::fmt;
use std::str::FromStr;

use alm_tensor::{Real, Tape, Tensor, Var};

use crate::corpus::{Batch, ClusterPartition};
use crate::decoder::{sinusoidal_positions, Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::layers::{AdaptiveInputEmbedding, CharCnnEncoder, FixedEmbedding};
use crate::layout::Layout;
use crate::output::{AdaptiveSoftmax, FullSoftmax, TyingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Adaptive,
    Fixed,
    CharCnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    Adaptive,
    Full,
}

impl fmt::Display for InputKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputKind::Adaptive => "adaptive",
            InputKind::Fixed => "fixed",
            InputKind::CharCnn => "charcnn",
        })
    }
}

impl FromStr for InputKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(InputKind::Adaptive),
            "fixed" => Ok(InputKind::Fixed),
            "charcnn" => Ok(InputKind::CharCnn),
            _ => Err(Error::Config(format!(
                "unknown input kind '{s}' (adaptive, fixed, charcnn)"
            ))),
        }
    }
}

impl fmt::Display for OutputKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputKind::Adaptive => "adaptive",
            OutputKind::Full => "full",
        })
    }
}

impl FromStr for OutputKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(OutputKind::Adaptive),
            "full" => Ok(OutputKind::Full),
            _ => Err(Error::Config(format!("unknown output kind '{s}' (adaptive, full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub input: InputKind,
    /// Fixed embedding size, or the head dimension of adaptive inputs.
    pub input_dim: usize,
    pub output: OutputKind,
    /// Full softmax embedding size, or the head dimension of the adaptive softmax.
    pub output_dim: usize,
    /// Band sizes for adaptive layers, most frequent first.
    pub bands: Vec<usize>,
    pub factor: usize,
    pub tying: TyingConfig,
    pub tail_dropout: f64,
    /// Character inventory size of the character CNN, unknown id included.
    pub char_vocab: usize,
    pub highway_layers: usize,
    pub decoder: DecoderConfig,
    /// Longest block the model accepts.
    pub max_positions: usize,
    /// Multiply input embeddings by the square root of the model dimension.
    pub scale_embeddings: bool,
}

impl ModelConfig {
    pub fn partition(&self, dim: usize) -> Result<ClusterPartition> {
        let sum: usize = self.bands.iter().sum();
        if sum != self.vocab_size {
            return Err(Error::BandSum {
                expected: self.vocab_size,
                actual: sum,
            });
        }
        ClusterPartition::new(&self.bands, dim, self.factor)
    }

    /// Every violated constraint, so they can be reported together.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let e = self.decoder.model_dim;
        if let Err(err) = self.decoder.validate() {
            out.push(err.to_string());
        }
        if self.vocab_size == 0 {
            out.push("vocabulary size must be positive".into());
        }
        if let Err(err) = self.tying.validate() {
            out.push(err.to_string());
        }
        if self.input == InputKind::Adaptive {
            if self.input_dim != e {
                out.push(format!(
                    "adaptive input dimension {} must equal the model dimension {e}",
                    self.input_dim
                ));
            }
            if let Err(err) = self.partition(self.input_dim) {
                out.push(format!("input: {err}"));
            }
        }
        if self.output == OutputKind::Adaptive {
            if self.output_dim != e {
                out.push(format!(
                    "adaptive softmax dimension {} must equal the model dimension {e}",
                    self.output_dim
                ));
            }
            if let Err(err) = self.partition(self.output_dim) {
                out.push(format!("output: {err}"));
            }
            if !(0.0..1.0).contains(&self.tail_dropout) {
                out.push(format!("tail dropout {} outside [0, 1)", self.tail_dropout));
            }
        }
        if self.tying.tie_embeddings {
            match (self.input, self.output) {
                (InputKind::Adaptive, OutputKind::Adaptive) => {}
                (InputKind::Fixed, OutputKind::Full) => {
                    if self.tying.tie_projections {
                        out.push("projection tying needs adaptive input and output layers".into());
                    }
                    if self.input_dim != self.output_dim {
                        out.push(format!(
                            "tied embeddings need equal input and output dimensions, got {} and {}",
                            self.input_dim, self.output_dim
                        ));
                    }
                }
                (i, o) => out.push(format!("cannot tie {i} input to {o} output")),
            }
        }
        if self.input == InputKind::CharCnn && self.char_vocab == 0 {
            out.push("character vocabulary must be positive".into());
        }
        if self.max_positions == 0 {
            out.push("max positions must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InputLayer {
    Adaptive(AdaptiveInputEmbedding),
    Fixed(FixedEmbedding),
    CharCnn(CharCnnEncoder),
}

#[derive(Clone, Debug, PartialEq)]
pub enum OutputLayer {
    Adaptive(AdaptiveSoftmax),
    Full(FullSoftmax),
}

/// Model structure; parameter values live in a separate store allocated
/// from [`LanguageModel::layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    config: ModelConfig,
    layout: Layout,
    input: InputLayer,
    decoder: Decoder,
    output: OutputLayer,
}

impl LanguageModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let e = config.decoder.model_dim;
        let mut layout = Layout::new();
        let input = match config.input {
            InputKind::Adaptive => InputLayer::Adaptive(AdaptiveInputEmbedding::new(
                &mut layout,
                "input",
                config.partition(config.input_dim)?,
            )),
            InputKind::Fixed => InputLayer::Fixed(FixedEmbedding::new(
                &mut layout,
                "input",
                config.vocab_size,
                config.input_dim,
                e,
            )),
            InputKind::CharCnn => InputLayer::CharCnn(CharCnnEncoder::new(
                &mut layout,
                "input",
                config.char_vocab,
                config.highway_layers,
                e,
            )),
        };
        let decoder = Decoder::new(&mut layout, "decoder", config.decoder)?;
        let output = match (config.output, &input) {
            (OutputKind::Adaptive, InputLayer::Adaptive(adp)) if config.tying.tie_embeddings => {
                OutputLayer::Adaptive(AdaptiveSoftmax::tied(
                    &mut layout,
                    "output",
                    config.partition(config.output_dim)?,
                    adp,
                    config.tying,
                    config.tail_dropout,
                )?)
            }
            (OutputKind::Adaptive, _) => OutputLayer::Adaptive(AdaptiveSoftmax::new(
                &mut layout,
                "output",
                config.partition(config.output_dim)?,
                config.tail_dropout,
            )),
            (OutputKind::Full, InputLayer::Fixed(fixed)) if config.tying.tie_embeddings => {
                OutputLayer::Full(FullSoftmax::tied(&mut layout, "output", fixed, config.vocab_size, e)?)
            }
            (OutputKind::Full, _) => OutputLayer::Full(FullSoftmax::new(
                &mut layout,
                "output",
                config.vocab_size,
                config.output_dim,
                e,
            )),
        };
        Ok(Self {
            config,
            layout,
            input,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn input(&self) -> &InputLayer {
        &self.input
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn output(&self) -> &OutputLayer {
        &self.output
    }

    /// Binds vocabulary ids to character ids for the character CNN; other
    /// input layers ignore this.
    pub fn set_char_words(&mut self, words: Vec<Vec<u32>>) -> Result<()> {
        if let InputLayer::CharCnn(cnn) = &mut self.input {
            cnn.set_words(words)?;
        }
        Ok(())
    }

    /// `[n x e]` input representations of `ids`, before positions.
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, ids: &[u32]) -> Result<Var> {
        let x = match &self.input {
            InputLayer::Adaptive(l) => l.forward(tape, ids)?,
            InputLayer::Fixed(l) => l.forward(tape, ids)?,
            InputLayer::CharCnn(l) => l.forward(tape, ids)?,
        };
        Ok(if self.config.scale_embeddings {
            tape.scale(x, (self.config.decoder.model_dim as f64).sqrt())
        } else {
            x
        })
    }

    /// Decoder output `[rows*len x e]` for a padded batch.
    pub fn hidden<T: Real>(&self, tape: &mut Tape<T>, batch: &Batch) -> Result<Var> {
        if batch.len > self.config.max_positions {
            return Err(Error::InvalidArgument(format!(
                "block of {} positions exceeds the model's {} positions",
                batch.len, self.config.max_positions
            )));
        }
        let e = self.config.decoder.model_dim;
        let x = self.embed(tape, &batch.inputs)?;
        let pos = sinusoidal_positions::<T>(batch.len, e)?;
        let mut tiled = Vec::with_capacity(batch.rows * batch.len * e);
        for _ in 0..batch.rows {
            tiled.extend_from_slice(pos.data());
        }
        let pos = tape.constant(Tensor::new(vec![batch.rows * batch.len, e], tiled)?);
        let x = tape.add(x, pos)?;
        self.decoder.forward(tape, x, batch.rows, batch.len)
    }

    pub fn token_nll<T: Real>(&self, tape: &mut Tape<T>, h: Var, targets: &[u32]) -> Result<Var> {
        match &self.output {
            OutputLayer::Adaptive(o) => o.token_nll(tape, h, targets),
            OutputLayer::Full(o) => o.token_nll(tape, h, targets),
        }
    }

    pub fn log_probs<T: Real>(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        match &self.output {
            OutputLayer::Adaptive(o) => o.log_probs(tape, h),
            OutputLayer::Full(o) => o.log_probs(tape, h),
        }
    }

    /// Per-token losses `[n]` at the scored positions of `batch`, with the
    /// flat positions they belong to.
    pub fn token_losses<T: Real>(&self, tape: &mut Tape<T>, batch: &Batch) -> Result<(Var, Vec<usize>)> {
        let positions: Vec<usize> = (0..batch.score.len()).filter(|&i| batch.score[i]).collect();
        if positions.is_empty() {
            return Err(Error::InvalidArgument("batch has no scored positions".into()));
        }
        let h = self.hidden(tape, batch)?;
        let targets: Vec<u32> = positions.iter().map(|&i| batch.targets[i]).collect();
        let h = tape.embedding_lookup(h, &positions)?;
        let nll = self.token_nll(tape, h, &targets)?;
        Ok((nll, positions))
    }

    /// Summed loss over the scored positions and how many there were.
    pub fn loss_sum<T: Real>(&self, tape: &mut Tape<T>, batch: &Batch) -> Result<(Var, usize)> {
        let (nll, positions) = self.token_losses(tape, batch)?;
        Ok((tape.sum(nll), positions.len()))
    }
}
