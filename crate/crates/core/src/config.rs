//! Run configuration: flat `key = value` text with namespaced keys, and the
//! shipped presets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::model::{InputKind, ModelConfig, OutputKind};
use crate::output::TyingConfig;
use crate::trainer::{LrSchedule, TrainConfig};

/// Size of one vocabulary band; `Rest` takes whatever the earlier bands
/// leave and may only come last.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BandSize {
    Fixed(usize),
    Rest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandSpec(pub Vec<BandSize>);

impl BandSpec {
    /// Concrete band sizes for a vocabulary of `vocab` entries. Bands that
    /// would run past the vocabulary are shortened, and empty ones dropped.
    pub fn resolve(&self, vocab: usize) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut left = vocab;
        for (i, b) in self.0.iter().enumerate() {
            let size = match b {
                BandSize::Fixed(n) => (*n).min(left),
                BandSize::Rest if i + 1 == self.0.len() => left,
                BandSize::Rest => return Err(Error::Config("'rest' must be the last band".into())),
            };
            if size == 0 {
                log::warn!("band {i} is empty for a vocabulary of {vocab}, dropping it");
                continue;
            }
            if let BandSize::Fixed(n) = b {
                if *n > size {
                    log::warn!("band {i} shortened from {n} to {size} entries");
                }
            }
            out.push(size);
            left -= size;
        }
        if left != 0 {
            return Err(Error::BandSum {
                expected: vocab,
                actual: vocab - left,
            });
        }
        Ok(out)
    }
}

impl fmt::Display for BandSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|b| match b {
                BandSize::Fixed(n) => n.to_string(),
                BandSize::Rest => "rest".to_string(),
            })
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for BandSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bands = s
            .split(',')
            .map(|p| match p.trim() {
                "rest" => Ok(BandSize::Rest),
                n => n
                    .parse()
                    .map(BandSize::Fixed)
                    .map_err(|_| Error::Config(format!("bad band size '{n}'"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BandSpec(bands))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    /// 0 takes the size of the data vocabulary.
    pub vocab_size: usize,
    pub input: InputKind,
    pub input_dim: usize,
    pub output: OutputKind,
    pub output_dim: usize,
    pub bands: BandSpec,
    pub factor: usize,
    pub tie_embeddings: bool,
    pub tie_projections: bool,
    pub tail_dropout: f64,
    /// 0 takes the character inventory of the data vocabulary.
    pub char_vocab: usize,
    pub highway_layers: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub relu_dropout: f64,
    pub max_positions: usize,
    pub scale_embeddings: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimSection {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub warmup_init: f64,
    pub cycles: usize,
    pub first_cycle_steps: usize,
    pub shrink: f64,
    pub momentum: f64,
    pub clip: f64,
    /// 0 runs the whole schedule.
    pub total_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    /// Directory written by preprocessing.
    pub dir: String,
    pub min_count: u64,
    /// BPE merges to learn; 0 models words.
    pub bpe_codes: usize,
    pub block_size: usize,
    /// One sentence per training example instead of contiguous blocks.
    pub sentence_batching: bool,
    pub token_budget: usize,
    pub accumulation: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub block_size: usize,
    pub context: usize,
    pub max_rows: usize,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub log_interval: usize,
    /// Updates between validations; 0 validates only at the end.
    pub valid_interval: usize,
    /// Validation blocks used per validation; 0 uses all.
    pub valid_blocks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: "runs".into(),
            model: ModelSection {
                vocab_size: 0,
                input: InputKind::Adaptive,
                input_dim: 1024,
                output: OutputKind::Adaptive,
                output_dim: 1024,
                bands: BandSpec(vec![BandSize::Fixed(20_000), BandSize::Fixed(40_000), BandSize::Rest]),
                factor: 4,
                tie_embeddings: true,
                tie_projections: true,
                tail_dropout: 0.0,
                char_vocab: 0,
                highway_layers: 1,
                blocks: 16,
                heads: 16,
                dim: 1024,
                ffn_dim: 4096,
                dropout: 0.1,
                attn_dropout: 0.1,
                relu_dropout: 0.0,
                max_positions: 3072,
                scale_embeddings: true,
            },
            optim: OptimSection {
                max_lr: 1.0,
                min_lr: 1e-5,
                warmup_steps: 16_000,
                warmup_init: 1e-7,
                cycles: 1,
                first_cycle_steps: 18_000,
                shrink: 1.0,
                momentum: 0.99,
                clip: 0.1,
                total_steps: 0,
            },
            data: DataSection {
                dir: "data".into(),
                min_count: 0,
                bpe_codes: 0,
                block_size: 512,
                sentence_batching: false,
                token_budget: 4096,
                accumulation: 1,
            },
            eval: EvalSection {
                block_size: 512,
                context: 0,
                max_rows: 8,
                threads: 1,
            },
            train: TrainSection {
                log_interval: 100,
                valid_interval: 1000,
                valid_blocks: 0,
            },
        }
    }
}

enum Field<'a> {
    Usize(&'a mut usize),
    U64(&'a mut u64),
    F64(&'a mut f64),
    Bool(&'a mut bool),
    Str(&'a mut String),
    Input(&'a mut InputKind),
    Output(&'a mut OutputKind),
    Bands(&'a mut BandSpec),
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
}

impl Field<'_> {
    fn set(self, key: &str, value: &str) -> Result<()> {
        match self {
            Field::Usize(v) => *v = parse(key, value)?,
            Field::U64(v) => *v = parse(key, value)?,
            Field::F64(v) => *v = parse(key, value)?,
            Field::Bool(v) => *v = parse(key, value)?,
            Field::Str(v) => *v = value.to_string(),
            Field::Input(v) => *v = value.parse()?,
            Field::Output(v) => *v = value.parse()?,
            Field::Bands(v) => *v = value.parse()?,
        }
        Ok(())
    }

    fn render(&self) -> String {
        match self {
            Field::Usize(v) => v.to_string(),
            Field::U64(v) => v.to_string(),
            Field::F64(v) => v.to_string(),
            Field::Bool(v) => v.to_string(),
            Field::Str(v) => v.to_string(),
            Field::Input(v) => v.to_string(),
            Field::Output(v) => v.to_string(),
            Field::Bands(v) => v.to_string(),
        }
    }
}

/// Names of the shipped presets.
pub const PRESETS: [&str; 17] = [
    "sm-wikitext",
    "sm-t-wikitext",
    "bpe-wikitext",
    "bpe-t-wikitext",
    "asm-wikitext",
    "cnn-wikitext",
    "adp-wikitext",
    "adp-t-wikitext",
    "sm-billionword",
    "sm-t-billionword",
    "bpe-billionword",
    "bpe-t-billionword",
    "asm-billionword",
    "cnn-billionword",
    "adp-billionword",
    "adp-t-billionword",
    "tiny",
];

pub fn preset_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "sm-wikitext" => include_str!("../presets/sm-wikitext.conf"),
        "sm-t-wikitext" => include_str!("../presets/sm-t-wikitext.conf"),
        "bpe-wikitext" => include_str!("../presets/bpe-wikitext.conf"),
        "bpe-t-wikitext" => include_str!("../presets/bpe-t-wikitext.conf"),
        "asm-wikitext" => include_str!("../presets/asm-wikitext.conf"),
        "cnn-wikitext" => include_str!("../presets/cnn-wikitext.conf"),
        "adp-wikitext" => include_str!("../presets/adp-wikitext.conf"),
        "adp-t-wikitext" => include_str!("../presets/adp-t-wikitext.conf"),
        "sm-billionword" => include_str!("../presets/sm-billionword.conf"),
        "sm-t-billionword" => include_str!("../presets/sm-t-billionword.conf"),
        "bpe-billionword" => include_str!("../presets/bpe-billionword.conf"),
        "bpe-t-billionword" => include_str!("../presets/bpe-t-billionword.conf"),
        "asm-billionword" => include_str!("../presets/asm-billionword.conf"),
        "cnn-billionword" => include_str!("../presets/cnn-billionword.conf"),
        "adp-billionword" => include_str!("../presets/adp-billionword.conf"),
        "adp-t-billionword" => include_str!("../presets/adp-t-billionword.conf"),
        "tiny" => include_str!("../presets/tiny.conf"),
        _ => return None,
    })
}

impl RunConfig {
    fn fields(&mut self) -> Vec<(&'static str, Field<'_>)> {
        let m = &mut self.model;
        let o = &mut self.optim;
        let d = &mut self.data;
        let e = &mut self.eval;
        let t = &mut self.train;
        vec![
            ("seed", Field::U64(&mut self.seed)),
            ("output_dir", Field::Str(&mut self.output_dir)),
            ("model.vocab_size", Field::Usize(&mut m.vocab_size)),
            ("model.input", Field::Input(&mut m.input)),
            ("model.input_dim", Field::Usize(&mut m.input_dim)),
            ("model.output", Field::Output(&mut m.output)),
            ("model.output_dim", Field::Usize(&mut m.output_dim)),
            ("model.bands", Field::Bands(&mut m.bands)),
            ("model.factor", Field::Usize(&mut m.factor)),
            ("model.tie_embeddings", Field::Bool(&mut m.tie_embeddings)),
            ("model.tie_projections", Field::Bool(&mut m.tie_projections)),
            ("model.tail_dropout", Field::F64(&mut m.tail_dropout)),
            ("model.char_vocab", Field::Usize(&mut m.char_vocab)),
            ("model.highway_layers", Field::Usize(&mut m.highway_layers)),
            ("model.blocks", Field::Usize(&mut m.blocks)),
            ("model.heads", Field::Usize(&mut m.heads)),
            ("model.dim", Field::Usize(&mut m.dim)),
            ("model.ffn_dim", Field::Usize(&mut m.ffn_dim)),
            ("model.dropout", Field::F64(&mut m.dropout)),
            ("model.attn_dropout", Field::F64(&mut m.attn_dropout)),
            ("model.relu_dropout", Field::F64(&mut m.relu_dropout)),
            ("model.max_positions", Field::Usize(&mut m.max_positions)),
            ("model.scale_embeddings", Field::Bool(&mut m.scale_embeddings)),
            ("optim.max_lr", Field::F64(&mut o.max_lr)),
            ("optim.min_lr", Field::F64(&mut o.min_lr)),
            ("optim.warmup_steps", Field::Usize(&mut o.warmup_steps)),
            ("optim.warmup_init", Field::F64(&mut o.warmup_init)),
            ("optim.cycles", Field::Usize(&mut o.cycles)),
            ("optim.first_cycle_steps", Field::Usize(&mut o.first_cycle_steps)),
            ("optim.shrink", Field::F64(&mut o.shrink)),
            ("optim.momentum", Field::F64(&mut o.momentum)),
            ("optim.clip", Field::F64(&mut o.clip)),
            ("optim.total_steps", Field::Usize(&mut o.total_steps)),
            ("data.dir", Field::Str(&mut d.dir)),
            ("data.min_count", Field::U64(&mut d.min_count)),
            ("data.bpe_codes", Field::Usize(&mut d.bpe_codes)),
            ("data.block_size", Field::Usize(&mut d.block_size)),
            ("data.sentence_batching", Field::Bool(&mut d.sentence_batching)),
            ("data.token_budget", Field::Usize(&mut d.token_budget)),
            ("data.accumulation", Field::Usize(&mut d.accumulation)),
            ("eval.block_size", Field::Usize(&mut e.block_size)),
            ("eval.context", Field::Usize(&mut e.context)),
            ("eval.max_rows", Field::Usize(&mut e.max_rows)),
            ("eval.threads", Field::Usize(&mut e.threads)),
            ("train.log_interval", Field::Usize(&mut t.log_interval)),
            ("train.valid_interval", Field::Usize(&mut t.valid_interval)),
            ("train.valid_blocks", Field::Usize(&mut t.valid_blocks)),
        ]
    }

    /// Every recognized key, in dump order.
    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().fields().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.fields().into_iter().find(|(k, _)| *k == key) {
            Some((_, field)) => field.set(key, value.trim()),
            None => Err(Error::Config(format!("unknown key '{key}'"))),
        }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let mut copy = self.clone();
        let fields = copy.fields();
        fields.iter().find(|(k, _)| *k == key).map(|(_, f)| f.render())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; a key may appear once per text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let mut problems = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {}: expected key = value", n + 1));
                continue;
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                problems.push(format!("line {}: duplicate key '{key}'", n + 1));
                continue;
            }
            if let Err(e) = self.set(key, value) {
                problems.push(format!(
                    "line {}: {}",
                    n + 1,
                    e.to_string().trim_start_matches("config: ")
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = preset_text(name)
            .ok_or_else(|| Error::Config(format!("unknown preset '{name}' (known: {})", PRESETS.join(", "))))?;
        Self::parse(text)
    }

    /// Every key with its value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut copy = self.clone();
        copy.fields()
            .iter()
            .map(|(k, f)| format!("{k} = {}\n", f.render()))
            .collect()
    }

    /// Model structure for a vocabulary of `vocab` entries (used when
    /// `model.vocab_size` is 0) and a character inventory of `chars` (used
    /// when `model.char_vocab` is 0).
    pub fn model_config(&self, vocab: Option<usize>, chars: Option<usize>) -> Result<ModelConfig> {
        let m = &self.model;
        let vocab_size = match (m.vocab_size, vocab) {
            (0, Some(v)) => v,
            (0, None) => {
                return Err(Error::Config(
                    "model.vocab_size is 0 and no vocabulary was given".into(),
                ))
            }
            (v, _) => v,
        };
        let char_vocab = match (m.char_vocab, chars) {
            (0, Some(c)) => c,
            (c, _) => c,
        };
        let uses_bands = m.input == InputKind::Adaptive || m.output == OutputKind::Adaptive;
        let bands = if uses_bands {
            m.bands.resolve(vocab_size)?
        } else {
            vec![vocab_size]
        };
        Ok(ModelConfig {
            vocab_size,
            input: m.input,
            input_dim: m.input_dim,
            output: m.output,
            output_dim: m.output_dim,
            bands,
            factor: m.factor,
            tying: TyingConfig {
                tie_embeddings: m.tie_embeddings,
                tie_projections: m.tie_projections,
            },
            tail_dropout: m.tail_dropout,
            char_vocab,
            highway_layers: m.highway_layers,
            decoder: DecoderConfig {
                num_blocks: m.blocks,
                heads: m.heads,
                model_dim: m.dim,
                ffn_dim: m.ffn_dim,
                dropout: m.dropout,
                attn_dropout: m.attn_dropout,
                relu_dropout: m.relu_dropout,
            },
            max_positions: m.max_positions,
            scale_embeddings: m.scale_embeddings,
        })
    }

    pub fn schedule(&self) -> LrSchedule {
        let o = &self.optim;
        LrSchedule {
            warmup_steps: o.warmup_steps,
            warmup_init: o.warmup_init,
            max_lr: o.max_lr,
            min_lr: o.min_lr,
            cycles: o.cycles,
            first_cycle_steps: o.first_cycle_steps,
            shrink: o.shrink,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: self.schedule(),
            total_steps: self.optim.total_steps,
            accumulation_steps: self.data.accumulation,
            clip: self.optim.clip,
            momentum: self.optim.momentum,
            token_budget: self.data.token_budget,
            seed: self.seed,
        }
    }

    /// Every violated constraint. Model checks that depend on the data
    /// vocabulary run only once `vocab` is known.
    pub fn problems(&self, vocab: Option<usize>, chars: Option<usize>) -> Vec<String> {
        let mut out = Vec::new();
        if vocab.is_some() || self.model.vocab_size > 0 {
            match self.model_config(vocab, chars) {
                Ok(m) => {
                    let skip_chars = self.model.char_vocab == 0 && chars.is_none();
                    out.extend(
                        m.problems()
                            .into_iter()
                            .filter(|p| !(skip_chars && p.starts_with("character vocabulary"))),
                    );
                }
                Err(e) => out.push(e.to_string()),
            }
        }
        if let Err(e) = self.train_config().validate() {
            out.push(e.to_string());
        }
        if self.data.block_size == 0 || self.data.block_size > self.model.max_positions {
            out.push(format!(
                "data.block_size {} must be in 1..={}",
                self.data.block_size, self.model.max_positions
            ));
        }
        if self.data.block_size > self.data.token_budget {
            out.push(format!(
                "data.block_size {} exceeds data.token_budget {}",
                self.data.block_size, self.data.token_budget
            ));
        }
        if self.eval.context >= self.eval.block_size {
            out.push(format!(
                "eval.context {} must be smaller than eval.block_size {}",
                self.eval.context, self.eval.block_size
            ));
        }
        if self.eval.block_size > self.model.max_positions {
            out.push(format!(
                "eval.block_size {} exceeds model.max_positions {}",
                self.eval.block_size, self.model.max_positions
            ));
        }
        if self.eval.max_rows == 0 || self.eval.threads == 0 {
            out.push("eval.max_rows and eval.threads must be positive".into());
        }
        if self.train.log_interval == 0 {
            out.push("train.log_interval must be positive".into());
        }
        out
    }

    pub fn validate(&self, vocab: Option<usize>, chars: Option<usize>) -> Result<()> {
        let problems = self.problems(vocab, chars);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
