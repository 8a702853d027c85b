use std::collections::HashSet;
use std::path::{Path, PathBuf};

use alm_core::config::RunConfig;
use alm_core::corpus::binfile::write_stream;
use alm_core::corpus::{learn_bpe, make_blocks, read_lines, Block, BlockMode, Vocabulary};
use alm_core::eval::{
    bin_loss, evaluate, target_counts, unigram_perplexity, BinMode, EvalOptions, EvalReport, ParamBreakdown,
};
use alm_core::model::{InputKind, LanguageModel};
use alm_core::trainer::{fit, Checkpoint, DataIterator, FitOptions, Trainer};
use alm_core::Error;
use alm_tensor::ParamStore;

use crate::data::{bounds_path, stream_path, DataDir, BPE_FILE, VOCAB_FILE};
use crate::error::{CliError, CliResult};
use crate::{
    AnalyzeArgs, ConfigArgs, DumpArgs, EvalArgs, EvalTarget, FreqSource, Mode, ParamsArgs, PreprocessArgs, TrainArgs,
};

pub const CONFIG_FILE: &str = "config.conf";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn preprocess(a: PreprocessArgs) -> CliResult<()> {
    let mut splits: Vec<(&str, Vec<String>)> = vec![("train", read_lines(&a.train)?)];
    for (name, path) in [("valid", &a.valid), ("test", &a.test)] {
        if let Some(p) = path {
            splits.push((name, read_lines(p)?));
        }
    }
    std::fs::create_dir_all(&a.out).map_err(io(&a.out))?;

    // sub-word runs rewrite every line as units and keep the word boundaries
    let mut bounds: Vec<Option<Vec<Vec<bool>>>> = vec![None; splits.len()];
    if let Some(codes) = a.bpe_codes {
        let bpe = learn_bpe(splits[0].1.iter().map(String::as_str), codes as i64)?;
        bpe.save(&a.out.join(BPE_FILE))?;
        println!("bpe\tmerges {}", bpe.merges().len());
        for (i, (_, lines)) in splits.iter_mut().enumerate() {
            let mut split_bounds = Vec::with_capacity(lines.len());
            for line in lines.iter_mut() {
                let seg = bpe.segment_line(line);
                *line = seg.units.join(" ");
                split_bounds.push(seg.word_end);
            }
            bounds[i] = Some(split_bounds);
        }
    }

    let vocab = Vocabulary::build(splits[0].1.iter().map(String::as_str), a.min_count)?;
    vocab.save(&a.out.join(VOCAB_FILE))?;
    println!("vocab\t{} entries", vocab.len());
    for (i, (name, lines)) in splits.iter().enumerate() {
        let stream = vocab.encode(lines.iter().map(String::as_str));
        write_stream(&stream_path(&a.out, name), &stream, &vocab)?;
        if let Some(b) = &bounds[i] {
            let flags: Vec<u8> = lines
                .iter()
                .zip(b)
                .filter(|(line, _)| !line.trim().is_empty())
                .flat_map(|(_, ends)| ends.iter().map(|&e| e as u8).chain([1]))
                .collect();
            let path = bounds_path(&a.out, name);
            std::fs::write(&path, flags).map_err(io(&path))?;
        }
        let types: HashSet<&str> = lines.iter().flat_map(|l| l.split_whitespace()).collect();
        println!(
            "{name}\ttokens {}\ttypes {}\toov {:.4}",
            stream.len(),
            types.len(),
            vocab.oov_rate(&stream)
        );
    }
    Ok(())
}

fn parse_override(s: &str) -> CliResult<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got '{s}'")))
}

fn load_config(args: &ConfigArgs, fallback: Option<&str>) -> CliResult<RunConfig> {
    let mut cfg = match (&args.preset, &args.config, fallback) {
        (Some(name), _, _) => RunConfig::preset(name)?,
        (None, Some(path), _) => RunConfig::load(path)?,
        (None, None, Some(name)) => RunConfig::preset(name)?,
        (None, None, None) => return Err(CliError::Usage("give --preset or --config".into())),
    };
    for o in &args.overrides {
        let (k, v) = parse_override(o)?;
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn eval_blocks(stream: &[u32], eos: u32, block_size: usize, context: usize) -> CliResult<Vec<Block>> {
    Ok(make_blocks(
        stream,
        eos,
        block_size,
        BlockMode::EvalSentenceAligned { context },
    )?)
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config, a.tiny.then_some("tiny"))?;
    if let Some(n) = a.total_steps {
        cfg.optim.total_steps = n;
    }
    if let Some(d) = &a.data {
        cfg.data.dir = d.display().to_string();
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.display().to_string();
    }
    let data = DataDir::open(Path::new(&cfg.data.dir))?;
    // the data decides the vocabulary and character inventory
    if cfg.model.vocab_size != 0 && cfg.model.vocab_size != data.vocab.len() {
        log::info!(
            "model.vocab_size {} replaced by the data vocabulary size {}",
            cfg.model.vocab_size,
            data.vocab.len()
        );
    }
    cfg.model.vocab_size = data.vocab.len();
    if cfg.model.input == InputKind::CharCnn {
        cfg.model.char_vocab = data.chars().len();
    }
    cfg.validate(None, None)?;

    let mut model = LanguageModel::new(cfg.model_config(None, None)?)?;
    data.attach(&mut model)?;
    let eos = data.vocab.eos_id() as u32;
    let train_stream = data.stream("train")?;
    let mode = if cfg.data.sentence_batching {
        BlockMode::TrainSentences
    } else {
        BlockMode::TrainContiguous { keep_partial: true }
    };
    let blocks = make_blocks(&train_stream, eos, cfg.data.block_size, mode)?;
    let mut valid = if data.has_split("valid") {
        eval_blocks(&data.stream("valid")?, eos, cfg.eval.block_size, cfg.eval.context)?
    } else {
        Vec::new()
    };
    if cfg.train.valid_blocks > 0 {
        valid.truncate(cfg.train.valid_blocks);
    }

    let out = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out).map_err(io(&out))?;
    let text = cfg.to_text();
    let cfg_path = out.join(CONFIG_FILE);
    std::fs::write(&cfg_path, &text).map_err(io(&cfg_path))?;

    let num_blocks = blocks.len();
    let mut iter = DataIterator::new(blocks, cfg.data.token_budget, cfg.seed, eos)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::<f32>::load(path)?;
            iter.set_state(ckpt.data)?;
            Trainer::resume(&model, ckpt, cfg.train_config())?
        }
        None => Trainer::new(&model, model.layout().allocate::<f32>(cfg.seed)?, cfg.train_config())?,
    };
    let breakdown = ParamBreakdown::from_layout(model.layout());
    log::info!(
        "{} parameters, {} training blocks, {} batches per epoch, {} updates",
        breakdown.total,
        num_blocks,
        iter.batches_per_epoch(),
        cfg.train_config().steps()
    );
    let opts = FitOptions {
        log_interval: cfg.train.log_interval,
        valid_interval: cfg.train.valid_interval,
        out_dir: Some(out.clone()),
        config_text: text,
        eval: eval_options(&cfg),
        pad_id: eos,
    };
    let summary = fit(&mut trainer, &mut iter, &valid, &opts)?;
    if let Some(last) = summary.last {
        println!(
            "step\t{}\tloss\t{:.4}\tppl\t{:.3}",
            last.step,
            last.loss,
            last.loss.exp()
        );
    }
    if let Some((step, loss)) = summary.best_valid {
        println!("best valid\tstep\t{step}\tloss\t{loss:.4}\tppl\t{:.3}", loss.exp());
    }
    println!("run\t{}", out.display());
    Ok(())
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        max_rows: cfg.eval.max_rows,
        threads: cfg.eval.threads,
    }
}

/// Differences between two configs on the keys that shape the model.
fn model_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    RunConfig::keys()
        .into_iter()
        .filter(|k| k.starts_with("model."))
        .filter_map(|k| {
            let (x, y) = (a.get(k)?, b.get(k)?);
            (x != y).then(|| format!("{k}: config {x}, checkpoint {y}"))
        })
        .collect()
}

struct Loaded {
    cfg: RunConfig,
    model: LanguageModel,
    store: ParamStore<f32>,
    data: DataDir,
}

fn load_checkpoint(t: &EvalTarget) -> CliResult<Loaded> {
    let ckpt = Checkpoint::<f32>::load(&t.checkpoint)?;
    let mut cfg = RunConfig::parse(&ckpt.config)?;
    if let Some(path) = &t.config {
        let mut given = RunConfig::load(path)?;
        if given.model.vocab_size == 0 {
            given.model.vocab_size = cfg.model.vocab_size;
        }
        if given.model.char_vocab == 0 {
            given.model.char_vocab = cfg.model.char_vocab;
        }
        let diff = model_diff(&given, &cfg);
        if !diff.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint does not match {}: {}",
                path.display(),
                diff.join("; ")
            ))
            .into());
        }
    }
    if let Some(d) = &t.data {
        cfg.data.dir = d.display().to_string();
    }
    if let Some(n) = t.block_size {
        cfg.eval.block_size = n;
    }
    if let Some(n) = t.context {
        cfg.eval.context = n;
    }
    if let Some(n) = t.threads {
        cfg.eval.threads = n;
    }
    cfg.validate(None, None)?;
    let data = DataDir::open(Path::new(&cfg.data.dir))?;
    if data.vocab.len() != cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "data vocabulary has {} entries, checkpoint model {}",
            data.vocab.len(),
            cfg.model.vocab_size
        ))
        .into());
    }
    let mut model = LanguageModel::new(cfg.model_config(None, None)?)?;
    data.attach(&mut model)?;
    ckpt.check_layout(model.layout())?;
    Ok(Loaded {
        cfg,
        model,
        store: ckpt.params,
        data,
    })
}

fn run_eval(l: &Loaded, split: &str) -> CliResult<(Vec<u32>, EvalReport)> {
    let stream = l.data.stream(split)?;
    let eos = l.data.vocab.eos_id() as u32;
    let blocks = eval_blocks(&stream, eos, l.cfg.eval.block_size, l.cfg.eval.context)?;
    let report = evaluate(&l.model, &l.store, &blocks, eos, eval_options(&l.cfg))?;
    Ok((stream, report))
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let loaded = load_checkpoint(&a.target)?;
    let (stream, report) = run_eval(&loaded, &a.target.split)?;
    println!(
        "{}\tblock {}\tcontext {}\ttokens {}\tnll {:.6}\tppl {:.4}",
        a.target.split,
        loaded.cfg.eval.block_size,
        loaded.cfg.eval.context,
        report.count(),
        report.mean_nll(),
        report.perplexity()
    );
    println!(
        "unigram baseline ppl {:.4}",
        unigram_perplexity(loaded.data.vocab.freqs(), &stream)
    );
    if loaded.data.bpe.is_some() {
        let ends = loaded.data.word_ends(&a.target.split, stream.len())?;
        let words = report.word_level(&ends)?;
        println!("words {}\tword ppl {:.4}", words.count(), words.perplexity());
    }
    if let Some(path) = &a.losses {
        std::fs::write(path, report.encode_losses()).map_err(io(path))?;
    }
    Ok(())
}

pub fn analyze(a: AnalyzeArgs) -> CliResult<()> {
    let loaded = load_checkpoint(&a.target)?;
    let (_, report) = run_eval(&loaded, &a.target.split)?;
    let freq = match a.freq {
        FreqSource::Train => loaded.data.vocab.freqs().to_vec(),
        FreqSource::Test => target_counts(&report, loaded.data.vocab.len()),
    };
    let mode = match a.mode {
        Mode::CurrentWord => BinMode::CurrentWord,
        Mode::PreviousWord => BinMode::PreviousWord,
    };
    let bins = bin_loss(&report, &freq, mode);
    if bins.excluded > 0 {
        eprintln!("{} tokens without a preceding word excluded", bins.excluded);
    }
    let csv = bins.to_csv();
    match &a.out {
        Some(path) => std::fs::write(path, csv).map_err(io(path))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn breakdown(cfg: &RunConfig) -> CliResult<ParamBreakdown> {
    let model = LanguageModel::new(cfg.model_config(None, None)?)?;
    Ok(ParamBreakdown::from_layout(model.layout()))
}

pub fn params(a: ParamsArgs) -> CliResult<()> {
    let cfg = load_config(&a.config, None)?;
    let counts = breakdown(&cfg)?;
    println!("{counts}");
    if let Some(name) = &a.baseline {
        let base = breakdown(&RunConfig::preset(name)?)?;
        println!("baseline\t{name}\tinput+output {}", base.embedding_layers());
        println!("input+output reduction\t{:.1}%", 100.0 * counts.reduction_vs(&base));
    }
    Ok(())
}

pub fn dump_config(a: DumpArgs) -> CliResult<()> {
    if a.list {
        for name in alm_core::config::PRESETS {
            println!("{name}");
        }
        return Ok(());
    }
    print!("{}", load_config(&a.config, None)?.to_text());
    Ok(())
}
