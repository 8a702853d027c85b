//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::panic::AssertUnwindSafe;
use std::process::{Command, ExitCode};
use std::time::Instant;

use alm_core::config::RunConfig;
use alm_core::corpus::{invert_units, learn_bpe, make_blocks, Batch, Block, BlockMode, ClusterPartition, Vocabulary};
use alm_core::decoder::DecoderConfig;
use alm_core::eval::{bin_loss, evaluate, unigram_perplexity, BinMode, EvalOptions, EvalReport, TokenLoss};
use alm_core::layers::{AdaptiveInputEmbedding, CharCnnEncoder};
use alm_core::layout::{Layout, WeightRef};
use alm_core::model::{InputKind, InputLayer, LanguageModel, ModelConfig, OutputKind, OutputLayer};
use alm_core::output::{AdaptiveSoftmax, TyingConfig};
use alm_core::trainer::{clip_gradients, Checkpoint, DataIterator, LrSchedule, TrainConfig, Trainer};
use alm_tensor::{grad_check_params, GradCheckOptions, Gradients, Init, ParamSpec, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("parameter counts", parameter_counts),
        ("reduction claims", reduction_claims),
        ("adaptive softmax oracle", adaptive_softmax_oracle),
        ("gradient correctness", gradient_correctness),
        ("tying semantics", tying_semantics),
        ("schedule arithmetic", schedule_arithmetic),
        ("clipping", clipping),
        ("trainability", trainability),
        ("accumulation equivalence", accumulation_equivalence),
        ("evaluation coverage", evaluation_coverage),
        ("bpe invertibility", bpe_invertibility),
        ("binned analysis", binned_analysis),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}; {secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail}; {secs:.1}s)", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn alm(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_alm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(fail)?;
    ensure!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).map_err(fail)
}

fn field<'a>(out: &'a str, key: &str) -> Result<&'a str, String> {
    out.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
        .ok_or_else(|| format!("no '{key}' line in output"))
}

fn parameter_counts() -> Outcome {
    let mut detail = Vec::new();
    for (preset, label, millions) in [
        ("adp-t-wikitext", "ADP-T", 246.9),
        ("adp-wikitext", "ADP", 291.3),
        ("asm-wikitext", "ASM", 263.1),
        ("sm-wikitext", "SM", 476.8),
        ("sm-t-wikitext", "SM-T", 339.7),
    ] {
        let start = Instant::now();
        let out = alm(&["params", "--preset", preset])?;
        let secs = start.elapsed().as_secs_f64();
        let total: f64 = field(&out, "total")?
            .split('\t')
            .next()
            .unwrap()
            .parse()
            .map_err(fail)?;
        let total = total / 1e6;
        let err = (total - millions).abs() / millions;
        ensure!(err < 0.01, "{label}: {total:.2}M vs {millions}M");
        ensure!(secs < 1.0, "{label}: took {secs:.2}s");
        detail.push(format!("{label} {total:.1}M"));
    }
    Ok(detail.join(", "))
}

fn reduction_claims() -> Outcome {
    let reduction = |preset: &str| -> Result<f64, String> {
        let out = alm(&["params", "--preset", preset, "--baseline", "asm-billionword"])?;
        let pct = field(&out, "input+output reduction")?;
        pct.trim_end_matches('%').parse::<f64>().map_err(fail)
    };
    let adaptive = reduction("adp-billionword")?;
    let tied = reduction("adp-t-billionword")?;
    ensure!((adaptive - 23.0).abs() <= 3.0, "adaptive inputs {adaptive}%");
    ensure!((tied - 61.0).abs() <= 3.0, "full tying {tied}%");
    Ok(format!("adaptive inputs {adaptive}%, full tying {tied}%"))
}

fn w_at(store: &ParamStore<f64>, w: WeightRef, r: usize, c: usize) -> f64 {
    if w.transposed {
        store.get(w.id).at(&[c, r])
    } else {
        store.get(w.id).at(&[r, c])
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Flattened distribution: head words and cluster logits share one
/// normalizer, each cluster's words get their own.
fn flattened(layer: &AdaptiveSoftmax, store: &ParamStore<f64>, h: &[f64]) -> Vec<f64> {
    let p = layer.partition();
    let dot = |w: WeightRef, col: usize, x: &[f64]| (0..x.len()).map(|k| x[k] * w_at(store, w, k, col)).sum::<f64>();
    let mut head: Vec<f64> = (0..p.band_sizes()[0]).map(|c| dot(layer.head_words(), c, h)).collect();
    if let Some(c) = layer.head_clusters() {
        for j in 0..p.num_bands() - 1 {
            head.push((0..h.len()).map(|k| h[k] * store.get(c).at(&[k, j])).sum());
        }
    }
    let z = log_sum_exp(&head);
    let mut out: Vec<f64> = head[..p.band_sizes()[0]].iter().map(|l| l - z).collect();
    for band in 1..p.num_bands() {
        let cluster = head[p.band_sizes()[0] + band - 1] - z;
        let proj: Vec<f64> = (0..p.band_dims()[band])
            .map(|j| dot(layer.tail_projections()[band - 1], j, h))
            .collect();
        let logits: Vec<f64> = (0..p.band_sizes()[band])
            .map(|w| dot(layer.tail_tables()[band - 1], w, &proj))
            .collect();
        let zt = log_sum_exp(&logits);
        out.extend(logits.iter().map(|l| cluster + l - zt));
    }
    out
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn adaptive_softmax_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst, mut worst_norm) = (0.0f64, 0.0f64);
    let instances = 1000;
    for _ in 0..instances {
        let bands = rng.random_range(2..=4);
        let sizes: Vec<usize> = (0..bands).map(|_| rng.random_range(1..=16)).collect();
        let k: usize = [1, 2, 4][rng.random_range(0..3)];
        let d = 2 * k.pow(bands as u32 - 1);
        let partition = ClusterPartition::new(&sizes, d, k).map_err(fail)?;
        let mut layout = Layout::new();
        let layer = if rng.random_bool(0.5) {
            let input = AdaptiveInputEmbedding::new(&mut layout, "in", partition.clone());
            let tying = TyingConfig {
                tie_embeddings: true,
                tie_projections: rng.random_bool(0.5),
            };
            AdaptiveSoftmax::tied(&mut layout, "out", partition, &input, tying, 0.0).map_err(fail)?
        } else {
            AdaptiveSoftmax::new(&mut layout, "out", partition, 0.0)
        };
        let store: ParamStore<f64> = layout.allocate(rng.random()).map_err(fail)?;
        let h = random_tensor(&[3, d], &mut rng);
        let mut tape = Tape::with_params(&store);
        let hv = tape.constant(h.clone());
        let lp = layer.log_probs(&mut tape, hv).map_err(fail)?;
        let lp = tape.value(lp);
        for r in 0..3 {
            let expected = flattened(&layer, &store, h.row(r));
            ensure!(
                lp.row(r).len() == expected.len(),
                "row width {} vs {}",
                lp.row(r).len(),
                expected.len()
            );
            for (a, b) in lp.row(r).iter().zip(&expected) {
                worst = worst.max((a - b).abs());
            }
            worst_norm = worst_norm.max((lp.row(r).iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs());
        }
    }
    ensure!(worst < 1e-9, "max log-prob difference {worst:e}");
    ensure!(worst_norm < 1e-5, "max normalization error {worst_norm:e}");
    Ok(format!(
        "{instances} instances, max diff {worst:.1e}, max |sum p - 1| {worst_norm:.1e}"
    ))
}

fn small_model(tying: TyingConfig, dropout: f64) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        input: InputKind::Adaptive,
        input_dim: 16,
        output: OutputKind::Adaptive,
        output_dim: 16,
        bands: vec![4, 4, 4],
        factor: 2,
        tying,
        tail_dropout: dropout,
        char_vocab: 0,
        highway_layers: 0,
        decoder: DecoderConfig {
            num_blocks: 2,
            heads: 2,
            model_dim: 16,
            ffn_dim: 32,
            dropout,
            attn_dropout: dropout,
            relu_dropout: dropout,
        },
        max_positions: 64,
        scale_embeddings: true,
    }
}

fn sequence_batch(tokens: &[u32]) -> Batch {
    let block = Block {
        start: 1,
        inputs: tokens[..tokens.len() - 1].to_vec(),
        targets: tokens[1..].to_vec(),
        score: vec![true; tokens.len() - 1],
    };
    Batch::from_blocks(&[&block], 0)
}

fn gradient_correctness() -> Outcome {
    let mut detail = Vec::new();
    for (label, tying) in [("untied", TyingConfig::NONE), ("tied", TyingConfig::ALL)] {
        let model = LanguageModel::new(small_model(tying, 0.0)).map_err(fail)?;
        let store: ParamStore<f64> = model.layout().allocate(11).map_err(fail)?;
        let ids: Vec<_> = store.ids().collect();
        let batch = sequence_batch(&[3, 0, 9, 5, 11]);
        // exactly-zero gradients (e.g. key biases) compare against roundoff
        let options = GradCheckOptions {
            step: 1e-4,
            floor: 1e-6,
            tolerance: 1e-4,
            ..GradCheckOptions::default()
        };
        let report = grad_check_params(
            &store,
            &ids,
            |tape| {
                model
                    .loss_sum(tape, &batch)
                    .map(|(loss, _)| loss)
                    .map_err(|e| alm_tensor::TensorError::Invalid(e.to_string()))
            },
            &options,
        )
        .map_err(fail)?;
        ensure!(report.passed(), "{label}: {:?}", report.worst());
        detail.push(format!("{label} max rel err {:.1e}", report.max_rel_error()));
    }
    Ok(detail.join(", "))
}

fn step_config(accumulation: usize, budget: usize) -> TrainConfig {
    TrainConfig {
        schedule: LrSchedule {
            warmup_steps: 5,
            warmup_init: 1e-3,
            max_lr: 0.1,
            min_lr: 1e-3,
            cycles: 1,
            first_cycle_steps: 200,
            shrink: 1.0,
        },
        total_steps: 0,
        accumulation_steps: accumulation,
        clip: 0.1,
        momentum: 0.99,
        token_budget: budget,
        seed: 7,
    }
}

fn random_blocks(n: usize, len: usize, vocab: u32, seed: u64) -> Vec<Block> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let tokens: Vec<u32> = (0..=len).map(|_| rng.random_range(0..vocab)).collect();
            Block {
                start: i * len,
                inputs: tokens[..len].to_vec(),
                targets: tokens[1..].to_vec(),
                score: vec![true; len],
            }
        })
        .collect()
}

/// Pairs of (input-side tensor, output-side view) that tying should share.
fn tied_pairs(model: &LanguageModel) -> Result<Vec<(alm_tensor::ParamId, WeightRef)>, String> {
    let (InputLayer::Adaptive(input), OutputLayer::Adaptive(output)) = (model.input(), model.output()) else {
        return Err("model is not adaptive on both sides".into());
    };
    let mut pairs = vec![(input.tables()[0], output.head_words())];
    for b in 1..input.tables().len() {
        pairs.push((input.tables()[b], output.tail_tables()[b - 1]));
        pairs.push((input.projections()[b], output.tail_projections()[b - 1]));
    }
    Ok(pairs)
}

fn tying_semantics() -> Outcome {
    let model = LanguageModel::new(small_model(TyingConfig::ALL, 0.0)).map_err(fail)?;
    let store: ParamStore<f64> = model.layout().allocate(5).map_err(fail)?;
    let before = store.clone();
    let mut trainer = Trainer::new(&model, store, step_config(1, 48)).map_err(fail)?;
    let blocks = random_blocks(4, 6, 12, 1);
    let refs: Vec<&Block> = blocks.iter().collect();
    trainer.update(&[Batch::from_blocks(&refs, 0)]).map_err(fail)?;
    let after = &trainer.store;

    let pairs = tied_pairs(&model)?;
    let mut changed = 0;
    for &(input, view) in &pairs {
        ensure!(
            view.id == input && view.transposed,
            "{} is not a transposed view of its input",
            after.name(input)
        );
        let shape = after.get(input).shape().to_vec();
        for r in 0..shape[0] {
            for c in 0..shape[1] {
                let d_in = after.get(input).at(&[r, c]) - before.get(input).at(&[r, c]);
                let d_out = w_at(after, view, c, r) - w_at(&before, view, c, r);
                ensure!(d_in == d_out, "{}[{r},{c}] moved {d_in} vs {d_out}", after.name(input));
                changed += usize::from(d_in != 0.0);
            }
        }
    }
    ensure!(changed > 0, "the step left every shared entry unchanged");

    let dir = tempfile::tempdir().map_err(fail)?;
    let path = dir.path().join("tied.ckpt");
    trainer.checkpoint("", Default::default()).save(&path).map_err(fail)?;
    let loaded = Checkpoint::<f64>::load(&path).map_err(fail)?;
    ensure!(loaded.aliases == model.layout().aliases, "aliases not restored");
    loaded.check_layout(model.layout()).map_err(fail)?;
    let mut store = loaded.params;

    // a write to input row w must move the output logit of word w by h[0]
    let OutputLayer::Adaptive(output) = model.output() else {
        unreachable!()
    };
    let h = random_tensor(&[1, 16], &mut ChaCha8Rng::seed_from_u64(2));
    let head_logit = |store: &ParamStore<f64>, w: usize| -> Result<f64, String> {
        let mut tape = Tape::with_params(store);
        let hv = tape.constant(h.clone());
        let logits = output.head_logits(&mut tape, hv).map_err(fail)?;
        Ok(tape.value(logits).at(&[0, w]))
    };
    let w = 2;
    let old = head_logit(&store, w)?;
    let (table, _) = pairs[0];
    let cols = store.get(table).shape()[1];
    store.get_mut(table).data_mut()[w * cols] += 1.0;
    let new = head_logit(&store, w)?;
    ensure!(
        ((new - old) - h.at(&[0, 0])).abs() < 1e-12,
        "logit moved {} not {}",
        new - old,
        h.at(&[0, 0])
    );
    Ok(format!(
        "{} shared tensors, {changed} entries moved identically, aliasing survives reload",
        pairs.len()
    ))
}

fn schedule_arithmetic() -> Outcome {
    let mut detail = Vec::new();
    for (preset, first, total) in [
        ("adp-t-wikitext", 18_000, 286_000),
        ("adp-t-billionword", 137_000, 975_000),
    ] {
        let s = RunConfig::preset(preset).map_err(fail)?.schedule();
        ensure!(s.lr_at(0) == 1e-7, "{preset}: lr at 0 is {}", s.lr_at(0));
        ensure!(s.lr_at(16_000) == 1.0, "{preset}: lr at 16K is {}", s.lr_at(16_000));
        ensure!(s.cycle_len(0) == first, "{preset}: first cycle {}", s.cycle_len(0));
        ensure!(s.total_steps() == total, "{preset}: total {}", s.total_steps());
        detail.push(format!("{preset} {}K", total / 1000));
    }
    Ok(format!("warmup 1e-7 to 1.0 at 16K, {}", detail.join(", ")))
}

fn clipping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut clipped) = (0.0f64, 0);
    let sets = 1000;
    for _ in 0..sets {
        let scale = 10f64.powf(rng.random_range(-3.0..2.0));
        let values: Vec<Vec<f64>> = (0..rng.random_range(1..6))
            .map(|_| {
                (0..rng.random_range(1..50))
                    .map(|_| rng.random_range(-1.0..1.0) * scale)
                    .collect()
            })
            .collect();
        let specs: Vec<ParamSpec> = values
            .iter()
            .enumerate()
            .map(|(i, v)| ParamSpec {
                name: format!("p{i}"),
                shape: vec![v.len()],
                init: Init::Zeros,
            })
            .collect();
        let store: ParamStore<f64> = ParamStore::from_specs(&specs, 0).map_err(fail)?;
        let mut grads = Gradients::zeros_like(&store);
        for (g, v) in grads.iter_mut().zip(&values) {
            g.copy_from_slice(v);
        }
        let pre = values.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        clip_gradients(&mut grads, 0.1).map_err(fail)?;
        let post = grads.norm_sq().sqrt();
        worst = worst.max((post - pre.min(0.1)).abs());
        clipped += usize::from(pre > 0.1);
    }
    ensure!(worst <= 1e-12, "post-clip norm off by {worst:e}");
    Ok(format!("{sets} sets ({clipped} clipped), max error {worst:.1e}"))
}

fn zipf(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let h: f64 = (1..=n).map(|i| 1.0 / i as f64).sum();
    let mut u = rng.random::<f64>() * h;
    for i in 1..=n {
        u -= 1.0 / i as f64;
        if u <= 0.0 {
            return i - 1;
        }
    }
    n - 1
}

/// Sentences from a small grammar with Zipf-distributed word choices.
fn sentences(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut w = vec!["the".to_string()];
            if rng.random_bool(0.5) {
                w.push(format!("adj{}", zipf(&mut rng, 40)));
            }
            let noun = zipf(&mut rng, 150);
            w.push(format!("noun{noun}"));
            w.push(format!("verb{}", (noun * 7 + zipf(&mut rng, 5)) % 60));
            w.push(if rng.random_bool(0.3) { "a" } else { "the" }.to_string());
            w.push(format!("noun{}", zipf(&mut rng, 150)));
            if rng.random_bool(0.4) {
                w.push("with".into());
                w.push(format!("noun{}", zipf(&mut rng, 150)));
            }
            w.join(" ")
        })
        .collect()
}

/// The shipped tiny preset, with bands scaled to the vocabulary.
fn tiny_preset(vocab: usize, overrides: &[(&str, &str)]) -> Result<(ModelConfig, TrainConfig), String> {
    let mut cfg = RunConfig::preset("tiny").map_err(fail)?;
    cfg.set("model.bands", &format!("{},{},rest", vocab / 4, vocab / 4))
        .map_err(fail)?;
    for (k, v) in overrides {
        cfg.set(k, v).map_err(fail)?;
    }
    cfg.validate(Some(vocab), None).map_err(fail)?;
    Ok((cfg.model_config(Some(vocab), None).map_err(fail)?, cfg.train_config()))
}

fn train_and_score(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train: &[u32],
    test: &[u32],
    eos: u32,
    eval_mode: BlockMode,
) -> Result<(f64, usize), String> {
    let model = LanguageModel::new(model_cfg).map_err(fail)?;
    let store: ParamStore<f32> = model.layout().allocate(1).map_err(fail)?;
    let blocks = make_blocks(train, eos, 64, BlockMode::TrainContiguous { keep_partial: true }).map_err(fail)?;
    let budget = train_cfg.token_budget;
    let mut data = DataIterator::new(blocks, budget, 1, 0).map_err(fail)?;
    let mut trainer = Trainer::new(&model, store, train_cfg).map_err(fail)?;
    while !trainer.is_done() {
        trainer.train_step(&mut data).map_err(fail)?;
    }
    let blocks = make_blocks(test, eos, 64, eval_mode).map_err(fail)?;
    let report = evaluate(&model, &trainer.store, &blocks, 0, EvalOptions::default()).map_err(fail)?;
    ensure!(
        report.count() == test.len(),
        "scored {} of {} tokens",
        report.count(),
        test.len()
    );
    Ok((report.perplexity(), trainer.step()))
}

fn trainability() -> Outcome {
    let start = Instant::now();
    let lines = sentences(100, 1);
    let vocab = Vocabulary::build(lines.iter().map(String::as_str), 0).map_err(fail)?;
    let stream = vocab.encode(lines.iter().map(String::as_str));
    let (model_cfg, train_cfg) = tiny_preset(vocab.len(), &[("model.dropout", "0"), ("data.token_budget", "512")])?;
    // scored on the training blocks themselves: with a few fixed-offset
    // blocks the model also memorizes where each token sits in its block
    let (memorized, steps) = train_and_score(
        model_cfg,
        train_cfg,
        &stream,
        &stream,
        vocab.eos_id() as u32,
        BlockMode::TrainContiguous { keep_partial: true },
    )?;
    let memorize_secs = start.elapsed().as_secs_f64();
    ensure!(
        memorized < 1.5,
        "training-set perplexity {memorized:.3} after {steps} steps"
    );
    ensure!(memorize_secs < 300.0, "memorization took {memorize_secs:.0}s");

    let start = Instant::now();
    let lines = sentences(14_500, 2);
    let bytes: usize = lines.iter().map(|l| l.len() + 1).sum();
    let (train, test) = lines.split_at(lines.len() * 9 / 10);
    let vocab = Vocabulary::build(train.iter().map(String::as_str), 0).map_err(fail)?;
    let train_stream = vocab.encode(train.iter().map(String::as_str));
    let test_stream = vocab.encode(test.iter().map(String::as_str));
    let (model_cfg, train_cfg) = tiny_preset(vocab.len(), &[("optim.first_cycle_steps", "250")])?;
    let (heldout, steps) = train_and_score(
        model_cfg,
        train_cfg,
        &train_stream,
        &test_stream,
        vocab.eos_id() as u32,
        BlockMode::EvalSentenceAligned { context: 32 },
    )?;
    let unigram = unigram_perplexity(vocab.freqs(), &test_stream);
    let heldout_secs = start.elapsed().as_secs_f64();
    ensure!(
        heldout < unigram,
        "held-out perplexity {heldout:.2} vs unigram {unigram:.2}"
    );
    ensure!(heldout_secs < 600.0, "held-out run took {heldout_secs:.0}s");
    Ok(format!(
        "memorized 100 sentences to ppl {memorized:.3} in {memorize_secs:.0}s; {}KB corpus held-out ppl {heldout:.2} vs unigram {unigram:.2} after {steps} steps in {heldout_secs:.0}s",
        bytes / 1000
    ))
}

fn accumulation_equivalence() -> Outcome {
    let model = LanguageModel::new(small_model(TyingConfig::ALL, 0.0)).map_err(fail)?;
    let store: ParamStore<f64> = model.layout().allocate(3).map_err(fail)?;
    let blocks = random_blocks(4, 6, 12, 1);
    let refs: Vec<&Block> = blocks.iter().collect();
    let whole = Batch::from_blocks(&refs, 0);
    let halves = [Batch::from_blocks(&refs[..2], 0), Batch::from_blocks(&refs[2..], 0)];
    let mut one = Trainer::new(&model, store.clone(), step_config(1, 48)).map_err(fail)?;
    let mut two = Trainer::new(&model, store, step_config(2, 48)).map_err(fail)?;
    let mut worst = 0.0f64;
    for _ in 0..3 {
        one.update(std::slice::from_ref(&whole)).map_err(fail)?;
        two.update(&halves).map_err(fail)?;
        for id in one.store.ids() {
            let (a, b) = (one.store.get(id).data(), two.store.get(id).data());
            let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            worst = worst.max(diff / norm.max(1e-12));
        }
    }
    ensure!(worst < 1e-6, "relative parameter difference {worst:e}");
    Ok(format!("3 updates, max relative difference {worst:.1e}"))
}

fn eval_model(max_positions: usize) -> Result<LanguageModel, String> {
    LanguageModel::new(ModelConfig {
        vocab_size: 20,
        bands: vec![5, 5, 10],
        decoder: DecoderConfig {
            num_blocks: 1,
            heads: 2,
            model_dim: 16,
            ffn_dim: 32,
            dropout: 0.2,
            attn_dropout: 0.2,
            relu_dropout: 0.2,
        },
        max_positions,
        ..small_model(TyingConfig::NONE, 0.0)
    })
    .map_err(fail)
}

/// Sentences of random length over ids 1..20, eos = 0.
fn random_stream(n: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        for _ in 0..rng.random_range(3..30) {
            out.push(rng.random_range(1..20));
        }
        out.push(0);
    }
    out.truncate(n);
    out
}

fn evaluation_coverage() -> Outcome {
    let model = eval_model(3072)?;
    let store: ParamStore<f32> = model.layout().allocate(2).map_err(fail)?;
    let stream = random_stream(7000, 2);
    let sweep = [(512, 0), (512, 480), (3072, 2560), (64, 32), (128, 127)];
    for (block, context) in sweep {
        let blocks = make_blocks(&stream, 0, block, BlockMode::EvalSentenceAligned { context }).map_err(fail)?;
        let report = evaluate(
            &model,
            &store,
            &blocks,
            0,
            EvalOptions {
                max_rows: 4,
                threads: 2,
            },
        )
        .map_err(fail)?;
        let mut seen = vec![0usize; stream.len()];
        for t in &report.tokens {
            seen[t.position] += 1;
            ensure!(
                t.target == stream[t.position],
                "({block},{context}) wrong target at {}",
                t.position
            );
        }
        ensure!(
            seen.iter().all(|&c| c == 1),
            "({block},{context}) scored some token other than once"
        );
    }

    let model = eval_model(128)?;
    let store: ParamStore<f32> = model.layout().allocate(3).map_err(fail)?;
    let blocks = make_blocks(
        &random_stream(2000, 3),
        0,
        128,
        BlockMode::EvalSentenceAligned { context: 64 },
    )
    .map_err(fail)?;
    let sequential = evaluate(
        &model,
        &store,
        &blocks,
        0,
        EvalOptions {
            max_rows: 1,
            threads: 1,
        },
    )
    .map_err(fail)?;
    let batched = evaluate(
        &model,
        &store,
        &blocks,
        0,
        EvalOptions {
            max_rows: 6,
            threads: 3,
        },
    )
    .map_err(fail)?;
    let rel = (sequential.perplexity() - batched.perplexity()).abs() / sequential.perplexity();
    ensure!(rel < 1e-6, "batched vs sequential perplexity differ by {rel:e}");
    Ok(format!(
        "{} block/context pairs, batched vs sequential rel diff {rel:.1e}",
        sweep.len()
    ))
}

fn bpe_invertibility() -> Outcome {
    let mut lines = sentences(14_500, 2);
    lines.extend(
        [
            "naïve café déjà-vu",
            "x,y = 42;  tabs\tand  spaces",
            "Ünïcödé wörds ☃ snow",
            "a",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    let bpe = learn_bpe(lines.iter().map(String::as_str), 500).map_err(fail)?;
    let (round_trips, learned) = (lines.len(), bpe.merges().len());
    for line in &lines {
        let seg = bpe.segment_line(line);
        let normalized = line.split_whitespace().collect::<Vec<_>>().join(" ");
        ensure!(invert_units(&seg.units) == normalized, "round trip broke on '{line}'");
        ensure!(
            seg.word_end.iter().filter(|&&e| e).count() == line.split_whitespace().count(),
            "word ends on '{line}'"
        );
    }

    // enough merges that every training word is one unit
    let lines = sentences(300, 5);
    let bpe = learn_bpe(lines.iter().map(String::as_str), 1_000_000).map_err(fail)?;
    let mut unit_lines = Vec::new();
    let mut word_end = Vec::new();
    for line in &lines {
        let seg = bpe.segment_line(line);
        ensure!(
            seg.units.len() == line.split_whitespace().count(),
            "'{line}' splits into sub-words"
        );
        word_end.extend(seg.word_end);
        word_end.push(true);
        unit_lines.push(seg.units.join(" "));
    }
    let words = Vocabulary::build(lines.iter().map(String::as_str), 0).map_err(fail)?;
    let units = Vocabulary::build(unit_lines.iter().map(String::as_str), 0).map_err(fail)?;
    let word_stream = words.encode(lines.iter().map(String::as_str));
    let unit_stream = units.encode(unit_lines.iter().map(String::as_str));
    ensure!(
        word_stream == unit_stream,
        "unit and word streams number tokens differently"
    );

    let model = LanguageModel::new(ModelConfig {
        vocab_size: words.len(),
        bands: vec![words.len()],
        ..small_model(TyingConfig::NONE, 0.0)
    })
    .map_err(fail)?;
    let store: ParamStore<f64> = model.layout().allocate(6).map_err(fail)?;
    let eos = words.eos_id() as u32;
    let score = |stream: &[u32]| -> Result<EvalReport, String> {
        let blocks = make_blocks(stream, eos, 64, BlockMode::EvalSentenceAligned { context: 16 }).map_err(fail)?;
        evaluate(&model, &store, &blocks, 0, EvalOptions::default()).map_err(fail)
    };
    let word_level = score(&word_stream)?;
    let from_units = score(&unit_stream)?.word_level(&word_end).map_err(fail)?;
    ensure!(from_units == word_level, "word-level reports differ");
    ensure!(
        from_units.perplexity() == word_level.perplexity(),
        "perplexities differ"
    );
    Ok(format!(
        "{} merges round-trip {} lines; one-unit-per-word ppl {:.4} equals word-level",
        learned,
        round_trips,
        word_level.perplexity()
    ))
}

fn binned_analysis() -> Outcome {
    // twenty tokens over ids 0..7 with losses 0.25, 0.5, ..., 5.0
    let targets = [4u32, 4, 0, 1, 4, 2, 5, 6, 4, 3, 0, 4, 1, 4, 2, 4, 6, 5, 4, 3];
    let report = EvalReport::from_tokens(
        targets
            .iter()
            .enumerate()
            .map(|(i, &target)| TokenLoss {
                position: i,
                target,
                prev: i.checked_sub(1).map(|p| targets[p]),
                loss: (i + 1) as f64 * 0.25,
            })
            .collect(),
    );
    let freq = [5, 50, 500, 5000, 2_000_000, 10, 11];
    let current = bin_loss(&report, &freq, BinMode::CurrentWord);
    let expected = "bin_bound,types,token_count,mean_loss\n\
                    10,2,4,2.437500\n\
                    100,2,4,2.625000\n\
                    1K,1,2,2.625000\n\
                    10K,1,2,3.750000\n\
                    100K,0,0,nan\n\
                    1M,0,0,nan\n\
                    1M+,1,8,2.437500\n";
    ensure!(current.to_csv() == expected, "current-word bins:\n{}", current.to_csv());
    ensure!(
        current.total_tokens() == report.count(),
        "current-word bins lose tokens"
    );
    let previous = bin_loss(&report, &freq, BinMode::PreviousWord);
    let rows: Vec<(usize, usize, f64)> = previous.bins.iter().map(|b| (b.types, b.tokens, b.loss_sum)).collect();
    let want = [
        (2, 4, 10.75),
        (2, 4, 11.5),
        (1, 2, 5.75),
        (1, 1, 2.75),
        (0, 0, 0.0),
        (0, 0, 0.0),
        (1, 8, 21.5),
    ];
    ensure!(rows == want, "previous-word bins {rows:?}");
    ensure!(
        previous.total_tokens() + previous.excluded == report.count(),
        "previous-word bins lose tokens"
    );

    let mut layout = Layout::new();
    let encoder = CharCnnEncoder::new(&mut layout, "input", 60, 1, 16);
    let store: ParamStore<f64> = layout.allocate(8).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let words: Vec<Vec<u32>> = (0..1000)
        .map(|_| (0..rng.random_range(1..=20)).map(|_| rng.random_range(0..60)).collect())
        .collect();
    let mut worst = 0.0f64;
    for chunk in words.chunks(50) {
        let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        let longest = chunk.iter().map(Vec::len).max().unwrap();
        let mut tape = Tape::with_params(&store);
        let tight = encoder.encode_chars(&mut tape, &refs, longest).map_err(fail)?;
        let padded = encoder.encode_chars(&mut tape, &refs, longest + 13).map_err(fail)?;
        worst = worst.max(tape.value(tight).max_abs_diff(tape.value(padded)));
        // a word alone at its own length matches its row in the padded batch
        let alone = encoder
            .encode_chars(&mut tape, &refs[..1], refs[0].len())
            .map_err(fail)?;
        let diff = tape
            .value(alone)
            .row(0)
            .iter()
            .zip(tape.value(tight).row(0))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    ensure!(worst < 1e-12, "padding changed encodings by {worst:e}");
    Ok(format!(
        "{} tokens binned, fixture reproduced, padding diff over 1000 words {worst:.1e}",
        report.count()
    ))
}
