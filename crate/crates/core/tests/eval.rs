use alm_core::corpus::{make_blocks, BlockMode};
use alm_core::decoder::DecoderConfig;
use alm_core::eval::{
    bin_loss, evaluate, unigram_perplexity, BinMode, EvalOptions, EvalReport, ParamBreakdown, TokenLoss,
};
use alm_core::model::{InputKind, LanguageModel, ModelConfig, OutputKind, OutputLayer};
use alm_core::output::TyingConfig;
use alm_core::trainer::{Checkpoint, DataState};
use alm_core::Error;
use alm_tensor::ParamStore;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(output: OutputKind, max_positions: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        input: InputKind::Adaptive,
        input_dim: 16,
        output,
        output_dim: 16,
        bands: vec![5, 5, 10],
        factor: 2,
        tying: TyingConfig::NONE,
        tail_dropout: 0.0,
        char_vocab: 0,
        highway_layers: 0,
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
        scale_embeddings: true,
    }
}

/// Sentences of random length over ids 1..20, eos = 0.
fn stream(n: usize, seed: u64) -> Vec<u32> {
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

#[test]
fn uniform_model_has_vocabulary_perplexity() {
    let model = LanguageModel::new(config(OutputKind::Full, 64)).unwrap();
    let mut store: ParamStore<f64> = model.layout().allocate(1).unwrap();
    let OutputLayer::Full(out) = model.output() else {
        unreachable!()
    };
    store
        .get_mut(out.weight().id)
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let s = stream(300, 1);
    let blocks = make_blocks(&s, 0, 64, BlockMode::EvalSentenceAligned { context: 16 }).unwrap();
    let report = evaluate(&model, &store, &blocks, 0, EvalOptions::default()).unwrap();
    assert_eq!(report.count(), 300);
    assert!((report.perplexity() - 20.0).abs() < 1e-9);
}

#[test]
fn every_token_scored_once_across_block_and_context_sweep() {
    let model = LanguageModel::new(config(OutputKind::Adaptive, 3072)).unwrap();
    let store: ParamStore<f32> = model.layout().allocate(2).unwrap();
    let s = stream(7000, 2);
    let mut ppl = Vec::new();
    for (block, context) in [(512, 0), (512, 480), (3072, 2560), (64, 32)] {
        let blocks = make_blocks(&s, 0, block, BlockMode::EvalSentenceAligned { context }).unwrap();
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
        .unwrap();
        let mut positions: Vec<usize> = report.tokens.iter().map(|t| t.position).collect();
        positions.sort_unstable();
        assert_eq!(positions, (0..s.len()).collect::<Vec<_>>(), "{block}/{context}");
        assert!(report.tokens.iter().all(|t| t.target == s[t.position]));
        assert!(report
            .tokens
            .iter()
            .all(|t| t.prev == t.position.checked_sub(1).map(|p| s[p])));
        ppl.push(report.perplexity());
    }
    assert_ne!(ppl[0], ppl[1]);
}

#[test]
fn batched_parallel_and_sequential_agree() {
    let model = LanguageModel::new(config(OutputKind::Adaptive, 128)).unwrap();
    let store: ParamStore<f32> = model.layout().allocate(3).unwrap();
    let blocks = make_blocks(&stream(2000, 3), 0, 128, BlockMode::EvalSentenceAligned { context: 64 }).unwrap();
    let seq = evaluate(
        &model,
        &store,
        &blocks,
        0,
        EvalOptions {
            max_rows: 1,
            threads: 1,
        },
    )
    .unwrap();
    let batched = evaluate(
        &model,
        &store,
        &blocks,
        0,
        EvalOptions {
            max_rows: 6,
            threads: 1,
        },
    )
    .unwrap();
    let parallel = evaluate(
        &model,
        &store,
        &blocks,
        0,
        EvalOptions {
            max_rows: 6,
            threads: 3,
        },
    )
    .unwrap();
    assert_eq!(batched, parallel);
    assert_eq!(seq.count(), batched.count());
    let rel = (seq.perplexity() - batched.perplexity()).abs() / seq.perplexity();
    assert!(rel < 1e-6, "{rel}");
    let again = evaluate(
        &model,
        &store,
        &blocks,
        0,
        EvalOptions {
            max_rows: 1,
            threads: 1,
        },
    )
    .unwrap();
    assert_eq!(seq, again);
}

#[test]
fn block_longer_than_model_rejected() {
    let model = LanguageModel::new(config(OutputKind::Adaptive, 32)).unwrap();
    let store: ParamStore<f32> = model.layout().allocate(3).unwrap();
    let blocks = make_blocks(&stream(200, 4), 0, 64, BlockMode::EvalSentenceAligned { context: 40 }).unwrap();
    assert!(evaluate(&model, &store, &blocks, 0, EvalOptions::default()).is_err());
}

fn report(losses: &[f64]) -> EvalReport {
    EvalReport::from_tokens(
        losses
            .iter()
            .enumerate()
            .map(|(i, &loss)| TokenLoss {
                position: i,
                target: i as u32,
                prev: None,
                loss,
            })
            .collect(),
    )
}

#[test]
fn word_level_perplexity() {
    let units = report(&[0.5, 1.0, 2.0, 0.25]);
    // one unit per word reproduces the unit report
    assert_eq!(units.word_level(&[true; 4]).unwrap(), units);
    // words {0,1} and {2,3}: product of unit probabilities
    let words = units.word_level(&[false, true, false, true]).unwrap();
    assert_eq!(words.count(), 2);
    let (p, q) = ((-0.5f64).exp(), (-1.0f64).exp());
    assert!((words.tokens[0].loss + (p * q).ln()).abs() < 1e-12);
    assert!((words.perplexity() - (3.75f64 / 2.0).exp()).abs() < 1e-12);
    assert!(matches!(units.word_level(&[true; 3]), Err(Error::InvalidArgument(_))));
    assert!(units.word_level(&[true, true, true, false]).is_err());
}

proptest! {
    #[test]
    fn splitting_units_with_preserved_mass_keeps_word_perplexity(
        probs in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0), 1..40),
    ) {
        let coarse = report(&probs.iter().map(|(p, _)| -p.ln()).collect::<Vec<_>>());
        // each word becomes two units whose probabilities multiply to the original
        let fine_losses: Vec<f64> = probs
            .iter()
            .flat_map(|(p, s)| {
                let first = p.powf(*s);
                [-first.ln(), -(p / first).ln()]
            })
            .collect();
        let ends: Vec<bool> = (0..fine_losses.len()).map(|i| i % 2 == 1).collect();
        let fine = report(&fine_losses).word_level(&ends).unwrap();
        prop_assert_eq!(fine.count(), coarse.count());
        prop_assert!((fine.perplexity() - coarse.perplexity()).abs() <= 1e-9 * coarse.perplexity());
    }
}

/// Twenty tokens over ids 0..7 with losses 0.25, 0.5, ..., 5.0.
fn fixture() -> (EvalReport, Vec<u64>) {
    let targets = [4u32, 4, 0, 1, 4, 2, 5, 6, 4, 3, 0, 4, 1, 4, 2, 4, 6, 5, 4, 3];
    let tokens = targets
        .iter()
        .enumerate()
        .map(|(i, &target)| TokenLoss {
            position: i,
            target,
            prev: i.checked_sub(1).map(|p| targets[p]),
            loss: (i + 1) as f64 * 0.25,
        })
        .collect();
    (
        EvalReport::from_tokens(tokens),
        vec![5, 50, 500, 5000, 2_000_000, 10, 11],
    )
}

#[test]
fn hand_enumerated_current_word_bins() {
    let (report, freq) = fixture();
    let bins = bin_loss(&report, &freq, BinMode::CurrentWord);
    assert_eq!(bins.excluded, 0);
    assert_eq!(
        bins.to_csv(),
        "bin_bound,types,token_count,mean_loss\n\
         10,2,4,2.437500\n\
         100,2,4,2.625000\n\
         1K,1,2,2.625000\n\
         10K,1,2,3.750000\n\
         100K,0,0,nan\n\
         1M,0,0,nan\n\
         1M+,1,8,2.437500\n"
    );
}

#[test]
fn hand_enumerated_previous_word_bins() {
    let (report, freq) = fixture();
    let bins = bin_loss(&report, &freq, BinMode::PreviousWord);
    assert_eq!(bins.excluded, 1);
    let rows: Vec<(usize, usize, f64)> = bins.bins.iter().map(|b| (b.types, b.tokens, b.loss_sum)).collect();
    assert_eq!(
        rows,
        [
            (2, 4, 10.75),
            (2, 4, 11.5),
            (1, 2, 5.75),
            (1, 1, 2.75),
            (0, 0, 0.0),
            (0, 0, 0.0),
            (1, 8, 21.5)
        ]
    );
}

proptest! {
    #[test]
    fn bins_partition_scored_tokens(
        tokens in prop::collection::vec((0u32..50, any::<bool>(), 0.0f64..10.0), 1..200),
        freq in prop::collection::vec(0u64..3_000_000, 50),
    ) {
        let report = EvalReport::from_tokens(
            tokens
                .iter()
                .enumerate()
                .map(|(i, &(target, has_prev, loss))| TokenLoss {
                    position: i,
                    target,
                    prev: has_prev.then_some(target / 2),
                    loss,
                })
                .collect(),
        );
        let current = bin_loss(&report, &freq, BinMode::CurrentWord);
        prop_assert_eq!(current.total_tokens(), report.count());
        let previous = bin_loss(&report, &freq, BinMode::PreviousWord);
        prop_assert_eq!(previous.total_tokens() + previous.excluded, report.count());
        let sum: f64 = current.bins.iter().map(|b| b.loss_sum).sum();
        prop_assert!((sum - report.total_nll()).abs() < 1e-9);
    }
}

#[test]
fn unigram_baseline_matches_hand_computation() {
    // counts 3 and 1 smoothed to 4/6 and 2/6
    let ppl = unigram_perplexity(&[3, 1], &[0, 1]);
    let expected = (-(0.5 * ((4.0f64 / 6.0).ln() + (2.0f64 / 6.0).ln()))).exp();
    assert!((ppl - expected).abs() < 1e-12);
}

#[test]
fn parameter_count_equals_checkpoint_enumeration() {
    let mut cfg = config(OutputKind::Adaptive, 64);
    cfg.tying = TyingConfig::ALL;
    let model = LanguageModel::new(cfg).unwrap();
    let store: ParamStore<f32> = model.layout().allocate(5).unwrap();
    let counts = ParamBreakdown::from_layout(model.layout());
    let ckpt = Checkpoint {
        config: String::new(),
        step: 0,
        data: DataState::default(),
        params: store,
        aliases: model.layout().aliases.clone(),
        optimizer: None,
    };
    let decoded = Checkpoint::<f32>::decode(&ckpt.encode()).unwrap();
    let stored: usize = decoded.params.ids().map(|id| decoded.params.get(id).numel()).sum();
    assert_eq!(counts.total, stored);
    assert_eq!(counts.input + counts.output + counts.decoder, counts.total);
    assert!(counts.shared > 0);
}

#[test]
fn decoder_only_count_follows_formula() {
    let d = config(OutputKind::Adaptive, 8).decoder;
    let mut layout = alm_core::layout::Layout::new();
    alm_core::decoder::Decoder::new(&mut layout, "decoder", d).unwrap();
    let (e, f) = (16, 32);
    let per_block = 4 * e * e + 4 * e + 2 * e * f + f + e + 4 * e;
    assert_eq!(ParamBreakdown::from_layout(&layout).decoder, per_block + 2 * e);
}

#[test]
fn loss_sidecar_round_trips() {
    let (report, _) = fixture();
    let bytes = report.encode_losses();
    assert_eq!(EvalReport::decode_losses(&bytes).unwrap(), report);
    assert!(EvalReport::decode_losses(&bytes[..bytes.len() - 1]).is_err());
}
