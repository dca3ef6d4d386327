//! Evaluation checks: enumeration oracle, tie-breaking, rigged tasks,
//! report invariants, and the Monte-Carlo baseline guesser.

use rand::Rng;
use tlab_core::data::Vocab;
use tlab_core::eval::{
    evaluate, random_baseline, rank_classify, score_candidate_tokens, toy_task_suite,
    AggregationPolicy, EvalExample, EvalTask, ScoringPolicy,
};
use tlab_core::model::{
    forward, init_params, ArchitectureKind, Mode, ModelConfig, RelBiasConfig,
};
use tlab_core::rng::substream;
use tlab_core::trainer::{Checkpoint, CheckpointMeta};
use tlab_core::Precision;

fn checkpoint_with(cfg: ModelConfig, arch: ArchitectureKind, seed: u64) -> Checkpoint {
    // construct directly so tests can use sub-byte vocabularies
    let params = init_params(&cfg, arch, seed, Precision::High).unwrap();
    Checkpoint {
        params,
        optimizer_state: None,
        meta: CheckpointMeta {
            format_version: tlab_core::trainer::FORMAT_VERSION,
            arch,
            objective: None,
            cumulative_tokens_seen: 0,
            cumulative_tokens_trained: 0,
            stage_history: vec![],
            config: cfg,
            vocab: Vocab::desk_default(),
            precision: Precision::High,
            empty_encoder: false,
        },
    }
}

fn desk_checkpoint(arch: ArchitectureKind, seed: u64) -> Checkpoint {
    let vocab = Vocab::desk_default();
    let mut cfg = ModelConfig::desk_default();
    cfg.vocab_size = vocab.size;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    cfg.decoder_layers = 1;
    Checkpoint::fresh(&cfg, arch, vocab, seed, Precision::High).unwrap()
}

#[test]
fn ranking_matches_exhaustive_sequence_enumeration() {
    // 2-token vocabulary, 3-position candidates: compare the scorer's
    // ranking against brute-force chain-rule sequence probabilities.
    let cfg = ModelConfig {
        vocab_size: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        decoder_layers: 1,
        encoder_layers: 0,
        tied_embeddings: true,
        rel_bias: RelBiasConfig {
            n_buckets: 4,
            max_distance: 8,
        },
        dropout_rate: 0.0,
    };
    let ck = checkpoint_with(cfg.clone(), ArchitectureKind::CausalDecoder, 77);

    let sequences: Vec<Vec<u32>> = (0..8u32)
        .map(|s| (0..3).map(|b| (s >> b) & 1).collect())
        .collect();
    let mut scored: Vec<(usize, f64)> = sequences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            (
                i,
                score_candidate_tokens(&ck, &[], s, ScoringPolicy::SumLogprob, 16).unwrap(),
            )
        })
        .collect();

    // oracle: run the model once per full anchored stream and accumulate
    // log-probabilities with an independent softmax
    let chain_logprob = |s: &[u32]| -> f64 {
        let mut stream = vec![0u32]; // pad anchor
        stream.extend_from_slice(s);
        let n = stream.len();
        let batch = tlab_core::data::PackedBatch {
            seq_len: n,
            input_ids: stream.clone(),
            target_ids: vec![0; n],
            loss_mask: vec![false; n],
            segment_ids: vec![1; n],
            prefix_lens: None,
            encoder: None,
            objective: tlab_core::data::ObjectiveKind::Flm,
        };
        let logits = forward(&ck.params, &cfg, ArchitectureKind::CausalDecoder, &batch, Mode::Infer, 0)
            .unwrap();
        let mut lp = 0.0;
        for (j, &tok) in s.iter().enumerate() {
            let row = logits.row(j);
            let z: f64 = row.iter().map(|l| l.exp()).sum();
            lp += (row[tok as usize].exp() / z).ln();
        }
        lp
    };
    let mut oracle: Vec<(usize, f64)> = sequences
        .iter()
        .enumerate()
        .map(|(i, s)| (i, chain_logprob(s)))
        .collect();

    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let order_a: Vec<usize> = scored.iter().map(|(i, _)| *i).collect();
    let order_b: Vec<usize> = oracle.iter().map(|(i, _)| *i).collect();
    assert_eq!(order_a, order_b);
    // probabilities over all 8 sequences sum to 1
    let total: f64 = oracle.iter().map(|(_, lp)| lp.exp()).sum();
    assert!((total - 1.0).abs() < 1e-9, "sequence probs sum to {total}");
}

#[test]
fn boosted_embedding_wins_the_score() {
    // rig the model itself: inflate one token's embedding so the tied
    // output projection favors it at every position
    let mut ck = desk_checkpoint(ArchitectureKind::CausalDecoder, 3);
    let fav = ck.meta.vocab.tokenize(b"a")[0] as usize;
    let d = ck.meta.config.d_model;
    {
        let embed = ck.params.get_mut("embed/tokens");
        let row: Vec<f64> = embed.data()[fav * d..(fav + 1) * d]
            .iter()
            .map(|v| v * 40.0)
            .collect();
        embed.data_mut()[fav * d..(fav + 1) * d].copy_from_slice(&row);
    }
    let a = tlab_core::eval::score_candidate(&ck, "xy", "a", ScoringPolicy::SumLogprob, 32).unwrap();
    let b = tlab_core::eval::score_candidate(&ck, "xy", "b", ScoringPolicy::SumLogprob, 32).unwrap();
    assert!(a > b, "boosted candidate did not win: {a} vs {b}");
}

#[test]
fn task_fails_when_too_many_examples_overflow() {
    let ck = desk_checkpoint(ArchitectureKind::CausalDecoder, 5);
    let examples: Vec<EvalExample> = (0..10)
        .map(|i| EvalExample {
            // half the examples render far beyond the length cap
            input: if i % 2 == 0 { "ab".into() } else { "x".repeat(200) },
            candidates: vec!["c".into(), "d".into()],
            gold: 0,
        })
        .collect();
    let task = EvalTask {
        name: "overflow".into(),
        prompts: vec!["{input}{candidate}".into()],
        examples,
        chance_level: None,
        train_examples: vec![],
    };
    let err = rank_classify(&ck, &task, 0, ScoringPolicy::SumLogprob, 32).unwrap_err();
    assert!(err.to_string().contains("skipped"), "{err}");
}

#[test]
fn baseline_without_defined_chance_errors() {
    let task = EvalTask {
        name: "undefined".into(),
        prompts: vec!["{input}{candidate}".into()],
        examples: vec![],
        chance_level: None,
        train_examples: vec![],
    };
    assert!(random_baseline(&[task], AggregationPolicy::MedianThenMean).is_err());
}

#[test]
fn uniform_scorer_ties_break_to_lowest_index() {
    // zero embeddings -> all-zero logits -> equal-length candidates tie
    let mut ck = desk_checkpoint(ArchitectureKind::CausalDecoder, 1);
    for (_, t) in ck.params.iter_mut() {
        for v in t.data_mut().iter_mut() {
            *v = 0.0;
        }
    }
    let examples: Vec<EvalExample> = (0..10)
        .map(|i| EvalExample {
            input: "ab".into(),
            candidates: vec!["c".into(), "d".into()],
            gold: i % 2,
        })
        .collect();
    let task = EvalTask {
        name: "tie".into(),
        prompts: vec!["{input}{candidate}".into()],
        examples,
        chance_level: None,
        train_examples: vec![],
    };
    let acc = rank_classify(&ck, &task, 0, ScoringPolicy::SumLogprob, 32).unwrap();
    // predicted index is always 0, so accuracy is the gold-0 rate
    assert_eq!(acc, 0.5);
}

#[test]
fn rigged_task_scores_perfectly() {
    // gold indices chosen to match the model's own argmax; rank_classify
    // must then report exactly 1.0
    let ck = desk_checkpoint(ArchitectureKind::CausalDecoder, 9);
    let vocab = ck.meta.vocab;
    let mut examples = Vec::new();
    for i in 0..8 {
        let input = format!("q{i} ");
        let candidates: Vec<String> = vec!["aa".into(), "bb".into(), "cc".into(), "dd".into()];
        let scores: Vec<f64> = candidates
            .iter()
            .map(|c| {
                score_candidate_tokens(
                    &ck,
                    &vocab.tokenize(input.as_bytes()),
                    &vocab.tokenize(c.as_bytes()),
                    ScoringPolicy::SumLogprob,
                    64,
                )
                .unwrap()
            })
            .collect();
        let gold = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        examples.push(EvalExample {
            input,
            candidates,
            gold,
        });
    }
    let task = EvalTask {
        name: "rigged".into(),
        prompts: vec!["{input}{candidate}".into()],
        examples,
        chance_level: None,
        train_examples: vec![],
    };
    assert_eq!(
        rank_classify(&ck, &task, 0, ScoringPolicy::SumLogprob, 64).unwrap(),
        1.0
    );
}

#[test]
fn reports_are_pure_and_policy_consistent() {
    let ck = desk_checkpoint(ArchitectureKind::NonCausalDecoder, 4);
    let tasks = toy_task_suite(3, 6, 0);
    let r1 = evaluate(
        &ck,
        &tasks,
        AggregationPolicy::MedianThenMean,
        ScoringPolicy::SumLogprob,
        128,
    )
    .unwrap();
    let r2 = evaluate(
        &ck,
        &tasks,
        AggregationPolicy::MedianThenMean,
        ScoringPolicy::SumLogprob,
        128,
    )
    .unwrap();
    assert_eq!(r1, r2);
    // aggregate recomputes from the matrix
    let matrix: Vec<Vec<f64>> = r1.tasks.iter().map(|t| t.per_prompt.clone()).collect();
    let again = tlab_core::eval::aggregate(&matrix, r1.policy).unwrap();
    assert_eq!(r1.aggregate, again);
    for t in &r1.tasks {
        let mn = t.per_prompt.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = t.per_prompt.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(t.spread, (mn, mx));
        for a in &t.per_prompt {
            assert!((0.0..=1.0).contains(a));
        }
    }
}

#[test]
fn shift_invariance_of_argmax() {
    // adding a constant to every logit (via the final-norm gain? no — do it
    // arithmetically on scores) cannot change the argmax candidate: verify
    // by comparing rankings computed from raw and shifted per-position
    // log-softmax, which the scorer's normalization guarantees
    let ck = desk_checkpoint(ArchitectureKind::CausalDecoder, 12);
    let vocab = ck.meta.vocab;
    let input = vocab.tokenize(b"abcd");
    let cands: Vec<Vec<u32>> = vec![
        vocab.tokenize(b"e"),
        vocab.tokenize(b"f"),
        vocab.tokenize(b"g"),
    ];
    let scores: Vec<f64> = cands
        .iter()
        .map(|c| score_candidate_tokens(&ck, &input, c, ScoringPolicy::SumLogprob, 64).unwrap())
        .collect();
    // same-length candidates: softmax normalization already removed any
    // per-position shift, so exponentiating and renormalizing preserves
    // the winner
    let argmax = |v: &[f64]| {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    };
    let probs: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
    assert_eq!(argmax(&scores), argmax(&probs));
}

#[test]
fn monte_carlo_guesser_matches_computed_baseline() {
    let tasks = toy_task_suite(5, 32, 0);
    let baseline = random_baseline(&tasks, AggregationPolicy::MedianThenMean).unwrap();
    // simulate uniform guessing
    let mut rng = substream(99, "guess", 0);
    let trials = 2000;
    let mut acc_sum = 0.0;
    for _ in 0..trials {
        let mut per_task = 0.0;
        for t in &tasks {
            let mut correct = 0usize;
            for ex in &t.examples {
                if rng.gen_range(0..ex.candidates.len()) == ex.gold {
                    correct += 1;
                }
            }
            per_task += correct as f64 / t.examples.len() as f64;
        }
        acc_sum += per_task / tasks.len() as f64;
    }
    let simulated = acc_sum / trials as f64;
    assert!(
        (simulated - baseline).abs() < 0.01,
        "guesser {simulated} vs baseline {baseline}"
    );
}

#[test]
fn sum_vs_mean_policies_and_candidate_lengths() {
    let ck = desk_checkpoint(ArchitectureKind::CausalDecoder, 21);
    let vocab = ck.meta.vocab;
    let input = vocab.tokenize(b"xy");
    // equal lengths: rankings always agree
    let equal: Vec<Vec<u32>> = vec![vocab.tokenize(b"ab"), vocab.tokenize(b"cd")];
    let rank = |policy: ScoringPolicy, cands: &[Vec<u32>]| -> usize {
        let scores: Vec<f64> = cands
            .iter()
            .map(|c| score_candidate_tokens(&ck, &input, c, policy, 64).unwrap())
            .collect();
        scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    };
    assert_eq!(
        rank(ScoringPolicy::SumLogprob, &equal),
        rank(ScoringPolicy::MeanLogprob, &equal)
    );
    // unequal lengths: a disagreement case exists (longer candidates pay a
    // sum penalty but can win on mean); search a few candidate sets
    let mut found = false;
    for seed in 0..200u8 {
        let long: Vec<u32> = (0..4).map(|k| 2 + ((seed as u32 + k * 7) % 256)).collect();
        let short = vec![2 + ((seed as u32 * 13) % 256)];
        let cands = vec![short, long];
        if rank(ScoringPolicy::SumLogprob, &cands) != rank(ScoringPolicy::MeanLogprob, &cands) {
            found = true;
            break;
        }
    }
    assert!(found, "no sum/mean disagreement found on unequal lengths");
}
