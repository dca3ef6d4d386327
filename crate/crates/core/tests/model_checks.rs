//! Model-level checks: forward against an independent scalar reimplementation,
//! visibility properties, and end-to-end gradient fidelity.

use tlab_core::data::{ObjectiveKind, PackedBatch};
use tlab_core::model::{
    forward, init_params, loss_and_grads, loss_and_zloss, ArchitectureKind, Mode, ModelConfig,
    ParamTree, RelBiasConfig,
};
use tlab_core::Precision;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
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
    }
}

fn causal_batch(tokens: Vec<u32>) -> PackedBatch {
    let n = tokens.len();
    PackedBatch {
        seq_len: n,
        input_ids: tokens,
        target_ids: vec![0; n],
        loss_mask: vec![false; n],
        segment_ids: vec![1; n],
        prefix_lens: None,
        encoder: None,
        objective: ObjectiveKind::Flm,
    }
}

fn prefix_batch(tokens: Vec<u32>, prefix: usize) -> PackedBatch {
    let mut b = causal_batch(tokens);
    b.prefix_lens = Some(vec![vec![prefix]]);
    b
}

// ---------------------------------------------------------------------------
// Scalar-loop oracle: a from-scratch reimplementation of the 1-layer decoder
// forward pass using only plain f64 loops. Shares no code with the library.
// ---------------------------------------------------------------------------
mod oracle {
    pub struct Weights<'a> {
        pub embed: &'a [f64], // [V×d]
        pub bias_table: &'a [f64], // [B×H]
        pub attn_norm: &'a [f64],
        pub wq: &'a [f64],
        pub wk: &'a [f64],
        pub wv: &'a [f64],
        pub wo: &'a [f64],
        pub ffn_norm: &'a [f64],
        pub w_gate: &'a [f64],
        pub w_lin: &'a [f64],
        pub w_out: &'a [f64],
        pub final_norm: &'a [f64],
    }

    pub struct Dims {
        pub vocab: usize,
        pub d: usize,
        pub heads: usize,
        pub ff: usize,
        pub buckets: usize,
        pub max_distance: usize,
    }

    fn rmsnorm(x: &[f64], gain: &[f64]) -> Vec<f64> {
        let d = x.len();
        let ms = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = (ms + 1e-6).sqrt();
        (0..d).map(|i| x[i] / r * gain[i]).collect()
    }

    fn gelu(u: f64) -> f64 {
        let c = (2.0f64 / std::f64::consts::PI).sqrt();
        0.5 * u * (1.0 + (c * (u + 0.044715 * u.powi(3))).tanh())
    }

    fn bucket(q: usize, k: usize, buckets: usize, max_distance: usize) -> usize {
        // unidirectional (causal) bucketing only
        let dist = q as i64 - k as i64;
        let n = dist.max(0) as usize;
        let max_exact = buckets / 2;
        if n < max_exact {
            n
        } else {
            let frac = (n as f64 / max_exact as f64).ln()
                / (max_distance as f64 / max_exact as f64).ln();
            (max_exact + (frac * (buckets - max_exact) as f64) as usize).min(buckets - 1)
        }
    }

    /// Causal 1-layer decoder forward, returning logits [L×V].
    pub fn forward(w: &Weights, dims: &Dims, tokens: &[u32]) -> Vec<f64> {
        let (d, heads) = (dims.d, dims.heads);
        let dh = d / heads;
        let len = tokens.len();
        // embed
        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| w.embed[t as usize * d..(t as usize + 1) * d].to_vec())
            .collect();
        // self-attention
        let normed: Vec<Vec<f64>> = x.iter().map(|row| rmsnorm(row, w.attn_norm)).collect();
        let proj = |m: &[f64], row: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|j| (0..d).map(|i| row[i] * m[i * d + j]).sum())
                .collect()
        };
        let q: Vec<Vec<f64>> = normed.iter().map(|r| proj(w.wq, r)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|r| proj(w.wk, r)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|r| proj(w.wv, r)).collect();
        let mut ctx = vec![vec![0.0; d]; len];
        for h in 0..heads {
            for i in 0..len {
                // causal scores with relative bias
                let mut scores = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += q[i][h * dh + c] * k[j][h * dh + c];
                    }
                    s /= (dh as f64).sqrt();
                    s += w.bias_table
                        [bucket(i, j, dims.buckets, dims.max_distance) * heads + h];
                    scores.push(s);
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for c in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..=i {
                        acc += exps[j] / sum * v[j][h * dh + c];
                    }
                    ctx[i][h * dh + c] = acc;
                }
            }
        }
        for i in 0..len {
            let out = proj(w.wo, &ctx[i]);
            for c in 0..d {
                x[i][c] += out[c];
            }
        }
        // GEGLU feed-forward
        for i in 0..len {
            let n2 = rmsnorm(&x[i], w.ffn_norm);
            let mut h = vec![0.0; dims.ff];
            for j in 0..dims.ff {
                let mut a = 0.0;
                let mut b = 0.0;
                for c in 0..d {
                    a += n2[c] * w.w_gate[c * dims.ff + j];
                    b += n2[c] * w.w_lin[c * dims.ff + j];
                }
                h[j] = gelu(a) * b;
            }
            for c in 0..d {
                let mut acc = 0.0;
                for j in 0..dims.ff {
                    acc += h[j] * w.w_out[j * d + c];
                }
                x[i][c] += acc;
            }
        }
        // final norm + tied logits with d^-1/2 rescale
        let scale = (d as f64).powf(-0.5);
        let mut logits = vec![0.0; len * dims.vocab];
        for i in 0..len {
            let f = rmsnorm(&x[i], w.final_norm);
            for t in 0..dims.vocab {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += f[c] * scale * w.embed[t * d + c];
                }
                logits[i * dims.vocab + t] = acc;
            }
        }
        logits
    }
}

#[test]
fn one_layer_forward_matches_scalar_oracle() {
    let cfg = tiny_config();
    let mut params = init_params(&cfg, ArchitectureKind::CausalDecoder, 42, Precision::High).unwrap();
    // randomize the bias table so the oracle exercises the bucketing path
    {
        let table = params.get_mut("decoder/rel_bias");
        for (i, v) in table.data_mut().iter_mut().enumerate() {
            *v = ((i as f64) * 0.37).sin() * 0.1;
        }
    }
    let tokens: Vec<u32> = vec![3, 7, 1, 12, 5, 0, 9];
    let batch = causal_batch(tokens.clone());
    let logits = forward(
        &params,
        &cfg,
        ArchitectureKind::CausalDecoder,
        &batch,
        Mode::Infer,
        0,
    )
    .unwrap();

    let w = oracle::Weights {
        embed: params.get("embed/tokens").data(),
        bias_table: params.get("decoder/rel_bias").data(),
        attn_norm: params.get("decoder/layer_00/self_attn/norm").data(),
        wq: params.get("decoder/layer_00/self_attn/wq").data(),
        wk: params.get("decoder/layer_00/self_attn/wk").data(),
        wv: params.get("decoder/layer_00/self_attn/wv").data(),
        wo: params.get("decoder/layer_00/self_attn/wo").data(),
        ffn_norm: params.get("decoder/layer_00/ffn/norm").data(),
        w_gate: params.get("decoder/layer_00/ffn/w_gate").data(),
        w_lin: params.get("decoder/layer_00/ffn/w_lin").data(),
        w_out: params.get("decoder/layer_00/ffn/w_out").data(),
        final_norm: params.get("decoder/final_norm").data(),
    };
    let dims = oracle::Dims {
        vocab: cfg.vocab_size,
        d: cfg.d_model,
        heads: cfg.n_heads,
        ff: cfg.d_ff,
        buckets: cfg.rel_bias.n_buckets,
        max_distance: cfg.rel_bias.max_distance,
    };
    let expect = oracle::forward(&w, &dims, &tokens);
    let max_diff = logits
        .data()
        .iter()
        .zip(&expect)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_diff < 1e-10, "max abs diff {max_diff}");
}

#[test]
fn nd_with_prefix_zero_or_one_equals_cd_bitwise() {
    let cfg = tiny_config();
    for seed in 0..6 {
        let params =
            init_params(&cfg, ArchitectureKind::CausalDecoder, seed, Precision::High).unwrap();
        let tokens: Vec<u32> = (0..9).map(|i| ((i * 5 + seed as usize) % 13) as u32).collect();
        let cd = forward(
            &params,
            &cfg,
            ArchitectureKind::CausalDecoder,
            &causal_batch(tokens.clone()),
            Mode::Infer,
            0,
        )
        .unwrap();
        for p in [0usize, 1] {
            let nd = forward(
                &params,
                &cfg,
                ArchitectureKind::NonCausalDecoder,
                &prefix_batch(tokens.clone(), p),
                Mode::Infer,
                0,
            )
            .unwrap();
            assert_eq!(cd.data(), nd.data(), "seed {seed} prefix {p}");
        }
    }
}

#[test]
fn causality_future_perturbation_never_leaks() {
    let cfg = tiny_config();
    let params = init_params(&cfg, ArchitectureKind::CausalDecoder, 5, Precision::High).unwrap();
    let tokens: Vec<u32> = vec![1, 4, 2, 8, 3, 11, 6, 0];
    let base = forward(
        &params,
        &cfg,
        ArchitectureKind::CausalDecoder,
        &causal_batch(tokens.clone()),
        Mode::Infer,
        0,
    )
    .unwrap();
    let v = cfg.vocab_size;
    for t in 0..tokens.len() - 1 {
        for k in t + 1..tokens.len() {
            let mut perturbed = tokens.clone();
            perturbed[k] = (perturbed[k] + 1) % v as u32;
            let out = forward(
                &params,
                &cfg,
                ArchitectureKind::CausalDecoder,
                &causal_batch(perturbed),
                Mode::Infer,
                0,
            )
            .unwrap();
            assert_eq!(
                &base.data()[..(t + 1) * v],
                &out.data()[..(t + 1) * v],
                "perturbing {k} changed logits at <= {t}"
            );
        }
    }
}

#[test]
fn prefix_bidirectionality_witness_and_suffix_locality() {
    let cfg = tiny_config();
    let params = init_params(&cfg, ArchitectureKind::NonCausalDecoder, 6, Precision::High).unwrap();
    let tokens: Vec<u32> = vec![2, 9, 4, 1, 7, 5, 3, 10];
    let p = 4;
    let base = forward(
        &params,
        &cfg,
        ArchitectureKind::NonCausalDecoder,
        &prefix_batch(tokens.clone(), p),
        Mode::Infer,
        0,
    )
    .unwrap();
    let v = cfg.vocab_size;

    // perturbing a later prefix token changes logits at position 0
    let mut perturbed = tokens.clone();
    perturbed[p - 1] = (perturbed[p - 1] + 3) % v as u32;
    let out = forward(
        &params,
        &cfg,
        ArchitectureKind::NonCausalDecoder,
        &prefix_batch(perturbed, p),
        Mode::Infer,
        0,
    )
    .unwrap();
    let diff0 = base.data()[..v]
        .iter()
        .zip(&out.data()[..v])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(diff0 > 0.0, "prefix perturbation invisible at position 0");

    // perturbing a suffix token never changes logits before it
    for s in p..tokens.len() {
        let mut perturbed = tokens.clone();
        perturbed[s] = (perturbed[s] + 1) % v as u32;
        let out = forward(
            &params,
            &cfg,
            ArchitectureKind::NonCausalDecoder,
            &prefix_batch(perturbed, p),
            Mode::Infer,
            0,
        )
        .unwrap();
        assert_eq!(&base.data()[..s * v], &out.data()[..s * v]);
    }
}

#[test]
fn packed_segments_are_isolated() {
    let cfg = tiny_config();
    let params = init_params(&cfg, ArchitectureKind::CausalDecoder, 9, Precision::High).unwrap();
    let mut batch = causal_batch(vec![1, 2, 3, 4, 5, 6]);
    batch.segment_ids = vec![1, 1, 1, 2, 2, 2];
    let base = forward(
        &params,
        &cfg,
        ArchitectureKind::CausalDecoder,
        &batch,
        Mode::Infer,
        0,
    )
    .unwrap();
    let v = cfg.vocab_size;
    let mut perturbed = batch.clone();
    perturbed.input_ids[1] = 9;
    let out = forward(
        &params,
        &cfg,
        ArchitectureKind::CausalDecoder,
        &perturbed,
        Mode::Infer,
        0,
    )
    .unwrap();
    // segment 2 (positions 3..6) is bitwise unchanged
    assert_eq!(&base.data()[3 * v..], &out.data()[3 * v..]);
    // and the reverse direction
    let mut perturbed = batch.clone();
    perturbed.input_ids[4] = 9;
    let out = forward(
        &params,
        &cfg,
        ArchitectureKind::CausalDecoder,
        &perturbed,
        Mode::Infer,
        0,
    )
    .unwrap();
    assert_eq!(&base.data()[..3 * v], &out.data()[..3 * v]);
}

#[test]
fn infer_ignores_dropout_seed_train_does_not() {
    let mut cfg = tiny_config();
    cfg.dropout_rate = 0.2;
    let params = init_params(&cfg, ArchitectureKind::CausalDecoder, 2, Precision::High).unwrap();
    let batch = causal_batch(vec![1, 2, 3, 4]);
    let a = forward(&params, &cfg, ArchitectureKind::CausalDecoder, &batch, Mode::Infer, 1).unwrap();
    let b = forward(&params, &cfg, ArchitectureKind::CausalDecoder, &batch, Mode::Infer, 2).unwrap();
    assert_eq!(a.data(), b.data());
    let t1 = forward(&params, &cfg, ArchitectureKind::CausalDecoder, &batch, Mode::Train, 1).unwrap();
    let t2 = forward(&params, &cfg, ArchitectureKind::CausalDecoder, &batch, Mode::Train, 2).unwrap();
    assert!(t1.max_abs_diff(&t2) > 0.0);
    // train mode with the same seed is deterministic
    let t1b = forward(&params, &cfg, ArchitectureKind::CausalDecoder, &batch, Mode::Train, 1).unwrap();
    assert_eq!(t1.data(), t1b.data());
}

#[test]
fn batch_arch_mismatch_errors() {
    let cfg = tiny_config();
    let params = init_params(&cfg, ArchitectureKind::CausalDecoder, 2, Precision::High).unwrap();
    // CD given prefix metadata
    let r = forward(
        &params,
        &cfg,
        ArchitectureKind::CausalDecoder,
        &prefix_batch(vec![1, 2, 3], 2),
        Mode::Infer,
        0,
    );
    assert!(r.is_err());
    // ND missing prefix metadata
    let r = forward(
        &params,
        &cfg,
        ArchitectureKind::NonCausalDecoder,
        &causal_batch(vec![1, 2, 3]),
        Mode::Infer,
        0,
    );
    assert!(r.is_err());
}

// ---------------------------------------------------------------------------
// End-to-end gradient checks
// ---------------------------------------------------------------------------

fn batch_loss(
    params: &ParamTree,
    cfg: &ModelConfig,
    arch: ArchitectureKind,
    batch: &PackedBatch,
    z: f64,
) -> f64 {
    let logits = forward(params, cfg, arch, batch, Mode::Infer, 0).unwrap();
    let b = loss_and_zloss(&logits, &batch.target_ids, &batch.loss_mask, z).unwrap();
    b.total()
}

fn e2e_grad_max_err(
    cfg: &ModelConfig,
    arch: ArchitectureKind,
    batch: &PackedBatch,
    seed: u64,
) -> f64 {
    let z = 1e-3;
    let params = init_params(cfg, arch, seed, Precision::High).unwrap();
    let (_, grads) = loss_and_grads(&params, cfg, arch, batch, Mode::Infer, 0, z).unwrap();
    let h = 1e-5;
    let mut max_err = 0.0f64;
    for path in params.paths().cloned().collect::<Vec<_>>() {
        let n = params.get(&path).len();
        for i in 0..n {
            let mut plus = params.clone();
            plus.get_mut(&path).data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(&path).data_mut()[i] -= h;
            let numeric =
                (batch_loss(&plus, cfg, arch, batch, z) - batch_loss(&minus, cfg, arch, batch, z))
                    / (2.0 * h);
            let analytic = grads.get(&path).data()[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            if err > max_err {
                max_err = err;
            }
        }
    }
    max_err
}

#[test]
fn end_to_end_gradients_cd_and_nd() {
    let cfg = tiny_config();
    let mut batch = causal_batch(vec![3, 7, 1, 12, 5, 2]);
    batch.target_ids = vec![7, 1, 12, 5, 2, 9];
    batch.loss_mask = vec![true; 6];
    let err = e2e_grad_max_err(&cfg, ArchitectureKind::CausalDecoder, &batch, 31);
    assert!(err < 1e-3, "CD end-to-end grad error {err}");

    let mut nd = batch.clone();
    nd.prefix_lens = Some(vec![vec![3]]);
    nd.loss_mask = vec![false, false, true, true, true, true];
    let err = e2e_grad_max_err(&cfg, ArchitectureKind::NonCausalDecoder, &nd, 32);
    assert!(err < 1e-3, "ND end-to-end grad error {err}");
}

#[test]
fn end_to_end_gradients_encoder_decoder() {
    let mut cfg = tiny_config();
    cfg.encoder_layers = 1;
    let batch = PackedBatch {
        seq_len: 4,
        input_ids: vec![0, 5, 9, 2],
        target_ids: vec![5, 9, 2, 7],
        loss_mask: vec![true; 4],
        segment_ids: vec![1; 4],
        prefix_lens: None,
        encoder: Some(tlab_core::data::EncoderStreams {
            seq_len: 5,
            input_ids: vec![4, 8, 1, 3, 0],
            segment_ids: vec![1, 1, 1, 1, 0],
        }),
        objective: ObjectiveKind::mlm_default(),
    };
    let err = e2e_grad_max_err(&cfg, ArchitectureKind::EncoderDecoder, &batch, 33);
    assert!(err < 1e-3, "ED end-to-end grad error {err}");
}

#[test]
fn untied_embeddings_also_pass_grad_check() {
    let mut cfg = tiny_config();
    cfg.tied_embeddings = false;
    let mut batch = causal_batch(vec![3, 7, 1, 5]);
    batch.target_ids = vec![7, 1, 5, 2];
    batch.loss_mask = vec![true; 4];
    let err = e2e_grad_max_err(&cfg, ArchitectureKind::CausalDecoder, &batch, 35);
    assert!(err < 1e-3, "untied end-to-end grad error {err}");
}
