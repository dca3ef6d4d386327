//! Transformer forward and backward passes for all three architectures.
//!
//! Pre-norm blocks in the T5.1.1 style: RMS-norm without bias, GEGLU feed
//! forward, shared relative-position bias table per stack, tied embeddings
//! with a d_model^-1/2 logit rescale. The causal and non-causal decoders run
//! the same code on the same parameter layout; only the visibility pattern
//! and the bias bucketing region differ. Rows of a batch are independent and
//! processed in parallel; gradient reduction is ordered, so results do not
//! depend on thread count.

use rayon::prelude::*;

use crate::data::batch::PackedBatch;
use crate::error::{LabError, Result};
use crate::model::config::{ArchitectureKind, ModelConfig};
use crate::model::loss::{loss_and_zloss, loss_backward, LossBreakdown};
use crate::model::mask::{cross_visibility, encoder_visibility, packed_row_visibility};
use crate::model::params::ParamTree;
use crate::ops;
use crate::rng::{subseed, substream};
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b, Tensor};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

struct AttnRefs<'a> {
    norm: &'a Tensor,
    wq: &'a Tensor,
    wk: &'a Tensor,
    wv: &'a Tensor,
    wo: &'a Tensor,
    base: String,
}

struct FfnRefs<'a> {
    norm: &'a Tensor,
    w_gate: &'a Tensor,
    w_lin: &'a Tensor,
    w_out: &'a Tensor,
    base: String,
}

struct LayerRefs<'a> {
    attn: AttnRefs<'a>,
    cross: Option<AttnRefs<'a>>,
    ffn: FfnRefs<'a>,
}

struct StackRefs<'a> {
    name: &'static str,
    layers: Vec<LayerRefs<'a>>,
    final_norm: &'a Tensor,
    bias_table: &'a Tensor,
}

fn attn_refs<'a>(params: &'a ParamTree, base: String) -> AttnRefs<'a> {
    AttnRefs {
        norm: params.get(&format!("{base}/norm")),
        wq: params.get(&format!("{base}/wq")),
        wk: params.get(&format!("{base}/wk")),
        wv: params.get(&format!("{base}/wv")),
        wo: params.get(&format!("{base}/wo")),
        base,
    }
}

fn resolve_stack<'a>(
    params: &'a ParamTree,
    name: &'static str,
    n_layers: usize,
    cross: bool,
) -> StackRefs<'a> {
    let layers = (0..n_layers)
        .map(|l| {
            let base = format!("{name}/layer_{l:02}");
            LayerRefs {
                attn: attn_refs(params, format!("{base}/self_attn")),
                cross: cross.then(|| attn_refs(params, format!("{base}/cross_attn"))),
                ffn: FfnRefs {
                    norm: params.get(&format!("{base}/ffn/norm")),
                    w_gate: params.get(&format!("{base}/ffn/w_gate")),
                    w_lin: params.get(&format!("{base}/ffn/w_lin")),
                    w_out: params.get(&format!("{base}/ffn/w_out")),
                    base: format!("{base}/ffn"),
                },
            }
        })
        .collect();
    StackRefs {
        name,
        layers,
        final_norm: params.get(&format!("{name}/final_norm")),
        bias_table: params.get(&format!("{name}/rel_bias")),
    }
}

fn slice_cols(t: &Tensor, start: usize, width: usize) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; r * width];
    for i in 0..r {
        out[i * width..(i + 1) * width]
            .copy_from_slice(&t.data()[i * c + start..i * c + start + width]);
    }
    Tensor::new(vec![r, width], out, t.precision())
}

fn write_cols(dst: &mut Tensor, src: &Tensor, start: usize) {
    let (r, c) = (dst.rows(), dst.cols());
    let w = src.cols();
    for i in 0..r {
        let drow = &mut dst.data_mut()[i * c + start..i * c + start + w];
        drow.copy_from_slice(&src.data()[i * w..(i + 1) * w]);
    }
}

/// Bias bucketing region for a stack: the encoder is fully bidirectional,
/// decoder positions are bidirectional exactly where the visibility is
/// (inside a non-causal prefix).
enum BiasRegion<'a> {
    AllBidirectional,
    Flags(&'a [bool]),
}

impl BiasRegion<'_> {
    fn bidirectional(&self, q: usize, k: usize) -> bool {
        match self {
            BiasRegion::AllBidirectional => true,
            BiasRegion::Flags(f) => f[q] && f[k],
        }
    }
}

fn gather_bias(
    table: &Tensor,
    cfg: &ModelConfig,
    query_len: usize,
    key_len: usize,
    region: &BiasRegion,
) -> Tensor {
    let heads = cfg.n_heads;
    let rb = &cfg.rel_bias;
    let mut out = vec![0.0; heads * query_len * key_len];
    for q in 0..query_len {
        for k in 0..key_len {
            let bucket = ops::relative_position_bucket(
                q as i64 - k as i64,
                region.bidirectional(q, k),
                rb.n_buckets,
                rb.max_distance,
            );
            for h in 0..heads {
                out[h * query_len * key_len + q * key_len + k] =
                    table.data()[bucket * heads + h];
            }
        }
    }
    Tensor::new(
        vec![heads, query_len, key_len],
        out,
        table.precision(),
    )
}

fn scatter_bias(
    dtable: &mut Tensor,
    cfg: &ModelConfig,
    query_len: usize,
    key_len: usize,
    region: &BiasRegion,
    dscores_per_head: &[Tensor],
) {
    let heads = cfg.n_heads;
    let rb = &cfg.rel_bias;
    for q in 0..query_len {
        for k in 0..key_len {
            let bucket = ops::relative_position_bucket(
                q as i64 - k as i64,
                region.bidirectional(q, k),
                rb.n_buckets,
                rb.max_distance,
            );
            for (h, ds) in dscores_per_head.iter().enumerate() {
                dtable.data_mut()[bucket * heads + h] += ds.data()[q * key_len + k];
            }
        }
    }
    dtable.requantize();
}

struct AttnCache {
    x_in: Tensor,
    normed: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    ctx: Tensor,
    drop: Option<Vec<f64>>,
}

struct FfnCache {
    x_in: Tensor,
    normed: Tensor,
    geglu: ops::GegluCache,
    drop: Option<Vec<f64>>,
}

struct LayerCache {
    attn: AttnCache,
    cross: Option<AttnCache>,
    ffn: FfnCache,
}

struct StackCache {
    embed_drop: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    pre_final: Tensor,
    final_drop: Option<Vec<f64>>,
    final_out: Tensor,
    bidir: Option<Vec<bool>>,
}

pub struct RowCache {
    dec: StackCache,
    enc: Option<StackCache>,
}

struct DropCfg {
    rate: f64,
    seed: u64,
    active: bool,
}

impl DropCfg {
    fn apply(&self, x: &mut Tensor, tag: &str) -> Option<Vec<f64>> {
        if !self.active || self.rate == 0.0 {
            return None;
        }
        let mut rng = substream(subseed(self.seed, tag, 0), "dropout", 0);
        let mask = ops::dropout_mask(x.len(), self.rate, &mut rng);
        ops::apply_mask(x, &mask);
        Some(mask)
    }
}

fn attn_forward(
    p: &AttnRefs,
    x: &Tensor,
    source: Option<&Tensor>,
    vis: &[bool],
    bias: Option<&Tensor>,
    heads: usize,
) -> Result<(Tensor, AttnCache)> {
    let normed = ops::rms_norm(x, p.norm, NORM_EPS)?;
    let q = matmul(&normed, p.wq)?;
    let src = source.unwrap_or(&normed);
    let k = matmul(src, p.wk)?;
    let v = matmul(src, p.wv)?;
    let (target_len, d) = (q.rows(), q.cols());
    let source_len = k.rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Tensor::zeros(&[target_len, d], x.precision());
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = slice_cols(&q, h * dh, dh);
        let kh = slice_cols(&k, h * dh, dh);
        let vh = slice_cols(&v, h * dh, dh);
        let mut scores = matmul_a_bt(&qh, &kh)?.scale(scale);
        if let Some(b) = bias {
            let boff = h * target_len * source_len;
            for (s, bv) in scores
                .data_mut()
                .iter_mut()
                .zip(&b.data()[boff..boff + target_len * source_len])
            {
                *s += bv;
            }
            scores.requantize();
        }
        let (ph, _) = ops::masked_softmax(&scores, vis)?;
        let ctxh = matmul(&ph, &vh)?;
        write_cols(&mut ctx, &ctxh, h * dh);
        probs.push(ph);
    }
    ctx.requantize();
    let out = matmul(&ctx, p.wo)?;
    Ok((
        out,
        AttnCache {
            x_in: x.clone(),
            normed,
            q,
            k,
            v,
            probs,
            ctx,
            drop: None,
        },
    ))
}

struct AttnBack {
    dx_in: Tensor,
    dsource: Option<Tensor>,
    dscores_per_head: Vec<Tensor>,
}

/// Backward of one attention sublayer. Accumulates weight gradients into
/// `grads` and returns stream gradients plus the raw per-head score
/// gradients (consumed by the shared bias table scatter).
fn attn_backward(
    p: &AttnRefs,
    cache: &AttnCache,
    source: Option<&Tensor>,
    dout: &Tensor,
    heads: usize,
    want_scores: bool,
    grads: &mut ParamTree,
) -> Result<AttnBack> {
    let (target_len, d) = (cache.q.rows(), cache.q.cols());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    grads
        .get_mut(&format!("{}/wo", p.base))
        .add_assign(&matmul_at_b(&cache.ctx, dout)?);
    let dctx = matmul_a_bt(dout, p.wo)?;
    let mut dq = Tensor::zeros(&[target_len, d], dout.precision());
    let source_len = cache.k.rows();
    let mut dk = Tensor::zeros(&[source_len, d], dout.precision());
    let mut dv = Tensor::zeros(&[source_len, d], dout.precision());
    let zero_dlogz = vec![0.0; target_len];
    let mut dscores_all = Vec::with_capacity(if want_scores { heads } else { 0 });
    for h in 0..heads {
        let qh = slice_cols(&cache.q, h * dh, dh);
        let kh = slice_cols(&cache.k, h * dh, dh);
        let vh = slice_cols(&cache.v, h * dh, dh);
        let dctxh = slice_cols(&dctx, h * dh, dh);
        let ph = &cache.probs[h];
        let dprobs = matmul_a_bt(&dctxh, &vh)?;
        let dvh = matmul_at_b(ph, &dctxh)?;
        let dscores = ops::masked_softmax_backward(ph, &dprobs, &zero_dlogz);
        let dqh = matmul(&dscores, &kh)?.scale(scale);
        let dkh = matmul_at_b(&dscores, &qh)?.scale(scale);
        write_cols(&mut dq, &dqh, h * dh);
        write_cols(&mut dk, &dkh, h * dh);
        write_cols(&mut dv, &dvh, h * dh);
        if want_scores {
            dscores_all.push(dscores);
        }
    }
    dq.requantize();
    dk.requantize();
    dv.requantize();

    grads
        .get_mut(&format!("{}/wq", p.base))
        .add_assign(&matmul_at_b(&cache.normed, &dq)?);
    let mut dnormed = matmul_a_bt(&dq, p.wq)?;
    let dsource = match source {
        None => {
            grads
                .get_mut(&format!("{}/wk", p.base))
                .add_assign(&matmul_at_b(&cache.normed, &dk)?);
            grads
                .get_mut(&format!("{}/wv", p.base))
                .add_assign(&matmul_at_b(&cache.normed, &dv)?);
            dnormed.add_assign(&matmul_a_bt(&dk, p.wk)?);
            dnormed.add_assign(&matmul_a_bt(&dv, p.wv)?);
            None
        }
        Some(src) => {
            grads
                .get_mut(&format!("{}/wk", p.base))
                .add_assign(&matmul_at_b(src, &dk)?);
            grads
                .get_mut(&format!("{}/wv", p.base))
                .add_assign(&matmul_at_b(src, &dv)?);
            let mut dsrc = matmul_a_bt(&dk, p.wk)?;
            dsrc.add_assign(&matmul_a_bt(&dv, p.wv)?);
            Some(dsrc)
        }
    };
    let (dx_in, dgain) = ops::rms_norm_backward(&cache.x_in, p.norm, NORM_EPS, &dnormed);
    grads
        .get_mut(&format!("{}/norm", p.base))
        .add_assign(&dgain);
    Ok(AttnBack {
        dx_in,
        dsource,
        dscores_per_head: dscores_all,
    })
}

#[allow(clippy::too_many_arguments)]
fn stack_forward(
    refs: &StackRefs,
    cfg: &ModelConfig,
    embedded: Tensor,
    vis: Vec<bool>,
    bidir: Option<Vec<bool>>,
    cross: Option<(&Tensor, Vec<bool>)>,
    drop: &DropCfg,
    tag: &str,
) -> Result<(Tensor, StackCache)> {
    let heads = cfg.n_heads;
    let seq_len = embedded.rows();
    let region = match &bidir {
        None => BiasRegion::AllBidirectional,
        Some(f) => BiasRegion::Flags(f),
    };
    let bias = gather_bias(refs.bias_table, cfg, seq_len, seq_len, &region);

    let mut x = embedded;
    let embed_drop = drop.apply(&mut x, &format!("{tag}/embed"));
    let mut layers = Vec::with_capacity(refs.layers.len());
    for (l, layer) in refs.layers.iter().enumerate() {
        let (mut branch, mut acache) =
            attn_forward(&layer.attn, &x, None, &vis, Some(&bias), heads)?;
        acache.drop = drop.apply(&mut branch, &format!("{tag}/attn{l}"));
        x = x.add(&branch)?;

        let ccache = match (&layer.cross, &cross) {
            (Some(cp), Some((enc_out, cvis))) => {
                let (mut cbranch, mut cc) =
                    attn_forward(cp, &x, Some(enc_out), cvis, None, heads)?;
                cc.drop = drop.apply(&mut cbranch, &format!("{tag}/cross{l}"));
                x = x.add(&cbranch)?;
                Some(cc)
            }
            (None, None) => None,
            _ => {
                return Err(LabError::BatchArchMismatch(
                    "cross-attention parameters and encoder stream must come together".into(),
                ))
            }
        };

        let ffn_x_in = x.clone();
        let normed = ops::rms_norm(&x, layer.ffn.norm, NORM_EPS)?;
        let (mut fbranch, gcache) =
            ops::geglu(&normed, layer.ffn.w_gate, layer.ffn.w_lin, layer.ffn.w_out)?;
        let fdrop = drop.apply(&mut fbranch, &format!("{tag}/ffn{l}"));
        x = x.add(&fbranch)?;
        layers.push(LayerCache {
            attn: acache,
            cross: ccache,
            ffn: FfnCache {
                x_in: ffn_x_in,
                normed,
                geglu: gcache,
                drop: fdrop,
            },
        });
    }
    let pre_final = x.clone();
    let mut final_out = ops::rms_norm(&x, refs.final_norm, NORM_EPS)?;
    let final_drop = drop.apply(&mut final_out, &format!("{tag}/final"));
    let cache = StackCache {
        embed_drop,
        layers,
        pre_final,
        final_drop,
        final_out: final_out.clone(),
        bidir,
    };
    Ok((final_out, cache))
}

/// Backward through a stack. Returns the gradient at the embedded input
/// (post-gather, pre-dropout masking is handled here) and, when the stack
/// cross-attends, the gradient w.r.t. the encoder output.
fn stack_backward(
    refs: &StackRefs,
    cfg: &ModelConfig,
    cache: &StackCache,
    mut dfinal: Tensor,
    enc_out: Option<&Tensor>,
    grads: &mut ParamTree,
) -> Result<(Tensor, Option<Tensor>)> {
    let heads = cfg.n_heads;
    let seq_len = cache.pre_final.rows();
    if let Some(m) = &cache.final_drop {
        ops::apply_mask(&mut dfinal, m);
    }
    let (mut dx, dgain) =
        ops::rms_norm_backward(&cache.pre_final, refs.final_norm, NORM_EPS, &dfinal);
    grads
        .get_mut(&format!("{}/final_norm", refs.name))
        .add_assign(&dgain);

    let mut denc: Option<Tensor> = None;
    let mut dscores_acc: Vec<Tensor> = Vec::new();
    for (layer, lcache) in refs.layers.iter().zip(&cache.layers).rev() {
        // ffn sublayer
        let mut dbranch = dx.clone();
        if let Some(m) = &lcache.ffn.drop {
            ops::apply_mask(&mut dbranch, m);
        }
        let g = ops::geglu_backward(
            &lcache.ffn.normed,
            layer.ffn.w_gate,
            layer.ffn.w_lin,
            layer.ffn.w_out,
            &lcache.ffn.geglu,
            &dbranch,
        )?;
        grads
            .get_mut(&format!("{}/w_gate", layer.ffn.base))
            .add_assign(&g.dw_gate);
        grads
            .get_mut(&format!("{}/w_lin", layer.ffn.base))
            .add_assign(&g.dw_lin);
        grads
            .get_mut(&format!("{}/w_out", layer.ffn.base))
            .add_assign(&g.dw_out);
        let (dxf, dgain) =
            ops::rms_norm_backward(&lcache.ffn.x_in, layer.ffn.norm, NORM_EPS, &g.dx);
        grads
            .get_mut(&format!("{}/norm", layer.ffn.base))
            .add_assign(&dgain);
        dx.add_assign(&dxf);

        // cross-attention sublayer
        if let (Some(cp), Some(cc)) = (&layer.cross, &lcache.cross) {
            let mut dbranch = dx.clone();
            if let Some(m) = &cc.drop {
                ops::apply_mask(&mut dbranch, m);
            }
            let back = attn_backward(cp, cc, enc_out, &dbranch, heads, false, grads)?;
            dx.add_assign(&back.dx_in);
            let dsrc = back.dsource.expect("cross attention produces dsource");
            match &mut denc {
                Some(acc) => acc.add_assign(&dsrc),
                None => denc = Some(dsrc),
            }
        }

        // self-attention sublayer
        let mut dbranch = dx.clone();
        if let Some(m) = &lcache.attn.drop {
            ops::apply_mask(&mut dbranch, m);
        }
        let back = attn_backward(&layer.attn, &lcache.attn, None, &dbranch, heads, true, grads)?;
        dx.add_assign(&back.dx_in);
        if dscores_acc.is_empty() {
            dscores_acc = back.dscores_per_head;
        } else {
            for (acc, ds) in dscores_acc.iter_mut().zip(&back.dscores_per_head) {
                acc.add_assign(ds);
            }
        }
    }
    // shared bias table
    let region = match &cache.bidir {
        None => BiasRegion::AllBidirectional,
        Some(f) => BiasRegion::Flags(f),
    };
    scatter_bias(
        grads.get_mut(&format!("{}/rel_bias", refs.name)),
        cfg,
        seq_len,
        seq_len,
        &region,
        &dscores_acc,
    );
    if let Some(m) = &cache.embed_drop {
        ops::apply_mask(&mut dx, m);
    }
    Ok((dx, denc))
}

fn embed_rows(embed: &Tensor, tokens: &[u32]) -> Tensor {
    let d = embed.cols();
    let mut out = vec![0.0; tokens.len() * d];
    for (i, &t) in tokens.iter().enumerate() {
        out[i * d..(i + 1) * d].copy_from_slice(&embed.data()[t as usize * d..(t as usize + 1) * d]);
    }
    Tensor::new(vec![tokens.len(), d], out, embed.precision())
}

fn scatter_embed(dembed: &mut Tensor, tokens: &[u32], dx: &Tensor) {
    let d = dembed.cols();
    for (i, &t) in tokens.iter().enumerate() {
        let drow = &dx.data()[i * d..(i + 1) * d];
        let erow = &mut dembed.data_mut()[t as usize * d..(t as usize + 1) * d];
        for (e, dv) in erow.iter_mut().zip(drow) {
            *e += dv;
        }
    }
    dembed.requantize();
}

fn check_batch(arch: ArchitectureKind, batch: &PackedBatch) -> Result<()> {
    batch.validate()?;
    match arch {
        ArchitectureKind::CausalDecoder => {
            if batch.encoder.is_some() || batch.prefix_lens.is_some() {
                return Err(LabError::BatchArchMismatch(
                    "causal decoder takes a single causal stream (no prefix or encoder metadata)"
                        .into(),
                ));
            }
        }
        ArchitectureKind::NonCausalDecoder => {
            if batch.encoder.is_some() {
                return Err(LabError::BatchArchMismatch(
                    "non-causal decoder batches must not carry encoder streams".into(),
                ));
            }
            if batch.prefix_lens.is_none() {
                return Err(LabError::BatchArchMismatch(
                    "non-causal decoder batches require prefix lengths".into(),
                ));
            }
        }
        ArchitectureKind::EncoderDecoder => {
            if batch.encoder.is_none() {
                return Err(LabError::BatchArchMismatch(
                    "encoder-decoder batches require encoder streams".into(),
                ));
            }
            if batch.prefix_lens.is_some() {
                return Err(LabError::BatchArchMismatch(
                    "encoder-decoder batches keep the prefix in the encoder stream".into(),
                ));
            }
        }
    }
    Ok(())
}

fn tied_scale(cfg: &ModelConfig) -> f64 {
    (cfg.d_model as f64).powf(-0.5)
}

fn row_forward(
    params: &ParamTree,
    cfg: &ModelConfig,
    arch: ArchitectureKind,
    batch: &PackedBatch,
    row: usize,
    drop: &DropCfg,
) -> Result<(Tensor, RowCache)> {
    let dec_refs = resolve_stack(
        params,
        "decoder",
        cfg.decoder_layers,
        arch == ArchitectureKind::EncoderDecoder,
    );
    let embed = params.get("embed/tokens");
    let tokens = batch.row_inputs(row);
    let segments = batch.row_segments(row);

    let mut enc_cache = None;
    let enc_out;
    let cross: Option<(&Tensor, Vec<bool>)> = if arch == ArchitectureKind::EncoderDecoder {
        let enc = batch.encoder.as_ref().unwrap();
        let enc_tokens = &enc.input_ids[row * enc.seq_len..(row + 1) * enc.seq_len];
        let enc_segs = &enc.segment_ids[row * enc.seq_len..(row + 1) * enc.seq_len];
        let enc_refs = resolve_stack(params, "encoder", cfg.encoder_layers, false);
        let evis = encoder_visibility(enc_segs);
        let (out, cache) = stack_forward(
            &enc_refs,
            cfg,
            embed_rows(embed, enc_tokens),
            evis,
            None,
            None,
            drop,
            &format!("enc/{row}"),
        )?;
        enc_cache = Some(cache);
        enc_out = out;
        Some((&enc_out, cross_visibility(segments, enc_segs)))
    } else {
        None
    };

    let prefix_row = batch
        .prefix_lens
        .as_ref()
        .map(|pl| pl[row].as_slice())
        .filter(|_| arch == ArchitectureKind::NonCausalDecoder);
    let (vis, bidir) = packed_row_visibility(segments, prefix_row);
    let bidir = match arch {
        ArchitectureKind::NonCausalDecoder => Some(bidir),
        _ => Some(vec![false; segments.len()]),
    };
    let (final_out, dec) = stack_forward(
        &dec_refs,
        cfg,
        embed_rows(embed, tokens),
        vis,
        bidir,
        cross,
        drop,
        &format!("dec/{row}"),
    )?;

    let logits = if cfg.tied_embeddings {
        matmul_a_bt(&final_out.scale(tied_scale(cfg)), embed)?
    } else {
        matmul(&final_out, params.get("lm_head"))?
    };
    Ok((
        logits,
        RowCache {
            dec,
            enc: enc_cache,
        },
    ))
}

fn row_backward(
    params: &ParamTree,
    cfg: &ModelConfig,
    arch: ArchitectureKind,
    batch: &PackedBatch,
    row: usize,
    cache: &RowCache,
    dlogits_row: &Tensor,
    grads: &mut ParamTree,
) -> Result<()> {
    let dec_refs = resolve_stack(
        params,
        "decoder",
        cfg.decoder_layers,
        arch == ArchitectureKind::EncoderDecoder,
    );
    let embed = params.get("embed/tokens");
    let tokens = batch.row_inputs(row);

    let dfinal = if cfg.tied_embeddings {
        let s = tied_scale(cfg);
        let scaled_final = cache.dec.final_out.scale(s);
        grads
            .get_mut("embed/tokens")
            .add_assign(&matmul_at_b(dlogits_row, &scaled_final)?);
        matmul(dlogits_row, embed)?.scale(s)
    } else {
        grads
            .get_mut("lm_head")
            .add_assign(&matmul_at_b(&cache.dec.final_out, dlogits_row)?);
        matmul_a_bt(dlogits_row, params.get("lm_head"))?
    };

    let enc_out = cache.enc.as_ref().map(|e| &e.final_out);
    let (dembed_dec, denc) = stack_backward(&dec_refs, cfg, &cache.dec, dfinal, enc_out, grads)?;
    scatter_embed(grads.get_mut("embed/tokens"), tokens, &dembed_dec);

    if let (Some(ecache), Some(denc)) = (&cache.enc, denc) {
        let enc = batch.encoder.as_ref().unwrap();
        let enc_tokens = &enc.input_ids[row * enc.seq_len..(row + 1) * enc.seq_len];
        let enc_refs = resolve_stack(params, "encoder", cfg.encoder_layers, false);
        let (dembed_enc, _) = stack_backward(&enc_refs, cfg, ecache, denc, None, grads)?;
        scatter_embed(grads.get_mut("embed/tokens"), enc_tokens, &dembed_enc);
    }
    Ok(())
}

fn drop_cfg(cfg: &ModelConfig, mode: Mode, dropout_seed: u64) -> DropCfg {
    DropCfg {
        rate: cfg.dropout_rate,
        seed: dropout_seed,
        active: mode == Mode::Train,
    }
}

/// Logits at every decoder position, [rows·seq_len × vocab].
///
/// Dropout is applied only in train mode, deterministically from
/// `dropout_seed`; inference ignores the seed entirely.
pub fn forward(
    params: &ParamTree,
    cfg: &ModelConfig,
    arch: ArchitectureKind,
    batch: &PackedBatch,
    mode: Mode,
    dropout_seed: u64,
) -> Result<Tensor> {
    let (logits, _) = forward_cached(params, cfg, arch, batch, mode, dropout_seed)?;
    Ok(logits)
}

pub(crate) fn forward_cached(
    params: &ParamTree,
    cfg: &ModelConfig,
    arch: ArchitectureKind,
    batch: &PackedBatch,
    mode: Mode,
    dropout_seed: u64,
) -> Result<(Tensor, Vec<RowCache>)> {
    cfg.validate(arch)?;
    check_batch(arch, batch)?;
    let drop = drop_cfg(cfg, mode, dropout_seed);
    let rows = batch.rows();
    let per_row: Vec<(Tensor, RowCache)> = (0..rows)
        .into_par_iter()
        .map(|r| row_forward(params, cfg, arch, batch, r, &drop))
        .collect::<Result<_>>()?;
    let vocab = cfg.vocab_size;
    let mut logits = Tensor::zeros(&[rows * batch.seq_len, vocab], params.get("embed/tokens").precision());
    for (r, (row_logits, _)) in per_row.iter().enumerate() {
        let off = r * batch.seq_len * vocab;
        logits.data_mut()[off..off + batch.seq_len * vocab].copy_from_slice(row_logits.data());
    }
    let caches = per_row.into_iter().map(|(_, c)| c).collect();
    Ok((logits, caches))
}

/// One training step's worth of math: forward, loss (+z), and gradients for
/// every parameter. Rows run in parallel; the gradient reduction is ordered.
pub fn loss_and_grads(
    params: &ParamTree,
    cfg: &ModelConfig,
    arch: ArchitectureKind,
    batch: &PackedBatch,
    mode: Mode,
    dropout_seed: u64,
    z_coefficient: f64,
) -> Result<(LossBreakdown, ParamTree)> {
    let (logits, caches) = forward_cached(params, cfg, arch, batch, mode, dropout_seed)?;
    let breakdown = loss_and_zloss(&logits, &batch.target_ids, &batch.loss_mask, z_coefficient)?;
    let dlogits = loss_backward(&logits, &batch.target_ids, &batch.loss_mask, z_coefficient)?;

    let vocab = cfg.vocab_size;
    let seq = batch.seq_len;
    let row_grads: Vec<ParamTree> = caches
        .par_iter()
        .enumerate()
        .map(|(r, cache)| {
            let mut grads = params.zeros_like();
            let row_dlogits = Tensor::new(
                vec![seq, vocab],
                dlogits.data()[r * seq * vocab..(r + 1) * seq * vocab].to_vec(),
                dlogits.precision(),
            );
            row_backward(params, cfg, arch, batch, r, cache, &row_dlogits, &mut grads)?;
            Ok(grads)
        })
        .collect::<Result<_>>()?;
    let mut total = params.zeros_like();
    for rg in &row_grads {
        total.accumulate(rg);
    }
    Ok((breakdown, total))
}
