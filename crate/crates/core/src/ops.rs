//! Forward and backward rules for the transformer primitives.
//!
//! Each primitive is a pure function; backward rules are hand-derived and
//! validated by finite differences (see `gradcheck`). Stabilized forms are
//! used throughout so finite inputs never produce NaN/Inf.

use crate::error::{LabError, Result};
use crate::tensor::Tensor;

/// Row-wise softmax restricted to visible positions.
///
/// Returns the probabilities (masked positions exactly 0) and, per row, the
/// log of the true unshifted normalizer `log Σ_visible exp(logits)`, which
/// the z-loss consumes.
pub fn masked_softmax(logits: &Tensor, visibility: &[bool]) -> Result<(Tensor, Tensor)> {
    let (rows, cols) = (logits.rows(), logits.cols());
    if visibility.len() != rows * cols {
        return Err(LabError::ShapeMismatch {
            context: "masked_softmax visibility".to_string(),
            lhs: logits.shape().to_vec(),
            rhs: vec![visibility.len()],
        });
    }
    let mut probs = vec![0.0; rows * cols];
    let mut logz = vec![0.0; rows];
    for r in 0..rows {
        let lrow = logits.row(r);
        let vrow = &visibility[r * cols..(r + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        for (l, &v) in lrow.iter().zip(vrow) {
            if v && *l > max {
                max = *l;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(LabError::FullyMaskedRow { row: r });
        }
        let prow = &mut probs[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for ((p, l), &v) in prow.iter_mut().zip(lrow).zip(vrow) {
            if v {
                *p = (l - max).exp();
                sum += *p;
            }
        }
        for p in prow.iter_mut() {
            *p /= sum;
        }
        logz[r] = sum.ln() + max;
    }
    Ok((
        Tensor::new(vec![rows, cols], probs, logits.precision()),
        Tensor::new(vec![rows], logz, logits.precision()),
    ))
}

/// Unmasked softmax; by construction identical to `masked_softmax` with an
/// all-visible mask.
pub fn softmax(logits: &Tensor) -> Result<(Tensor, Tensor)> {
    let vis = vec![true; logits.len()];
    masked_softmax(logits, &vis)
}

/// Backward of `masked_softmax` given cotangents for both outputs.
///
/// dlogits[r,j] = p[r,j] * (dprobs[r,j] - Σ_k p[r,k] dprobs[r,k]) + dlogz[r] * p[r,j]
pub fn masked_softmax_backward(probs: &Tensor, dprobs: &Tensor, dlogz: &[f64]) -> Tensor {
    let (rows, cols) = (probs.rows(), probs.cols());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let prow = probs.row(r);
        let drow = dprobs.row(r);
        let dot: f64 = prow.iter().zip(drow).map(|(p, d)| p * d).sum();
        let orow = &mut out[r * cols..(r + 1) * cols];
        for ((o, &p), &d) in orow.iter_mut().zip(prow).zip(drow) {
            *o = p * (d - dot) + dlogz[r] * p;
        }
    }
    Tensor::new(vec![rows, cols], out, probs.precision())
}

/// RMS normalization along the last axis: `x / sqrt(mean(x²)+eps) ⊙ gain`.
pub fn rms_norm(x: &Tensor, gain: &Tensor, epsilon: f64) -> Result<Tensor> {
    let d = *x.shape().last().expect("rms_norm on 0-d tensor");
    if gain.shape() != [d] {
        return Err(LabError::ShapeMismatch {
            context: "rms_norm gain".to_string(),
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    assert!(epsilon > 0.0, "rms_norm epsilon must be positive");
    let n = x.len() / d;
    let mut out = vec![0.0; x.len()];
    for r in 0..n {
        let xrow = &x.data()[r * d..(r + 1) * d];
        let mean_sq = xrow.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (mean_sq + epsilon).sqrt();
        let orow = &mut out[r * d..(r + 1) * d];
        for ((o, &xv), &g) in orow.iter_mut().zip(xrow).zip(gain.data()) {
            *o = xv * inv * g;
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out, x.precision()))
}

/// Backward of `rms_norm`; returns (dx, dgain).
pub fn rms_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    epsilon: f64,
    dout: &Tensor,
) -> (Tensor, Tensor) {
    let d = *x.shape().last().unwrap();
    let n = x.len() / d;
    let mut dx = vec![0.0; x.len()];
    let mut dgain = vec![0.0; d];
    for r in 0..n {
        let xrow = &x.data()[r * d..(r + 1) * d];
        let drow = &dout.data()[r * d..(r + 1) * d];
        let mean_sq = xrow.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (mean_sq + epsilon).sqrt(); // 1/r
        // Σ_i dout_i g_i x_i
        let mut dot = 0.0;
        for ((&dv, &g), &xv) in drow.iter().zip(gain.data()).zip(xrow) {
            dot += dv * g * xv;
        }
        let inv3 = inv * inv * inv;
        let dxrow = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxrow[i] = drow[i] * gain.data()[i] * inv - xrow[i] * dot * inv3 / d as f64;
            dgain[i] += drow[i] * xrow[i] * inv;
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx, x.precision()),
        Tensor::new(vec![d], dgain, x.precision()),
    )
}

/// GELU, tanh approximation (the variant is fixed so oracles agree bitwise).
pub fn gelu(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * u * (1.0 + (C * (u + 0.044715 * u * u * u)).tanh())
}

pub fn gelu_prime(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let s = C * (u + 0.044715 * u * u * u);
    let t = s.tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Cache of GEGLU intermediates for the backward pass.
pub struct GegluCache {
    pub gate_pre: Tensor,   // x·W_gate
    pub linear: Tensor,     // x·W_lin
    pub gated: Tensor,      // GELU(gate_pre) ⊙ linear
}

/// Gated feed-forward: `(GELU(x·W_gate) ⊙ (x·W_lin)) · W_out`.
pub fn geglu(
    x: &Tensor,
    w_gate: &Tensor,
    w_lin: &Tensor,
    w_out: &Tensor,
) -> Result<(Tensor, GegluCache)> {
    let gate_pre = crate::tensor::matmul(x, w_gate)?;
    let linear = crate::tensor::matmul(x, w_lin)?;
    let mut gated = linear.clone();
    for (g, &a) in gated.data_mut().iter_mut().zip(gate_pre.data()) {
        *g *= gelu(a);
    }
    gated.requantize();
    let out = crate::tensor::matmul(&gated, w_out)?;
    Ok((
        out,
        GegluCache {
            gate_pre,
            linear,
            gated,
        },
    ))
}

pub struct GegluGrads {
    pub dx: Tensor,
    pub dw_gate: Tensor,
    pub dw_lin: Tensor,
    pub dw_out: Tensor,
}

pub fn geglu_backward(
    x: &Tensor,
    w_gate: &Tensor,
    w_lin: &Tensor,
    w_out: &Tensor,
    cache: &GegluCache,
    dout: &Tensor,
) -> Result<GegluGrads> {
    let dw_out = crate::tensor::matmul_at_b(&cache.gated, dout)?;
    let dgated = crate::tensor::matmul_a_bt(dout, w_out)?;
    let mut dgate_pre = dgated.clone();
    let mut dlinear = dgated;
    for (((dg, dl), &a), &b) in dgate_pre
        .data_mut()
        .iter_mut()
        .zip(dlinear.data_mut().iter_mut())
        .zip(cache.gate_pre.data())
        .zip(cache.linear.data())
    {
        let dh = *dg;
        *dg = dh * b * gelu_prime(a);
        *dl = dh * gelu(a);
    }
    dgate_pre.requantize();
    dlinear.requantize();
    let dw_gate = crate::tensor::matmul_at_b(x, &dgate_pre)?;
    let dw_lin = crate::tensor::matmul_at_b(x, &dlinear)?;
    let mut dx = crate::tensor::matmul_a_bt(&dgate_pre, w_gate)?;
    dx.add_assign(&crate::tensor::matmul_a_bt(&dlinear, w_lin)?);
    Ok(GegluGrads {
        dx,
        dw_gate,
        dw_lin,
        dw_out,
    })
}

/// T5-style log-spaced distance bucketing.
///
/// `distance = query_pos - key_pos`. Unidirectional mode collapses every
/// future position (distance < 0) into bucket 0, the same bucket as
/// distance 0; bidirectional mode spends half the buckets on each direction.
/// Within a direction, half the buckets hold exact small distances and the
/// rest are log-spaced up to `max_distance`.
pub fn relative_position_bucket(
    distance: i64,
    bidirectional: bool,
    n_buckets: usize,
    max_distance: usize,
) -> usize {
    assert!(n_buckets >= 2 && max_distance > 0);
    let mut bucket = 0usize;
    let mut n_buckets = n_buckets;
    let mut d = distance;
    if bidirectional {
        n_buckets /= 2;
        if d < 0 {
            bucket += n_buckets;
            d = -d;
        }
    } else if d < 0 {
        d = 0;
    }
    let d = d as usize;
    let max_exact = n_buckets / 2;
    if d < max_exact {
        bucket + d
    } else {
        let log_ratio = (d as f64 / max_exact as f64).ln()
            / (max_distance as f64 / max_exact as f64).ln();
        let large = max_exact + (log_ratio * (n_buckets - max_exact) as f64) as usize;
        bucket + large.min(n_buckets - 1)
    }
}

/// Gathers per-head bias values for every (query, key) pair.
///
/// Output is [heads × query_len × key_len]; `bias_table` is
/// [n_buckets × heads].
pub fn relative_position_bias(
    query_len: usize,
    key_len: usize,
    n_buckets: usize,
    max_distance: usize,
    bidirectional: bool,
    bias_table: &Tensor,
) -> Tensor {
    let heads = bias_table.cols();
    assert_eq!(bias_table.rows(), n_buckets);
    let mut out = vec![0.0; heads * query_len * key_len];
    for q in 0..query_len {
        for k in 0..key_len {
            let bucket =
                relative_position_bucket(q as i64 - k as i64, bidirectional, n_buckets, max_distance);
            for h in 0..heads {
                out[h * query_len * key_len + q * key_len + k] =
                    bias_table.data()[bucket * heads + h];
            }
        }
    }
    Tensor::new(vec![heads, query_len, key_len], out, bias_table.precision())
}

/// Scatter-add of bias gradients back into the table.
pub fn relative_position_bias_backward(
    query_len: usize,
    key_len: usize,
    n_buckets: usize,
    max_distance: usize,
    bidirectional: bool,
    heads: usize,
    dout: &Tensor,
) -> Tensor {
    let mut dtable = vec![0.0; n_buckets * heads];
    for q in 0..query_len {
        for k in 0..key_len {
            let bucket =
                relative_position_bucket(q as i64 - k as i64, bidirectional, n_buckets, max_distance);
            for h in 0..heads {
                dtable[bucket * heads + h] +=
                    dout.data()[h * query_len * key_len + q * key_len + k];
            }
        }
    }
    Tensor::new(vec![n_buckets, heads], dtable, dout.precision())
}

/// Inverted dropout mask: entries are 0 (dropped) or 1/(1-rate).
///
/// Deterministic for a given stream; sampled by u32 threshold comparison so
/// the mask never depends on float formatting.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut impl rand::RngCore) -> Vec<f64> {
    assert!((0.0..1.0).contains(&rate));
    if rate == 0.0 {
        return vec![1.0; len];
    }
    let threshold = (rate * 4_294_967_296.0) as u64;
    let keep_scale = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| {
            if (rng.next_u32() as u64) < threshold {
                0.0
            } else {
                keep_scale
            }
        })
        .collect()
}

/// Applies a precomputed dropout mask.
pub fn apply_mask(x: &mut Tensor, mask: &[f64]) {
    for (v, &m) in x.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    x.requantize();
}

/// Numerically stable log-softmax of one logit row; used by scoring.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let logz = row.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|l| l - logz).collect()
}
