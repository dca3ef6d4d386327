//! Finite-difference validation of the hand-derived backward rules.
//!
//! Every registered primitive is checked by comparing its analytic partials
//! against central differences of a scalar probe objective
//! `f(inputs) = Σ w ⊙ op(inputs)` with a seeded random cotangent `w`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{LabError, Result};
use crate::ops;
use crate::rng::substream;
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b, Precision, Tensor};

const FD_STEP: f64 = 1e-5;
/// Coordinates where both gradients are below this floor are compared on an
/// absolute scale instead of a relative one.
const REL_FLOOR: f64 = 1e-3;

pub const REGISTERED_OPS: &[&str] = &[
    "matmul",
    "masked_softmax",
    "rms_norm",
    "geglu",
    "relative_position_bias",
];

pub type Inputs = BTreeMap<String, Tensor>;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn vis_from_tensor(t: &Tensor) -> Vec<bool> {
    t.data().iter().map(|v| *v != 0.0).collect()
}

/// Evaluates the registered op on `inputs`, returning all outputs flattened.
fn eval_op(op_name: &str, inputs: &Inputs) -> Result<Vec<f64>> {
    let get = |k: &str| -> Result<&Tensor> {
        inputs
            .get(k)
            .ok_or_else(|| LabError::InvalidConfig(format!("missing input '{k}' for {op_name}")))
    };
    match op_name {
        "matmul" => Ok(matmul(get("a")?, get("b")?)?.data().to_vec()),
        "masked_softmax" => {
            let (p, z) = ops::masked_softmax(get("logits")?, &vis_from_tensor(get("visibility")?))?;
            let mut out = p.data().to_vec();
            out.extend_from_slice(z.data());
            Ok(out)
        }
        "rms_norm" => Ok(ops::rms_norm(get("x")?, get("gain")?, 1e-6)?.data().to_vec()),
        "geglu" => {
            let (out, _) = ops::geglu(get("x")?, get("w_gate")?, get("w_lin")?, get("w_out")?)?;
            Ok(out.data().to_vec())
        }
        "relative_position_bias" => {
            let meta = get("meta")?.data();
            let (q, k, maxd, bidir) = (
                meta[0] as usize,
                meta[1] as usize,
                meta[2] as usize,
                meta[3] != 0.0,
            );
            let table = get("bias_table")?;
            Ok(ops::relative_position_bias(q, k, table.rows(), maxd, bidir, table)
                .data()
                .to_vec())
        }
        other => Err(LabError::UnregisteredOp(other.to_string())),
    }
}

/// Names of the differentiable inputs of each op (others are treated as
/// constants by the check).
fn diff_inputs(op_name: &str) -> Result<&'static [&'static str]> {
    match op_name {
        "matmul" => Ok(&["a", "b"]),
        "masked_softmax" => Ok(&["logits"]),
        "rms_norm" => Ok(&["x", "gain"]),
        "geglu" => Ok(&["x", "w_gate", "w_lin", "w_out"]),
        "relative_position_bias" => Ok(&["bias_table"]),
        other => Err(LabError::UnregisteredOp(other.to_string())),
    }
}

/// Analytic gradient of `Σ w ⊙ op(inputs)` for every differentiable input.
fn analytic_grads(op_name: &str, inputs: &Inputs, w: &[f64]) -> Result<BTreeMap<String, Tensor>> {
    let get = |k: &str| inputs.get(k).unwrap();
    let mut grads = BTreeMap::new();
    match op_name {
        "matmul" => {
            let (a, b) = (get("a"), get("b"));
            let dout = Tensor::new(vec![a.rows(), b.cols()], w.to_vec(), Precision::High);
            grads.insert("a".into(), matmul_a_bt(&dout, b)?);
            grads.insert("b".into(), matmul_at_b(a, &dout)?);
        }
        "masked_softmax" => {
            let logits = get("logits");
            let vis = vis_from_tensor(get("visibility"));
            let (p, _z) = ops::masked_softmax(logits, &vis)?;
            let n = p.len();
            let dprobs = Tensor::new(p.shape().to_vec(), w[..n].to_vec(), Precision::High);
            let dlogz = &w[n..];
            grads.insert(
                "logits".into(),
                ops::masked_softmax_backward(&p, &dprobs, dlogz),
            );
        }
        "rms_norm" => {
            let (x, gain) = (get("x"), get("gain"));
            let dout = Tensor::new(x.shape().to_vec(), w.to_vec(), Precision::High);
            let (dx, dgain) = ops::rms_norm_backward(x, gain, 1e-6, &dout);
            grads.insert("x".into(), dx);
            grads.insert("gain".into(), dgain);
        }
        "geglu" => {
            let (x, wg, wl, wo) = (get("x"), get("w_gate"), get("w_lin"), get("w_out"));
            let (out, cache) = ops::geglu(x, wg, wl, wo)?;
            let dout = Tensor::new(out.shape().to_vec(), w.to_vec(), Precision::High);
            let g = ops::geglu_backward(x, wg, wl, wo, &cache, &dout)?;
            grads.insert("x".into(), g.dx);
            grads.insert("w_gate".into(), g.dw_gate);
            grads.insert("w_lin".into(), g.dw_lin);
            grads.insert("w_out".into(), g.dw_out);
        }
        "relative_position_bias" => {
            let meta = get("meta").data();
            let (q, k, maxd, bidir) = (
                meta[0] as usize,
                meta[1] as usize,
                meta[2] as usize,
                meta[3] != 0.0,
            );
            let table = get("bias_table");
            let heads = table.cols();
            let dout = Tensor::new(vec![heads, q, k], w.to_vec(), Precision::High);
            grads.insert(
                "bias_table".into(),
                ops::relative_position_bias_backward(q, k, table.rows(), maxd, bidir, heads, &dout),
            );
        }
        other => return Err(LabError::UnregisteredOp(other.to_string())),
    }
    Ok(grads)
}

/// Compares analytic partials against central finite differences and returns
/// the max relative error over all coordinates of all differentiable inputs.
pub fn grad_check(op_name: &str, inputs: &Inputs, seed: u64) -> Result<f64> {
    for (name, t) in inputs {
        if t.precision() != Precision::High {
            return Err(LabError::InvalidConfig(format!(
                "grad_check input '{name}' must be high precision"
            )));
        }
        if t.len() > 64 {
            return Err(LabError::InvalidConfig(format!(
                "grad_check input '{name}' has {} elements (limit 64)",
                t.len()
            )));
        }
    }
    let out0 = eval_op(op_name, inputs)?;
    let mut rng = substream(seed, "gradcheck-cotangent", 0);
    let w: Vec<f64> = (0..out0.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let grads = analytic_grads(op_name, inputs, &w)?;
    let probe = |inp: &Inputs| -> Result<f64> {
        let out = eval_op(op_name, inp)?;
        Ok(out.iter().zip(&w).map(|(o, wi)| o * wi).sum())
    };

    let mut max_err = 0.0f64;
    for name in diff_inputs(op_name)? {
        let base = inputs.get(*name).ok_or_else(|| {
            LabError::InvalidConfig(format!("missing input '{name}' for {op_name}"))
        })?;
        let analytic = grads.get(*name).expect("analytic grad present");
        for i in 0..base.len() {
            let mut plus = inputs.clone();
            plus.get_mut(*name).unwrap().data_mut()[i] += FD_STEP;
            let mut minus = inputs.clone();
            minus.get_mut(*name).unwrap().data_mut()[i] -= FD_STEP;
            let numeric = (probe(&plus)? - probe(&minus)?) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(max_err)
}

/// Small random inputs for a registered op, for property sweeps.
pub fn random_inputs(op_name: &str, seed: u64) -> Result<Inputs> {
    let mut rng = substream(seed, "gradcheck-inputs", 0);
    let mut rt = |shape: &[usize], lo: f64, hi: f64| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data, Precision::High)
    };
    let mut inputs = Inputs::new();
    match op_name {
        "matmul" => {
            inputs.insert("a".into(), rt(&[3, 4], -1.0, 1.0));
            inputs.insert("b".into(), rt(&[4, 2], -1.0, 1.0));
        }
        "masked_softmax" => {
            inputs.insert("logits".into(), rt(&[3, 3], -2.0, 2.0));
            // keep at least one visible position per row
            let mut vis = vec![1.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    if rng.gen_bool(0.3) {
                        vis[r * 3 + c] = 0.0;
                    }
                }
                if vis[r * 3..(r + 1) * 3].iter().all(|v| *v == 0.0) {
                    vis[r * 3] = 1.0;
                }
            }
            inputs.insert(
                "visibility".into(),
                Tensor::new(vec![3, 3], vis, Precision::High),
            );
        }
        "rms_norm" => {
            inputs.insert("x".into(), rt(&[2, 5], -2.0, 2.0));
            inputs.insert("gain".into(), rt(&[5], 0.5, 1.5));
        }
        "geglu" => {
            inputs.insert("x".into(), rt(&[2, 4], -1.0, 1.0));
            inputs.insert("w_gate".into(), rt(&[4, 6], -0.7, 0.7));
            inputs.insert("w_lin".into(), rt(&[4, 6], -0.7, 0.7));
            inputs.insert("w_out".into(), rt(&[6, 4], -0.7, 0.7));
        }
        "relative_position_bias" => {
            inputs.insert("bias_table".into(), rt(&[8, 2], -1.0, 1.0));
            inputs.insert(
                "meta".into(),
                Tensor::new(
                    vec![4],
                    vec![4.0, 4.0, 16.0, if seed % 2 == 0 { 1.0 } else { 0.0 }],
                    Precision::High,
                ),
            );
        }
        other => return Err(LabError::UnregisteredOp(other.to_string())),
    }
    Ok(inputs)
}
