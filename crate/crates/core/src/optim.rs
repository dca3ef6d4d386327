//! Adafactor with factored second moments, learning-rate schedules, and the
//! objective assembly.
//!
//! Matrices keep one row vector R and one column vector C of second-moment
//! statistics instead of a dense accumulator; 1-D parameters keep a full
//! vector. Defaults beyond the decay rate follow the original Adafactor
//! recipe: no first moment, update clipping at RMS 1.0, eps1 = 1e-30 inside
//! the accumulators, relative step scaling floored at eps2 = 1e-3.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::params::ParamTree;

pub const DECAY_EXPONENT: f64 = 0.8;
pub const EPS1: f64 = 1e-30;
pub const EPS2: f64 = 1e-3;
pub const CLIP_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    /// 1 / sqrt(max(n, warmup_floor)).
    InverseSqrt { warmup_floor: u64 },
    Fixed { value: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::InverseSqrt {
            warmup_floor: 10_000,
        }
    }
}

pub fn lr_at(schedule: LrSchedule, n: u64) -> f64 {
    match schedule {
        LrSchedule::InverseSqrt { warmup_floor } => 1.0 / ((n.max(warmup_floor)) as f64).sqrt(),
        LrSchedule::Fixed { value } => value,
    }
}

/// Factored (or full, for 1-D parameters) second-moment statistics of one
/// parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SecondMoment {
    Factored { row: Vec<f64>, col: Vec<f64> },
    Full { v: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    /// Keyed by parameter path, in sorted order.
    pub moments: std::collections::BTreeMap<String, SecondMoment>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

fn rms(data: &[f64]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    (data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64).sqrt()
}

/// One Adafactor update over every parameter in the tree.
///
/// beta2(n) = 1 − n^−0.8 with n starting at 1, so the first step fully
/// adopts the fresh statistics. The update is clipped to unit RMS and scaled
/// by max(eps2, RMS(p)) (relative step sizing) times the schedule's rate.
pub fn adafactor_step(
    params: &mut ParamTree,
    grads: &ParamTree,
    state: &mut OptimizerState,
    schedule: LrSchedule,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(LabError::ShapeMismatch {
            context: "adafactor_step trees".into(),
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    state.step += 1;
    let n = state.step;
    let beta2 = 1.0 - (n as f64).powf(-DECAY_EXPONENT);
    let lr = lr_at(schedule, n);

    for (path, p) in params.iter_mut() {
        let g = grads.try_get(path).ok_or_else(|| LabError::ShapeMismatch {
            context: format!("missing gradient for {path}"),
            lhs: vec![],
            rhs: vec![],
        })?;
        if g.shape() != p.shape() {
            return Err(LabError::ShapeMismatch {
                context: format!("gradient shape for {path}"),
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let is_matrix = p.shape().len() == 2;
        let moment = state.moments.entry(path.clone()).or_insert_with(|| {
            if is_matrix {
                SecondMoment::Factored {
                    row: vec![0.0; p.shape()[0]],
                    col: vec![0.0; p.shape()[1]],
                }
            } else {
                SecondMoment::Full {
                    v: vec![0.0; p.len()],
                }
            }
        });

        // u = g / sqrt(v_hat)
        let mut update: Vec<f64> = match moment {
            SecondMoment::Factored { row, col } => {
                let (rows, cols) = (p.shape()[0], p.shape()[1]);
                for r in 0..rows {
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let mean: f64 =
                        grow.iter().map(|v| v * v + EPS1).sum::<f64>() / cols as f64;
                    row[r] = beta2 * row[r] + (1.0 - beta2) * mean;
                }
                for c in 0..cols {
                    let mut sum = 0.0;
                    for r in 0..rows {
                        let v = g.data()[r * cols + c];
                        sum += v * v + EPS1;
                    }
                    col[c] = beta2 * col[c] + (1.0 - beta2) * (sum / rows as f64);
                }
                let row_mean: f64 = row.iter().sum::<f64>() / rows as f64;
                let mut u = vec![0.0; p.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        let vhat = row[r] * col[c] / row_mean;
                        u[r * cols + c] = g.data()[r * cols + c] / vhat.sqrt();
                    }
                }
                u
            }
            SecondMoment::Full { v } => {
                for (vi, gi) in v.iter_mut().zip(g.data()) {
                    *vi = beta2 * *vi + (1.0 - beta2) * (gi * gi + EPS1);
                }
                g.data()
                    .iter()
                    .zip(v.iter())
                    .map(|(gi, vi)| gi / vi.sqrt())
                    .collect()
            }
        };

        let update_rms = rms(&update);
        if update_rms > CLIP_THRESHOLD {
            let s = CLIP_THRESHOLD / update_rms;
            for u in &mut update {
                *u *= s;
            }
        }
        let step_scale = lr * rms(p.data()).max(EPS2);
        for (pv, u) in p.data_mut().iter_mut().zip(&update) {
            *pv -= step_scale * u;
        }
        p.requantize();
    }
    Ok(())
}

/// The trained objective is the sum of the two loss terms; the z coefficient
/// has already been applied inside the loss.
pub fn total_loss(cross_entropy: f64, z_loss: f64) -> f64 {
    cross_entropy + z_loss
}

/// Reconstructs the dense second moment a factored state implies; exact for
/// outer-product gradients.
pub fn factored_vhat(moment: &SecondMoment, shape: &[usize]) -> Vec<f64> {
    match moment {
        SecondMoment::Factored { row, col } => {
            let (rows, cols) = (shape[0], shape[1]);
            let row_mean: f64 = row.iter().sum::<f64>() / rows as f64;
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[r * cols + c] = row[r] * col[c] / row_mean;
                }
            }
            out
        }
        SecondMoment::Full { v } => v.clone(),
    }
}
