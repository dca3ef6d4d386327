//! Cross-entropy over masked positions plus the z-loss stabilizer.

use crate::error::{LabError, Result};
use crate::tensor::Tensor;

/// Coefficient applied to mean log²(Z); Z is the true softmax normalizer.
pub const Z_LOSS_COEFF: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Mean over masked-in positions of −log p(target).
    pub cross_entropy: f64,
    /// z_coefficient × mean over masked-in positions of log²(Z).
    pub z_loss: f64,
    pub tokens_trained: usize,
    /// Mean |log Z| over masked-in positions (diagnostic; independent of the
    /// z coefficient).
    pub mean_abs_log_z: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.cross_entropy + self.z_loss
    }
}

fn row_logz(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    row.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max
}

/// Loss over `logits` [positions × vocab] at masked-in positions.
///
/// An all-false mask yields zeros. Targets outside the vocabulary are an
/// error even at masked-out positions that carry real ids.
pub fn loss_and_zloss(
    logits: &Tensor,
    targets: &[u32],
    loss_mask: &[bool],
    z_coefficient: f64,
) -> Result<LossBreakdown> {
    let (n, vocab) = (logits.rows(), logits.cols());
    assert_eq!(targets.len(), n, "targets/logits length mismatch");
    assert_eq!(loss_mask.len(), n, "loss_mask/logits length mismatch");
    assert!(z_coefficient >= 0.0);
    let mut ce_sum = 0.0;
    let mut z_sum = 0.0;
    let mut abs_sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        if !loss_mask[i] {
            continue;
        }
        let t = targets[i];
        if t as usize >= vocab {
            return Err(LabError::TargetOutOfVocab { id: t, vocab });
        }
        let row = logits.row(i);
        let logz = row_logz(row);
        ce_sum += logz - row[t as usize];
        z_sum += logz * logz;
        abs_sum += logz.abs();
        count += 1;
    }
    if count == 0 {
        return Ok(LossBreakdown {
            cross_entropy: 0.0,
            z_loss: 0.0,
            tokens_trained: 0,
            mean_abs_log_z: 0.0,
        });
    }
    let m = count as f64;
    Ok(LossBreakdown {
        cross_entropy: ce_sum / m,
        z_loss: z_coefficient * (z_sum / m),
        tokens_trained: count,
        mean_abs_log_z: abs_sum / m,
    })
}

/// Gradient of `cross_entropy + z_loss` w.r.t. the logits.
pub fn loss_backward(
    logits: &Tensor,
    targets: &[u32],
    loss_mask: &[bool],
    z_coefficient: f64,
) -> Result<Tensor> {
    let (n, vocab) = (logits.rows(), logits.cols());
    let count = loss_mask.iter().filter(|m| **m).count();
    let mut dlogits = Tensor::zeros(&[n, vocab], logits.precision());
    if count == 0 {
        return Ok(dlogits);
    }
    let m = count as f64;
    for i in 0..n {
        if !loss_mask[i] {
            continue;
        }
        let t = targets[i];
        if t as usize >= vocab {
            return Err(LabError::TargetOutOfVocab { id: t, vocab });
        }
        let row = logits.row(i);
        let logz = row_logz(row);
        let drow = &mut dlogits.data_mut()[i * vocab..(i + 1) * vocab];
        // d(ce)/dl_j = (p_j − 1{j=t})/m ; d(z)/dl_j = 2 c logz p_j / m
        let zfac = 2.0 * z_coefficient * logz;
        for (j, dl) in drow.iter_mut().enumerate() {
            let p = (row[j] - logz).exp();
            *dl = (p + zfac * p) / m;
        }
        drow[t as usize] -= 1.0 / m;
    }
    dlogits.requantize();
    Ok(dlogits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let v = 7;
        let logits = Tensor::zeros(&[1, v], Precision::High);
        let out = loss_and_zloss(&logits, &[3], &[true], Z_LOSS_COEFF).unwrap();
        let lnv = (v as f64).ln();
        assert_eq!(out.cross_entropy, lnv);
        assert_eq!(out.z_loss, Z_LOSS_COEFF * (lnv * lnv));
        assert_eq!(out.tokens_trained, 1);
    }

    #[test]
    fn empty_mask_is_zero() {
        let logits = Tensor::zeros(&[3, 4], Precision::High);
        let out = loss_and_zloss(&logits, &[0, 1, 2], &[false; 3], 1e-4).unwrap();
        assert_eq!(out.cross_entropy, 0.0);
        assert_eq!(out.z_loss, 0.0);
        assert_eq!(out.tokens_trained, 0);
    }

    #[test]
    fn matches_direct_summation_oracle() {
        // random 2-position case vs a direct high-precision summation oracle
        let data = vec![0.2, -1.3, 0.7, 2.0, 0.1, -0.4, 1.5, -2.2];
        let logits = Tensor::new(vec![2, 4], data.clone(), Precision::High);
        let targets = [2u32, 0];
        let out = loss_and_zloss(&logits, &targets, &[true, true], 1e-4).unwrap();

        let mut ce = 0.0;
        let mut zz = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &data[i * 4..(i + 1) * 4];
            let z: f64 = row.iter().map(|l| l.exp()).sum();
            ce += z.ln() - row[t as usize];
            zz += z.ln() * z.ln();
        }
        assert!((out.cross_entropy - ce / 2.0).abs() < 1e-12);
        assert!((out.z_loss - 1e-4 * zz / 2.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocab_target_errors() {
        let logits = Tensor::zeros(&[1, 4], Precision::High);
        assert!(loss_and_zloss(&logits, &[4], &[true], 0.0).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let data = vec![0.4, -0.2, 1.1, 0.0, -0.9, 0.3];
        let logits = Tensor::new(vec![2, 3], data.clone(), Precision::High);
        let targets = [1u32, 2];
        let mask = [true, true];
        let zc = 1e-2;
        let analytic = loss_backward(&logits, &targets, &mask, zc).unwrap();
        let h = 1e-6;
        for i in 0..data.len() {
            let mut plus = data.clone();
            plus[i] += h;
            let mut minus = data.clone();
            minus[i] -= h;
            let lp = loss_and_zloss(
                &Tensor::new(vec![2, 3], plus, Precision::High),
                &targets,
                &mask,
                zc,
            )
            .unwrap();
            let lm = loss_and_zloss(
                &Tensor::new(vec![2, 3], minus, Precision::High),
                &targets,
                &mask,
                zc,
            )
            .unwrap();
            let numeric = (lp.total() - lm.total()) / (2.0 * h);
            assert!(
                (analytic.data()[i] - numeric).abs() < 1e-7,
                "coord {i}: {} vs {}",
                analytic.data()[i],
                numeric
            );
        }
    }
}
