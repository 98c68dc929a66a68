//! Training and evaluation losses.

use crate::error::{PruneError, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-wise softmax with the usual max-shift stabilization.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let shape = logits.shape();
    let (b, k) = (shape[0], shape[1]);
    let mut out = logits.clone();
    let data = out.data_mut();
    for bi in 0..b {
        let row = &mut data[bi * k..(bi + 1) * k];
        let max = row.iter().cloned().fold(T::neg_infinity(), |a, v| if v > a { v } else { a });
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += v.to_f64_lossy();
        }
        let inv = T::from_f64_lossy(1.0 / sum);
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Mean negative log-softmax of the true class. The gradient is
/// (softmax - onehot) / batch.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(PruneError::shape(
            "cross_entropy",
            format!("[{}, classes]", labels.len()),
            format!("{shape:?}"),
        ));
    }
    let (b, k) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(PruneError::arg(
            "cross_entropy",
            format!("label {bad} out of range [0, {k})"),
        ));
    }
    let probs = softmax(logits);
    let mut loss = 0.0f64;
    let mut grad = probs.clone();
    let scale = T::from_f64_lossy(1.0 / b as f64);
    {
        let g = grad.data_mut();
        let p = probs.data();
        for (bi, &label) in labels.iter().enumerate() {
            loss -= p[bi * k + label].to_f64_lossy().max(1e-300).ln();
            g[bi * k + label] -= T::one();
        }
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss / b as f64, grad))
}

const KL_FLOOR: f64 = 1e-12;

/// Mean over rows of sum_k p_k ln(p_k / q_k), with q floored at 1e-12
/// before the log. Rows must be distributions (nonnegative, summing to one
/// within 1e-6).
pub fn kl_divergence<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<f64> {
    if p.shape() != q.shape() || p.shape().len() != 2 {
        return Err(PruneError::shape(
            "kl_divergence",
            format!("{:?}", p.shape()),
            format!("{:?}", q.shape()),
        ));
    }
    let (b, k) = (p.shape()[0], p.shape()[1]);
    for (name, t) in [("p", p), ("q", q)] {
        for bi in 0..b {
            let row = &t.data()[bi * k..(bi + 1) * k];
            if row.iter().any(|v| *v < T::zero()) {
                return Err(PruneError::arg(
                    "kl_divergence",
                    format!("negative entry in {name} row {bi}"),
                ));
            }
            let sum: f64 = row.iter().map(|v| v.to_f64_lossy()).sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(PruneError::arg(
                    "kl_divergence",
                    format!("{name} row {bi} sums to {sum}, not 1"),
                ));
            }
        }
    }
    let mut total = 0.0f64;
    for bi in 0..b {
        let mut row_kl = 0.0f64;
        for i in bi * k..(bi + 1) * k {
            let pv = p.data()[i].to_f64_lossy();
            if pv > 0.0 {
                let qv = q.data()[i].to_f64_lossy().max(KL_FLOOR);
                row_kl += pv * (pv / qv).ln();
            }
        }
        total += row_kl;
    }
    Ok((total / b as f64).max(0.0))
}

/// Distillation objective: KL(p_teacher || softmax(logits)) with the teacher
/// held constant. The gradient with respect to the logits is
/// (softmax(logits) - p_teacher) / batch.
pub fn kl_to_soft_targets<T: Scalar>(
    teacher: &Tensor<T>,
    logits: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    if teacher.shape() != logits.shape() || logits.shape().len() != 2 {
        return Err(PruneError::shape(
            "kl_to_soft_targets",
            format!("{:?}", teacher.shape()),
            format!("{:?}", logits.shape()),
        ));
    }
    let probs = softmax(logits);
    let loss = kl_divergence(teacher, &probs)?;
    let b = logits.shape()[0];
    let scale = T::from_f64_lossy(1.0 / b as f64);
    let mut grad = probs;
    for (g, t) in grad.data_mut().iter_mut().zip(teacher.data()) {
        *g = (*g - *t) * scale;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        for k in [2usize, 5, 10] {
            let logits = Tensor::filled(&[3, k], 0.7f64);
            let (loss, _) = cross_entropy(&logits, &[0, 1 % k, k - 1]).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn peaked_logits_drive_loss_to_zero() {
        let mut logits = Tensor::zeros(&[2, 4]);
        logits.data_mut()[1] = 50.0f64;
        logits.data_mut()[4 + 2] = 50.0;
        let (loss, _) = cross_entropy(&logits, &[1, 2]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(cross_entropy::<f32>(&logits, &[3]).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut logits = Tensor::zeros(&[2, 5]);
        let vals = [0.3f64, -1.2, 0.8, 2.0, -0.5, 1.1, 0.0, -0.7, 0.2, 0.9];
        logits.data_mut().copy_from_slice(&vals);
        let labels = [3usize, 0];
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..10 {
            let mut lp = logits.clone();
            lp.data_mut()[i] += h;
            let mut lm = logits.clone();
            lm.data_mut()[i] -= h;
            let (fp, _) = cross_entropy(&lp, &labels).unwrap();
            let (fm, _) = cross_entropy(&lm, &labels).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grad.data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-4,
                "elem {i}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = Tensor::from_vec(&[1, 3], vec![0.2f64, 0.3, 0.5]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_matches_direct_evaluation() {
        let p = Tensor::from_vec(&[1, 2], vec![0.5f64, 0.5]).unwrap();
        let q = Tensor::from_vec(&[1, 2], vec![0.9f64, 0.1]).unwrap();
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((want - 0.5108256237659907).abs() < 1e-12);
        assert!((kl_divergence(&p, &q).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_negative_entries() {
        let p = Tensor::from_vec(&[1, 2], vec![1.5f64, -0.5]).unwrap();
        let q = Tensor::from_vec(&[1, 2], vec![0.5f64, 0.5]).unwrap();
        assert!(kl_divergence(&p, &q).is_err());
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, "kl-prop");
        for _ in 0..1000 {
            let k = rng.gen_range(2..8);
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
                let mut v: Vec<f64> = (0..k).map(|_| rng.gen_range(1e-6..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                v
            };
            let p = Tensor::from_vec(&[1, k], draw(&mut rng)).unwrap();
            let q = Tensor::from_vec(&[1, k], draw(&mut rng)).unwrap();
            assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        }
    }
}
