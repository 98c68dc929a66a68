//! SGD with momentum and weight decay.

use super::Parameter;
use crate::error::{PruneError, Result};
use crate::tensor::Scalar;

/// One SGD step over the given parameters:
/// m <- momentum * m + (grad + weight_decay * value); value <- value - lr * m.
/// Gradients are zeroed afterwards. A non-finite gradient aborts the step
/// with every parameter untouched.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Parameter<T>],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    for p in params.iter() {
        if !p.grad.all_finite() {
            return Err(PruneError::NonFinite {
                context: "sgd_step gradient".into(),
            });
        }
    }
    for p in params.iter_mut() {
        let value = p.value.data_mut();
        let grad = p.grad.data_mut();
        let m = p.momentum.data_mut();
        for i in 0..value.len() {
            m[i] = momentum * m[i] + (grad[i] + weight_decay * value[i]);
            value[i] = value[i] - lr * m[i];
            grad[i] = T::zero();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(values: &[f64], grads: &[f64]) -> Parameter<f64> {
        let mut p = Parameter::new(Tensor::from_vec(&[values.len()], values.to_vec()).unwrap());
        p.grad.data_mut().copy_from_slice(grads);
        p
    }

    #[test]
    fn vanilla_step_is_exact() {
        let mut p = param(&[1.0, -2.0], &[0.5, 0.25]);
        sgd_step(&mut [&mut p], 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.value.data(), &[1.0 - 0.05, -2.0 - 0.025]);
        assert_eq!(p.grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn momentum_matches_hand_unrolled_recurrence() {
        // Hand unroll: m1 = g1 + wd*v0; v1 = v0 - lr*m1;
        // m2 = mu*m1 + (g2 + wd*v1); v2 = v1 - lr*m2.
        let (v0, g1, g2, lr, mu, wd) = (2.0f64, 0.3, -0.1, 0.05, 0.9, 0.01);
        let m1 = g1 + wd * v0;
        let v1 = v0 - lr * m1;
        let m2 = mu * m1 + (g2 + wd * v1);
        let v2 = v1 - lr * m2;

        let mut p = param(&[v0], &[g1]);
        sgd_step(&mut [&mut p], lr, mu, wd).unwrap();
        assert!((p.value.data()[0] - v1).abs() < 1e-15);
        p.grad.data_mut()[0] = g2;
        sgd_step(&mut [&mut p], lr, mu, wd).unwrap();
        assert!((p.value.data()[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_keeps_values_but_clears_grads() {
        let mut p = param(&[1.0, 2.0], &[3.0, 4.0]);
        sgd_step(&mut [&mut p], 0.0, 0.9, 0.0).unwrap();
        assert_eq!(p.value.data(), &[1.0, 2.0]);
        assert_eq!(p.grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_grad_aborts_step() {
        let mut p = param(&[1.0], &[f64::NAN]);
        assert!(sgd_step(&mut [&mut p], 0.1, 0.0, 0.0).is_err());
        assert_eq!(p.value.data(), &[1.0]);
        assert!(p.grad.data()[0].is_nan());
    }
}
