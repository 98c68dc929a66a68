//! Finite-difference verification of the backward pass.

use super::{ModelInstance, WidthPlan};
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

pub struct GradCheckOptions {
    /// Number of randomly chosen parameter elements to probe.
    pub samples: usize,
    /// Central-difference step.
    pub step: f64,
    pub seed: u64,
    /// Multiplies the analytic gradient before comparison; 1.0 for a real
    /// check. Fault-injection tests use 2.0 to verify the check itself
    /// detects a corrupted backward pass.
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            samples: 64,
            step: 1e-5,
            seed: 0,
            analytic_scale: 1.0,
        }
    }
}

/// Max over a random parameter subset of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8),
/// where numeric is the central finite difference of the cross-entropy loss.
/// Meaningful in 64-bit mode; always returns a value.
///
/// Respects the model's training flag, so both batchnorm modes can be
/// checked. In training mode the probe passes drift the running statistics;
/// that never feeds back into the loss.
pub fn gradient_check(
    model: &mut ModelInstance<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    opts: &GradCheckOptions,
) -> Result<f64> {
    let plan = WidthPlan::full(&model.graph);

    model.zero_grads();
    let trace = model.forward_train(input, &plan)?;
    let (_, logit_grad) = super::loss::cross_entropy(trace.logits(), labels)?;
    model.backward(&trace, &logit_grad)?;

    // Collect (layer, param, element) coordinates.
    let mut coords = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        for (pi, p) in layer.params.iter().enumerate() {
            for ei in 0..p.value.len() {
                coords.push((li, pi, ei));
            }
        }
    }
    let mut rng = rng::stream(opts.seed, "gradcheck");
    coords.shuffle(&mut rng);
    coords.truncate(opts.samples.max(1));

    let loss_at = |model: &mut ModelInstance<f64>| -> Result<f64> {
        let trace = model.forward_train(input, &plan)?;
        let (loss, _) = super::loss::cross_entropy(trace.logits(), labels)?;
        Ok(loss)
    };

    let mut worst = 0.0f64;
    for (li, pi, ei) in coords {
        let analytic = model.layers[li].params[pi].grad.data()[ei] * opts.analytic_scale;
        let orig = model.layers[li].params[pi].value.data()[ei];
        model.layers[li].params[pi].value.data_mut()[ei] = orig + opts.step;
        let fp = loss_at(model)?;
        model.layers[li].params[pi].value.data_mut()[ei] = orig - opts.step;
        let fm = loss_at(model)?;
        model.layers[li].params[pi].value.data_mut()[ei] = orig;
        let numeric = (fp - fm) / (2.0 * opts.step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

/// Relative error of the analytic input gradient against central finite
/// differences, probing `samples` input elements.
pub fn input_gradient_check(
    model: &mut ModelInstance<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<f64> {
    let plan = WidthPlan::full(&model.graph);
    model.zero_grads();
    let trace = model.forward_train(input, &plan)?;
    let (_, logit_grad) = super::loss::cross_entropy(trace.logits(), labels)?;
    let input_grad = model.backward(&trace, &logit_grad)?;

    let mut idx: Vec<usize> = (0..input.len()).collect();
    let mut rng = rng::stream(seed, "gradcheck-input");
    idx.shuffle(&mut rng);
    idx.truncate(samples.max(1));

    let mut worst = 0.0f64;
    let mut probe = input.clone();
    for i in idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let tr = model.forward_train(&probe, &plan)?;
        let (fp, _) = super::loss::cross_entropy(tr.logits(), labels)?;
        probe.data_mut()[i] = orig - step;
        let tr = model.forward_train(&probe, &plan)?;
        let (fm, _) = super::loss::cross_entropy(tr.logits(), labels)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let analytic = input_grad.data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    model.zero_grads();
    Ok(worst)
}
