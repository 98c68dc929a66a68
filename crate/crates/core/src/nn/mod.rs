//! Minimal deterministic CNN engine.
//!
//! A [`ModelInstance`] pairs a [`ModelGraph`] with parameter tensors and
//! executes it as a DAG. Kernels live in [`layers`]; losses in [`loss`];
//! the optimizer in [`optim`]. Width plans let one set of full-size
//! parameters run at any leading-channel sub-width (the slimmable
//! convention); masks zero selected channels at a conv's post-activation
//! point, which is how the KL criterion probes channels.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;

use crate::error::{PruneError, Result};
use crate::graph::{LayerKind, LayerSpec, ModelGraph};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use layers::{BnAux, BnConfig, ConvDims};
use rand::Rng;
use std::collections::BTreeMap;

/// A learnable tensor with its gradient and momentum buffer.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            momentum,
        }
    }
}

/// Parameters and running statistics of one layer.
#[derive(Clone, Debug, Default)]
pub struct LayerState<T: Scalar> {
    /// conv/linear: [weight, bias]; batchnorm: [gamma, beta];
    /// channel-gate: [weight]; other kinds: empty.
    pub params: Vec<Parameter<T>>,
    pub running_mean: Option<Tensor<T>>,
    pub running_var: Option<Tensor<T>>,
}

/// Active (input, output) channel counts per layer; the identity plan uses
/// the full widths. Sub-width plans always take leading channels.
#[derive(Clone, Debug, PartialEq)]
pub struct WidthPlan {
    pub in_active: Vec<usize>,
    pub out_active: Vec<usize>,
}

impl WidthPlan {
    pub fn full(graph: &ModelGraph) -> Self {
        WidthPlan {
            in_active: graph.layers.iter().map(|l| l.in_channels).collect(),
            out_active: graph.layers.iter().map(|l| l.out_channels).collect(),
        }
    }

    /// Leading-channel plan realizing a channel configuration.
    pub fn from_config(graph: &ModelGraph, config: &crate::graph::ChannelConfig) -> Result<Self> {
        config.validate(graph)?;
        let n = graph.layers.len();
        let mut out_active = vec![0usize; n];
        for (i, layer) in graph.layers.iter().enumerate() {
            out_active[i] = match layer.kind {
                LayerKind::Conv2d { .. } => config.keep_count[&layer.id],
                LayerKind::Linear => layer.out_channels,
                _ => match graph.unit_of_space(graph.out_space(i)) {
                    Some(unit) => config.keep_count[&graph.layers[unit.conv_layers[0]].id],
                    None => layer.out_channels,
                },
            };
        }
        let in_active = (0..n)
            .map(|i| {
                let l = &graph.layers[i];
                if l.predecessors.is_empty() {
                    graph.input_shape.0
                } else {
                    out_active[graph.layer_index(&l.predecessors[0]).unwrap()]
                }
            })
            .collect();
        Ok(WidthPlan {
            in_active,
            out_active,
        })
    }
}

/// Channels to zero at given layer outputs during inference.
#[derive(Clone, Debug, Default)]
pub struct MaskSpec {
    /// (layer index, channel indices to zero).
    pub points: Vec<(usize, Vec<usize>)>,
}

/// Saved activations of one forward pass, for the backward pass.
pub struct ForwardTrace<T: Scalar> {
    pub input: Tensor<T>,
    pub outputs: Vec<Tensor<T>>,
    aux: Vec<AuxState<T>>,
    plan: WidthPlan,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Logits of the final layer.
    pub fn logits(&self) -> &Tensor<T> {
        self.outputs.last().expect("nonempty graph")
    }
}

enum AuxState<T: Scalar> {
    None,
    Bn(BnAux<T>),
    Pool(Vec<u32>),
}

/// A model: graph plus parameters.
#[derive(Clone, Debug)]
pub struct ModelInstance<T: Scalar> {
    pub graph: ModelGraph,
    pub layers: Vec<LayerState<T>>,
    pub training: bool,
    pub bn_momentum: T,
    pub bn_eps: T,
}

fn box_muller<T: Scalar>(rng: &mut impl Rng) -> T {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    T::from_f64_lossy((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
}

impl<T: Scalar> ModelInstance<T> {
    /// He-normal initialization, deterministic in the seed.
    pub fn new_random(graph: &ModelGraph, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "init");
        let mut states = Vec::with_capacity(graph.layers.len());
        for layer in &graph.layers {
            states.push(init_layer(layer, &mut rng));
        }
        ModelInstance {
            graph: graph.clone(),
            layers: states,
            training: true,
            bn_momentum: T::from_f64_lossy(0.1),
            bn_eps: T::from_f64_lossy(1e-5),
        }
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.params.iter().map(|p| p.value.len()).sum::<usize>())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for l in &mut self.layers {
            for p in &mut l.params {
                p.grad.fill(T::zero());
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelInstance<U> {
        ModelInstance {
            graph: self.graph.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerState {
                    params: l
                        .params
                        .iter()
                        .map(|p| Parameter::new(p.value.cast()))
                        .collect(),
                    running_mean: l.running_mean.as_ref().map(|t| t.cast()),
                    running_var: l.running_var.as_ref().map(|t| t.cast()),
                })
                .collect(),
            training: self.training,
            bn_momentum: U::from_f64_lossy(self.bn_momentum.to_f64_lossy()),
            bn_eps: U::from_f64_lossy(self.bn_eps.to_f64_lossy()),
        }
    }

    fn check_input(&self, input: &Tensor<T>, plan: &WidthPlan) -> Result<()> {
        let (c, h, w) = self.graph.input_shape;
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
            return Err(PruneError::shape(
                "model input",
                format!("[batch, {c}, {h}, {w}]"),
                format!("{shape:?}"),
            ));
        }
        if plan.in_active.len() != self.graph.layers.len() {
            return Err(PruneError::arg("width plan", "layer count mismatch"));
        }
        Ok(())
    }

    /// Training-mode forward pass; records activations for [`Self::backward`].
    /// Batchnorm uses batch statistics and, when `self.training`, updates the
    /// running statistics.
    pub fn forward_train(&mut self, input: &Tensor<T>, plan: &WidthPlan) -> Result<ForwardTrace<T>> {
        self.check_input(input, plan)?;
        let n = self.graph.layers.len();
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(n);
        let mut aux: Vec<AuxState<T>> = Vec::with_capacity(n);
        let training = self.training;
        let (momentum, eps) = (self.bn_momentum, self.bn_eps);
        for i in 0..n {
            let spec = self.graph.layers[i].clone();
            let pred_idx: Vec<usize> = spec
                .predecessors
                .iter()
                .map(|p| self.graph.layer_index(p).unwrap())
                .collect();
            let x: &Tensor<T> = if pred_idx.is_empty() {
                input
            } else {
                &outputs[pred_idx[0]]
            };
            let (out, a) = match spec.kind {
                LayerKind::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let d = conv_dims(&spec, x, plan, i, kernel, stride, padding)?;
                    let state = &self.layers[i];
                    let bias = state.params.get(1).map(|p| p.value.data()).unwrap_or(&[]);
                    (
                        layers::conv2d_forward(x, state.params[0].value.data(), bias, &d),
                        AuxState::None,
                    )
                }
                LayerKind::Batchnorm2d => {
                    let c = plan.out_active[i];
                    expect_channels("batchnorm2d", &spec.id, x, c)?;
                    let state = &mut self.layers[i];
                    let (gamma, beta) = (state.params[0].value.clone(), state.params[1].value.clone());
                    let cfg = BnConfig {
                        channels: c,
                        training,
                        momentum,
                        eps,
                    };
                    let (out, bn_aux) = layers::batchnorm_forward(
                        x,
                        gamma.data(),
                        beta.data(),
                        state.running_mean.as_mut().unwrap().data_mut(),
                        state.running_var.as_mut().unwrap().data_mut(),
                        &cfg,
                    );
                    (out, AuxState::Bn(bn_aux))
                }
                LayerKind::Relu => (layers::relu_forward(x), AuxState::None),
                LayerKind::Maxpool2d { kernel, stride } => {
                    let (out, am) = layers::maxpool_forward(x, kernel, stride);
                    (out, AuxState::Pool(am))
                }
                LayerKind::AvgPoolGlobal => (layers::global_avgpool_forward(x), AuxState::None),
                LayerKind::Linear => {
                    let state = &self.layers[i];
                    (
                        layers::linear_forward(
                            x,
                            state.params[0].value.data(),
                            state.params[1].value.data(),
                            spec.in_channels,
                            plan.in_active[i],
                            plan.out_active[i],
                        ),
                        AuxState::None,
                    )
                }
                LayerKind::AddSkip => {
                    let b = &outputs[pred_idx[1]];
                    if x.shape() != b.shape() {
                        return Err(PruneError::shape(
                            format!("add-skip '{}'", spec.id),
                            format!("{:?}", x.shape()),
                            format!("{:?}", b.shape()),
                        ));
                    }
                    (layers::add_forward(x, b), AuxState::None)
                }
                LayerKind::ChannelGate => {
                    let state = &self.layers[i];
                    (
                        layers::gate_forward(x, state.params[0].value.data(), plan.out_active[i]),
                        AuxState::None,
                    )
                }
            };
            outputs.push(out);
            aux.push(a);
        }
        Ok(ForwardTrace {
            input: input.clone(),
            outputs,
            aux,
            plan: plan.clone(),
        })
    }

    /// Backward pass from a logit gradient; accumulates parameter gradients.
    /// Returns the gradient with respect to the network input.
    pub fn backward(&mut self, trace: &ForwardTrace<T>, logit_grad: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.graph.layers.len();
        let plan = &trace.plan;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let last = n - 1;
        if logit_grad.shape() != trace.outputs[last].shape() {
            return Err(PruneError::shape(
                "logit grad",
                format!("{:?}", trace.outputs[last].shape()),
                format!("{:?}", logit_grad.shape()),
            ));
        }
        grads[last] = Some(logit_grad.clone());
        let mut input_grad = Tensor::zeros(trace.input.shape());

        for i in (0..n).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let spec = self.graph.layers[i].clone();
            let pred_idx: Vec<usize> = spec
                .predecessors
                .iter()
                .map(|p| self.graph.layer_index(p).unwrap())
                .collect();
            let x: &Tensor<T> = if pred_idx.is_empty() {
                &trace.input
            } else {
                &trace.outputs[pred_idx[0]]
            };
            let gins: Vec<Tensor<T>> = match spec.kind {
                LayerKind::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let d = conv_dims(&spec, x, plan, i, kernel, stride, padding)?;
                    let state = &mut self.layers[i];
                    let (wp, rest) = state.params.split_at_mut(1);
                    let Parameter { value, grad, .. } = &mut wp[0];
                    let gin = match rest.get_mut(0) {
                        Some(bp) => layers::conv2d_backward(
                            x,
                            value.data(),
                            &gout,
                            &d,
                            grad.data_mut(),
                            bp.grad.data_mut(),
                        ),
                        None => layers::conv2d_backward(
                            x,
                            value.data(),
                            &gout,
                            &d,
                            grad.data_mut(),
                            &mut [],
                        ),
                    };
                    vec![gin]
                }
                LayerKind::Batchnorm2d => {
                    let AuxState::Bn(bn_aux) = &trace.aux[i] else {
                        unreachable!("bn aux")
                    };
                    let state = &mut self.layers[i];
                    let (gp, rest) = state.params.split_at_mut(1);
                    let Parameter { value, grad, .. } = &mut gp[0];
                    let gin = layers::batchnorm_backward(
                        x,
                        value.data(),
                        bn_aux,
                        &gout,
                        grad.data_mut(),
                        rest[0].grad.data_mut(),
                    );
                    vec![gin]
                }
                LayerKind::Relu => vec![layers::relu_backward(x, &gout)],
                LayerKind::Maxpool2d { .. } => {
                    let AuxState::Pool(am) = &trace.aux[i] else {
                        unreachable!("pool aux")
                    };
                    vec![layers::maxpool_backward(x.shape(), am, &gout)]
                }
                LayerKind::AvgPoolGlobal => {
                    vec![layers::global_avgpool_backward(x.shape(), &gout)]
                }
                LayerKind::Linear => {
                    let state = &mut self.layers[i];
                    let (wp, rest) = state.params.split_at_mut(1);
                    let Parameter { value, grad, .. } = &mut wp[0];
                    let gin = layers::linear_backward(
                        x,
                        value.data(),
                        &gout,
                        spec.in_channels,
                        plan.in_active[i],
                        plan.out_active[i],
                        grad.data_mut(),
                        rest[0].grad.data_mut(),
                    );
                    vec![gin]
                }
                LayerKind::AddSkip => vec![gout.clone(), gout.clone()],
                LayerKind::ChannelGate => {
                    let state = &mut self.layers[i];
                    let Parameter { value, grad, .. } = &mut state.params[0];
                    let gin = layers::gate_backward(
                        x,
                        value.data(),
                        plan.out_active[i],
                        &gout,
                        grad.data_mut(),
                    );
                    vec![gin]
                }
            };
            for (slot, gin) in pred_idx.iter().zip(gins.iter()) {
                match &mut grads[*slot] {
                    Some(acc) => acc.add_assign(gin),
                    slot_ref => *slot_ref = Some(gin.clone()),
                }
            }
            if pred_idx.is_empty() {
                input_grad.add_assign(&gins[0]);
            }
        }
        Ok(input_grad)
    }

    /// Evaluation-mode forward pass (frozen batchnorm statistics), with an
    /// optional channel mask. Returns the logits.
    pub fn infer(&self, input: &Tensor<T>, plan: &WidthPlan, mask: Option<&MaskSpec>) -> Result<Tensor<T>> {
        let outputs = self.eval_layers(input, plan, mask, None)?;
        Ok(outputs.into_iter().last().unwrap())
    }

    /// Evaluation-mode forward pass retaining every layer output.
    pub fn infer_all(&self, input: &Tensor<T>, plan: &WidthPlan) -> Result<Vec<Tensor<T>>> {
        self.eval_layers(input, plan, None, None)
    }

    /// Re-run only the layers downstream of the mask points, reading
    /// everything else from `cached` (a full set of unmasked outputs for the
    /// same input and plan). Bitwise identical to a full masked pass.
    pub fn infer_suffix(
        &self,
        input: &Tensor<T>,
        cached: &[Tensor<T>],
        plan: &WidthPlan,
        mask: &MaskSpec,
    ) -> Result<Tensor<T>> {
        let outputs = self.eval_layers(input, plan, Some(mask), Some(cached))?;
        Ok(outputs.into_iter().last().unwrap())
    }

    fn eval_layers(
        &self,
        input: &Tensor<T>,
        plan: &WidthPlan,
        mask: Option<&MaskSpec>,
        cached: Option<&[Tensor<T>]>,
    ) -> Result<Vec<Tensor<T>>> {
        self.check_input(input, plan)?;
        let n = self.graph.layers.len();
        // With a cache, only layers downstream of a mask point recompute.
        let recompute: Vec<bool> = match (mask, cached) {
            (Some(m), Some(_)) => {
                let mut dirty = vec![false; n];
                let mut queue: Vec<usize> = m.points.iter().map(|(i, _)| *i).collect();
                for &q in &queue {
                    dirty[q] = true;
                }
                while let Some(q) = queue.pop() {
                    for &c in self.graph.consumers(q) {
                        if !dirty[c] {
                            dirty[c] = true;
                            queue.push(c);
                        }
                    }
                }
                dirty
            }
            _ => vec![true; n],
        };
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(n);
        for i in 0..n {
            if !recompute[i] {
                outputs.push(cached.unwrap()[i].clone());
                continue;
            }
            let spec = &self.graph.layers[i];
            let pred_idx: Vec<usize> = spec
                .predecessors
                .iter()
                .map(|p| self.graph.layer_index(p).unwrap())
                .collect();
            // A masked point that is itself upstream-clean starts from the
            // cached activation.
            let is_mask_source = mask
                .map(|m| m.points.iter().any(|(p, _)| *p == i))
                .unwrap_or(false);
            let upstream_clean = cached.is_some() && !pred_idx.iter().any(|&p| recompute[p]);
            let mut out = if is_mask_source && upstream_clean {
                cached.unwrap()[i].clone()
            } else {
                let inputs: Vec<&Tensor<T>> = if pred_idx.is_empty() {
                    vec![input]
                } else {
                    pred_idx
                        .iter()
                        .map(|&p| {
                            if recompute[p] || cached.is_none() {
                                &outputs[p]
                            } else {
                                &cached.unwrap()[p]
                            }
                        })
                        .collect()
                };
                self.eval_single(i, &inputs, plan)?
            };
            if let Some(m) = mask {
                if let Some((_, chans)) = m.points.iter().find(|(p, _)| *p == i) {
                    zero_channels(&mut out, chans);
                }
            }
            outputs.push(out);
        }
        Ok(outputs)
    }

    /// Recompute batchnorm running statistics from calibration batches at
    /// the plan's widths. Parameters are untouched. The sweep is topological:
    /// each bn's statistics are the exact aggregate mean and (biased)
    /// variance of its input over the whole calibration set, computed with
    /// all upstream bns already recalibrated — so a second call is a fixed
    /// point.
    pub fn recalibrate_bn(&mut self, batches: &[Tensor<T>], plan: &WidthPlan) -> Result<()> {
        if batches.is_empty() || batches.iter().any(|b| b.shape()[0] == 0) {
            return Err(PruneError::arg("recalibrate_bn", "empty calibration set"));
        }
        for b in batches {
            self.check_input(b, plan)?;
        }
        let n = self.graph.layers.len();
        // Per-batch activation frontier; tensors are freed once every
        // consumer has run.
        let mut acts: Vec<Vec<Option<Tensor<T>>>> =
            batches.iter().map(|_| (0..n).map(|_| None).collect()).collect();
        let mut pending: Vec<usize> = (0..n).map(|i| self.graph.consumers(i).len()).collect();

        for i in 0..n {
            let spec = self.graph.layers[i].clone();
            let pred_idx: Vec<usize> = spec
                .predecessors
                .iter()
                .map(|p| self.graph.layer_index(p).unwrap())
                .collect();
            if matches!(spec.kind, LayerKind::Batchnorm2d) {
                let c = plan.out_active[i];
                let mut sum = vec![0.0f64; c];
                let mut sumsq = vec![0.0f64; c];
                let mut count = 0.0f64;
                for (bi, batch) in batches.iter().enumerate() {
                    let x = match pred_idx.first() {
                        Some(&p) => acts[bi][p].as_ref().unwrap(),
                        None => batch,
                    };
                    let shape = x.shape();
                    let hw: usize = shape[2..].iter().product();
                    let data = x.data();
                    for ch in 0..c {
                        for s in 0..shape[0] {
                            let base = s * c * hw + ch * hw;
                            for v in &data[base..base + hw] {
                                let f = v.to_f64_lossy();
                                sum[ch] += f;
                                sumsq[ch] += f * f;
                            }
                        }
                    }
                    count += (shape[0] * hw) as f64;
                }
                let state = &mut self.layers[i];
                let rm = state.running_mean.as_mut().unwrap().data_mut();
                let rv = state.running_var.as_mut().unwrap().data_mut();
                for ch in 0..c {
                    let mean = sum[ch] / count;
                    rm[ch] = T::from_f64_lossy(mean);
                    rv[ch] = T::from_f64_lossy((sumsq[ch] / count - mean * mean).max(0.0));
                }
            }
            for (bi, batch) in batches.iter().enumerate() {
                let inputs: Vec<&Tensor<T>> = if pred_idx.is_empty() {
                    vec![batch]
                } else {
                    pred_idx.iter().map(|&p| acts[bi][p].as_ref().unwrap()).collect()
                };
                let out = self.eval_single(i, &inputs, plan)?;
                acts[bi][i] = Some(out);
            }
            for &p in &pred_idx {
                pending[p] -= 1;
                if pending[p] == 0 {
                    for a in acts.iter_mut() {
                        a[p] = None;
                    }
                }
            }
        }
        Ok(())
    }

    /// One layer's eval-mode output from explicit inputs.
    pub(crate) fn eval_single(
        &self,
        i: usize,
        inputs: &[&Tensor<T>],
        plan: &WidthPlan,
    ) -> Result<Tensor<T>> {
        let spec = &self.graph.layers[i];
        let state = &self.layers[i];
        let x = inputs[0];
        Ok(match spec.kind {
            LayerKind::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => {
                let d = conv_dims(spec, x, plan, i, kernel, stride, padding)?;
                let bias = state.params.get(1).map(|p| p.value.data()).unwrap_or(&[]);
                layers::conv2d_forward(x, state.params[0].value.data(), bias, &d)
            }
            LayerKind::Batchnorm2d => {
                let c = plan.out_active[i];
                expect_channels("batchnorm2d", &spec.id, x, c)?;
                let mut rm = state.running_mean.clone().unwrap();
                let mut rv = state.running_var.clone().unwrap();
                let cfg = BnConfig {
                    channels: c,
                    training: false,
                    momentum: self.bn_momentum,
                    eps: self.bn_eps,
                };
                layers::batchnorm_forward(
                    x,
                    state.params[0].value.data(),
                    state.params[1].value.data(),
                    rm.data_mut(),
                    rv.data_mut(),
                    &cfg,
                )
                .0
            }
            LayerKind::Relu => layers::relu_forward(x),
            LayerKind::Maxpool2d { kernel, stride } => layers::maxpool_forward(x, kernel, stride).0,
            LayerKind::AvgPoolGlobal => layers::global_avgpool_forward(x),
            LayerKind::Linear => layers::linear_forward(
                x,
                state.params[0].value.data(),
                state.params[1].value.data(),
                spec.in_channels,
                plan.in_active[i],
                plan.out_active[i],
            ),
            LayerKind::AddSkip => {
                let b = inputs[1];
                if x.shape() != b.shape() {
                    return Err(PruneError::shape(
                        format!("add-skip '{}'", spec.id),
                        format!("{:?}", x.shape()),
                        format!("{:?}", b.shape()),
                    ));
                }
                layers::add_forward(x, b)
            }
            LayerKind::ChannelGate => {
                layers::gate_forward(x, state.params[0].value.data(), plan.out_active[i])
            }
        })
    }
}

fn expect_channels<T: Scalar>(kind: &str, id: &str, x: &Tensor<T>, c: usize) -> Result<()> {
    if x.shape().len() < 2 || x.shape()[1] != c {
        return Err(PruneError::shape(
            format!("{kind} '{id}'"),
            format!("channels {c}"),
            format!("{:?}", x.shape()),
        ));
    }
    Ok(())
}

fn conv_dims<T: Scalar>(
    spec: &LayerSpec,
    x: &Tensor<T>,
    plan: &WidthPlan,
    i: usize,
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(PruneError::shape(
            format!("conv2d '{}'", spec.id),
            "[b, c, h, w]".to_string(),
            format!("{shape:?}"),
        ));
    }
    let d = ConvDims {
        batch: shape[0],
        ic: plan.in_active[i],
        oc: plan.out_active[i],
        icf: spec.in_channels,
        ocf: spec.out_channels,
        ih: shape[2],
        iw: shape[3],
        kh: kernel.0,
        kw: kernel.1,
        stride,
        pad: padding,
    };
    if shape[1] != d.ic {
        return Err(PruneError::shape(
            format!("conv2d '{}'", spec.id),
            format!("{} input channels", d.ic),
            format!("{}", shape[1]),
        ));
    }
    if d.ih + 2 * d.pad < d.kh || d.iw + 2 * d.pad < d.kw {
        return Err(PruneError::shape(
            format!("conv2d '{}'", spec.id),
            format!("spatial >= {}x{}", d.kh, d.kw),
            format!("{}x{}", d.ih, d.iw),
        ));
    }
    Ok(d)
}

fn zero_channels<T: Scalar>(t: &mut Tensor<T>, channels: &[usize]) {
    let shape = t.shape().to_vec();
    let (b, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let data = t.data_mut();
    for bi in 0..b {
        for &ch in channels {
            debug_assert!(ch < c);
            let base = bi * c * hw + ch * hw;
            data[base..base + hw].iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

fn init_layer<T: Scalar>(layer: &LayerSpec, rng: &mut impl Rng) -> LayerState<T> {
    match layer.kind {
        LayerKind::Conv2d { kernel, bias, .. } => {
            let (kh, kw) = kernel;
            let fan_in = (layer.in_channels * kh * kw) as f64;
            let std = (2.0 / fan_in).sqrt();
            let n = layer.out_channels * layer.in_channels * kh * kw;
            let data: Vec<T> = (0..n)
                .map(|_| {
                    let z: T = box_muller(rng);
                    z * T::from_f64_lossy(std)
                })
                .collect();
            let weight =
                Tensor::from_vec(&[layer.out_channels, layer.in_channels, kh, kw], data).unwrap();
            let mut params = vec![Parameter::new(weight)];
            if bias {
                params.push(Parameter::new(Tensor::zeros(&[layer.out_channels])));
            }
            LayerState {
                params,
                running_mean: None,
                running_var: None,
            }
        }
        LayerKind::Linear => {
            let fan_in = layer.in_channels as f64;
            let std = (2.0 / fan_in).sqrt();
            let n = layer.out_channels * layer.in_channels;
            let data: Vec<T> = (0..n)
                .map(|_| {
                    let z: T = box_muller(rng);
                    z * T::from_f64_lossy(std)
                })
                .collect();
            let weight = Tensor::from_vec(&[layer.out_channels, layer.in_channels], data).unwrap();
            let bias = Tensor::zeros(&[layer.out_channels]);
            LayerState {
                params: vec![Parameter::new(weight), Parameter::new(bias)],
                running_mean: None,
                running_var: None,
            }
        }
        LayerKind::Batchnorm2d => LayerState {
            params: vec![
                Parameter::new(Tensor::filled(&[layer.out_channels], T::one())),
                Parameter::new(Tensor::zeros(&[layer.out_channels])),
            ],
            running_mean: Some(Tensor::zeros(&[layer.out_channels])),
            running_var: Some(Tensor::filled(&[layer.out_channels], T::one())),
        },
        LayerKind::ChannelGate => LayerState {
            params: vec![Parameter::new(Tensor::filled(
                &[layer.out_channels],
                T::one(),
            ))],
            running_mean: None,
            running_var: None,
        },
        _ => LayerState::default(),
    }
}

/// A model with channel gates inserted after each batchnorm (or directly
/// after a conv with no following batchnorm), weights all ones.
pub struct InstrumentedModel<T: Scalar> {
    pub model: ModelInstance<T>,
    /// conv layer id -> gate layer id.
    pub gate_of_conv: BTreeMap<String, String>,
}

/// Instrument a model with unit channel gates. The gated model's forward
/// equals the original's exactly.
pub fn instrument_gates<T: Scalar>(model: &ModelInstance<T>) -> Result<InstrumentedModel<T>> {
    let graph = &model.graph;
    let mut gate_host: BTreeMap<String, String> = BTreeMap::new(); // host id -> conv id
    for &ci in &graph.conv_layers() {
        let conv_id = graph.layers[ci].id.clone();
        // Gate after the bn directly consuming the conv, if any.
        let host = graph
            .consumers(ci)
            .iter()
            .find(|&&c| matches!(graph.layers[c].kind, LayerKind::Batchnorm2d))
            .map(|&c| graph.layers[c].id.clone())
            .unwrap_or_else(|| conv_id.clone());
        gate_host.insert(host, conv_id);
    }

    let mut new_layers: Vec<LayerSpec> = Vec::new();
    let mut rename: BTreeMap<String, String> = BTreeMap::new(); // old output -> gate output
    let mut gate_of_conv = BTreeMap::new();
    for layer in &graph.layers {
        let mut spec = layer.clone();
        spec.predecessors = spec
            .predecessors
            .iter()
            .map(|p| rename.get(p).cloned().unwrap_or_else(|| p.clone()))
            .collect();
        let id = spec.id.clone();
        new_layers.push(spec);
        if let Some(conv_id) = gate_host.get(&id) {
            let gate_id = format!("{id}.gate");
            new_layers.push(LayerSpec {
                id: gate_id.clone(),
                kind: LayerKind::ChannelGate,
                in_channels: 0,
                out_channels: 0,
                predecessors: vec![id.clone()],
                coupling_group: None,
            });
            rename.insert(id, gate_id.clone());
            gate_of_conv.insert(conv_id.clone(), gate_id);
        }
    }
    let new_graph = ModelGraph::new(new_layers, graph.input_shape, graph.num_classes)?;
    let mut states = Vec::with_capacity(new_graph.layers.len());
    for layer in &new_graph.layers {
        if matches!(layer.kind, LayerKind::ChannelGate) {
            states.push(LayerState {
                params: vec![Parameter::new(Tensor::filled(
                    &[layer.out_channels],
                    T::one(),
                ))],
                running_mean: None,
                running_var: None,
            });
        } else {
            let old = graph.layer_index(&layer.id).expect("carried layer");
            states.push(model.layers[old].clone());
        }
    }
    Ok(InstrumentedModel {
        model: ModelInstance {
            graph: new_graph,
            layers: states,
            training: model.training,
            bn_momentum: model.bn_momentum,
            bn_eps: model.bn_eps,
        },
        gate_of_conv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, GraphPreset};
    use gradcheck::{gradient_check, input_gradient_check, GradCheckOptions};
    use rand::Rng;

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rng::stream(seed, "test-input");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn labels(batch: usize, classes: usize, seed: u64) -> Vec<usize> {
        let mut rng = rng::stream(seed, "test-labels");
        (0..batch).map(|_| rng.gen_range(0..classes)).collect()
    }

    /// Small graph exercising every layer kind: two coupled convs with bn,
    /// gate, relu, a skip add, max pooling, global pooling, and the linear
    /// head.
    fn all_kinds_graph() -> ModelGraph {
        crate::graph::graph_from_description(
            r#"
input_shape = [2, 8, 8]
num_classes = 3

[[layers]]
id = "conv1"
kind = "conv2d"
out_channels = 4
kernel = [3, 3]
stride = 1
padding = 1
bias = false

[[layers]]
id = "bn1"
kind = "batchnorm2d"
inputs = ["conv1"]

[[layers]]
id = "gate1"
kind = "channel-gate"
inputs = ["bn1"]

[[layers]]
id = "relu1"
kind = "relu"
inputs = ["gate1"]

[[layers]]
id = "conv2"
kind = "conv2d"
out_channels = 4
kernel = [3, 3]
stride = 1
padding = 1
bias = false
inputs = ["relu1"]

[[layers]]
id = "bn2"
kind = "batchnorm2d"
inputs = ["conv2"]

[[layers]]
id = "add"
kind = "add-skip"
inputs = ["bn2", "relu1"]

[[layers]]
id = "pool"
kind = "maxpool2d"
kernel = 2
stride = 2
inputs = ["add"]

[[layers]]
id = "gap"
kind = "avgpool-global"
inputs = ["pool"]

[[layers]]
id = "fc"
kind = "linear"
out_channels = 3
inputs = ["gap"]
"#,
        )
        .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences_all_layer_kinds() {
        let graph = all_kinds_graph();
        let input = rand_input(&[4, 2, 8, 8], 3);
        let lab = labels(4, 3, 4);
        for training in [true, false] {
            let mut model = ModelInstance::<f64>::new_random(&graph, 9);
            model.set_training(training);
            let err = gradient_check(
                &mut model,
                &input,
                &lab,
                &GradCheckOptions {
                    samples: 80,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(err < 1e-4, "training={training}: rel err {err}");
            let ierr = input_gradient_check(&mut model, &input, &lab, 40, 1e-5, 5).unwrap();
            assert!(ierr < 1e-4, "training={training}: input rel err {ierr}");
        }
    }

    #[test]
    fn biased_conv_without_bn_checks_out() {
        let graph = crate::graph::graph_from_description(
            r#"
input_shape = [2, 6, 6]
num_classes = 3

[[layers]]
id = "conv"
kind = "conv2d"
out_channels = 3
kernel = [3, 3]
stride = 1
padding = 0

[[layers]]
id = "relu"
kind = "relu"
inputs = ["conv"]

[[layers]]
id = "gap"
kind = "avgpool-global"
inputs = ["relu"]

[[layers]]
id = "fc"
kind = "linear"
out_channels = 3
inputs = ["gap"]
"#,
        )
        .unwrap();
        let mut model = ModelInstance::<f64>::new_random(&graph, 17);
        let input = rand_input(&[4, 2, 6, 6], 18);
        let lab = labels(4, 3, 19);
        let err = gradient_check(
            &mut model,
            &input,
            &lab,
            &GradCheckOptions {
                samples: 60,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn linear_only_model_is_tight() {
        let graph = build_graph(&GraphPreset::MlpProbe {
            hidden: 6,
            input_shape: (5, 1, 1),
            num_classes: 4,
        })
        .unwrap();
        let mut model = ModelInstance::<f64>::new_random(&graph, 1);
        let input = rand_input(&[8, 5, 1, 1], 2);
        let lab = labels(8, 4, 3);
        let err = gradient_check(
            &mut model,
            &input,
            &lab,
            &GradCheckOptions {
                samples: 200,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let graph = all_kinds_graph();
        let mut model = ModelInstance::<f64>::new_random(&graph, 9);
        let input = rand_input(&[4, 2, 8, 8], 3);
        let lab = labels(4, 3, 4);
        let err = gradient_check(
            &mut model,
            &input,
            &lab,
            &GradCheckOptions {
                samples: 40,
                analytic_scale: 2.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((err - 0.5).abs() < 0.05, "expected ~0.5, got {err}");
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let graph = build_graph(&GraphPreset::mini_resnet(8, 8)).unwrap();
        let input = rand_input(&[2, 3, 32, 32], 7).cast::<f32>();
        let plan = WidthPlan::full(&graph);
        let a = ModelInstance::<f32>::new_random(&graph, 42);
        let b = ModelInstance::<f32>::new_random(&graph, 42);
        let ya = a.infer(&input, &plan, None).unwrap();
        let yb = b.infer(&input, &plan, None).unwrap();
        assert_eq!(ya.data(), yb.data());
        // And gradients reproduce bitwise.
        let lab = labels(2, 10, 1);
        let mut a = a;
        let mut b = b;
        for m in [&mut a, &mut b] {
            let trace = m.forward_train(&input, &plan).unwrap();
            let (_, g) = loss::cross_entropy(trace.logits(), &lab).unwrap();
            m.backward(&trace, &g).unwrap();
        }
        for (la, lb) in a.layers.iter().zip(b.layers.iter()) {
            for (pa, pb) in la.params.iter().zip(lb.params.iter()) {
                assert_eq!(pa.grad.data(), pb.grad.data());
            }
        }
    }

    /// Eval-mode batchnorm is affine in its input given frozen statistics:
    /// f(a) + f(b) - f(a+b) == f(0).
    #[test]
    fn bn_eval_mode_is_affine() {
        let gamma = vec![1.3f64, 0.7, -0.4];
        let beta = vec![0.2f64, -1.0, 0.05];
        let mut rm = vec![0.3f64, -0.2, 1.1];
        let mut rv = vec![0.9f64, 2.0, 0.5];
        let cfg = layers::BnConfig {
            channels: 3,
            training: false,
            momentum: 0.1,
            eps: 1e-5,
        };
        let a = rand_input(&[2, 3, 4, 4], 21);
        let b = rand_input(&[2, 3, 4, 4], 22);
        let mut ab = a.clone();
        ab.add_assign(&b);
        let zero = Tensor::zeros(&[2, 3, 4, 4]);
        let run = |x: &Tensor<f64>, rm: &mut Vec<f64>, rv: &mut Vec<f64>| {
            layers::batchnorm_forward(x, &gamma, &beta, rm, rv, &cfg).0
        };
        let fa = run(&a, &mut rm, &mut rv);
        let fb = run(&b, &mut rm, &mut rv);
        let fab = run(&ab, &mut rm, &mut rv);
        let f0 = run(&zero, &mut rm, &mut rv);
        for i in 0..fa.len() {
            let lhs = fa.data()[i] + fb.data()[i] - fab.data()[i];
            assert!((lhs - f0.data()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn unit_gate_is_identity() {
        let x = rand_input(&[2, 5, 3, 3], 8);
        let out = layers::gate_forward(&x, &[1.0f64; 5], 5);
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn instrumented_model_matches_original() {
        let graph = build_graph(&GraphPreset::mini_resnet(8, 8)).unwrap();
        let model = ModelInstance::<f32>::new_random(&graph, 5);
        let inst = instrument_gates(&model).unwrap();
        // One gate per conv, attached behind its batchnorm.
        assert_eq!(inst.gate_of_conv.len(), graph.conv_layers().len());
        let input = rand_input(&[2, 3, 32, 32], 6).cast::<f32>();
        let y0 = model
            .infer(&input, &WidthPlan::full(&graph), None)
            .unwrap();
        let y1 = inst
            .model
            .infer(&input, &WidthPlan::full(&inst.model.graph), None)
            .unwrap();
        assert_eq!(y0.data(), y1.data());
    }

    #[test]
    fn recalibrated_stats_match_dataset_statistics() {
        let graph = all_kinds_graph();
        let mut model = ModelInstance::<f64>::new_random(&graph, 31);
        let plan = WidthPlan::full(&graph);
        let batches: Vec<Tensor<f64>> =
            (0..4).map(|i| rand_input(&[6, 2, 8, 8], 100 + i)).collect();
        model.recalibrate_bn(&batches, &plan).unwrap();

        // Direct statistics oracle for the first bn: its input is conv1's
        // output, whose weights recalibration never touches.
        let bn1 = graph.layer_index("bn1").unwrap();
        let conv1 = graph.layer_index("conv1").unwrap();
        let mut sums = vec![0.0f64; 4];
        let mut sqs = vec![0.0f64; 4];
        let mut count = 0.0;
        for batch in &batches {
            let outs = model.infer_all(batch, &plan).unwrap();
            let x = &outs[conv1];
            let hw = 64;
            for ch in 0..4 {
                for b in 0..x.shape()[0] {
                    for v in &x.data()[b * 4 * hw + ch * hw..b * 4 * hw + (ch + 1) * hw] {
                        sums[ch] += v;
                        sqs[ch] += v * v;
                    }
                }
            }
            count += (x.shape()[0] * hw) as f64;
        }
        let rm = model.layers[bn1].running_mean.as_ref().unwrap().data();
        let rv = model.layers[bn1].running_var.as_ref().unwrap().data();
        for ch in 0..4 {
            let mean = sums[ch] / count;
            let var = sqs[ch] / count - mean * mean;
            assert!((rm[ch] - mean).abs() < 1e-4, "mean ch{ch}");
            assert!((rv[ch] - var).abs() < 1e-4, "var ch{ch}");
        }

        // Idempotence: a second sweep is a fixed point.
        let before: Vec<Vec<f64>> = model
            .layers
            .iter()
            .filter_map(|l| l.running_mean.as_ref().map(|t| t.data().to_vec()))
            .collect();
        let weights_before: Vec<f64> = model.layers[conv1].params[0].value.data().to_vec();
        model.recalibrate_bn(&batches, &plan).unwrap();
        let after: Vec<Vec<f64>> = model
            .layers
            .iter()
            .filter_map(|l| l.running_mean.as_ref().map(|t| t.data().to_vec()))
            .collect();
        for (b, a) in before.iter().zip(after.iter()) {
            for (x, y) in b.iter().zip(a.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        // Weights untouched bit for bit.
        assert_eq!(weights_before, model.layers[conv1].params[0].value.data());
    }

    #[test]
    fn masking_zeroes_post_activation_channels() {
        let graph = all_kinds_graph();
        let model = ModelInstance::<f64>::new_random(&graph, 13);
        let plan = WidthPlan::full(&graph);
        let input = rand_input(&[2, 2, 8, 8], 14);
        let conv1 = graph.layer_index("conv1").unwrap();
        // conv1's elementwise chain is bn1 -> gate1 -> relu1, but relu1 has
        // two consumers... the chain stops where consumption forks.
        let mp = graph.mask_point(conv1);
        let mask = MaskSpec {
            points: vec![(mp, vec![1, 3])],
        };
        let full = model.infer_all(&input, &plan).unwrap();
        let masked = model
            .infer_suffix(&input, &full, &plan, &mask)
            .unwrap();
        let direct = model.infer(&input, &plan, Some(&mask)).unwrap();
        assert_eq!(masked.data(), direct.data());
        // And the mask changes the logits (those channels carry signal).
        assert_ne!(masked.data(), full.last().unwrap().data());
    }
}
