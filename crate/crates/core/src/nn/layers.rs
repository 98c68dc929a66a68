//! Layer kernels: forward and backward passes.
//!
//! Kernels read parameters from full-size buffers through explicit active
//! dimensions, so a weight-shared slimmable model can run any leading-channel
//! sub-width without copying. Activations are always allocated at the active
//! size. Batch-level parallelism uses fixed per-sample work items, so results
//! are bitwise identical for any worker count; all cross-batch reductions run
//! sequentially in canonical order.

use crate::parallel;
use crate::tensor::{Scalar, Tensor};

/// Geometry of one conv application.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    /// Active input/output channels.
    pub ic: usize,
    pub oc: usize,
    /// Full (allocated) input/output channels of the weight buffer.
    pub icf: usize,
    pub ocf: usize,
    pub ih: usize,
    pub iw: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.ih + 2 * self.pad - self.kh) / self.stride + 1,
            (self.iw + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }
}

fn im2col<T: Scalar>(input: &[T], d: &ConvDims, cols: &mut [T]) {
    let (oh, ow) = d.out_hw();
    let n = oh * ow;
    debug_assert_eq!(cols.len(), d.ic * d.kh * d.kw * n);
    let mut k = 0;
    for ic in 0..d.ic {
        let plane = &input[ic * d.ih * d.iw..(ic + 1) * d.ih * d.iw];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &mut cols[k * n..(k + 1) * n];
                let mut pos = 0;
                for oy in 0..oh {
                    let y = (oy * d.stride + ky) as isize - d.pad as isize;
                    if y < 0 || y >= d.ih as isize {
                        for _ in 0..ow {
                            row[pos] = T::zero();
                            pos += 1;
                        }
                        continue;
                    }
                    let line = &plane[y as usize * d.iw..(y as usize + 1) * d.iw];
                    for ox in 0..ow {
                        let x = (ox * d.stride + kx) as isize - d.pad as isize;
                        row[pos] = if x < 0 || x >= d.iw as isize {
                            T::zero()
                        } else {
                            line[x as usize]
                        };
                        pos += 1;
                    }
                }
                k += 1;
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], d: &ConvDims, input_grad: &mut [T]) {
    let (oh, ow) = d.out_hw();
    let n = oh * ow;
    let mut k = 0;
    for ic in 0..d.ic {
        let plane = &mut input_grad[ic * d.ih * d.iw..(ic + 1) * d.ih * d.iw];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &cols[k * n..(k + 1) * n];
                let mut pos = 0;
                for oy in 0..oh {
                    let y = (oy * d.stride + ky) as isize - d.pad as isize;
                    if y < 0 || y >= d.ih as isize {
                        pos += ow;
                        continue;
                    }
                    let line = &mut plane[y as usize * d.iw..(y as usize + 1) * d.iw];
                    for ox in 0..ow {
                        let x = (ox * d.stride + kx) as isize - d.pad as isize;
                        if x >= 0 && (x as usize) < d.iw {
                            line[x as usize] += row[pos];
                        }
                        pos += 1;
                    }
                }
                k += 1;
            }
        }
    }
}

/// weight: full [ocf, icf, kh, kw]; bias: full [ocf]; input: [batch, ic, ih, iw].
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    d: &ConvDims,
) -> Tensor<T> {
    let (oh, ow) = d.out_hw();
    let n = oh * ow;
    let k = d.ic * d.kh * d.kw;
    let wrow = d.icf * d.kh * d.kw;
    let in_len = d.ic * d.ih * d.iw;
    let out_len = d.oc * n;
    let mut out = Tensor::zeros(&[d.batch, d.oc, oh, ow]);
    let in_data = input.data();
    parallel::for_each_chunk(out.data_mut(), out_len, |b, out_b| {
        let mut cols = vec![T::zero(); k * n];
        im2col(&in_data[b * in_len..(b + 1) * in_len], d, &mut cols);
        if !bias.is_empty() {
            for oc in 0..d.oc {
                let bv = bias[oc];
                out_b[oc * n..(oc + 1) * n].iter_mut().for_each(|x| *x = bv);
            }
        }
        unsafe {
            T::gemm(
                d.oc,
                k,
                n,
                T::one(),
                weight.as_ptr(),
                wrow as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                T::one(),
                out_b.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
    out
}

/// Returns the input gradient; accumulates into `weight_grad`/`bias_grad`
/// (full-size buffers, active slices touched only).
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    out_grad: &Tensor<T>,
    d: &ConvDims,
    weight_grad: &mut [T],
    bias_grad: &mut [T],
) -> Tensor<T> {
    let (oh, ow) = d.out_hw();
    let n = oh * ow;
    let k = d.ic * d.kh * d.kw;
    let wrow = d.icf * d.kh * d.kw;
    let in_len = d.ic * d.ih * d.iw;
    let out_len = d.oc * n;
    let g = out_grad.data();
    let in_data = input.data();

    let mut input_grad = Tensor::zeros(&[d.batch, d.ic, d.ih, d.iw]);
    parallel::for_each_chunk(input_grad.data_mut(), in_len, |b, din_b| {
        // dcols = W^T (oc x K)^T * g_b (oc x n)
        let mut dcols = vec![T::zero(); k * n];
        unsafe {
            T::gemm(
                k,
                d.oc,
                n,
                T::one(),
                weight.as_ptr(),
                1,
                wrow as isize,
                g[b * out_len..(b + 1) * out_len].as_ptr(),
                n as isize,
                1,
                T::zero(),
                dcols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        col2im_add(&dcols, d, din_b);
    });

    // Per-sample weight/bias contributions, reduced in batch order.
    let want_bias = !bias_grad.is_empty();
    let parts: Vec<(Vec<T>, Vec<T>)> = parallel::map_indexed(d.batch, |b| {
        let mut cols = vec![T::zero(); k * n];
        im2col(&in_data[b * in_len..(b + 1) * in_len], d, &mut cols);
        let g_b = &g[b * out_len..(b + 1) * out_len];
        let mut wpart = vec![T::zero(); d.oc * k];
        unsafe {
            T::gemm(
                d.oc,
                n,
                k,
                T::one(),
                g_b.as_ptr(),
                n as isize,
                1,
                cols.as_ptr(),
                1,
                n as isize,
                T::zero(),
                wpart.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        let mut bpart = Vec::new();
        if want_bias {
            bpart = vec![T::zero(); d.oc];
            for oc in 0..d.oc {
                let mut s = 0.0f64;
                for v in &g_b[oc * n..(oc + 1) * n] {
                    s += v.to_f64_lossy();
                }
                bpart[oc] = T::from_f64_lossy(s);
            }
        }
        (wpart, bpart)
    });
    for (wpart, bpart) in &parts {
        for oc in 0..d.oc {
            let dst = &mut weight_grad[oc * wrow..oc * wrow + k];
            let src = &wpart[oc * k..(oc + 1) * k];
            for (a, b) in dst.iter_mut().zip(src) {
                *a += *b;
            }
            if !bias_grad.is_empty() {
                bias_grad[oc] += bpart[oc];
            }
        }
    }
    input_grad
}

/// Saved batchnorm state for the backward pass.
#[derive(Clone, Debug)]
pub struct BnAux<T: Scalar> {
    pub mean: Vec<T>,
    pub invstd: Vec<T>,
    /// Whether normalization used batch statistics (training) or running
    /// statistics (eval).
    pub batch_stats: bool,
}

pub struct BnConfig<T: Scalar> {
    pub channels: usize,
    pub training: bool,
    pub momentum: T,
    pub eps: T,
}

/// gamma/beta/running stats are full-size; the leading `channels` entries
/// are used (and, in training, the only running entries updated).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    cfg: &BnConfig<T>,
) -> (Tensor<T>, BnAux<T>) {
    let shape = input.shape();
    let (b, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    debug_assert_eq!(c, cfg.channels);
    let plane = c * hw;
    let count = (b * hw) as f64;

    let (mean, invstd): (Vec<T>, Vec<T>) = if cfg.training {
        let stats: Vec<(T, T, T)> = parallel::map_indexed(c, |ch| {
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            let data = input.data();
            for bi in 0..b {
                let base = bi * plane + ch * hw;
                for v in &data[base..base + hw] {
                    let x = v.to_f64_lossy();
                    sum += x;
                    sumsq += x * x;
                }
            }
            let m = sum / count;
            let var = (sumsq / count - m * m).max(0.0);
            (
                T::from_f64_lossy(m),
                T::from_f64_lossy(1.0 / (var + cfg.eps.to_f64_lossy()).sqrt()),
                T::from_f64_lossy(var),
            )
        });
        let one = T::one();
        for (ch, (m, _, var)) in stats.iter().enumerate() {
            running_mean[ch] = (one - cfg.momentum) * running_mean[ch] + cfg.momentum * *m;
            running_var[ch] = (one - cfg.momentum) * running_var[ch] + cfg.momentum * *var;
        }
        (
            stats.iter().map(|s| s.0).collect(),
            stats.iter().map(|s| s.1).collect(),
        )
    } else {
        (
            running_mean[..c].to_vec(),
            running_var[..c]
                .iter()
                .map(|&v| T::from_f64_lossy(1.0 / (v.to_f64_lossy() + cfg.eps.to_f64_lossy()).sqrt()))
                .collect(),
        )
    };

    let mut out = Tensor::zeros(shape);
    {
        let data = input.data();
        parallel::for_each_chunk(out.data_mut(), plane, |bi, out_b| {
            for ch in 0..c {
                let scale = gamma[ch] * invstd[ch];
                let shift = beta[ch] - scale * mean[ch];
                let src = &data[bi * plane + ch * hw..bi * plane + (ch + 1) * hw];
                let dst = &mut out_b[ch * hw..(ch + 1) * hw];
                for (o, x) in dst.iter_mut().zip(src) {
                    *o = scale * *x + shift;
                }
            }
        });
    }
    (
        out,
        BnAux {
            mean,
            invstd,
            batch_stats: cfg.training,
        },
    )
}

/// Returns input gradient; accumulates into gamma/beta grads.
pub fn batchnorm_backward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    aux: &BnAux<T>,
    out_grad: &Tensor<T>,
    gamma_grad: &mut [T],
    beta_grad: &mut [T],
) -> Tensor<T> {
    let shape = input.shape();
    let (b, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let plane = c * hw;
    let n = (b * hw) as f64;

    // Per-channel sums of dy and dy * xhat, sequential over the batch.
    let sums: Vec<(f64, f64)> = parallel::map_indexed(c, |ch| {
        let x = input.data();
        let g = out_grad.data();
        let m = aux.mean[ch].to_f64_lossy();
        let istd = aux.invstd[ch].to_f64_lossy();
        let mut s_dy = 0.0f64;
        let mut s_dyx = 0.0f64;
        for bi in 0..b {
            let base = bi * plane + ch * hw;
            for i in base..base + hw {
                let dy = g[i].to_f64_lossy();
                let xh = (x[i].to_f64_lossy() - m) * istd;
                s_dy += dy;
                s_dyx += dy * xh;
            }
        }
        (s_dy, s_dyx)
    });
    for ch in 0..c {
        gamma_grad[ch] += T::from_f64_lossy(sums[ch].1);
        beta_grad[ch] += T::from_f64_lossy(sums[ch].0);
    }

    let mut input_grad = Tensor::zeros(shape);
    {
        let x = input.data();
        let g = out_grad.data();
        parallel::for_each_chunk(input_grad.data_mut(), plane, |bi, din_b| {
            for ch in 0..c {
                let m = aux.mean[ch].to_f64_lossy();
                let istd = aux.invstd[ch].to_f64_lossy();
                let gm = gamma[ch].to_f64_lossy();
                let (s_dy, s_dyx) = sums[ch];
                for i in 0..hw {
                    let idx = bi * plane + ch * hw + i;
                    let dy = g[idx].to_f64_lossy();
                    let d = if aux.batch_stats {
                        let xh = (x[idx].to_f64_lossy() - m) * istd;
                        gm * istd * (dy - s_dy / n - xh * s_dyx / n)
                    } else {
                        gm * istd * dy
                    };
                    din_b[ch * hw + i] = T::from_f64_lossy(d);
                }
            }
        });
    }
    input_grad
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|x| {
        if *x < T::zero() {
            *x = T::zero();
        }
    });
    out
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, out_grad: &Tensor<T>) -> Tensor<T> {
    let mut din = out_grad.clone();
    for (d, x) in din.data_mut().iter_mut().zip(input.data()) {
        if *x <= T::zero() {
            *d = T::zero();
        }
    }
    din
}

/// Max pooling; returns per-output argmax (input linear index within the
/// sample) for the backward scatter. Ties keep the first maximum in scan
/// order.
pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> (Tensor<T>, Vec<u32>) {
    let shape = input.shape();
    let (b, c, ih, iw) = (shape[0], shape[1], shape[2], shape[3]);
    let oh = (ih - kernel) / stride + 1;
    let ow = (iw - kernel) / stride + 1;
    let in_len = c * ih * iw;
    let out_len = c * oh * ow;
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut argmax = vec![0u32; b * out_len];
    let data = input.data();
    // Two fixed-chunk passes keep writes disjoint.
    parallel::for_each_chunk(out.data_mut(), out_len, |bi, out_b| {
        for ch in 0..c {
            let plane = &data[bi * in_len + ch * ih * iw..bi * in_len + (ch + 1) * ih * iw];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let v = plane[(oy * stride + ky) * iw + (ox * stride + kx)];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out_b[ch * oh * ow + oy * ow + ox] = best;
                }
            }
        }
    });
    parallel::for_each_chunk(&mut argmax, out_len, |bi, am_b| {
        for ch in 0..c {
            let plane = &data[bi * in_len + ch * ih * iw..bi * in_len + (ch + 1) * ih * iw];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_at = 0usize;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let at = (oy * stride + ky) * iw + (ox * stride + kx);
                            if plane[at] > best {
                                best = plane[at];
                                best_at = at;
                            }
                        }
                    }
                    am_b[ch * oh * ow + oy * ow + ox] = (ch * ih * iw + best_at) as u32;
                }
            }
        }
    });
    (out, argmax)
}

pub fn maxpool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    out_grad: &Tensor<T>,
) -> Tensor<T> {
    let (b, c, ih, iw) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let in_len = c * ih * iw;
    let out_len = out_grad.len() / b;
    let g = out_grad.data();
    let mut din = Tensor::zeros(input_shape);
    parallel::for_each_chunk(din.data_mut(), in_len, |bi, din_b| {
        let am = &argmax[bi * out_len..(bi + 1) * out_len];
        let gb = &g[bi * out_len..(bi + 1) * out_len];
        for (i, &at) in am.iter().enumerate() {
            din_b[at as usize] += gb[i];
        }
    });
    din
}

/// Global average pool: [b, c, h, w] -> [b, c].
pub fn global_avgpool_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let shape = input.shape();
    let (b, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let data = input.data();
    let mut out = Tensor::zeros(&[b, c]);
    parallel::for_each_chunk(out.data_mut(), c, |bi, out_b| {
        for ch in 0..c {
            let base = bi * c * hw + ch * hw;
            let mut s = 0.0f64;
            for v in &data[base..base + hw] {
                s += v.to_f64_lossy();
            }
            out_b[ch] = T::from_f64_lossy(s / hw as f64);
        }
    });
    out
}

pub fn global_avgpool_backward<T: Scalar>(input_shape: &[usize], out_grad: &Tensor<T>) -> Tensor<T> {
    let c = input_shape[1];
    let hw: usize = input_shape[2..].iter().product();
    let g = out_grad.data();
    let mut din = Tensor::zeros(input_shape);
    let scale = T::from_f64_lossy(1.0 / hw as f64);
    parallel::for_each_chunk(din.data_mut(), c * hw, |bi, din_b| {
        for ch in 0..c {
            let gv = g[bi * c + ch] * scale;
            din_b[ch * hw..(ch + 1) * hw].iter_mut().for_each(|x| *x = gv);
        }
    });
    din
}

/// weight: full [off, iff]; input [b, if_act] -> out [b, of_act].
pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    iff: usize,
    if_act: usize,
    of_act: usize,
) -> Tensor<T> {
    let b = input.shape()[0];
    let mut out = Tensor::zeros(&[b, of_act]);
    {
        let o = out.data_mut();
        for bi in 0..b {
            o[bi * of_act..(bi + 1) * of_act].copy_from_slice(&bias[..of_act]);
        }
        if if_act > 0 {
            unsafe {
                T::gemm(
                    b,
                    if_act,
                    of_act,
                    T::one(),
                    input.data().as_ptr(),
                    if_act as isize,
                    1,
                    weight.as_ptr(),
                    1,
                    iff as isize,
                    T::one(),
                    o.as_mut_ptr(),
                    of_act as isize,
                    1,
                );
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    out_grad: &Tensor<T>,
    iff: usize,
    if_act: usize,
    of_act: usize,
    weight_grad: &mut [T],
    bias_grad: &mut [T],
) -> Tensor<T> {
    let b = input.shape()[0];
    let mut din = Tensor::zeros(&[b, if_act]);
    if if_act > 0 {
        unsafe {
            // din = g * W
            T::gemm(
                b,
                of_act,
                if_act,
                T::one(),
                out_grad.data().as_ptr(),
                of_act as isize,
                1,
                weight.as_ptr(),
                iff as isize,
                1,
                T::zero(),
                din.data_mut().as_mut_ptr(),
                if_act as isize,
                1,
            );
            // dW += g^T * input
            T::gemm(
                of_act,
                b,
                if_act,
                T::one(),
                out_grad.data().as_ptr(),
                1,
                of_act as isize,
                input.data().as_ptr(),
                if_act as isize,
                1,
                T::one(),
                weight_grad.as_mut_ptr(),
                iff as isize,
                1,
            );
        }
    }
    let g = out_grad.data();
    for of in 0..of_act {
        let mut s = 0.0f64;
        for bi in 0..b {
            s += g[bi * of_act + of].to_f64_lossy();
        }
        bias_grad[of] += T::from_f64_lossy(s);
    }
    din
}

pub fn add_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = a.clone();
    out.add_assign(b);
    out
}

/// Per-channel gate: out[b, c, ...] = w[c] * x[b, c, ...]. `weight` is the
/// full buffer; the leading `channels` entries apply.
pub fn gate_forward<T: Scalar>(input: &Tensor<T>, weight: &[T], channels: usize) -> Tensor<T> {
    let shape = input.shape();
    let hw: usize = shape[2..].iter().product();
    let plane = channels * hw;
    let data = input.data();
    let mut out = Tensor::zeros(shape);
    parallel::for_each_chunk(out.data_mut(), plane, |bi, out_b| {
        for ch in 0..channels {
            let w = weight[ch];
            let src = &data[bi * plane + ch * hw..bi * plane + (ch + 1) * hw];
            for (o, x) in out_b[ch * hw..(ch + 1) * hw].iter_mut().zip(src) {
                *o = w * *x;
            }
        }
    });
    out
}

pub fn gate_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    channels: usize,
    out_grad: &Tensor<T>,
    weight_grad: &mut [T],
) -> Tensor<T> {
    let shape = input.shape();
    let b = shape[0];
    let hw: usize = shape[2..].iter().product();
    let plane = channels * hw;
    let x = input.data();
    let g = out_grad.data();
    let sums: Vec<f64> = parallel::map_indexed(channels, |ch| {
        let mut s = 0.0f64;
        for bi in 0..b {
            let base = bi * plane + ch * hw;
            for i in base..base + hw {
                s += g[i].to_f64_lossy() * x[i].to_f64_lossy();
            }
        }
        s
    });
    for ch in 0..channels {
        weight_grad[ch] += T::from_f64_lossy(sums[ch]);
    }
    let mut din = Tensor::zeros(shape);
    parallel::for_each_chunk(din.data_mut(), plane, |bi, din_b| {
        for ch in 0..channels {
            let w = weight[ch];
            let src = &g[bi * plane + ch * hw..bi * plane + (ch + 1) * hw];
            for (o, gv) in din_b[ch * hw..(ch + 1) * hw].iter_mut().zip(src) {
                *o = w * *gv;
            }
        }
    });
    din
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_matches_definition() {
        let t = Tensor::from_vec(&[1, 3], vec![-1.0f32, 2.0, 0.0]).unwrap();
        let out = relu_forward(&t);
        assert_eq!(out.data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let d = ConvDims {
            batch: 2,
            ic: 1,
            oc: 1,
            icf: 1,
            ocf: 1,
            ih: 4,
            iw: 4,
            kh: 1,
            kw: 1,
            stride: 1,
            pad: 0,
        };
        let input =
            Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(|i| i as f32 * 0.25 - 3.0).collect())
                .unwrap();
        let out = conv2d_forward(&input, &[1.0f32], &[0.0f32], &d);
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv_matches_direct_convolution() {
        // Direct 7-loop convolution as the oracle.
        let d = ConvDims {
            batch: 2,
            ic: 3,
            oc: 4,
            icf: 3,
            ocf: 4,
            ih: 5,
            iw: 6,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
        };
        let (oh, ow) = d.out_hw();
        let mut state = 1u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f64 / (1u64 << 31) as f64 - 1.0) as f32
        };
        let input = Tensor::from_vec(
            &[2, 3, 5, 6],
            (0..2 * 3 * 5 * 6).map(|_| next()).collect(),
        )
        .unwrap();
        let weight: Vec<f32> = (0..4 * 3 * 9).map(|_| next()).collect();
        let bias: Vec<f32> = (0..4).map(|_| next()).collect();
        let out = conv2d_forward(&input, &weight, &bias, &d);
        for b in 0..2 {
            for oc in 0..4 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[oc] as f64;
                        for ic in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let y = (oy * 2 + ky) as isize - 1;
                                    let x = (ox * 2 + kx) as isize - 1;
                                    if y >= 0 && y < 5 && x >= 0 && x < 6 {
                                        let iv = input.data()
                                            [((b * 3 + ic) * 5 + y as usize) * 6 + x as usize];
                                        let wv = weight[((oc * 3 + ic) * 3 + ky) * 3 + kx];
                                        acc += (iv * wv) as f64;
                                    }
                                }
                            }
                        }
                        let got = out.data()[((b * 4 + oc) * oh + oy) * ow + ox] as f64;
                        assert!((got - acc).abs() < 1e-4, "b{b} oc{oc} {oy},{ox}");
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let input = Tensor::from_vec(
            &[1, 1, 2, 2],
            vec![1.0f32, 5.0, 3.0, 2.0],
        )
        .unwrap();
        let (out, argmax) = maxpool_forward(&input, 2, 2);
        assert_eq!(out.data(), &[5.0]);
        assert_eq!(argmax, vec![1]);
        let g = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0f32]).unwrap();
        let din = maxpool_backward(&[1, 1, 2, 2], &argmax, &g);
        assert_eq!(din.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
