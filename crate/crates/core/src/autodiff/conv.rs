//! 2D convolution kernels: forward and backward passes.
//!
//! The hot loops are organised per kernel tap: for each (channel, kh, kw)
//! the contribution is a scaled row accumulation, which keeps the innermost
//! loop contiguous at stride 1 and lets the compiler vectorise it. Batches
//! above a small work threshold run plane-parallel; every plane is written
//! by exactly one job and cross-plane sums run in a fixed order, so results
//! are bit-identical at any worker count.

use rayon::prelude::*;

use crate::{Error, Result};

use super::{Scalar, Tensor};

/// Output extent for one spatial dimension; the division must be exact.
fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = input + 2 * pad;
    if k > span {
        return Err(Error::Dimension(format!(
            "kernel extent {k} exceeds padded input extent {span}"
        )));
    }
    if (span - k) % stride != 0 {
        return Err(Error::Dimension(format!(
            "padded input extent {span} minus kernel {k} is not divisible by stride {stride}"
        )));
    }
    Ok((span - k) / stride + 1)
}

/// First output index whose receptive field starts inside the input.
fn o_lo(k: usize, pad: usize, stride: usize) -> usize {
    if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    }
}

/// Last output index (inclusive) whose receptive field stays inside the
/// input, or `None` when no index is valid.
fn o_hi(input: usize, out: usize, k: usize, pad: usize, stride: usize) -> Option<usize> {
    // largest o with o*stride + k - pad <= input - 1
    let top = input - 1 + pad;
    if k > top {
        return None;
    }
    Some(((top - k) / stride).min(out - 1))
}

pub(super) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(super) fn conv_dims<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if stride == 0 {
        return Err(Error::Dimension("stride must be positive".into()));
    }
    let (n, c_in, h, w) = input.dims4()?;
    let (c_out, kc, kh, kw) = kernel.dims4()?;
    if kc != c_in {
        return Err(Error::Dimension(format!(
            "kernel expects {kc} input channels, input has {c_in}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::Dimension(format!(
            "bias shape {:?} does not match {c_out} output channels",
            bias.shape()
        )));
    }
    let oh = out_extent(h, kh, stride, pad)?;
    let ow = out_extent(w, kw, stride, pad)?;
    Ok(ConvDims { n, c_in, h, w, c_out, kh, kw, oh, ow, stride, pad })
}

/// Work size below which plane-parallel dispatch is not worth the overhead.
const PAR_THRESHOLD: usize = 1 << 14;

fn for_each_plane<S: Scalar>(
    out: &mut [S],
    plane: usize,
    total_work: usize,
    body: impl Fn(usize, &mut [S]) + Sync + Send,
) {
    if total_work >= PAR_THRESHOLD && out.len() / plane > 1 {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, chunk)| body(i, chunk));
    } else {
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            body(i, chunk);
        }
    }
}

/// Forward convolution with zero padding.
pub(super) fn forward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    d: &ConvDims,
) -> Tensor<S> {
    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    let (oh, ow) = (d.oh, d.ow);
    let out_plane = oh * ow;
    let in_plane = d.h * d.w;
    let mut out = vec![S::zero(); d.n * d.c_out * out_plane];
    let work = out.len() * d.c_in * d.kh * d.kw;

    for_each_plane(&mut out, out_plane, work, |idx, plane| {
        let n = idx / d.c_out;
        let f = idx % d.c_out;
        plane.fill(b[f]);
        let x_batch = &x[n * d.c_in * in_plane..(n + 1) * d.c_in * in_plane];
        for c in 0..d.c_in {
            let x_chan = &x_batch[c * in_plane..(c + 1) * in_plane];
            for kh in 0..d.kh {
                let Some(oh_hi) = o_hi(d.h, oh, kh, d.pad, d.stride) else { continue };
                for kw in 0..d.kw {
                    let wgt = k[((f * d.c_in + c) * d.kh + kh) * d.kw + kw];
                    if wgt == S::zero() {
                        continue;
                    }
                    let Some(ow_hi) = o_hi(d.w, ow, kw, d.pad, d.stride) else { continue };
                    let (ow_lo, oh_lo) = (o_lo(kw, d.pad, d.stride), o_lo(kh, d.pad, d.stride));
                    for r in oh_lo..=oh_hi {
                        let ih = r * d.stride + kh - d.pad;
                        let x_row = &x_chan[ih * d.w..(ih + 1) * d.w];
                        let out_row = &mut plane[r * ow..(r + 1) * ow];
                        for o in ow_lo..=ow_hi {
                            let iw = o * d.stride + kw - d.pad;
                            out_row[o] = out_row[o] + wgt * x_row[iw];
                        }
                    }
                }
            }
        }
    });

    Tensor::new(vec![d.n, d.c_out, oh, ow], out).expect("conv output shape")
}

/// Gradient with respect to the convolution input.
pub(super) fn backward_input<S: Scalar>(
    kernel: &Tensor<S>,
    grad_out: &[S],
    d: &ConvDims,
) -> Vec<S> {
    let k = kernel.data();
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let mut grad_in = vec![S::zero(); d.n * d.c_in * in_plane];
    let work = grad_out.len() * d.c_in * d.kh * d.kw;

    for_each_plane(&mut grad_in, in_plane, work, |idx, plane| {
        let n = idx / d.c_in;
        let c = idx % d.c_in;
        for f in 0..d.c_out {
            let g_plane = &grad_out[(n * d.c_out + f) * out_plane..(n * d.c_out + f + 1) * out_plane];
            for kh in 0..d.kh {
                let Some(oh_hi) = o_hi(d.h, d.oh, kh, d.pad, d.stride) else { continue };
                for kw in 0..d.kw {
                    let wgt = k[((f * d.c_in + c) * d.kh + kh) * d.kw + kw];
                    if wgt == S::zero() {
                        continue;
                    }
                    let Some(ow_hi) = o_hi(d.w, d.ow, kw, d.pad, d.stride) else { continue };
                    let (ow_lo, oh_lo) = (o_lo(kw, d.pad, d.stride), o_lo(kh, d.pad, d.stride));
                    for r in oh_lo..=oh_hi {
                        let ih = r * d.stride + kh - d.pad;
                        let g_row = &g_plane[r * d.ow..(r + 1) * d.ow];
                        let in_row = &mut plane[ih * d.w..(ih + 1) * d.w];
                        for o in ow_lo..=ow_hi {
                            let iw = o * d.stride + kw - d.pad;
                            in_row[iw] = in_row[iw] + wgt * g_row[o];
                        }
                    }
                }
            }
        }
    });

    grad_in
}

/// Gradients with respect to the kernel and bias.
///
/// Per output channel the batch sum runs in index order, keeping the
/// reduction deterministic under parallel dispatch.
pub(super) fn backward_kernel_bias<S: Scalar>(
    input: &Tensor<S>,
    grad_out: &[S],
    d: &ConvDims,
) -> (Vec<S>, Vec<S>) {
    let x = input.data();
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let k_chan = d.c_in * d.kh * d.kw;
    let mut grad_k = vec![S::zero(); d.c_out * k_chan];
    let mut grad_b = vec![S::zero(); d.c_out];
    let work = grad_out.len() * d.c_in * d.kh * d.kw;

    {
        let grad_b = &mut grad_b;
        let body = |f: usize, gk: &mut [S]| {
            for n in 0..d.n {
                let g_plane =
                    &grad_out[(n * d.c_out + f) * out_plane..(n * d.c_out + f + 1) * out_plane];
                for c in 0..d.c_in {
                    let x_chan = &x[(n * d.c_in + c) * in_plane..(n * d.c_in + c + 1) * in_plane];
                    for kh in 0..d.kh {
                        let Some(oh_hi) = o_hi(d.h, d.oh, kh, d.pad, d.stride) else { continue };
                        for kw in 0..d.kw {
                            let Some(ow_hi) = o_hi(d.w, d.ow, kw, d.pad, d.stride) else {
                                continue;
                            };
                            let (ow_lo, oh_lo) =
                                (o_lo(kw, d.pad, d.stride), o_lo(kh, d.pad, d.stride));
                            let mut acc = S::zero();
                            for r in oh_lo..=oh_hi {
                                let ih = r * d.stride + kh - d.pad;
                                let g_row = &g_plane[r * d.ow..(r + 1) * d.ow];
                                let x_row = &x_chan[ih * d.w..(ih + 1) * d.w];
                                for o in ow_lo..=ow_hi {
                                    acc = acc + g_row[o] * x_row[o * d.stride + kw - d.pad];
                                }
                            }
                            let ki = (c * d.kh + kh) * d.kw + kw;
                            gk[ki] = gk[ki] + acc;
                        }
                    }
                }
            }
        };
        if work >= PAR_THRESHOLD && d.c_out > 1 {
            grad_k.par_chunks_mut(k_chan).enumerate().for_each(|(f, gk)| body(f, gk));
        } else {
            for (f, gk) in grad_k.chunks_mut(k_chan).enumerate() {
                body(f, gk);
            }
        }
        for f in 0..d.c_out {
            let mut acc = S::zero();
            for n in 0..d.n {
                let g_plane =
                    &grad_out[(n * d.c_out + f) * out_plane..(n * d.c_out + f + 1) * out_plane];
                for g in g_plane {
                    acc = acc + *g;
                }
            }
            grad_b[f] = acc;
        }
    }

    (grad_k, grad_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn out_extent_requires_exact_division() {
        assert_eq!(out_extent(5, 3, 1, 0).unwrap(), 3);
        assert_eq!(out_extent(5, 3, 2, 0).unwrap(), 2);
        assert!(out_extent(6, 3, 2, 0).is_err());
        assert!(out_extent(2, 3, 1, 0).is_err());
        assert_eq!(out_extent(2, 3, 1, 1).unwrap(), 2);
    }

    #[test]
    fn all_ones_3x3_valid_conv_sums_window() {
        let input = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let kernel = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let bias = t(&[1], vec![0.0]);
        let d = conv_dims(&input, &kernel, &bias, 1, 0).unwrap();
        let out = forward(&input, &kernel, &bias, &d);
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_with_padding_preserves_input() {
        let data: Vec<f64> = (0..16).map(|v| v as f64 * 0.25 - 1.0).collect();
        let input = t(&[1, 1, 4, 4], data.clone());
        let mut k = vec![0.0; 9];
        k[4] = 1.0; // centre tap
        let kernel = t(&[1, 1, 3, 3], k);
        let bias = t(&[1], vec![0.0]);
        let d = conv_dims(&input, &kernel, &bias, 1, 1).unwrap();
        let out = forward(&input, &kernel, &bias, &d);
        assert_eq!(out.shape(), input.shape());
        assert_eq!(out.data(), data.as_slice());
    }

    #[test]
    fn bias_broadcasts_per_output_channel() {
        let input = t(&[1, 1, 2, 2], vec![0.0; 4]);
        let kernel = t(&[2, 1, 1, 1], vec![1.0, 1.0]);
        let bias = t(&[2], vec![0.5, -1.5]);
        let d = conv_dims(&input, &kernel, &bias, 1, 0).unwrap();
        let out = forward(&input, &kernel, &bias, &d);
        assert_eq!(out.data(), &[0.5, 0.5, 0.5, 0.5, -1.5, -1.5, -1.5, -1.5]);
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let input = t(&[1, 2, 3, 3], vec![0.0; 18]);
        let kernel = t(&[1, 3, 3, 3], vec![0.0; 27]);
        let bias = t(&[1], vec![0.0]);
        assert!(conv_dims(&input, &kernel, &bias, 1, 0).is_err());
    }
}
