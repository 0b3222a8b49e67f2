//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends one record and produces one new node; records
//! only reference earlier nodes, so the list is already topologically
//! sorted and the backward pass is a single reverse sweep that visits each
//! node exactly once. Forward outputs are checked for NaN/Inf after every
//! operation and fail hard, so divergence surfaces at the op that produced
//! it instead of propagating.

use crate::{Error, Result};

use super::conv;
use super::{Scalar, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Rec<S> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { a: usize, c: S },
    AddScalar { a: usize },
    Log { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Clamp { a: usize, lo: S, hi: S },
    Powf { a: usize, e: S },
    Sum { a: usize },
    Mean { a: usize },
    Conv2d { input: usize, kernel: usize, bias: usize, stride: usize, pad: usize },
    InstanceNorm { input: usize, gain: usize, shift: usize, mean: Vec<S>, inv_std: Vec<S> },
    MaxPool2 { a: usize, argmax: Vec<u32> },
    Upsample2 { a: usize },
    ConcatChannels { a: usize, b: usize },
}

/// Recording tape: owns forward values and, after [`Tape::backward`],
/// per-node gradients. Single-owner and single-threaded; safe to move
/// across threads, never shared mutably.
pub struct Tape<S: Scalar> {
    values: Vec<Tensor<S>>,
    records: Vec<Rec<S>>,
    grads: Vec<Vec<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), records: Vec::new(), grads: Vec::new() }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    /// Gradient of the last backward target with respect to node `v`.
    ///
    /// Empty until [`Tape::backward`] has run.
    pub fn grad(&self, v: Var) -> &[S] {
        &self.grads[v.0]
    }

    fn push(&mut self, op: &'static str, value: Tensor<S>, rec: Rec<S>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        self.values.push(value);
        self.records.push(rec);
        Ok(Var(self.values.len() - 1))
    }

    /// Register an input tensor as a leaf node.
    pub fn leaf(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push("leaf", value, Rec::Leaf)
    }

    fn binary_shapes(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    /// Elementwise `a + b` (same shape).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        self.push("add", out, Rec::Add { a: a.0, b: b.0 })
    }

    /// Elementwise `a - b` (same shape).
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        self.push("sub", out, Rec::Sub { a: a.0, b: b.0 })
    }

    /// Elementwise `a * b` (same shape).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("mul", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        self.push("mul", out, Rec::Mul { a: a.0, b: b.0 })
    }

    /// Elementwise `a / b` (same shape).
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("div", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x / y)
            .collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        self.push("div", out, Rec::Div { a: a.0, b: b.0 })
    }

    /// Multiply every element by the constant `c`.
    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let data = self.values[a.0].data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        self.push("scale", out, Rec::Scale { a: a.0, c })
    }

    /// Add the constant `c` to every element.
    pub fn add_scalar(&mut self, a: Var, c: S) -> Result<Var> {
        let data = self.values[a.0].data().iter().map(|&x| x + c).collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        self.push("add_scalar", out, Rec::AddScalar { a: a.0 })
    }

    /// Elementwise natural logarithm; rejects non-positive inputs.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.values[a.0].data().iter().any(|&x| x <= S::zero()) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        let data = self.values[a.0].data().iter().map(|&x| x.ln()).collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        self.push("log", out, Rec::Log { a: a.0 })
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let z = S::zero();
        let data = self.values[a.0].data().iter().map(|&x| if x > z { x } else { z }).collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        self.push("relu", out, Rec::Relu { a: a.0 })
    }

    /// Elementwise logistic sigmoid, computed in the overflow-free form.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let one = S::one();
        let data = self.values[a.0]
            .data()
            .iter()
            .map(|&x| {
                if x >= S::zero() {
                    one / (one + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (one + e)
                }
            })
            .collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        self.push("sigmoid", out, Rec::Sigmoid { a: a.0 })
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes through inside the
    /// interval (boundary included) and is zero outside.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::Dimension(format!(
                "clamp bounds are inverted: [{lo}, {hi}]"
            )));
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .map(|&x| {
                if x < lo {
                    lo
                } else if x > hi {
                    hi
                } else {
                    x
                }
            })
            .collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        self.push("clamp", out, Rec::Clamp { a: a.0, lo, hi })
    }

    /// Elementwise `x^e` for a constant exponent.
    pub fn powf(&mut self, a: Var, e: S) -> Result<Var> {
        let data = self.values[a.0].data().iter().map(|&x| x.powf(e)).collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        self.push("powf", out, Rec::Powf { a: a.0, e })
    }

    /// Sum of all elements, as a single-element tensor.
    ///
    /// Accumulated in f64 regardless of element type, then rounded once.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let acc: f64 = self.values[a.0].data().iter().map(|v| v.to_f64_lossy()).sum();
        let out = Tensor::scalar(S::from_f64_lossy(acc));
        self.push("sum", out, Rec::Sum { a: a.0 })
    }

    /// Mean of all elements, as a single-element tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.values[a.0].len();
        if n == 0 {
            return Err(Error::Dimension("mean of an empty tensor".into()));
        }
        let acc: f64 = self.values[a.0].data().iter().map(|v| v.to_f64_lossy()).sum();
        let out = Tensor::scalar(S::from_f64_lossy(acc / n as f64));
        self.push("mean", out, Rec::Mean { a: a.0 })
    }

    /// 2D convolution over `[N, C, H, W]` with zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let d = conv::conv_dims(
            &self.values[input.0],
            &self.values[kernel.0],
            &self.values[bias.0],
            stride,
            pad,
        )?;
        let out = conv::forward(&self.values[input.0], &self.values[kernel.0], &self.values[bias.0], &d);
        self.push(
            "conv2d",
            out,
            Rec::Conv2d { input: input.0, kernel: kernel.0, bias: bias.0, stride, pad },
        )
    }

    /// Instance normalisation: every `(batch, channel)` plane is shifted to
    /// zero mean and scaled to unit variance (population variance over the
    /// plane, no running statistics), then transformed by per-channel
    /// `gain` and `shift`.
    pub fn instance_norm(&mut self, input: Var, gain: Var, shift: Var, eps: S) -> Result<Var> {
        let (n, c, h, w) = self.values[input.0].dims4()?;
        let plane = h * w;
        if plane < 2 {
            return Err(Error::Dimension(format!(
                "instance norm needs at least 2 elements per plane, got {h}x{w}"
            )));
        }
        if self.values[gain.0].shape() != [c] || self.values[shift.0].shape() != [c] {
            return Err(Error::Dimension(format!(
                "gain/shift shapes {:?}/{:?} do not match {c} channels",
                self.values[gain.0].shape(),
                self.values[shift.0].shape()
            )));
        }
        let x = self.values[input.0].data();
        let g = self.values[gain.0].data();
        let b = self.values[shift.0].data();
        let mut out = vec![S::zero(); x.len()];
        let mut means = Vec::with_capacity(n * c);
        let mut inv_stds = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let xs = &x[p * plane..(p + 1) * plane];
            let mean = xs.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / plane as f64;
            let var = xs
                .iter()
                .map(|v| {
                    let d = v.to_f64_lossy() - mean;
                    d * d
                })
                .sum::<f64>()
                / plane as f64;
            let inv_std = 1.0 / (var + eps.to_f64_lossy()).sqrt();
            let (mean_s, inv_std_s) = (S::from_f64_lossy(mean), S::from_f64_lossy(inv_std));
            means.push(mean_s);
            inv_stds.push(inv_std_s);
            let (gc, bc) = (g[p % c], b[p % c]);
            for (o, &v) in out[p * plane..(p + 1) * plane].iter_mut().zip(xs) {
                *o = gc * ((v - mean_s) * inv_std_s) + bc;
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        self.push(
            "instance_norm",
            out,
            Rec::InstanceNorm {
                input: input.0,
                gain: gain.0,
                shift: shift.0,
                mean: means,
                inv_std: inv_stds,
            },
        )
    }

    /// 2x2 max pooling with stride 2; requires even spatial extents. Ties
    /// within a window resolve to the first element in row-major order.
    pub fn maxpool2(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.values[a.0].dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "maxpool2 needs even spatial extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.values[a.0].data();
        let mut out = vec![S::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for p in 0..n * c {
            let xs = &x[p * h * w..(p + 1) * h * w];
            for r in 0..oh {
                for q in 0..ow {
                    let mut best_idx = (2 * r) * w + 2 * q;
                    let mut best = xs[best_idx];
                    for (dr, dq) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * r + dr) * w + 2 * q + dq;
                        if xs[idx] > best {
                            best = xs[idx];
                            best_idx = idx;
                        }
                    }
                    let o = r * ow + q;
                    out[p * oh * ow + o] = best;
                    argmax[p * oh * ow + o] = (p * h * w + best_idx) as u32;
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("maxpool2", out, Rec::MaxPool2 { a: a.0, argmax })
    }

    /// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.values[a.0].dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.values[a.0].data();
        let mut out = vec![S::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let xs = &x[p * h * w..(p + 1) * h * w];
            let os = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for r in 0..h {
                for q in 0..w {
                    let v = xs[r * w + q];
                    os[(2 * r) * ow + 2 * q] = v;
                    os[(2 * r) * ow + 2 * q + 1] = v;
                    os[(2 * r + 1) * ow + 2 * q] = v;
                    os[(2 * r + 1) * ow + 2 * q + 1] = v;
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("upsample2", out, Rec::Upsample2 { a: a.0 })
    }

    /// Concatenate two `[N, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.values[a.0].dims4()?;
        let (nb, cb, hb, wb) = self.values[b.0].dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Dimension(format!(
                "concat_channels: incompatible shapes {:?} and {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        let (xa, xb) = (self.values[a.0].data(), self.values[b.0].data());
        let plane = ha * wa;
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for n in 0..na {
            out.extend_from_slice(&xa[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&xb[n * cb * plane..(n + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        self.push("concat_channels", out, Rec::ConcatChannels { a: a.0, b: b.0 })
    }

    /// Reverse sweep from a scalar node: fills per-node gradients.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.values[target.0].len() != 1 {
            return Err(Error::Dimension(format!(
                "backward target must be a single-element tensor, got shape {:?}",
                self.values[target.0].shape()
            )));
        }
        let mut grads: Vec<Vec<S>> =
            self.values.iter().map(|v| vec![S::zero(); v.len()]).collect();
        grads[target.0][0] = S::one();

        for i in (0..self.records.len()).rev() {
            // The node's gradient is complete once the sweep reaches it;
            // take it out so input gradients can be accumulated freely.
            let g = std::mem::take(&mut grads[i]);
            match &self.records[i] {
                Rec::Leaf => {}
                Rec::Add { a, b } => {
                    for (ga, &gi) in grads[*a].iter_mut().zip(&g) {
                        *ga = *ga + gi;
                    }
                    for (gb, &gi) in grads[*b].iter_mut().zip(&g) {
                        *gb = *gb + gi;
                    }
                }
                Rec::Sub { a, b } => {
                    for (ga, &gi) in grads[*a].iter_mut().zip(&g) {
                        *ga = *ga + gi;
                    }
                    for (gb, &gi) in grads[*b].iter_mut().zip(&g) {
                        *gb = *gb - gi;
                    }
                }
                Rec::Mul { a, b } => {
                    let (xa, xb) = (self.values[*a].data(), self.values[*b].data());
                    for j in 0..g.len() {
                        grads[*a][j] = grads[*a][j] + g[j] * xb[j];
                    }
                    for j in 0..g.len() {
                        grads[*b][j] = grads[*b][j] + g[j] * xa[j];
                    }
                }
                Rec::Div { a, b } => {
                    let (xa, xb) = (self.values[*a].data(), self.values[*b].data());
                    for j in 0..g.len() {
                        grads[*a][j] = grads[*a][j] + g[j] / xb[j];
                    }
                    for j in 0..g.len() {
                        grads[*b][j] = grads[*b][j] - g[j] * xa[j] / (xb[j] * xb[j]);
                    }
                }
                Rec::Scale { a, c } => {
                    for (ga, &gi) in grads[*a].iter_mut().zip(&g) {
                        *ga = *ga + gi * *c;
                    }
                }
                Rec::AddScalar { a } => {
                    for (ga, &gi) in grads[*a].iter_mut().zip(&g) {
                        *ga = *ga + gi;
                    }
                }
                Rec::Log { a } => {
                    let xa = self.values[*a].data();
                    for j in 0..g.len() {
                        grads[*a][j] = grads[*a][j] + g[j] / xa[j];
                    }
                }
                Rec::Relu { a } => {
                    let xa = self.values[*a].data();
                    for j in 0..g.len() {
                        if xa[j] > S::zero() {
                            grads[*a][j] = grads[*a][j] + g[j];
                        }
                    }
                }
                Rec::Sigmoid { a } => {
                    let y = self.values[i].data();
                    for j in 0..g.len() {
                        grads[*a][j] = grads[*a][j] + g[j] * y[j] * (S::one() - y[j]);
                    }
                }
                Rec::Clamp { a, lo, hi } => {
                    let xa = self.values[*a].data();
                    for j in 0..g.len() {
                        if xa[j] >= *lo && xa[j] <= *hi {
                            grads[*a][j] = grads[*a][j] + g[j];
                        }
                    }
                }
                Rec::Powf { a, e } => {
                    let xa = self.values[*a].data();
                    for j in 0..g.len() {
                        grads[*a][j] = grads[*a][j] + g[j] * *e * xa[j].powf(*e - S::one());
                    }
                }
                Rec::Sum { a } => {
                    let gi = g[0];
                    for ga in grads[*a].iter_mut() {
                        *ga = *ga + gi;
                    }
                }
                Rec::Mean { a } => {
                    let n = S::from_f64_lossy(self.values[*a].len() as f64);
                    let gi = g[0] / n;
                    for ga in grads[*a].iter_mut() {
                        *ga = *ga + gi;
                    }
                }
                Rec::Conv2d { input, kernel, bias, stride, pad } => {
                    let d = conv::conv_dims(
                        &self.values[*input],
                        &self.values[*kernel],
                        &self.values[*bias],
                        *stride,
                        *pad,
                    )
                    .expect("shapes already validated in forward");
                    let gi = conv::backward_input(&self.values[*kernel], &g, &d);
                    for (dst, src) in grads[*input].iter_mut().zip(gi) {
                        *dst = *dst + src;
                    }
                    let (gk, gb) = conv::backward_kernel_bias(&self.values[*input], &g, &d);
                    for (dst, src) in grads[*kernel].iter_mut().zip(gk) {
                        *dst = *dst + src;
                    }
                    for (dst, src) in grads[*bias].iter_mut().zip(gb) {
                        *dst = *dst + src;
                    }
                }
                Rec::InstanceNorm { input, gain, shift, mean, inv_std } => {
                    let (n, c, h, w) = self.values[*input].dims4().expect("validated");
                    let plane = h * w;
                    let x = self.values[*input].data();
                    let gv = self.values[*gain].data();
                    for p in 0..n * c {
                        let ch = p % c;
                        let xs = &x[p * plane..(p + 1) * plane];
                        let gs = &g[p * plane..(p + 1) * plane];
                        let (mu, istd) = (mean[p], inv_std[p]);
                        // Plane sums in f64: the backward formula subtracts
                        // two correction terms of similar magnitude.
                        let mut sum_dxhat = 0.0f64;
                        let mut sum_dxhat_xhat = 0.0f64;
                        let mut sum_g = 0.0f64;
                        let mut sum_g_xhat = 0.0f64;
                        for j in 0..plane {
                            let xhat = ((xs[j] - mu) * istd).to_f64_lossy();
                            let dxhat = (gs[j] * gv[ch]).to_f64_lossy();
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            sum_g += gs[j].to_f64_lossy();
                            sum_g_xhat += gs[j].to_f64_lossy() * xhat;
                        }
                        let m = plane as f64;
                        let gx = &mut grads[*input][p * plane..(p + 1) * plane];
                        for j in 0..plane {
                            let xhat = ((xs[j] - mu) * istd).to_f64_lossy();
                            let dxhat = (gs[j] * gv[ch]).to_f64_lossy();
                            let dx = istd.to_f64_lossy()
                                * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
                            gx[j] = gx[j] + S::from_f64_lossy(dx);
                        }
                        grads[*gain][ch] = grads[*gain][ch] + S::from_f64_lossy(sum_g_xhat);
                        grads[*shift][ch] = grads[*shift][ch] + S::from_f64_lossy(sum_g);
                    }
                }
                Rec::MaxPool2 { a, argmax } => {
                    for (o, &src) in argmax.iter().enumerate() {
                        grads[*a][src as usize] = grads[*a][src as usize] + g[o];
                    }
                }
                Rec::Upsample2 { a } => {
                    let (n, c, h, w) = self.values[*a].dims4().expect("validated");
                    let (oh, ow) = (2 * h, 2 * w);
                    for p in 0..n * c {
                        let gs = &g[p * oh * ow..(p + 1) * oh * ow];
                        let ga = &mut grads[*a][p * h * w..(p + 1) * h * w];
                        for r in 0..h {
                            for q in 0..w {
                                let acc = gs[(2 * r) * ow + 2 * q]
                                    + gs[(2 * r) * ow + 2 * q + 1]
                                    + gs[(2 * r + 1) * ow + 2 * q]
                                    + gs[(2 * r + 1) * ow + 2 * q + 1];
                                ga[r * w + q] = ga[r * w + q] + acc;
                            }
                        }
                    }
                }
                Rec::ConcatChannels { a, b } => {
                    let (na, ca, ha, wa) = self.values[*a].dims4().expect("validated");
                    let (_, cb, _, _) = self.values[*b].dims4().expect("validated");
                    let plane = ha * wa;
                    let row = (ca + cb) * plane;
                    for n in 0..na {
                        let ga = &mut grads[*a][n * ca * plane..(n + 1) * ca * plane];
                        for (dst, &src) in ga.iter_mut().zip(&g[n * row..n * row + ca * plane]) {
                            *dst = *dst + src;
                        }
                        let gb = &mut grads[*b][n * cb * plane..(n + 1) * cb * plane];
                        for (dst, &src) in
                            gb.iter_mut().zip(&g[n * row + ca * plane..(n + 1) * row])
                        {
                            *dst = *dst + src;
                        }
                    }
                }
            }
            grads[i] = g;
        }
        self.grads = grads;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3], vec![0.0, 30.0, -30.0])).unwrap();
        let y = tape.sigmoid(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 0.999_999);
        assert!(v[2] < 1e-9 && v[2] > 0.0);
    }

    #[test]
    fn relu_clips_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], vec![-3.2, 3.2])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 3.2]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], vec![1.0, 0.0])).unwrap();
        let err = tape.log(x).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn leaf_rejects_non_finite_values() {
        let mut tape = Tape::<f64>::new();
        let err = tape.leaf(t64(&[2], vec![1.0, f64::INFINITY])).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn overflow_in_an_op_is_a_hard_error() {
        let mut tape = Tape::<f64>::new();
        let big = tape.leaf(t64(&[1], vec![f64::MAX])).unwrap();
        let err = tape.add(big, big).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "add" }), "{err}");
    }

    #[test]
    fn maxpool_takes_window_maximum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn maxpool_ties_route_gradient_to_first_row_major_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 1, 2, 2], vec![7.0, 7.0, 7.0, 7.0])).unwrap();
        let y = tape.maxpool2(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_extents() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 1, 3, 2], vec![0.0; 6])).unwrap();
        assert!(matches!(tape.maxpool2(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn upsample_repeats_each_pixel_into_a_block() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 1, 1, 1], vec![5.0])).unwrap();
        let y = tape.upsample2(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[5.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn concat_stacks_channels_per_batch_entry() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.leaf(t64(&[2, 2, 1, 2], vec![10.0; 8])).unwrap();
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 1, 2]);
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 2.0, 10.0, 10.0, 10.0, 10.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0]
        );
    }

    #[test]
    fn concat_backward_splits_gradient_exactly() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[1, 1, 2, 2], vec![0.0; 4])).unwrap();
        let b = tape.leaf(t64(&[1, 2, 2, 2], vec![0.0; 8])).unwrap();
        let y = tape.concat_channels(a, b).unwrap();
        // Weight each output element differently so the split is visible.
        let w: Vec<f64> = (1..=12).map(|v| v as f64).collect();
        let wv = tape.leaf(t64(&[1, 3, 2, 2], w)).unwrap();
        let prod = tape.mul(y, wv).unwrap();
        let s = tape.sum(prod).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.grad(b), &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        // The split is a partition of coordinates: squared norms add up.
        let sq = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>();
        let whole: f64 = (1..=12).map(|v| (v * v) as f64).sum();
        assert!((sq(tape.grad(a)) + sq(tape.grad(b)) - whole).abs() < 1e-12);
    }

    #[test]
    fn instance_norm_matches_hand_computed_plane() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let gain = tape.leaf(t64(&[1], vec![1.0])).unwrap();
        let shift = tape.leaf(t64(&[1], vec![0.0])).unwrap();
        let y = tape.instance_norm(x, gain, shift, 0.0).unwrap();
        // mean 2.5, population variance 1.25
        let expect = [-1.341_640_8, -0.447_213_6, 0.447_213_6, 1.341_640_8];
        for (got, want) in tape.value(y).data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn instance_norm_constant_plane_stays_finite_with_eps() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 1, 2, 2], vec![3.0; 4])).unwrap();
        let gain = tape.leaf(t64(&[1], vec![1.0])).unwrap();
        let shift = tape.leaf(t64(&[1], vec![0.0])).unwrap();
        let y = tape.instance_norm(x, gain, shift, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn instance_norm_rejects_single_element_planes() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 1, 1, 1], vec![3.0])).unwrap();
        let gain = tape.leaf(t64(&[1], vec![1.0])).unwrap();
        let shift = tape.leaf(t64(&[1], vec![0.0])).unwrap();
        assert!(matches!(tape.instance_norm(x, gain, shift, 1e-5), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_requires_scalar_target() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let data: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin()).collect();
            let x = tape.leaf(Tensor::new(vec![1, 1, 8, 8], data).unwrap()).unwrap();
            let k = tape
                .leaf(Tensor::new(vec![2, 1, 3, 3], vec![0.11f32; 18]).unwrap())
                .unwrap();
            let b = tape.leaf(Tensor::new(vec![2], vec![0.5f32, -0.5]).unwrap()).unwrap();
            let y = tape.conv2d(x, k, b, 1, 1).unwrap();
            let y = tape.sigmoid(y).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn div_gradients_follow_quotient_rule() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[1], vec![3.0])).unwrap();
        let b = tape.leaf(t64(&[1], vec![2.0])).unwrap();
        let y = tape.div(a, b).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a), &[0.5]);
        assert_eq!(tape.grad(b), &[-0.75]);
    }

    #[test]
    fn reused_node_accumulates_gradient_from_both_uses() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1], vec![3.0])).unwrap();
        let y = tape.mul(x, x).unwrap(); // x^2, dy/dx = 2x = 6
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x), &[6.0]);
    }
}

#[cfg(test)]
mod gradcheck_tests {
    use super::*;
    use crate::autodiff::gradcheck::assert_gradients_match;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = randn(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
        let kernel = randn(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
        let bias = randn(&mut rng, &[4], -0.5, 0.5);
        assert_gradients_match(&[input, kernel, bias], |tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], 1, 0)?;
            tape.mean(y)
        });
    }

    #[test]
    fn conv2d_strided_padded_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = randn(&mut rng, &[1, 2, 5, 7], -1.0, 1.0);
        let kernel = randn(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
        let bias = randn(&mut rng, &[3], -0.5, 0.5);
        assert_gradients_match(&[input, kernel, bias], |tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], 2, 1)?;
            // square before reducing so every output influences the loss
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        });
    }

    #[test]
    fn instance_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let input = randn(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let gain = randn(&mut rng, &[3], 0.5, 1.5);
        let shift = randn(&mut rng, &[3], -0.5, 0.5);
        let probe = randn(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        assert_gradients_match(&[input, gain, shift], move |tape, v| {
            let y = tape.instance_norm(v[0], v[1], v[2], 1e-5)?;
            // weight the outputs so plane sums do not cancel symmetrically
            let w = tape.leaf(probe.clone())?;
            let p = tape.mul(y, w)?;
            tape.sum(p)
        });
    }

    #[test]
    fn pool_upsample_chain_gradients_match() {
        // Distinct values with comfortable gaps keep the pooling argmax
        // stable under the +-1e-5 probes.
        let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.01).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        vals.shuffle(&mut rng);
        let input = Tensor::new(vec![1, 2, 4, 4], vals).unwrap();
        assert_gradients_match(&[input], |tape, v| {
            let p = tape.maxpool2(v[0])?;
            let u = tape.upsample2(p)?;
            let sq = tape.mul(u, u)?;
            tape.mean(sq)
        });
    }

    #[test]
    fn elementwise_chain_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = randn(&mut rng, &[6], 0.2, 2.0);
        let b = randn(&mut rng, &[6], 0.3, 1.5);
        assert_gradients_match(&[a, b], |tape, v| {
            let q = tape.div(v[0], v[1])?;
            let l = tape.log(q)?;
            let s = tape.sigmoid(l)?;
            let c = tape.clamp(s, 0.05, 0.95)?;
            let p = tape.powf(c, 0.75)?;
            let sc = tape.scale(p, 1.7)?;
            let sh = tape.add_scalar(sc, -0.3)?;
            tape.mean(sh)
        });
    }

    #[test]
    fn concat_with_shared_consumer_gradients_match() {
        // The input feeds two branches (pooled-and-upsampled, and direct via
        // concat), so gradients must accumulate across both uses — the
        // skip-connection pattern.
        let mut vals: Vec<f64> = (0..64).map(|i| i as f64 * 0.01).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        vals.shuffle(&mut rng);
        let x = Tensor::new(vec![2, 2, 4, 4], vals).unwrap();
        assert_gradients_match(&[x], |tape, v| {
            let pooled = tape.maxpool2(v[0])?;
            let back = tape.upsample2(pooled)?;
            let cat = tape.concat_channels(v[0], back)?;
            let sq = tape.mul(cat, cat)?;
            tape.mean(sq)
        });
    }
}
