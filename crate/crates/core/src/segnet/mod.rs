//! Compact U-Net for binary 2D segmentation.
//!
//! The network is described entirely by [`ArchDescriptor`]; parameters live
//! in one flat [`ParamVector`] whose layout follows the forward traversal
//! order. Each encoder/decoder level is two 3x3 convolutions, each followed
//! by instance normalisation and ReLU; levels are connected by 2x2 max
//! pooling on the way down and nearest-neighbour upsampling plus skip
//! concatenation on the way up. A terminal 1x1 convolution and sigmoid
//! produce per-pixel probabilities.

pub mod checkpoint;

use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Variance epsilon used by every instance-norm layer.
pub const NORM_EPS: f64 = 1e-5;

/// Hyperparameters that fully determine the network shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub out_channels: usize,
}

impl Default for ArchDescriptor {
    /// Desk-scale default: single-channel 32x32 inputs.
    fn default() -> Self {
        ArchDescriptor { in_channels: 1, base_width: 8, depth: 3, out_channels: 1 }
    }
}

impl std::fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "in={} base={} depth={} out={}",
            self.in_channels, self.base_width, self.depth, self.out_channels
        )
    }
}

/// One parameterised layer: a convolution (kernel + bias) or an instance
/// norm (gain + shift).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum UnitKind {
    Conv { out_c: usize, in_c: usize, k: usize, pad: usize },
    Norm { c: usize },
}

/// A parameterised layer together with its slices of the flat vector.
#[derive(Clone, Debug)]
pub struct UnitDef {
    pub kind: UnitKind,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

/// Structural steps interpreted by the forward pass, in execution order.
/// `Conv` and `Norm` consume the unit with the given index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PlanStep {
    Conv(usize),
    Norm(usize),
    Relu,
    SaveSkip,
    MaxPool,
    Upsample,
    ConcatSkip,
    Sigmoid,
}

/// Accumulates unit definitions and plan steps while tracking the
/// running offset into the flat parameter vector.
#[derive(Default)]
struct LayoutBuilder {
    units: Vec<UnitDef>,
    plan: Vec<PlanStep>,
    offset: usize,
}

impl LayoutBuilder {
    fn push_conv(&mut self, in_c: usize, out_c: usize, k: usize, pad: usize) {
        let w = out_c * in_c * k * k;
        self.units.push(UnitDef {
            kind: UnitKind::Conv { out_c, in_c, k, pad },
            weights: self.offset..self.offset + w,
            bias: self.offset + w..self.offset + w + out_c,
        });
        self.offset += w + out_c;
        self.plan.push(PlanStep::Conv(self.units.len() - 1));
    }

    fn push_norm(&mut self, c: usize) {
        self.units.push(UnitDef {
            kind: UnitKind::Norm { c },
            weights: self.offset..self.offset + c,
            bias: self.offset + c..self.offset + 2 * c,
        });
        self.offset += 2 * c;
        self.plan.push(PlanStep::Norm(self.units.len() - 1));
    }

    fn conv_norm_relu(&mut self, in_c: usize, out_c: usize) {
        self.push_conv(in_c, out_c, 3, 1);
        self.push_norm(out_c);
        self.plan.push(PlanStep::Relu);
    }
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.base_width == 0
            || self.depth == 0
            || self.out_channels == 0
        {
            return Err(Error::Config(format!(
                "architecture fields must be positive, got {self}"
            )));
        }
        Ok(())
    }

    /// Spatial downsampling factor; input extents must be divisible by it.
    pub fn spatial_factor(&self) -> usize {
        1 << self.depth
    }

    fn layout(&self) -> (Vec<UnitDef>, Vec<PlanStep>) {
        let mut lb = LayoutBuilder::default();

        let mut cur = self.in_channels;
        for level in 0..self.depth {
            let width = self.base_width << level;
            for _ in 0..2 {
                lb.conv_norm_relu(cur, width);
                cur = width;
            }
            lb.plan.push(PlanStep::SaveSkip);
            lb.plan.push(PlanStep::MaxPool);
        }

        let bottleneck = self.base_width << self.depth;
        for _ in 0..2 {
            lb.conv_norm_relu(cur, bottleneck);
            cur = bottleneck;
        }

        for level in (0..self.depth).rev() {
            let width = self.base_width << level;
            lb.plan.push(PlanStep::Upsample);
            lb.plan.push(PlanStep::ConcatSkip);
            cur += width; // skip connection channels
            for _ in 0..2 {
                lb.conv_norm_relu(cur, width);
                cur = width;
            }
        }

        lb.push_conv(cur, self.out_channels, 1, 0);
        lb.plan.push(PlanStep::Sigmoid);

        (lb.units, lb.plan)
    }

    /// Parameterised layers with their flat-vector slices.
    pub fn units(&self) -> Vec<UnitDef> {
        self.layout().0
    }

    /// Total number of parameters.
    pub fn param_count(&self) -> usize {
        self.units().last().map_or(0, |u| u.bias.end)
    }
}

/// Flat parameter vector tied to an architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<S> {
    arch: ArchDescriptor,
    values: Vec<S>,
}

impl<S: Scalar> ParamVector<S> {
    /// Wrap an existing flat vector; the length must match the architecture.
    pub fn from_values(arch: ArchDescriptor, values: Vec<S>) -> Result<Self> {
        let expected = arch.param_count();
        if values.len() != expected {
            return Err(Error::Dimension(format!(
                "architecture ({arch}) has {expected} parameters, got {}",
                values.len()
            )));
        }
        Ok(ParamVector { arch, values })
    }

    pub fn arch(&self) -> ArchDescriptor {
        self.arch
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// In-place SGD update; see [`crate::autodiff::sgd_step`].
    pub fn sgd_step(&mut self, grads: &[S], lr: S, weight_decay: S) -> Result<()> {
        crate::autodiff::sgd_step(&mut self.values, grads, lr, weight_decay)
    }

    /// Per-unit `(weights, bias)` tensor views of the flat vector.
    pub fn unflatten(&self) -> Vec<(Tensor<S>, Tensor<S>)> {
        self.arch
            .units()
            .iter()
            .map(|u| {
                let (ws, bs) = unit_shapes(&u.kind);
                (
                    Tensor::new(ws, self.values[u.weights.clone()].to_vec())
                        .expect("unit weight slice matches shape"),
                    Tensor::new(bs, self.values[u.bias.clone()].to_vec())
                        .expect("unit bias slice matches shape"),
                )
            })
            .collect()
    }

    /// Rebuild a flat vector from per-unit tensors (inverse of
    /// [`ParamVector::unflatten`]).
    pub fn flatten(arch: ArchDescriptor, tensors: &[(Tensor<S>, Tensor<S>)]) -> Result<Self> {
        let units = arch.units();
        if tensors.len() != units.len() {
            return Err(Error::Dimension(format!(
                "architecture ({arch}) has {} units, got {} tensor pairs",
                units.len(),
                tensors.len()
            )));
        }
        let mut values = vec![S::zero(); arch.param_count()];
        for (u, (w, b)) in units.iter().zip(tensors) {
            let (ws, bs) = unit_shapes(&u.kind);
            if w.shape() != ws.as_slice() || b.shape() != bs.as_slice() {
                return Err(Error::Dimension(format!(
                    "unit tensor shapes {:?}/{:?} do not match expected {:?}/{:?}",
                    w.shape(),
                    b.shape(),
                    ws,
                    bs
                )));
            }
            values[u.weights.clone()].copy_from_slice(w.data());
            values[u.bias.clone()].copy_from_slice(b.data());
        }
        ParamVector::from_values(arch, values)
    }
}

fn unit_shapes(kind: &UnitKind) -> (Vec<usize>, Vec<usize>) {
    match *kind {
        UnitKind::Conv { out_c, in_c, k, .. } => (vec![out_c, in_c, k, k], vec![out_c]),
        UnitKind::Norm { c } => (vec![c], vec![c]),
    }
}

/// Deterministically initialise parameters from a seed.
///
/// Convolution kernels draw from a zero-mean uniform distribution with
/// bound `sqrt(1 / fan_in)`; biases and norm shifts start at zero, norm
/// gains at one. Draws happen in f64 so the value stream is identical for
/// every element type.
pub fn build<S: Scalar>(arch: ArchDescriptor, seed: u64) -> Result<ParamVector<S>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![S::zero(); arch.param_count()];
    for unit in arch.units() {
        match unit.kind {
            UnitKind::Conv { in_c, k, .. } => {
                let bound = (1.0 / (in_c * k * k) as f64).sqrt();
                for slot in &mut values[unit.weights.clone()] {
                    *slot = S::from_f64_lossy(rng.gen_range(-bound..bound));
                }
                // bias stays zero
            }
            UnitKind::Norm { .. } => {
                for slot in &mut values[unit.weights.clone()] {
                    *slot = S::one();
                }
                // shift stays zero
            }
        }
    }
    ParamVector::from_values(arch, values)
}

/// Tape variables holding one unit's parameters.
#[derive(Clone, Copy, Debug)]
pub struct UnitVars {
    pub weights: Var,
    pub bias: Var,
}

/// Run the network on a tape, returning the output node and the parameter
/// leaves (needed to read gradients back out).
pub fn forward_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamVector<S>,
    input: Var,
) -> Result<(Var, Vec<UnitVars>)> {
    let arch = params.arch();
    let mut unit_vars = Vec::new();
    for u in arch.units() {
        let (ws, bs) = unit_shapes(&u.kind);
        let weights =
            tape.leaf(Tensor::new(ws, params.values()[u.weights.clone()].to_vec())?)?;
        let bias = tape.leaf(Tensor::new(bs, params.values()[u.bias.clone()].to_vec())?)?;
        unit_vars.push(UnitVars { weights, bias });
    }
    let out = forward_with_unit_vars(tape, &arch, &unit_vars, input)?;
    Ok((out, unit_vars))
}

/// Run the network using parameter leaves created by the caller.
///
/// `unit_vars` must hold one entry per unit of `arch`, with value shapes
/// matching the unit table.
pub fn forward_with_unit_vars<S: Scalar>(
    tape: &mut Tape<S>,
    arch: &ArchDescriptor,
    unit_vars: &[UnitVars],
    input: Var,
) -> Result<Var> {
    let (n, c, h, w) = tape.value(input).dims4()?;
    if c != arch.in_channels {
        return Err(Error::Dimension(format!(
            "input has {c} channels, architecture ({arch}) expects {}",
            arch.in_channels
        )));
    }
    let factor = arch.spatial_factor();
    if h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!(
            "input extent {h}x{w} (batch {n}) is not divisible by the network's factor {factor}"
        )));
    }

    let (units, plan) = arch.layout();
    if unit_vars.len() != units.len() {
        return Err(Error::Dimension(format!(
            "architecture ({arch}) has {} units, got {} parameter bindings",
            units.len(),
            unit_vars.len()
        )));
    }

    let eps = S::from_f64_lossy(NORM_EPS);
    let mut cur = input;
    let mut skips: Vec<Var> = Vec::new();
    for step in plan {
        cur = match step {
            PlanStep::Conv(i) => {
                let pad = match units[i].kind {
                    UnitKind::Conv { pad, .. } => pad,
                    _ => unreachable!("plan references a conv unit"),
                };
                tape.conv2d(cur, unit_vars[i].weights, unit_vars[i].bias, 1, pad)?
            }
            PlanStep::Norm(i) => {
                tape.instance_norm(cur, unit_vars[i].weights, unit_vars[i].bias, eps)?
            }
            PlanStep::Relu => tape.relu(cur)?,
            PlanStep::SaveSkip => {
                skips.push(cur);
                cur
            }
            PlanStep::MaxPool => tape.maxpool2(cur)?,
            PlanStep::Upsample => tape.upsample2(cur)?,
            PlanStep::ConcatSkip => {
                let skip = skips.pop().expect("skip stack matches plan");
                tape.concat_channels(cur, skip)?
            }
            PlanStep::Sigmoid => tape.sigmoid(cur)?,
        };
    }
    Ok(cur)
}

/// Assemble the flat gradient vector after a backward pass.
pub fn collect_param_grads<S: Scalar>(
    tape: &Tape<S>,
    arch: &ArchDescriptor,
    unit_vars: &[UnitVars],
) -> Vec<S> {
    let mut flat = vec![S::zero(); arch.param_count()];
    for (u, v) in arch.units().iter().zip(unit_vars) {
        flat[u.weights.clone()].copy_from_slice(tape.grad(v.weights));
        flat[u.bias.clone()].copy_from_slice(tape.grad(v.bias));
    }
    flat
}

/// Convenience forward pass on a fresh tape, returning probabilities.
pub fn forward<S: Scalar>(params: &ParamVector<S>, batch: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let input = tape.leaf(batch.clone())?;
    let (out, _) = forward_on_tape(&mut tape, params, input)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchDescriptor {
        ArchDescriptor { in_channels: 1, base_width: 2, depth: 2, out_channels: 1 }
    }

    #[test]
    fn default_arch_param_count_is_frozen() {
        // Regression constant computed once from the layer table of the
        // desk-scale architecture (base 8, depth 3, 1 -> 1 channels).
        assert_eq!(ArchDescriptor::default().param_count(), 122_673);
    }

    #[test]
    fn tiny_arch_param_count_is_frozen() {
        // base 2, depth 2: hand-summed from the same layer table.
        assert_eq!(tiny().param_count(), 1_977);
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let a: ParamVector<f32> = build(tiny(), 7).unwrap();
        let b: ParamVector<f32> = build(tiny(), 7).unwrap();
        assert_eq!(a.values(), b.values());
        let c: ParamVector<f32> = build(tiny(), 8).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn build_initialises_norm_gains_to_one_and_biases_to_zero() {
        let p: ParamVector<f64> = build(tiny(), 3).unwrap();
        for unit in tiny().units() {
            match unit.kind {
                UnitKind::Conv { in_c, k, .. } => {
                    let bound = (1.0 / (in_c * k * k) as f64).sqrt();
                    for &w in &p.values()[unit.weights.clone()] {
                        assert!(w.abs() <= bound, "kernel weight {w} outside +-{bound}");
                    }
                    assert!(p.values()[unit.bias.clone()].iter().all(|&b| b == 0.0));
                }
                UnitKind::Norm { .. } => {
                    assert!(p.values()[unit.weights.clone()].iter().all(|&g| g == 1.0));
                    assert!(p.values()[unit.bias.clone()].iter().all(|&s| s == 0.0));
                }
            }
        }
    }

    #[test]
    fn forward_produces_probabilities_of_input_extent() {
        let p: ParamVector<f32> = build(tiny(), 5).unwrap();
        let batch = Tensor::filled(vec![2, 1, 8, 8], 0.3f32);
        let out = forward(&p, &batch).unwrap();
        assert_eq!(out.shape(), &[2, 1, 8, 8]);
        for &v in out.data() {
            assert!(v > 0.0 && v < 1.0, "output {v} outside (0, 1)");
        }
    }

    #[test]
    fn forward_rejects_extents_not_divisible_by_factor() {
        let p: ParamVector<f32> = build(tiny(), 5).unwrap();
        let batch = Tensor::filled(vec![1, 1, 6, 8], 0.0f32);
        assert!(matches!(forward(&p, &batch), Err(Error::Dimension(_))));
    }

    #[test]
    fn forward_rejects_channel_mismatch() {
        let p: ParamVector<f32> = build(tiny(), 5).unwrap();
        let batch = Tensor::filled(vec![1, 2, 8, 8], 0.0f32);
        assert!(matches!(forward(&p, &batch), Err(Error::Dimension(_))));
    }

    #[test]
    fn flatten_unflatten_roundtrip_is_exact() {
        let p: ParamVector<f32> = build(tiny(), 9).unwrap();
        let tensors = p.unflatten();
        let back = ParamVector::flatten(tiny(), &tensors).unwrap();
        assert_eq!(p.values(), back.values());
    }

    #[test]
    fn first_norm_activations_ignore_input_scaling_at_init() {
        // With bias still zero from init the first conv is homogeneous, so
        // scaling the input by a > 0 scales its output planes by a, and the
        // instance norm removes that factor. (A constant *shift* is not
        // removed exactly: zero padding makes the conv response to a
        // constant input non-uniform at the borders.)
        let arch = tiny();
        let p: ParamVector<f64> = build(arch, 21).unwrap();
        let units = arch.units();
        let data: Vec<f64> = (0..64).map(|i| ((i * 37 % 64) as f64) / 64.0 - 0.4).collect();
        let x = Tensor::new(vec![1, 1, 8, 8], data.clone()).unwrap();
        let x_affine = Tensor::new(
            vec![1, 1, 8, 8],
            data.iter().map(|v| 2.5 * v).collect::<Vec<f64>>(),
        )
        .unwrap();

        let first_norm_out = |input: Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.leaf(input).unwrap();
            let w = tape
                .leaf(Tensor::new(vec![2, 1, 3, 3], p.values()[units[0].weights.clone()].to_vec()).unwrap())
                .unwrap();
            let b = tape
                .leaf(Tensor::new(vec![2], p.values()[units[0].bias.clone()].to_vec()).unwrap())
                .unwrap();
            let g = tape
                .leaf(Tensor::new(vec![2], p.values()[units[1].weights.clone()].to_vec()).unwrap())
                .unwrap();
            let s = tape
                .leaf(Tensor::new(vec![2], p.values()[units[1].bias.clone()].to_vec()).unwrap())
                .unwrap();
            let conv = tape.conv2d(xv, w, b, 1, 1).unwrap();
            let norm = tape.instance_norm(conv, g, s, 0.0).unwrap();
            tape.value(norm).clone()
        };

        let plain = first_norm_out(x);
        let affine = first_norm_out(x_affine);
        for (a, b) in plain.data().iter().zip(affine.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // Whole-network check on a 16x16 input: the gradient of the mean
        // output with respect to every parameter, verified in f64 against
        // central differences. Unit parameters enter the checker as
        // separate input tensors so each element gets perturbed. The step is
        // smaller than the per-op default so the probe windows rarely cross
        // a relu or pooling boundary somewhere in the depth of the net.
        use crate::autodiff::gradcheck::check_gradients_with_step;
        let arch = tiny();
        let p: ParamVector<f64> = build(arch, 33).unwrap();
        let mut inputs: Vec<Tensor<f64>> = Vec::new();
        for (w, b) in p.unflatten() {
            inputs.push(w);
            inputs.push(b);
        }
        let image: Vec<f64> = (0..256).map(|i| ((i * 83 % 256) as f64) / 256.0).collect();
        let image = Tensor::new(vec![1, 1, 16, 16], image).unwrap();
        let report = check_gradients_with_step(&inputs, 1e-6, move |tape, vars| {
            let unit_vars: Vec<UnitVars> = vars
                .chunks(2)
                .map(|pair| UnitVars { weights: pair[0], bias: pair[1] })
                .collect();
            let x = tape.leaf(image.clone())?;
            let out = forward_with_unit_vars(tape, &arch, &unit_vars, x)?;
            tape.mean(out)
        })
        .unwrap();
        assert_eq!(report.compared, arch.param_count());
        assert!(
            report.max_rel_err < 1e-3,
            "max rel err {:.3e}, worst {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
