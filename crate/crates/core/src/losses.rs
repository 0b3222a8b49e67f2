//! Segmentation losses and the evaluation metric.
//!
//! All losses are built on the tape so they can drive training, take
//! predicted probabilities plus a binary target mask, and reduce over the
//! whole batch. Conventions shared by every loss:
//!
//! * probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` immediately
//!   before any logarithm — and nowhere else, so overlap sums stay exact;
//! * `X = Σ t·p` (soft intersection) and `U = Σ (t + p - t·p)` (soft union)
//!   are summed over every pixel of the batch;
//! * the stabilizer `eps` enters ratios as `(X + eps) / (U + eps)`.

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Probability clamp applied before logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Default ratio stabilizer.
pub const LOSS_EPS: f64 = 1e-6;

/// Loss selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    WeightedBce,
    SoftIou,
    BcePlusLogDice,
    Dice,
    TverskyFocal,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::WeightedBce,
        LossKind::SoftIou,
        LossKind::BcePlusLogDice,
        LossKind::Dice,
        LossKind::TverskyFocal,
    ];
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::WeightedBce => "weighted_bce",
            LossKind::SoftIou => "soft_iou",
            LossKind::BcePlusLogDice => "bce_log_dice",
            LossKind::Dice => "dice",
            LossKind::TverskyFocal => "tversky_focal",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted_bce" => Ok(LossKind::WeightedBce),
            "soft_iou" => Ok(LossKind::SoftIou),
            "bce_log_dice" => Ok(LossKind::BcePlusLogDice),
            "dice" => Ok(LossKind::Dice),
            "tversky_focal" => Ok(LossKind::TverskyFocal),
            other => Err(Error::Config(format!(
                "unknown loss '{other}' (expected weighted_bce, soft_iou, bce_log_dice, dice, or tversky_focal)"
            ))),
        }
    }
}

/// Shared loss parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    /// Ratio stabilizer added to numerator and denominator.
    pub eps: f64,
    /// Use the reciprocal of the object/background ratio as the positive
    /// class weight.
    pub invert_pos_weight: bool,
    /// False-positive weight of the Tversky index.
    pub tversky_alpha: f64,
    /// False-negative weight of the Tversky index.
    pub tversky_beta: f64,
    /// Focal exponent applied to `1 - TI`.
    pub focal_gamma: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            eps: LOSS_EPS,
            invert_pos_weight: false,
            tversky_alpha: 0.3,
            tversky_beta: 0.7,
            focal_gamma: 0.75,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("loss eps must be positive, got {}", self.eps)));
        }
        if !(self.tversky_alpha + self.tversky_beta > 0.0) {
            return Err(Error::Config(format!(
                "tversky weights must sum to a positive value, got {} + {}",
                self.tversky_alpha, self.tversky_beta
            )));
        }
        if !(self.focal_gamma > 0.0) {
            return Err(Error::Config(format!(
                "focal exponent must be positive, got {}",
                self.focal_gamma
            )));
        }
        Ok(())
    }
}

fn check_binary<S: Scalar>(target: &Tensor<S>) -> Result<()> {
    let (zero, one) = (S::zero(), S::one());
    if target.data().iter().any(|&t| t != zero && t != one) {
        return Err(Error::Data("target mask contains values other than 0 and 1".into()));
    }
    Ok(())
}

fn check_shapes<S: Scalar>(tape: &Tape<S>, pred: Var, target: &Tensor<S>) -> Result<()> {
    let got = tape.value(pred).shape();
    if got != target.shape() {
        return Err(Error::Dimension(format!(
            "prediction shape {:?} does not match target shape {:?}",
            got,
            target.shape()
        )));
    }
    Ok(())
}

/// Positive-class weight of a batch: the ratio of object pixels to
/// background pixels in the target (or its reciprocal), clamped to
/// `[1e-3, 1e3]`. Degenerate batches (all object or all background) engage
/// the clamp and emit a warning rather than failing.
pub fn positive_class_weight<S: Scalar>(target: &Tensor<S>, invert: bool) -> Result<f64> {
    check_binary(target)?;
    let object: f64 = target.data().iter().map(|t| t.to_f64_lossy()).sum();
    let background = target.len() as f64 - object;
    let raw = if invert { background / object } else { object / background };
    let clamped = raw.clamp(1e-3, 1e3);
    if raw != clamped || !raw.is_finite() {
        log::warn!(
            "positive-class weight {raw:.3e} outside [1e-3, 1e3] \
             ({object} object / {background} background pixels); clamped to {clamped:.3e}"
        );
    }
    Ok(clamped)
}

/// Mean over pixels of `-(w·t·log p + (1-t)·log(1-p))`, with `w` the
/// batch's positive-class weight.
pub fn weighted_bce<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    target: &Tensor<S>,
    invert_pos_weight: bool,
) -> Result<Var> {
    check_shapes(tape, pred, target)?;
    let w = positive_class_weight(target, invert_pos_weight)?;
    let (lo, hi) = (S::from_f64_lossy(PROB_EPS), S::from_f64_lossy(1.0 - PROB_EPS));

    let t = tape.leaf(target.clone())?;
    let pc = tape.clamp(pred, lo, hi)?;
    let log_p = tape.log(pc)?;
    let pos = tape.mul(t, log_p)?;
    let pos = tape.scale(pos, S::from_f64_lossy(w))?;

    let neg_p = tape.scale(pred, S::from_f64_lossy(-1.0))?;
    let one_minus_p = tape.add_scalar(neg_p, S::one())?;
    let omp_c = tape.clamp(one_minus_p, lo, hi)?;
    let log_omp = tape.log(omp_c)?;
    let neg_t = tape.scale(t, S::from_f64_lossy(-1.0))?;
    let one_minus_t = tape.add_scalar(neg_t, S::one())?;
    let neg = tape.mul(one_minus_t, log_omp)?;

    let sum = tape.add(pos, neg)?;
    let mean = tape.mean(sum)?;
    tape.scale(mean, S::from_f64_lossy(-1.0))
}

/// Soft IoU value `(X + eps) / (U + eps)` over the whole batch.
pub fn soft_iou<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    target: &Tensor<S>,
    eps: f64,
) -> Result<Var> {
    check_shapes(tape, pred, target)?;
    check_binary(target)?;
    let t = tape.leaf(target.clone())?;
    let tp = tape.mul(t, pred)?;
    let x = tape.sum(tp)?;
    let t_plus_p = tape.add(t, pred)?;
    let union_terms = tape.sub(t_plus_p, tp)?;
    let u = tape.sum(union_terms)?;
    let xn = tape.add_scalar(x, S::from_f64_lossy(eps))?;
    let ud = tape.add_scalar(u, S::from_f64_lossy(eps))?;
    tape.div(xn, ud)
}

/// `1 - soft IoU`.
pub fn soft_iou_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    target: &Tensor<S>,
    eps: f64,
) -> Result<Var> {
    let iou = soft_iou(tape, pred, target, eps)?;
    let neg = tape.scale(iou, S::from_f64_lossy(-1.0))?;
    tape.add_scalar(neg, S::one())
}

/// Weighted BCE plus `-log(2·IoU / (IoU + 1))`. The second term is the
/// negative log of the soft Dice score, since `2·IoU/(IoU+1)` rewrites to
/// `2(X+eps)/(X+U+2eps)`.
pub fn bce_plus_log_dice<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    target: &Tensor<S>,
    params: &LossParams,
) -> Result<Var> {
    let bce = weighted_bce(tape, pred, target, params.invert_pos_weight)?;
    let iou = soft_iou(tape, pred, target, params.eps)?;
    let two_iou = tape.scale(iou, S::from_f64_lossy(2.0))?;
    let iou_plus_one = tape.add_scalar(iou, S::one())?;
    let dice = tape.div(two_iou, iou_plus_one)?;
    let log_dice = tape.log(dice)?;
    let neg_log = tape.scale(log_dice, S::from_f64_lossy(-1.0))?;
    tape.add(bce, neg_log)
}

/// `1 - (2X + eps) / (X + U + eps)`.
pub fn dice_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    target: &Tensor<S>,
    eps: f64,
) -> Result<Var> {
    check_shapes(tape, pred, target)?;
    check_binary(target)?;
    let t = tape.leaf(target.clone())?;
    let tp = tape.mul(t, pred)?;
    let x = tape.sum(tp)?;
    let t_plus_p = tape.add(t, pred)?;
    let union_terms = tape.sub(t_plus_p, tp)?;
    let u = tape.sum(union_terms)?;
    let two_x = tape.scale(x, S::from_f64_lossy(2.0))?;
    let numer = tape.add_scalar(two_x, S::from_f64_lossy(eps))?;
    let x_plus_u = tape.add(x, u)?;
    let denom = tape.add_scalar(x_plus_u, S::from_f64_lossy(eps))?;
    let dice = tape.div(numer, denom)?;
    let neg = tape.scale(dice, S::from_f64_lossy(-1.0))?;
    tape.add_scalar(neg, S::one())
}

/// Focal Tversky loss `(1 - TI)^gamma` with
/// `TI = (X + eps) / (X + alpha·FP + beta·FN + eps)`.
pub fn tversky_focal_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    target: &Tensor<S>,
    alpha: f64,
    beta: f64,
    gamma: f64,
    eps: f64,
) -> Result<Var> {
    check_shapes(tape, pred, target)?;
    check_binary(target)?;
    let t = tape.leaf(target.clone())?;
    let tp = tape.mul(t, pred)?;
    let x = tape.sum(tp)?;

    let neg_t = tape.scale(t, S::from_f64_lossy(-1.0))?;
    let one_minus_t = tape.add_scalar(neg_t, S::one())?;
    let fp_terms = tape.mul(one_minus_t, pred)?;
    let fp = tape.sum(fp_terms)?;

    let neg_p = tape.scale(pred, S::from_f64_lossy(-1.0))?;
    let one_minus_p = tape.add_scalar(neg_p, S::one())?;
    let fn_terms = tape.mul(t, one_minus_p)?;
    let fnl = tape.sum(fn_terms)?;

    let a_fp = tape.scale(fp, S::from_f64_lossy(alpha))?;
    let b_fn = tape.scale(fnl, S::from_f64_lossy(beta))?;
    let penalties = tape.add(a_fp, b_fn)?;
    let denom_core = tape.add(x, penalties)?;
    let denom = tape.add_scalar(denom_core, S::from_f64_lossy(eps))?;
    let numer = tape.add_scalar(x, S::from_f64_lossy(eps))?;
    let ti = tape.div(numer, denom)?;

    let neg_ti = tape.scale(ti, S::from_f64_lossy(-1.0))?;
    let one_minus_ti = tape.add_scalar(neg_ti, S::one())?;
    // Floor at 1e-9: the power rule's x^(gamma-1) blows up at exactly zero,
    // which a fully saturated perfect prediction can reach in f32.
    let floored = tape.clamp(one_minus_ti, S::from_f64_lossy(1e-9), S::one())?;
    tape.powf(floored, S::from_f64_lossy(gamma))
}

/// Build the selected loss on the tape.
pub fn loss_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    kind: LossKind,
    params: &LossParams,
    pred: Var,
    target: &Tensor<S>,
) -> Result<Var> {
    params.validate()?;
    match kind {
        LossKind::WeightedBce => weighted_bce(tape, pred, target, params.invert_pos_weight),
        LossKind::SoftIou => soft_iou_loss(tape, pred, target, params.eps),
        LossKind::BcePlusLogDice => bce_plus_log_dice(tape, pred, target, params),
        LossKind::Dice => dice_loss(tape, pred, target, params.eps),
        LossKind::TverskyFocal => tversky_focal_loss(
            tape,
            pred,
            target,
            params.tversky_alpha,
            params.tversky_beta,
            params.focal_gamma,
            params.eps,
        ),
    }
}

/// Exact evaluation IoU in percent, averaged over the images of the batch.
///
/// Predictions binarize at `p > threshold`. An image whose target and
/// prediction are both empty scores 100; an empty target with a non-empty
/// prediction scores 0.
pub fn eval_iou<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, threshold: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "prediction shape {:?} does not match target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    check_binary(target)?;
    let shape = pred.shape();
    if shape.is_empty() || shape[0] == 0 {
        return Err(Error::Dimension("evaluation batch is empty".into()));
    }
    let n = if shape.len() >= 2 { shape[0] } else { 1 };
    let per_image = pred.len() / n;
    let mut total = 0.0f64;
    for i in 0..n {
        let r = i * per_image..(i + 1) * per_image;
        let mut inter = 0usize;
        let mut union = 0usize;
        for (p, t) in pred.data()[r.clone()].iter().zip(&target.data()[r]) {
            let pb = p.to_f64_lossy() > threshold;
            let tb = *t == S::one();
            inter += (pb && tb) as usize;
            union += (pb || tb) as usize;
        }
        total += if union == 0 { 100.0 } else { 100.0 * inter as f64 / union as f64 };
    }
    Ok(total / n as f64)
}
