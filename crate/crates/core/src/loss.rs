//! Mask losses with deep supervision and the no-target cross-entropy.
//!
//! Plain-slice functions compute values; the `*_node` variants build the
//! same quantities into a graph for training.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::float::Float;
use crate::geometry::{nearest_downsample_mask, BinaryMask};
use crate::graph::{bce_with_logit, sigmoid_of, NodeId};
use crate::nn::Ctx;

/// Mean binary cross-entropy of `sigmoid(logits)` against `target`.
pub fn ce_loss<F: Float>(logits: &[F], target: &[F]) -> Result<F> {
    check_pair(logits, target)?;
    let total: F = logits.iter().zip(target).map(|(&x, &y)| bce_with_logit(x, y)).sum();
    Ok(total / F::lit(logits.len() as f64))
}

/// `1 - (2 * sum(y * p) + eps) / (sum(y) + sum(p) + eps)`.
pub fn dice_loss<F: Float>(logits: &[F], target: &[F], eps: F) -> Result<F> {
    check_pair(logits, target)?;
    if !(eps > F::zero()) {
        return Err(invalid_arg!("dice smoothing must be positive, got {}", eps));
    }
    Ok(dice_from_probs(logits.iter().map(|&x| sigmoid_of(x)), target, eps))
}

/// Dice on probabilities directly (used where `p` is given, not a logit).
pub fn dice_from_probs<F: Float>(probs: impl Iterator<Item = F>, target: &[F], eps: F) -> F {
    let mut inter = F::zero();
    let mut mass = F::zero();
    for (p, &y) in probs.zip(target) {
        inter = inter + y * p;
        mass = mass + y + p;
    }
    F::one() - (F::lit(2.0) * inter + eps) / (mass + eps)
}

/// Binary cross-entropy of `sigmoid(logit)` against the no-target flag.
pub fn nt_loss<F: Float>(logit: F, nt_flag: bool) -> F {
    bce_with_logit(logit, if nt_flag { F::one() } else { F::zero() })
}

fn check_pair<F>(logits: &[F], target: &[F]) -> Result<()> {
    if logits.len() != target.len() {
        return Err(invalid_arg!("{} logits for {} targets", logits.len(), target.len()));
    }
    if logits.is_empty() {
        return Err(invalid_arg!("empty logit map"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScaleLoss {
    pub ce: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    /// Supervised scales, coarse to fine.
    pub scales: Vec<ScaleLoss>,
    /// Sum over supervised no-target heads (unweighted).
    pub nt: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
    pub dice_eps: f64,
    pub nt: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for w in [self.ce, self.dice, self.nt] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(invalid_arg!("loss weights must be finite and non-negative"));
            }
        }
        if !(self.dice_eps > 0.0) {
            return Err(invalid_arg!("dice smoothing must be positive"));
        }
        Ok(())
    }
}

/// A stitched `h * w x 1` logit map in the graph.
#[derive(Debug, Clone, Copy)]
pub struct ScaleLogits {
    pub node: NodeId,
    pub h: usize,
    pub w: usize,
}

/// `sum_i (w_ce * CE_i + w_dice * Dice_i)` with each target made by nearest
/// downsampling of `gt`. No-target samples pass an all-zero `gt`.
pub fn mask_loss_node<F: Float>(
    ctx: &mut Ctx<'_, F>,
    scales: &[ScaleLogits],
    gt: &BinaryMask,
    weights: &LossWeights,
) -> Result<(NodeId, Vec<ScaleLoss>)> {
    weights.validate()?;
    if scales.is_empty() {
        return Err(invalid_arg!("no supervised scales"));
    }
    let mut terms = Vec::with_capacity(2 * scales.len());
    let mut report = Vec::with_capacity(scales.len());
    for s in scales {
        if ctx.graph.shape(s.node) != (s.h * s.w, 1) {
            return Err(invalid_arg!("logit node is not a {}x{} map", s.h, s.w));
        }
        let y: Vec<F> = nearest_downsample_mask(gt, s.h, s.w)?.to_floats();
        let ce = ctx.graph.bce_logits_mean(s.node, &y);
        let dice = ctx.graph.dice_logits(s.node, &y, F::lit(weights.dice_eps));
        report.push(ScaleLoss {
            ce: ctx.graph.value(ce).item().to_f64().unwrap_or(f64::NAN),
            dice: ctx.graph.value(dice).item().to_f64().unwrap_or(f64::NAN),
        });
        terms.push((ce, F::lit(weights.ce)));
        terms.push((dice, F::lit(weights.dice)));
    }
    Ok((ctx.graph.weighted_sum(&terms), report))
}

/// Sum of the no-target cross-entropies of the given `1 x 1` logits.
pub fn nt_loss_node<F: Float>(ctx: &mut Ctx<'_, F>, logits: &[NodeId], nt_flag: bool) -> Option<NodeId> {
    if logits.is_empty() {
        return None;
    }
    let y = [if nt_flag { F::one() } else { F::zero() }];
    let terms: Vec<(NodeId, F)> = logits.iter().map(|&l| (ctx.graph.bce_logits_mean(l, &y), F::one())).collect();
    Some(ctx.graph.weighted_sum(&terms))
}

/// Full objective: mask loss plus `w_nt` times the no-target loss.
pub fn total_loss_node<F: Float>(
    ctx: &mut Ctx<'_, F>,
    scales: &[ScaleLogits],
    nt_logits: &[NodeId],
    gt: &BinaryMask,
    nt_flag: bool,
    weights: &LossWeights,
) -> Result<(NodeId, LossReport)> {
    let (mask, per_scale) = mask_loss_node(ctx, scales, gt, weights)?;
    let (total, nt) = match nt_loss_node(ctx, nt_logits, nt_flag) {
        Some(nt) => {
            let v = ctx.graph.value(nt).item().to_f64().unwrap_or(f64::NAN);
            (ctx.graph.weighted_sum(&[(mask, F::one()), (nt, F::lit(weights.nt))]), v)
        }
        None => (mask, 0.0),
    };
    let report = LossReport {
        scales: per_scale,
        nt,
        total: ctx.graph.value(total).item().to_f64().unwrap_or(f64::NAN),
    };
    Ok((total, report))
}
