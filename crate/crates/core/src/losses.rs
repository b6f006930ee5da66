//! Training objective: mask BCE, soft dice, query classification BCE,
//! their weighted composite, and the auxiliary intersection-label term.
//!
//! Every loss averages over elements, so values do not depend on mask
//! resolution.

use serde::Serialize;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// Additive smoothing in both numerator and denominator of the dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossWeights {
    pub lambda_mask: f64,
    pub lambda_dice: f64,
    pub lambda_bce: f64,
    pub lambda_mask_prime: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_mask: 5.0,
            lambda_dice: 5.0,
            lambda_bce: 2.0,
            lambda_mask_prime: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_mask", self.lambda_mask),
            ("lambda_dice", self.lambda_dice),
            ("lambda_bce", self.lambda_bce),
            ("lambda_mask_prime", self.lambda_mask_prime),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Value(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A binary mask as a `[H, W]` target tensor.
pub fn mask_target(m: &BinaryMask) -> Tensor {
    Tensor::new(vec![m.height(), m.width()], m.to_f64()).expect("dims match data")
}

fn check_target(g: &Graph, pred: Var, target: &Tensor, what: &str) -> Result<()> {
    if g.shape(pred) != target.shape() {
        return Err(Error::Shape(format!(
            "{what}: prediction {:?} vs target {:?}",
            g.shape(pred),
            target.shape()
        )));
    }
    if let Some(v) = target.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Value(format!("{what}: target value {v} is not 0 or 1")));
    }
    Ok(())
}

fn clamped_bce(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let p = g.clamp(pred, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = g.ln(p);
    let neg_p = g.scale(p, -1.0);
    let one_minus_p = g.add_scalar(neg_p, 1.0);
    let log_q = g.ln(one_minus_p);
    let t = g.constant(target.clone());
    let u = g.constant(Tensor::new(
        target.shape().to_vec(),
        target.data().iter().map(|v| 1.0 - v).collect(),
    )?);
    let pos = g.mul(log_p, t)?;
    let neg = g.mul(log_q, u)?;
    let ll = g.add(pos, neg)?;
    let mean = g.mean_all(ll);
    Ok(g.scale(mean, -1.0))
}

/// Mean per-pixel binary cross-entropy of probabilities against a 0/1 target.
pub fn bce_mask_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    check_target(g, pred, target, "bce_mask_loss")?;
    clamped_bce(g, pred, target)
}

/// `1 − (2·Σ p·t + s) / (Σ p + Σ t + s)` with `s = DICE_SMOOTH`.
pub fn dice_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    check_target(g, pred, target, "dice_loss")?;
    let t = g.constant(target.clone());
    let pt = g.mul(pred, t)?;
    let inter = g.sum(pt);
    let twice = g.scale(inter, 2.0);
    let num = g.add_scalar(twice, DICE_SMOOTH);
    let sum_p = g.sum(pred);
    let sum_t: f64 = target.data().iter().sum();
    let den = g.add_scalar(sum_p, sum_t + DICE_SMOOTH);
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean sigmoid cross-entropy of `N×K` logits against multi-hot labels.
pub fn class_bce_loss(g: &mut Graph, logits: Var, labels: &Tensor) -> Result<Var> {
    check_target(g, logits, labels, "class_bce_loss")?;
    let per = g.bce_with_logits(logits, labels)?;
    Ok(g.mean_all(per))
}

/// `λ_mask·m + λ_dice·d + λ_bce·b`.
pub fn avs_loss(g: &mut Graph, m: Var, d: Var, b: Var, w: &LossWeights) -> Result<Var> {
    for v in [m, d, b] {
        if !g.value(v).is_scalar() {
            return Err(Error::Contract("avs_loss components must be scalars".into()));
        }
    }
    let wm = g.scale(m, w.lambda_mask);
    let wd = g.scale(d, w.lambda_dice);
    let wb = g.scale(b, w.lambda_bce);
    let md = g.add(wm, wd)?;
    g.add(md, wb)
}

/// The same BCE functional as [`bce_mask_loss`], against the
/// flow ∩ ground-truth label.
pub fn post_mask_loss(g: &mut Graph, pred: Var, m_post: &Tensor) -> Result<Var> {
    check_target(g, pred, m_post, "post_mask_loss")?;
    clamped_bce(g, pred, m_post)
}

/// `avs + λ'_mask·post`.
pub fn total_loss(g: &mut Graph, avs: Var, post: Var, w: &LossWeights) -> Result<Var> {
    if !g.value(avs).is_scalar() || !g.value(post).is_scalar() {
        return Err(Error::Contract("total_loss components must be scalars".into()));
    }
    let wp = g.scale(post, w.lambda_mask_prime);
    g.add(avs, wp)
}
