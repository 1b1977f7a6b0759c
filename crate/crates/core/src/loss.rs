//! Multi-task objective: balanced objectness, Smooth-L1 box regression and
//! per-pixel segmentation cross-entropy, summed with unit weights.
//!
//! The scalar functions here define the loss values; the graph ops in
//! [`crate::tensor::Graph`] call into them so both paths agree bit for bit.

use serde::Serialize;

use crate::detector::MatchResult;
use crate::error::{Error, Result};
use crate::segbranch::{InstanceLogits, SegTarget};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[inline]
pub fn bce_from_prob(p: f64, target: f64) -> f64 {
    let p = clamp_prob(p);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

#[inline]
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

#[inline]
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// `-(mean_{P} log p + mean_{N} log(1 - p))`; an empty side contributes 0.
pub fn objectness_from_probs(positives: &[f64], negatives: &[f64]) -> f64 {
    let mut l = 0.0;
    if positives.is_empty() {
        log::debug!("objectness loss: no positive anchors, positive term dropped");
    } else {
        l -= positives.iter().map(|&p| clamp_prob(p).ln()).sum::<f64>() / positives.len() as f64;
    }
    if negatives.is_empty() {
        log::debug!("objectness loss: no negative anchors, negative term dropped");
    } else {
        l -= negatives.iter().map(|&p| (1.0 - clamp_prob(p)).ln()).sum::<f64>() / negatives.len() as f64;
    }
    l
}

/// Balanced objectness loss over per-anchor probabilities.
pub fn objectness_loss(scores: &[f64], m: &MatchResult) -> Result<f64> {
    let pick = |idx: &[usize]| -> Result<Vec<f64>> {
        idx.iter()
            .map(|&i| {
                scores
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("anchor {i} has no score")))
            })
            .collect()
    };
    Ok(objectness_from_probs(&pick(&m.positives)?, &pick(&m.negatives)?))
}

/// Mean over positive anchors of the Smooth-L1 distance (summed over the four
/// coordinates) between predicted deltas and the match's regression targets.
pub fn coord_loss(pred: &[[f64; 4]], m: &MatchResult) -> Result<f64> {
    if m.positives.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (&a, t) in m.positives.iter().zip(&m.targets) {
        let p = pred
            .get(a)
            .ok_or_else(|| Error::InvalidArgument(format!("anchor {a} has no prediction")))?;
        s += p.iter().zip(t).map(|(x, y)| smooth_l1(x - y)).sum::<f64>();
    }
    Ok(s / m.positives.len() as f64)
}

/// Per-pixel BCE averaged over each proposal's supervised cells, then over
/// proposals. Proposals with no supervised cell are skipped.
pub fn seg_loss(logits: &[InstanceLogits], targets: &[SegTarget]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logit maps for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for (k, (l, t)) in logits.iter().zip(targets).enumerate() {
        if l.values.len() != t.target.len() {
            return Err(Error::shape("seg_loss", &[l.values.len()], &[t.target.len()]));
        }
        let n = t.supervised();
        if n == 0 {
            log::warn!("seg loss: proposal {k} has an empty supervised region, skipped");
            continue;
        }
        let s: f64 = l
            .values
            .iter()
            .zip(&t.target)
            .zip(&t.mask)
            .filter(|(_, &m)| m)
            .map(|((&z, &y), _)| bce_from_prob(sigmoid(z), y))
            .sum();
        total += s / n as f64;
        used += 1;
    }
    Ok(if used == 0 { 0.0 } else { total / used as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBundle {
    pub obj: f64,
    pub coord: f64,
    pub seg: f64,
    pub total: f64,
}

pub fn total_loss(obj: f64, coord: f64, seg: f64) -> Result<LossBundle> {
    for (name, v) in [("L_obj", obj), ("L_coord", coord), ("L_seg", seg)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(LossBundle {
        obj,
        coord,
        seg,
        total: obj + coord + seg,
    })
}
