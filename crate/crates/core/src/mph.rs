//! Perception-head bank mathematics: gain-scheduled loss weighting, the
//! combined distance + confidence loss, and head selection with distance
//! decoding at inference time.
//!
//! Each head owns a distance-norm interval `[lo, hi)` with center `mu` and
//! half-width `sigma`, predicts the distance vector scaled by its output
//! gain `1/mu`, and carries a confidence logit. Training weighs each head's
//! distance loss by a Gaussian that is clipped to 1 inside the interval and
//! decays smoothly outside it.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// One head's confidence interval, decay coefficient, and output gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptionHeadSpec {
    /// Interval center (meters).
    pub mu: f64,
    /// Interval half-width (meters).
    pub sigma: f64,
    /// Decay coefficient: larger values drop the weight faster outside the
    /// interval.
    pub alpha: f64,
    /// Distance-norm interval `[lo, hi)` in meters.
    pub lo: f64,
    pub hi: f64,
}

impl PerceptionHeadSpec {
    /// Output gain applied to the scaled distance prediction.
    pub fn gain(&self) -> f64 {
        1.0 / self.mu
    }

    pub fn contains(&self, norm: f64) -> bool {
        norm >= self.lo && norm < self.hi
    }
}

/// How the per-head distance losses are weighted during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Gaussian clipped weight as a function of the distance norm.
    Gcw,
    /// Constant weight 1 for every head (single-head ablation).
    Uniform,
}

/// Ordered set of perception heads whose intervals partition the working
/// distance range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadBank {
    pub heads: Vec<PerceptionHeadSpec>,
    pub weighting: Weighting,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MphError {
    EmptyBank,
    BrokenPartition { head: usize },
    InvalidHead { head: usize },
    HeadCountMismatch { expected: usize, got: usize },
    OutOfRange { norm: f64, max: f64 },
    NonFinite,
}

impl std::fmt::Display for MphError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::EmptyBank => write!(f, "head bank has no heads"),
            Self::BrokenPartition { head } => {
                write!(f, "head {head} interval does not continue the partition")
            }
            Self::InvalidHead { head } => write!(f, "head {head} has invalid parameters"),
            Self::HeadCountMismatch { expected, got } => {
                write!(f, "expected {expected} heads, got {got}")
            }
            Self::OutOfRange { norm, max } => {
                write!(f, "distance norm {norm} outside the bank range [0, {max})")
            }
            Self::NonFinite => write!(f, "non-finite value in loss inputs"),
        }
    }
}

impl std::error::Error for MphError {}

impl HeadBank {
    /// Validates that intervals are disjoint, contiguous from 0, and that
    /// every head has positive parameters.
    pub fn new(heads: Vec<PerceptionHeadSpec>, weighting: Weighting) -> Result<Self, MphError> {
        if heads.is_empty() {
            return Err(MphError::EmptyBank);
        }
        let mut expected_lo = 0.0;
        for (i, h) in heads.iter().enumerate() {
            if !(h.mu > 0.0 && h.sigma > 0.0 && h.alpha > 0.0 && h.lo < h.hi) {
                return Err(MphError::InvalidHead { head: i });
            }
            if (h.lo - expected_lo).abs() > 1e-12 {
                return Err(MphError::BrokenPartition { head: i });
            }
            expected_lo = h.hi;
        }
        Ok(Self { heads, weighting })
    }

    /// The four-head bank used throughout: interval centers 8/24/48/96 mm,
    /// geometric interval widths, and a faster decay on the closest head.
    pub fn default_four() -> Self {
        let spec = |mu: f64, sigma: f64, alpha: f64, lo: f64, hi: f64| PerceptionHeadSpec {
            mu,
            sigma,
            alpha,
            lo,
            hi,
        };
        Self::new(
            vec![
                spec(0.008, 0.008, 1.6, 0.0, 0.016),
                spec(0.024, 0.008, 1.0, 0.016, 0.032),
                spec(0.048, 0.016, 1.0, 0.032, 0.064),
                spec(0.096, 0.032, 1.0, 0.064, 0.128),
            ],
            Weighting::Gcw,
        )
        .expect("default bank is valid")
    }

    /// Single-head ablation bank: one head covering the whole range with a
    /// fixed output gain and uniform loss weight.
    pub fn single(gain: f64, range: f64) -> Self {
        Self::new(
            vec![PerceptionHeadSpec {
                mu: 1.0 / gain,
                sigma: range / 2.0,
                alpha: 1.0,
                lo: 0.0,
                hi: range,
            }],
            Weighting::Uniform,
        )
        .expect("single-head bank is valid")
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Upper end of the covered distance range (exclusive).
    pub fn range_max(&self) -> f64 {
        self.heads.last().map(|h| h.hi).unwrap_or(0.0)
    }

    /// Index of the unique head whose interval contains `norm`.
    pub fn head_for(&self, norm: f64) -> Result<usize, MphError> {
        self.heads
            .iter()
            .position(|h| h.contains(norm))
            .ok_or(MphError::OutOfRange {
                norm,
                max: self.range_max(),
            })
    }
}

/// Loss weight for one head at distance norm `x`:
/// `min(exp(α²/2) · exp(−(α(x−μ)/σ)²/2), 1)`.
///
/// Equals 1 exactly on `[μ−σ, μ+σ]` (the exponents cancel at the boundary),
/// decays smoothly outside, and never reaches 0.
pub fn gcw(head: &PerceptionHeadSpec, x: f64) -> f64 {
    let z = head.alpha * (x - head.mu) / head.sigma;
    let w = (0.5 * head.alpha * head.alpha - 0.5 * z * z).exp();
    w.min(1.0)
}

/// Network output for one observation: per-head scaled distance predictions
/// and one confidence logit per head.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub distances: Vec<Vector3<f64>>,
    pub logits: Vec<f64>,
}

/// Training target produced from a ground-truth distance vector: per-head
/// clamped scaled distances plus a one-hot confidence row.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTarget {
    pub distances: Vec<Vector3<f64>>,
    pub confidence: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Weight between the distance and confidence loss terms.
    pub k: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { k: 1.0 }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn check_shapes(pred: &Prediction, target: &EncodedTarget, bank: &HeadBank) -> Result<(), MphError> {
    let n = bank.len();
    if pred.distances.len() != n || pred.logits.len() != n {
        return Err(MphError::HeadCountMismatch {
            expected: n,
            got: pred.distances.len().min(pred.logits.len()),
        });
    }
    if target.distances.len() != n || target.confidence.len() != n {
        return Err(MphError::HeadCountMismatch {
            expected: n,
            got: target.distances.len().min(target.confidence.len()),
        });
    }
    let finite = pred.logits.iter().all(|v| v.is_finite())
        && pred
            .distances
            .iter()
            .all(|d| d.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(MphError::NonFinite);
    }
    Ok(())
}

fn head_weight(bank: &HeadBank, head: usize, d_r_norm: f64) -> f64 {
    match bank.weighting {
        Weighting::Gcw => gcw(&bank.heads[head], d_r_norm),
        Weighting::Uniform => 1.0,
    }
}

/// Per-sample loss: cross-entropy of the softmaxed confidence logits against
/// the one-hot target, plus `k` times the weighted sum over heads of the L1
/// distance loss. The batch mean is taken by the caller.
pub fn mph_loss(
    pred: &Prediction,
    target: &EncodedTarget,
    d_r_norm: f64,
    bank: &HeadBank,
    cfg: &LossConfig,
) -> Result<f64, MphError> {
    check_shapes(pred, target, bank)?;
    let probs = softmax(&pred.logits);
    let mut ce = 0.0;
    for (p, t) in probs.iter().zip(&target.confidence) {
        if *t > 0.0 {
            ce -= t * p.max(1e-300).ln();
        }
    }
    let mut dist = 0.0;
    for h in 0..bank.len() {
        let l1: f64 = (pred.distances[h] - target.distances[h])
            .iter()
            .map(|v| v.abs())
            .sum();
        dist += head_weight(bank, h, d_r_norm) * l1;
    }
    Ok(ce + cfg.k * dist)
}

/// Gradients of [`mph_loss`] with respect to the predicted distances and the
/// confidence logits.
pub fn mph_loss_grad(
    pred: &Prediction,
    target: &EncodedTarget,
    d_r_norm: f64,
    bank: &HeadBank,
    cfg: &LossConfig,
) -> Result<(Vec<Vector3<f64>>, Vec<f64>), MphError> {
    check_shapes(pred, target, bank)?;
    let probs = softmax(&pred.logits);
    let d_logits: Vec<f64> = probs
        .iter()
        .zip(&target.confidence)
        .map(|(p, t)| p - t)
        .collect();
    let d_dist: Vec<Vector3<f64>> = (0..bank.len())
        .map(|h| {
            let w = cfg.k * head_weight(bank, h, d_r_norm);
            (pred.distances[h] - target.distances[h]).map(|v| w * v.signum())
        })
        .collect();
    Ok((d_dist, d_logits))
}

/// Deployment decode: pick the head with the highest confidence (lowest
/// index on ties) and scale its distance output back to meters by `μ`.
pub fn select_and_decode(pred: &Prediction, bank: &HeadBank) -> (usize, Vector3<f64>) {
    let probs = softmax(&pred.logits);
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    (best, pred.distances[best] * bank.heads[best].mu)
}
