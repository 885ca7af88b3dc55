//! Cross-clip score aggregation and the MIL training loss.
//!
//! Per-clip logit vectors are fused into one video-level probability
//! distribution: mean/max pool over logits followed by a softmax, or the
//! exponential-mean normalized by its own sum. The negative log-likelihood
//! of that distribution is the training loss, so gradients reach every
//! clip's logits through the aggregation.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Probability floor for the loss; a collapsed class is clamped, counted,
/// and never produces a silent infinity.
pub const PROB_EPS: f64 = 1e-12;

static CLAMP_WARNINGS: AtomicU64 = AtomicU64::new(0);

/// How often the loss had to clamp a zero probability.
pub fn clamp_warning_count() -> u64 {
    CLAMP_WARNINGS.load(Ordering::Relaxed)
}

pub fn reset_clamp_warnings() {
    CLAMP_WARNINGS.store(0, Ordering::Relaxed);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregationKind {
    #[serde(rename = "mean")]
    MeanPool,
    #[serde(rename = "max")]
    MaxPool,
    #[serde(rename = "lse")]
    LogSumExp,
}

/// Video-level class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPrediction<S> {
    probs: Vec<S>,
}

impl<S: Scalar> VideoPrediction<S> {
    /// Wraps a vector that must already be a distribution.
    pub fn new(probs: Vec<S>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Input("empty prediction".into()));
        }
        let sum: S = probs.iter().copied().sum();
        if probs.iter().any(|&p| p < S::zero() || !p.is_finite())
            || (sum.as_f64() - 1.0).abs() > 1e-9
        {
            return Err(Error::Contract(format!(
                "not a probability distribution (sum {})",
                sum
            )));
        }
        Ok(VideoPrediction { probs })
    }

    pub fn probs(&self) -> &[S] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Highest-probability class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

fn validate_logits<S: Scalar>(clip_logits: &[Vec<S>]) -> Result<usize> {
    let first = clip_logits
        .first()
        .ok_or_else(|| Error::Input("aggregate of zero clips".into()))?;
    let k = first.len();
    if k == 0 {
        return Err(Error::Input("empty logit vector".into()));
    }
    if clip_logits.iter().any(|g| g.len() != k) {
        return Err(Error::Input("ragged clip logit lengths".into()));
    }
    Ok(k)
}

fn softmax_values<S: Scalar>(xs: &[S]) -> Vec<S> {
    let maxv = xs
        .iter()
        .copied()
        .fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<S> = xs.iter().map(|&x| (x - maxv).exp()).collect();
    let denom: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// Fuses per-clip logit vectors into a video-level distribution.
///
/// Mean/max pooling act on logits and are followed by a softmax. The
/// exponential path averages elementwise exponentials across clips and
/// normalizes by its own sum; the global max logit is subtracted first,
/// which is exact because the expression is shift-invariant.
pub fn aggregate<S: Scalar>(
    kind: AggregationKind,
    clip_logits: &[Vec<S>],
) -> Result<VideoPrediction<S>> {
    let k = validate_logits(clip_logits)?;
    let n = clip_logits.len();
    let probs = match kind {
        AggregationKind::MeanPool => {
            let mut pooled = vec![S::zero(); k];
            for g in clip_logits {
                for (acc, &x) in pooled.iter_mut().zip(g) {
                    *acc += x;
                }
            }
            let nf = S::of_f64(n as f64);
            for p in pooled.iter_mut() {
                *p = *p / nf;
            }
            softmax_values(&pooled)
        }
        AggregationKind::MaxPool => {
            let mut pooled = vec![S::neg_infinity(); k];
            for g in clip_logits {
                for (acc, &x) in pooled.iter_mut().zip(g) {
                    if x > *acc {
                        *acc = x;
                    }
                }
            }
            softmax_values(&pooled)
        }
        AggregationKind::LogSumExp => {
            let global_max = clip_logits
                .iter()
                .flatten()
                .copied()
                .fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
            let mut mean_exp = vec![S::zero(); k];
            for g in clip_logits {
                for (acc, &x) in mean_exp.iter_mut().zip(g) {
                    *acc += (x - global_max).exp();
                }
            }
            let nf = S::of_f64(n as f64);
            for e in mean_exp.iter_mut() {
                *e = *e / nf;
            }
            let denom: S = mean_exp.iter().copied().sum();
            mean_exp.into_iter().map(|e| e / denom).collect()
        }
    };
    VideoPrediction::new(probs)
}

/// Negative log-likelihood of the true class under a video prediction.
pub fn mil_loss<S: Scalar>(prediction: &VideoPrediction<S>, truth: usize) -> Result<S> {
    if truth >= prediction.len() {
        return Err(Error::Input(format!(
            "class {truth} out of {}",
            prediction.len()
        )));
    }
    let p = prediction.probs()[truth];
    let eps = S::of_f64(PROB_EPS);
    let clamped = if p < eps {
        CLAMP_WARNINGS.fetch_add(1, Ordering::Relaxed);
        eps
    } else {
        p
    };
    Ok(-clamped.ln())
}

/// Batch mean of per-example losses.
pub fn batch_mean<S: Scalar>(losses: &[S]) -> Result<S> {
    if losses.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    Ok(losses.iter().copied().sum::<S>() / S::of_f64(losses.len() as f64))
}

/// Graph-side aggregation: same math as [`aggregate`], differentiable.
/// `clip_logits` are `[K]` (or `[1, K]`) vectors; output is a `[K]`
/// distribution node.
pub fn aggregate_var<S: Scalar>(
    g: &mut Graph<S>,
    kind: AggregationKind,
    clip_logits: &[Var],
) -> Result<Var> {
    if clip_logits.is_empty() {
        return Err(Error::Input("aggregate of zero clips".into()));
    }
    let k = g.value(clip_logits[0]).numel();
    if k == 0 || clip_logits.iter().any(|&v| g.value(v).numel() != k) {
        return Err(Error::Input("ragged clip logit lengths".into()));
    }
    let rows: Vec<Var> = clip_logits
        .iter()
        .map(|&v| g.reshape(v, vec![1, k]))
        .collect::<Result<_>>()?;
    let stacked = g.concat(&rows, 0)?; // [N, K]
    match kind {
        AggregationKind::MeanPool => {
            let pooled = g.mean_axis(stacked, 0)?;
            g.softmax(pooled, 0)
        }
        AggregationKind::MaxPool => {
            let pooled = g.max_axis(stacked, 0)?;
            g.softmax(pooled, 0)
        }
        AggregationKind::LogSumExp => {
            // shift by the global max (a constant w.r.t. the graph; exact by
            // shift invariance) so the exponentials cannot overflow
            let shift = g.value(stacked).max_value().as_f64();
            let shifted = g.add_scalar(stacked, -shift)?;
            let exps = g.exp(shifted)?;
            let mean_exp = g.mean_axis(exps, 0)?; // [K]
            let total = g.sum_all(mean_exp)?; // [1]
            g.div(mean_exp, total)
        }
    }
}

/// Graph-side NLL of class `truth` under a `[K]` distribution node, with the
/// same probability floor as the value path.
pub fn mil_loss_var<S: Scalar>(g: &mut Graph<S>, prediction: Var, truth: usize) -> Result<Var> {
    let k = g.value(prediction).numel();
    if truth >= k {
        return Err(Error::Input(format!("class {truth} out of {k}")));
    }
    if g.value(prediction).data()[truth] < S::of_f64(PROB_EPS) {
        CLAMP_WARNINGS.fetch_add(1, Ordering::Relaxed);
    }
    let p = g.pick(prediction, truth)?;
    let logp = g.ln_clamped(p, PROB_EPS)?;
    g.scale(logp, -1.0)
}
