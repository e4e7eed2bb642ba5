//! Encoder-side training objectives over predicted relation distributions.
//!
//! These are plain functions of probabilities so any upstream encoder can
//! be trained against them. Both losses are sums over examples.

use crate::data::{RelationId, RelationSet};
use crate::error::{Error, Result};

pub const DEFAULT_CLAMP: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-6;

/// A probability for every relation of a relation set.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionDistribution(Vec<f64>);

impl PredictionDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "probabilities outside [0, 1]: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

/// How a zero probability on a true label is treated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Clamp {
    /// Clamp into `[eps, 1]` before taking the log.
    Epsilon(f64),
    /// Report [`Error::ZeroProbability`].
    Strict,
}

impl Default for Clamp {
    fn default() -> Self {
        Clamp::Epsilon(DEFAULT_CLAMP)
    }
}

impl Clamp {
    fn neg_log(self, p: f64, index: usize) -> Result<f64> {
        match self {
            Clamp::Epsilon(eps) => Ok(-p.clamp(eps, 1.0).ln()),
            Clamp::Strict if p <= 0.0 => Err(Error::ZeroProbability { index }),
            Clamp::Strict => Ok(-p.ln()),
        }
    }
}

/// Multi-way loss: `-sum_i log tau_{r_i}(x_i, y_i)`.
pub fn lkb_loss_multiway(
    preds: &[PredictionDistribution],
    labels: &[RelationId],
    clamp: Clamp,
) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut loss = 0.0;
    for (i, (p, &r)) in preds.iter().zip(labels).enumerate() {
        let prob = *p.probs().get(r).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "label {r} outside distribution of size {}",
                p.0.len()
            ))
        })?;
        loss += clamp.neg_log(prob, i)?;
    }
    Ok(loss)
}

/// Binary random-vs-related loss. `preds[i]` is `(p_ran, p_notran)`;
/// `is_random[i]` is the collapsed label.
pub fn lkb_loss_binary(preds: &[(f64, f64)], is_random: &[bool], clamp: Clamp) -> Result<f64> {
    if preds.len() != is_random.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            is_random.len()
        )));
    }
    let mut loss = 0.0;
    for (i, (&(p_ran, p_not), &ran)) in preds.iter().zip(is_random).enumerate() {
        if !(0.0..=1.0).contains(&p_ran)
            || !(0.0..=1.0).contains(&p_not)
            || (p_ran + p_not - 1.0).abs() > SUM_TOLERANCE
        {
            return Err(Error::InvalidArgument(format!(
                "binary prediction ({p_ran}, {p_not}) at {i} is not a distribution"
            )));
        }
        loss += clamp.neg_log(if ran { p_ran } else { p_not }, i)?;
    }
    Ok(loss)
}

/// Combined objective: the plain sum of the multi-way and binary losses.
pub fn lkb_loss(
    multiway: &[PredictionDistribution],
    binary: &[(f64, f64)],
    labels: &[RelationId],
    relations: &RelationSet,
    clamp: Clamp,
) -> Result<f64> {
    let is_random: Vec<bool> = labels.iter().map(|&r| relations.is_random(r)).collect();
    Ok(lkb_loss_multiway(multiway, labels, clamp)? + lkb_loss_binary(binary, &is_random, clamp)?)
}
