//! Probability-simplex primitives: tempered softmax, divergences, and the
//! label-smoothing / CutMix target constructions.
//!
//! All logarithms are natural. Divergences clamp the second argument at
//! [`LOG_FLOOR`] before taking a log so that a zero entry yields a large but
//! finite penalty instead of `inf`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, LabError, Result};

/// Lower clamp applied to probabilities before a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Norm below which [`cosine_sim`] treats a vector as zero.
pub const COSINE_DEGENERATE_NORM: f64 = 1e-12;

/// Absolute tolerance on the sum of a [`ProbVector`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the probability simplex over `C` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Builds a probability vector, renormalizing the entries to sum to one.
    ///
    /// Rejects empty input, negative or non-finite entries, and an all-zero
    /// vector (which has no normalization).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("probability vector must have at least one class");
        }
        let mut sum = 0.0;
        for &v in &values {
            if !v.is_finite() {
                return Err(LabError::NonFinite("probability entry".into()));
            }
            if v < 0.0 {
                return invalid(format!("negative probability entry {v}"));
            }
            sum += v;
        }
        if sum <= 0.0 {
            return invalid("probability vector sums to zero");
        }
        let mut values = values;
        if (sum - 1.0).abs() > 0.0 {
            for v in &mut values {
                *v /= sum;
            }
        }
        Ok(Self(values))
    }

    /// The uniform distribution over `classes` classes.
    pub fn uniform(classes: usize) -> Result<Self> {
        if classes == 0 {
            return invalid("class count must be positive");
        }
        Ok(Self(vec![1.0 / classes as f64; classes]))
    }

    /// The one-hot distribution `δ_y`.
    pub fn one_hot(y: usize, classes: usize) -> Result<Self> {
        if y >= classes {
            return invalid(format!("class index {y} out of range for {classes} classes"));
        }
        let mut v = vec![0.0; classes];
        v[y] = 1.0;
        Ok(Self(v))
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry (first one on ties).
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Pre-softmax scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("logits must have at least one class");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite("logit".into()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `softmax(z / tau)` with max-subtraction.
pub fn softmax_temp(z: &Logits, tau: f64) -> Result<ProbVector> {
    if !(tau > 0.0) || !tau.is_finite() {
        return invalid(format!("temperature must be positive and finite, got {tau}"));
    }
    Ok(ProbVector(softmax_slice(z.as_slice(), tau)))
}

/// Unchecked tempered softmax over a raw slice; the training loops call this
/// on logits they produced themselves.
pub(crate) fn softmax_slice(z: &[f64], tau: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

pub(crate) fn kl_slice(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pc, _)| pc > 0.0)
        .map(|(&pc, &qc)| pc * (pc / qc.max(LOG_FLOOR)).ln())
        .sum::<f64>()
        .max(0.0)
}

/// `KL(p ‖ q)`, with `0 ln 0 = 0` and `q` clamped below at [`LOG_FLOOR`].
pub fn kl_div(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_len(p.classes(), q.classes())?;
    Ok(kl_slice(p.as_slice(), q.as_slice()))
}

/// Jensen–Shannon divergence, bounded by `ln 2`.
pub fn js_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_len(p.classes(), q.classes())?;
    Ok(js_slice(p.as_slice(), q.as_slice()))
}

pub(crate) fn js_slice(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl_slice(p, &m) + 0.5 * kl_slice(q, &m)).min(std::f64::consts::LN_2)
}

/// Cosine similarity together with a flag raised when either vector has
/// norm below [`COSINE_DEGENERATE_NORM`] (in which case the value is 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

/// `⟨u,v⟩ / (‖u‖‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<Cosine> {
    check_len(u.len(), v.len())?;
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < COSINE_DEGENERATE_NORM || nv < COSINE_DEGENERATE_NORM {
        return Ok(Cosine { value: 0.0, degenerate: true });
    }
    Ok(Cosine { value: (dot / (nu * nv)).clamp(-1.0, 1.0), degenerate: false })
}

/// Shorthand for [`cosine`] that drops the degeneracy flag.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    cosine(u, v).map(|c| c.value)
}

/// `LS_α(y) = (1 − α) δ_y + α / C`.
pub fn label_smooth(y: usize, alpha: f64, classes: usize) -> Result<ProbVector> {
    if !(0.0..=1.0).contains(&alpha) {
        return invalid(format!("smoothing rate must lie in [0, 1], got {alpha}"));
    }
    if y >= classes {
        return invalid(format!("class index {y} out of range for {classes} classes"));
    }
    let off = alpha / classes as f64;
    let mut v = vec![off; classes];
    v[y] = (1.0 - alpha) + off;
    Ok(ProbVector(v))
}

/// CutMix target `(1 − λ) LS_α(y) + λ LS_α(y′)`.
pub fn cutmix_target(
    y: usize,
    y_prime: usize,
    lam: f64,
    alpha: f64,
    classes: usize,
) -> Result<ProbVector> {
    if !(0.0..=1.0).contains(&lam) {
        return invalid(format!("mixing weight must lie in [0, 1], got {lam}"));
    }
    let a = label_smooth(y, alpha, classes)?;
    let b = label_smooth(y_prime, alpha, classes)?;
    let v = a
        .0
        .iter()
        .zip(&b.0)
        .map(|(pa, pb)| (1.0 - lam) * pa + lam * pb)
        .collect();
    Ok(ProbVector(v))
}

/// Shannon entropy in nats.
pub fn entropy(p: &ProbVector) -> f64 {
    -p.0.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}
