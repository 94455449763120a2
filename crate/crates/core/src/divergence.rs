//! Pointwise divergence estimators between a current and a snapshot policy.
//!
//! All per-sample estimators are functions of the likelihood ratio
//! `r = π_θ(a|s) / π_old(a|s)`:
//!
//! | estimator        | value               | sign        |
//! |------------------|---------------------|-------------|
//! | [`kl1`]          | `-ln r`             | signed      |
//! | [`kl2`]          | `(ln r)^2 / 2`      | `>= 0`      |
//! | [`kl3`]          | `r - 1 - ln r`      | `>= 0`      |
//! | [`kl3_is_weighted`] | `r (r - 1 - ln r)` | `>= 0`   |
//!
//! [`full_kl`] is the exact categorical divergence over the whole action set.

use serde::{Deserialize, Serialize};

use crate::error::{contract, domain, Result};

/// Tolerance on `Σ p = 1` accepted by [`CategoricalDist::new`].
pub const SIMPLEX_TOL: f64 = 1e-12;

/// A strictly positive, finite likelihood ratio.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct LikelihoodRatio(f64);

impl LikelihoodRatio {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(domain(format!("likelihood ratio must be finite and > 0, got {value}")))
        }
    }

    /// Ratio of two probabilities.
    pub fn from_probs(new: f64, old: f64) -> Result<Self> {
        Self::new(new / old)
    }

    /// Ratio from log-probabilities, `exp(new - old)`.
    pub fn from_log_probs(new: f64, old: f64) -> Result<Self> {
        Self::new((new - old).exp())
    }

    pub const fn one() -> Self {
        Self(1.0)
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for LikelihoodRatio {
    type Error = crate::Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<LikelihoodRatio> for f64 {
    fn from(r: LikelihoodRatio) -> f64 {
        r.0
    }
}

/// A probability vector over a finite action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    /// Validates non-negativity and `|Σ p - 1| <= 1e-12`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(domain("distribution over an empty action set"));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(domain(format!("probability {p} is negative or non-finite")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(domain(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Stable softmax of a logit row. Every entry is strictly positive for
    /// finite logits with a spread below ~700 nats.
    pub fn softmax(logits: &[f64]) -> Self {
        Self {
            probs: softmax(logits),
        }
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.probs
    }
}

/// Log-sum-exp softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Log-softmax in log-sum-exp form.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// `x - ln(1 + x)` without cancellation near `x = 0`.
pub(crate) fn x_minus_log1p(x: f64) -> f64 {
    if x.abs() < 0.05 {
        // alternating series  x^2/2 - x^3/3 + x^4/4 - ...
        let mut term = x * x;
        let mut sum = 0.0;
        for k in 2..=18 {
            let t = term / k as f64;
            sum += if k % 2 == 0 { t } else { -t };
            term *= x;
        }
        sum
    } else {
        x - x.ln_1p()
    }
}

/// `r - 1 - ln r`, the non-negative low-variance KL estimator.
pub fn kl3(r: LikelihoodRatio) -> f64 {
    kl3_raw(r.get())
}

/// [`kl3`] on a raw `f64`, for hot loops that already validated `r > 0`.
#[inline]
pub(crate) fn kl3_raw(r: f64) -> f64 {
    x_minus_log1p(r - 1.0)
}

/// `-ln r`, the signed naive estimator.
pub fn kl1(r: LikelihoodRatio) -> f64 {
    -r.get().ln()
}

/// `(ln r)^2 / 2`.
pub fn kl2(r: LikelihoodRatio) -> f64 {
    let l = r.get().ln();
    0.5 * l * l
}

/// `r * kl3(r)`: the kl3 estimate importance-weighted toward the current policy.
pub fn kl3_is_weighted(r: LikelihoodRatio) -> f64 {
    r.get() * kl3(r)
}

/// Exact `KL(p || q) = Σ p ln(p / q)`. Terms with `p(a) = 0` contribute 0.
pub fn full_kl(p: &CategoricalDist, q: &CategoricalDist) -> Result<f64> {
    full_kl_slices(p.probs(), q.probs())
}

pub(crate) fn full_kl_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(contract(format!(
            "support sizes differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (&pa, &qa) in p.iter().zip(q) {
        if pa == 0.0 {
            continue;
        }
        if qa <= 0.0 {
            return Err(domain("q has a zero entry where p is positive"));
        }
        total += pa * (pa / qa).ln();
    }
    // rounding can leave a tiny negative value for p ≈ q
    Ok(total.max(0.0))
}
