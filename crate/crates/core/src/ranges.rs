//! Ratio bounds induced by a KL3 trust region.
//!
//! `kl3(r) <= δ` holds exactly on an interval `[l, u]` with `0 < l < 1 < u`.
//! Rewriting `r - 1 - ln r = δ` as `(-r) e^{-r} = -e^{-1-δ}` gives both
//! endpoints in closed form through the two real Lambert W branches:
//!
//! ```text
//! l = -W₀ (-e^{-1-δ})
//! u = -W₋₁(-e^{-1-δ})
//! ```
//!
//! [`solve_kl3_range_oracle`] computes the same interval by plain bisection
//! and exists only to cross-check the closed form.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::divergence::kl3_raw;
use crate::error::{domain, Result};

/// `-1/e`, the common branch point of W₀ and W₋₁.
pub const BRANCH_POINT: f64 = -1.0 / E;

/// Below this threshold the two roots are too close to 1 to separate through
/// the Lambert form and the quadratic approximation `1 ∓ √(2δ)` is used.
pub const SMALL_DELTA: f64 = 1e-12;

/// Lower bracket end for the bisection oracle.
pub const ORACLE_FLOOR: f64 = 1e-300;

const MAX_HALLEY: usize = 64;

/// The admissible-ratio interval `[lower, upper]` of a divergence threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub lower: f64,
    pub upper: f64,
    pub delta: f64,
}

impl ClipRange {
    /// `1 - lower`
    pub fn lower_gap(&self) -> f64 {
        1.0 - self.lower
    }

    /// `upper - 1`
    pub fn upper_gap(&self) -> f64 {
        self.upper - 1.0
    }

    pub fn contains(&self, r: f64) -> bool {
        self.lower <= r && r <= self.upper
    }

    /// `|kl3(lower) - δ|` and `|kl3(upper) - δ|`.
    pub fn residuals(&self) -> (f64, f64) {
        (
            (kl3_raw(self.lower) - self.delta).abs(),
            (kl3_raw(self.upper) - self.delta).abs(),
        )
    }
}

fn check_branch_arg(x: f64) -> Result<()> {
    if x.is_finite() && (BRANCH_POINT..0.0).contains(&x) {
        Ok(())
    } else {
        Err(domain(format!("Lambert W argument {x} outside [-1/e, 0)")))
    }
}

/// `sqrt(2 (e x + 1))`, the natural coordinate around the branch point.
fn branch_coordinate(x: f64) -> f64 {
    // e*x + 1 evaluated as e*(x - BRANCH_POINT) to keep the small difference
    (2.0 * E * (x - BRANCH_POINT)).max(0.0).sqrt()
}

/// One Halley step on `f(w) = w e^w - x`.
fn halley_step(w: f64, x: f64) -> f64 {
    let ew = w.exp();
    let f = w * ew - x;
    let wp1 = w + 1.0;
    let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
    w - f / denom
}

/// Halley iteration kept inside `[lo, hi]`, falling back to bisection of the
/// bracket whenever a step leaves it. `w e^w` is monotone on each branch, so
/// the sign of `f` tells which half holds the root.
fn refine(x: f64, mut w: f64, mut lo: f64, mut hi: f64, increasing: bool) -> f64 {
    for _ in 0..MAX_HALLEY {
        let f = w * w.exp() - x;
        if f == 0.0 {
            return w;
        }
        // shrink bracket with the current point
        if (f > 0.0) == increasing {
            hi = w;
        } else {
            lo = w;
        }
        let mut next = halley_step(w, x);
        if next.is_finite() && (next - w).abs() <= 4.0 * f64::EPSILON * w.abs().max(1e-300) {
            return next;
        }
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        w = next;
    }
    w
}

/// Principal branch W₀ on `[-1/e, 0)`, returning `w ∈ [-1, 0)`.
pub fn lambert_w0(x: f64) -> Result<f64> {
    check_branch_arg(x)?;
    if x == BRANCH_POINT {
        return Ok(-1.0);
    }
    let p = branch_coordinate(x);
    let guess = if p < 0.5 {
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    } else {
        // Padé-like start, accurate near 0
        x * (1.0 + 4.0 / 3.0 * x) / (1.0 + 7.0 / 3.0 * x + 5.0 / 6.0 * x * x)
    };
    let guess = guess.clamp(-1.0, -f64::MIN_POSITIVE);
    // w e^w increases on [-1, 0)
    Ok(refine(x, guess, -1.0, 0.0, true))
}

/// Lower branch W₋₁ on `[-1/e, 0)`, returning `w ∈ (-∞, -1]`.
pub fn lambert_wm1(x: f64) -> Result<f64> {
    check_branch_arg(x)?;
    if x == BRANCH_POINT {
        return Ok(-1.0);
    }
    let p = branch_coordinate(x);
    let guess = if p < 0.5 {
        -1.0 - p - p * p / 3.0 - 11.0 / 72.0 * p * p * p
    } else {
        let l1 = (-x).ln();
        let l2 = (-l1).ln();
        l1 - l2 + l2 / l1
    };
    // bracket: w e^w decreases on (-∞, -1]; push lo out until it is above x
    let mut lo = -2.0_f64;
    while lo * lo.exp() < x {
        lo *= 2.0;
    }
    let guess = guess.clamp(lo, -1.0);
    Ok(refine(x, guess, lo, -1.0, false))
}

fn check_delta(delta: f64) -> Result<()> {
    if delta.is_finite() && delta > 0.0 {
        Ok(())
    } else {
        Err(domain(format!("trust-region threshold must be finite and > 0, got {delta}")))
    }
}

/// Closed-form KL3 clipping range for threshold `delta`.
///
/// ```
/// let range = clipbench::ranges::solve_kl3_range(0.07).unwrap();
/// assert!((range.lower - 0.671).abs() < 5e-4);
/// assert!((range.upper - 1.422).abs() < 5e-4);
/// assert!(range.lower_gap() < range.upper_gap());
/// ```
pub fn solve_kl3_range(delta: f64) -> Result<ClipRange> {
    check_delta(delta)?;
    if delta < SMALL_DELTA {
        let half_width = (2.0 * delta).sqrt();
        return Ok(ClipRange {
            lower: 1.0 - half_width,
            upper: 1.0 + half_width,
            delta,
        });
    }
    let z = -(-1.0 - delta).exp();
    let lower = -lambert_w0(z)?;
    let upper = -lambert_wm1(z)?;
    Ok(ClipRange {
        lower,
        upper,
        delta,
    })
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let f_lo = f(lo);
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if (f(mid) > 0.0) == (f_lo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Bisection solution of `kl3(r) = δ` on `(1e-300, 1)` and `(1, r_max)`.
pub fn solve_kl3_range_oracle(delta: f64) -> Result<ClipRange> {
    check_delta(delta)?;
    let g = |r: f64| kl3_raw(r) - delta;
    let lower = bisect(ORACLE_FLOOR, 1.0, g);
    let mut r_max = 2.0;
    while g(r_max) <= 0.0 {
        r_max *= 2.0;
    }
    let upper = bisect(1.0, r_max, g);
    Ok(ClipRange {
        lower,
        upper,
        delta,
    })
}
