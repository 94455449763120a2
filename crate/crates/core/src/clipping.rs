//! Clipping rules and the unified clipping operator.
//!
//! Every rule answers one question for a sampled token: does the current
//! policy still satisfy the rule's feasibility condition? The unified
//! operator passes the ratio through when it does and freezes it at the
//! snapshot value `r(θ_old) = 1` otherwise.
//!
//! Rules come in two families with different surrogate semantics:
//!
//! * **ratio family** (symmetric, asymmetric, dual-clip, DCPO): the PPO
//!   pessimistic form `min(r A, clip(r, l, u) A)`, plus the dual-clip floor
//!   `max(·, c A)` for negative advantages;
//! * **constraint family** (full KL, KL1, KL2, KL3, IS-weighted KL3): a hard
//!   gate, `r A` when the constraint holds and `1 · A` with no gradient
//!   otherwise.
//!
//! [`SurrogateForm::Unified`] evaluates any rule through
//! `min(r A, clip_general(r) A)` instead. For ratio-band criteria this has the
//! same gradient as the native ratio-family surrogate everywhere it is
//! differentiable.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::divergence::{full_kl_slices, kl3_raw, LikelihoodRatio};
use crate::error::{config, contract, Error, Result};
use crate::ranges::{solve_kl3_range, ClipRange};

/// Default dual-clip floor multiplier.
pub const DEFAULT_DUAL_CLIP_C: f64 = 3.0;

/// One constraint criterion.
///
/// Serialized as `{"kind": "...", "params": {...}}`:
///
/// ```
/// use clipbench::clipping::ClipRule;
/// let rule: ClipRule = serde_json::from_str(r#"{"kind":"kl3","params":{"delta":0.07}}"#).unwrap();
/// assert_eq!(rule, ClipRule::Kl3 { delta: 0.07 });
/// assert!(serde_json::from_str::<ClipRule>(r#"{"kind":"kl3","params":{"delta":-1}}"#).is_err());
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
#[serde(try_from = "RawRule")]
pub enum ClipRule {
    /// `r ∈ [1 - ε, 1 + ε]` (PPO / GRPO).
    RatioSymmetric { eps: f64 },
    /// `r ∈ [1 - ε_l, 1 + ε_u]` (clip-higher).
    RatioAsymmetric { eps_low: f64, eps_high: f64 },
    /// Symmetric band with the extra floor `c A` on negative advantages.
    DualClip { eps: f64, c: f64 },
    /// Band that widens for low-probability tokens, driven by `π_old(a|s)`.
    Dcpo { eps_low: f64, eps_high: f64 },
    /// `KL(π_θ(·|s) || π_old(·|s)) <= δ` over the full action set.
    FullKl { delta: f64 },
    /// `|-ln r| <= δ`.
    Kl1 { delta: f64 },
    /// `(ln r)^2 / 2 <= δ`.
    Kl2 { delta: f64 },
    /// `r - 1 - ln r <= δ`.
    Kl3 { delta: f64 },
    /// `r (r - 1 - ln r) <= δ`.
    Kl3IsWeighted { delta: f64 },
}

// Deserialization goes through a mirror enum so every decoded rule is validated.
#[derive(Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case", deny_unknown_fields)]
enum RawRule {
    RatioSymmetric { eps: f64 },
    RatioAsymmetric { eps_low: f64, eps_high: f64 },
    DualClip {
        eps: f64,
        #[serde(default = "default_c")]
        c: f64,
    },
    Dcpo { eps_low: f64, eps_high: f64 },
    FullKl { delta: f64 },
    Kl1 { delta: f64 },
    Kl2 { delta: f64 },
    Kl3 { delta: f64 },
    Kl3IsWeighted { delta: f64 },
}

fn default_c() -> f64 {
    DEFAULT_DUAL_CLIP_C
}

impl TryFrom<RawRule> for ClipRule {
    type Error = Error;

    fn try_from(raw: RawRule) -> Result<Self> {
        let rule = match raw {
            RawRule::RatioSymmetric { eps } => ClipRule::RatioSymmetric { eps },
            RawRule::RatioAsymmetric { eps_low, eps_high } => {
                ClipRule::RatioAsymmetric { eps_low, eps_high }
            }
            RawRule::DualClip { eps, c } => ClipRule::DualClip { eps, c },
            RawRule::Dcpo { eps_low, eps_high } => ClipRule::Dcpo { eps_low, eps_high },
            RawRule::FullKl { delta } => ClipRule::FullKl { delta },
            RawRule::Kl1 { delta } => ClipRule::Kl1 { delta },
            RawRule::Kl2 { delta } => ClipRule::Kl2 { delta },
            RawRule::Kl3 { delta } => ClipRule::Kl3 { delta },
            RawRule::Kl3IsWeighted { delta } => ClipRule::Kl3IsWeighted { delta },
        };
        rule.validate()?;
        Ok(rule)
    }
}

fn check_eps(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(config(format!("{name} must lie in (0, 1), got {v}")))
    }
}

fn check_delta(v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(config(format!("delta must be finite and > 0, got {v}")))
    }
}

impl ClipRule {
    /// Every rule the trainer ships with, at the thresholds used in the
    /// estimator ablations (`δ = 0.07`, `ε = 0.2`, clip-higher `0.2 / 0.28`).
    pub fn shipped() -> Vec<ClipRule> {
        vec![
            ClipRule::RatioSymmetric { eps: 0.2 },
            ClipRule::RatioAsymmetric {
                eps_low: 0.2,
                eps_high: 0.28,
            },
            ClipRule::DualClip {
                eps: 0.2,
                c: DEFAULT_DUAL_CLIP_C,
            },
            ClipRule::Dcpo {
                eps_low: 0.2,
                eps_high: 0.28,
            },
            ClipRule::FullKl { delta: 0.07 },
            ClipRule::Kl1 { delta: 0.07 },
            ClipRule::Kl2 { delta: 0.07 },
            ClipRule::Kl3 { delta: 0.07 },
            ClipRule::Kl3IsWeighted { delta: 0.07 },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ClipRule::RatioSymmetric { eps } => check_eps("eps", eps),
            ClipRule::RatioAsymmetric { eps_low, eps_high } | ClipRule::Dcpo { eps_low, eps_high } => {
                check_eps("eps_low", eps_low)?;
                check_eps("eps_high", eps_high)
            }
            ClipRule::DualClip { eps, c } => {
                check_eps("eps", eps)?;
                if !(c.is_finite() && c > 1.0 + eps) {
                    return Err(config(format!("dual-clip c must exceed 1 + eps = {}, got {c}", 1.0 + eps)));
                }
                Ok(())
            }
            ClipRule::FullKl { delta }
            | ClipRule::Kl1 { delta }
            | ClipRule::Kl2 { delta }
            | ClipRule::Kl3 { delta }
            | ClipRule::Kl3IsWeighted { delta } => check_delta(delta),
        }
    }

    /// Short stable identifier, also the serde `kind` tag.
    pub fn kind(&self) -> &'static str {
        match self {
            ClipRule::RatioSymmetric { .. } => "ratio_symmetric",
            ClipRule::RatioAsymmetric { .. } => "ratio_asymmetric",
            ClipRule::DualClip { .. } => "dual_clip",
            ClipRule::Dcpo { .. } => "dcpo",
            ClipRule::FullKl { .. } => "full_kl",
            ClipRule::Kl1 { .. } => "kl1",
            ClipRule::Kl2 { .. } => "kl2",
            ClipRule::Kl3 { .. } => "kl3",
            ClipRule::Kl3IsWeighted { .. } => "kl3_is_weighted",
        }
    }

    /// Ratio-family rules use the pessimistic min-clip surrogate.
    pub fn is_ratio_family(&self) -> bool {
        matches!(
            self,
            ClipRule::RatioSymmetric { .. }
                | ClipRule::RatioAsymmetric { .. }
                | ClipRule::DualClip { .. }
                | ClipRule::Dcpo { .. }
        )
    }

    /// Whether the criterion needs the full categorical distributions.
    pub fn needs_dists(&self) -> bool {
        matches!(self, ClipRule::FullKl { .. })
    }

    /// The ratio band `[lower, upper]` for ratio-family rules.
    pub fn ratio_band(&self, old_prob: f64) -> Option<(f64, f64)> {
        match *self {
            ClipRule::RatioSymmetric { eps } | ClipRule::DualClip { eps, .. } => {
                Some((1.0 - eps, 1.0 + eps))
            }
            ClipRule::RatioAsymmetric { eps_low, eps_high } => Some((1.0 - eps_low, 1.0 + eps_high)),
            ClipRule::Dcpo { eps_low, eps_high } => Some(dcpo_band(eps_low, eps_high, old_prob)),
            _ => None,
        }
    }

    /// The equivalent ratio interval for rules whose criterion depends on
    /// the ratio alone. `None` for [`ClipRule::FullKl`], whose criterion is
    /// a property of the whole distribution.
    pub fn admissible_range(&self, old_prob: f64) -> Option<(f64, f64)> {
        match *self {
            ClipRule::Kl1 { delta } => Some(((-delta).exp(), delta.exp())),
            ClipRule::Kl2 { delta } => {
                let w = (2.0 * delta).sqrt();
                Some(((-w).exp(), w.exp()))
            }
            ClipRule::Kl3 { delta } => solve_kl3_range(delta).ok().map(|r| (r.lower, r.upper)),
            ClipRule::Kl3IsWeighted { .. } | ClipRule::FullKl { .. } => None,
            _ => self.ratio_band(old_prob),
        }
    }

    /// The KL3 clipping range, for KL3 rules only.
    pub fn kl3_range(&self) -> Option<ClipRange> {
        match *self {
            ClipRule::Kl3 { delta } => solve_kl3_range(delta).ok(),
            _ => None,
        }
    }
}

impl fmt::Display for ClipRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ClipRule::RatioSymmetric { eps } => write!(f, "ratio_symmetric(eps={eps})"),
            ClipRule::RatioAsymmetric { eps_low, eps_high } => {
                write!(f, "ratio_asymmetric(eps_low={eps_low},eps_high={eps_high})")
            }
            ClipRule::DualClip { eps, c } => write!(f, "dual_clip(eps={eps},c={c})"),
            ClipRule::Dcpo { eps_low, eps_high } => write!(f, "dcpo(eps_low={eps_low},eps_high={eps_high})"),
            ClipRule::FullKl { delta } => write!(f, "full_kl(delta={delta})"),
            ClipRule::Kl1 { delta } => write!(f, "kl1(delta={delta})"),
            ClipRule::Kl2 { delta } => write!(f, "kl2(delta={delta})"),
            ClipRule::Kl3 { delta } => write!(f, "kl3(delta={delta})"),
            ClipRule::Kl3IsWeighted { delta } => write!(f, "kl3_is_weighted(delta={delta})"),
        }
    }
}

/// DCPO bounds `0.5 + 0.5 √max(1 - 4ε_l/π_old, 0)` and `0.5 + 0.5 √(1 + 4ε_u/π_old)`.
pub fn dcpo_band(eps_low: f64, eps_high: f64, old_prob: f64) -> (f64, f64) {
    let lower = 0.5 + 0.5 * (1.0 - 4.0 * eps_low / old_prob).max(0.0).sqrt();
    let upper = 0.5 + 0.5 * (1.0 + 4.0 * eps_high / old_prob).sqrt();
    (lower, upper)
}

/// Current and snapshot action distributions at the token's state.
#[derive(Debug, Clone, Copy)]
pub struct DistPair<'a> {
    pub new: &'a [f64],
    pub old: &'a [f64],
}

/// Everything a rule may look at for one sampled token.
#[derive(Debug, Clone, Copy)]
pub struct ClipContext<'a> {
    pub ratio: LikelihoodRatio,
    /// `π_old(a|s)` in `(0, 1]`.
    pub old_prob: f64,
    pub advantage: f64,
    pub dists: Option<DistPair<'a>>,
}

impl<'a> ClipContext<'a> {
    pub fn new(ratio: LikelihoodRatio, old_prob: f64, advantage: f64) -> Self {
        Self {
            ratio,
            old_prob,
            advantage,
            dists: None,
        }
    }

    pub fn with_dists(mut self, new: &'a [f64], old: &'a [f64]) -> Self {
        self.dists = Some(DistPair { new, old });
        self
    }

    /// Shorthand for tests and examples: ratio only, `π_old = 1`.
    pub fn from_ratio(ratio: f64, advantage: f64) -> Result<Self> {
        Ok(Self::new(LikelihoodRatio::new(ratio)?, 1.0, advantage))
    }

    fn check(&self) -> Result<()> {
        if !(self.old_prob > 0.0 && self.old_prob <= 1.0) {
            return Err(contract(format!("old_prob {} outside (0, 1]", self.old_prob)));
        }
        Ok(())
    }
}

/// Output of the unified operator for one token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipDecision {
    pub constraint_ok: bool,
    pub effective_ratio: f64,
    /// Whether the surrogate differentiates through `r`.
    pub gradient_gate: bool,
}

/// Truth value of the rule's criterion for this token.
///
/// ```
/// use clipbench::clipping::{constraint_satisfied, ClipContext, ClipRule};
/// let kl3 = ClipRule::Kl3 { delta: 0.07 };
/// assert!(constraint_satisfied(&kl3, &ClipContext::from_ratio(1.0, 1.0).unwrap()).unwrap());
/// assert!(!constraint_satisfied(&kl3, &ClipContext::from_ratio(1.5, 1.0).unwrap()).unwrap());
/// ```
pub fn constraint_satisfied(rule: &ClipRule, ctx: &ClipContext<'_>) -> Result<bool> {
    ctx.check()?;
    let r = ctx.ratio.get();
    Ok(match *rule {
        ClipRule::FullKl { delta } => {
            let d = ctx
                .dists
                .ok_or_else(|| contract("full_kl rule needs the new and old action distributions"))?;
            full_kl_slices(d.new, d.old)? <= delta
        }
        ClipRule::Kl1 { delta } => r.ln().abs() <= delta,
        ClipRule::Kl2 { delta } => {
            let l = r.ln();
            0.5 * l * l <= delta
        }
        ClipRule::Kl3 { delta } => kl3_raw(r) <= delta,
        ClipRule::Kl3IsWeighted { delta } => r * kl3_raw(r) <= delta,
        _ => {
            // ratio family always has a band
            let (lo, hi) = rule.ratio_band(ctx.old_prob).expect("ratio family");
            lo <= r && r <= hi
        }
    })
}

/// The unified clipping operator: `r` when the criterion holds, else
/// `old_ratio` with the gradient path cut.
pub fn clip_general(rule: &ClipRule, ctx: &ClipContext<'_>, old_ratio: f64) -> Result<ClipDecision> {
    let ok = constraint_satisfied(rule, ctx)?;
    Ok(if ok {
        ClipDecision {
            constraint_ok: true,
            effective_ratio: ctx.ratio.get(),
            gradient_gate: true,
        }
    } else {
        ClipDecision {
            constraint_ok: false,
            effective_ratio: old_ratio,
            gradient_gate: false,
        }
    })
}

/// Ratio clipped into `[lower, upper]`.
pub fn clip_ratio(r: LikelihoodRatio, lower: f64, upper: f64) -> Result<f64> {
    if !(lower > 0.0 && lower <= upper) {
        return Err(contract(format!("invalid clip bounds [{lower}, {upper}]")));
    }
    Ok(r.get().clamp(lower, upper))
}

/// How a rule enters the per-token objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateForm {
    /// The rule's own surrogate: min-clip for the ratio family, hard gate
    /// for the constraint family.
    #[default]
    Native,
    /// `min(r A, clip_general(r) A)` for every rule.
    Unified,
}

/// A per-token surrogate value with its derivative in `r`, holding every
/// clip decision fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateTerm {
    pub value: f64,
    pub slope: f64,
    /// False when the rule clipped or froze this token.
    pub constraint_ok: bool,
}

/// Per-token objective contribution under the rule's native surrogate.
///
/// ```
/// use clipbench::clipping::{surrogate_term, ClipContext, ClipRule};
/// let sym = ClipRule::RatioSymmetric { eps: 0.2 };
/// let up = ClipContext::from_ratio(1.5, 1.0).unwrap();
/// let down = ClipContext::from_ratio(1.5, -1.0).unwrap();
/// assert!((surrogate_term(&sym, &up).unwrap() - 1.2).abs() < 1e-15);
/// assert_eq!(surrogate_term(&sym, &down).unwrap(), -1.5);
/// ```
pub fn surrogate_term(rule: &ClipRule, ctx: &ClipContext<'_>) -> Result<f64> {
    Ok(evaluate_term(rule, ctx, SurrogateForm::Native)?.value)
}

/// Value and `∂/∂r` of the per-token surrogate in the requested form.
pub fn evaluate_term(rule: &ClipRule, ctx: &ClipContext<'_>, form: SurrogateForm) -> Result<SurrogateTerm> {
    let r = ctx.ratio.get();
    let a = ctx.advantage;
    let decision = clip_general(rule, ctx, 1.0)?;
    let ok = decision.constraint_ok;

    if form == SurrogateForm::Unified {
        return Ok(if ok {
            SurrogateTerm { value: r * a, slope: a, constraint_ok: true }
        } else if r * a < decision.effective_ratio * a {
            SurrogateTerm { value: r * a, slope: a, constraint_ok: false }
        } else {
            SurrogateTerm { value: decision.effective_ratio * a, slope: 0.0, constraint_ok: false }
        });
    }

    if let Some((lo, hi)) = rule.ratio_band(ctx.old_prob) {
        let unclipped = r * a;
        let clipped = r.clamp(lo, hi) * a;
        let (mut value, mut slope) = if ok || unclipped <= clipped {
            (unclipped, a)
        } else {
            (clipped, 0.0)
        };
        if let ClipRule::DualClip { c, .. } = *rule {
            if a < 0.0 && c * a > value {
                value = c * a;
                slope = 0.0;
            }
        }
        Ok(SurrogateTerm { value, slope, constraint_ok: ok })
    } else if ok {
        Ok(SurrogateTerm { value: r * a, slope: a, constraint_ok: true })
    } else {
        Ok(SurrogateTerm {
            value: decision.effective_ratio * a,
            slope: 0.0,
            constraint_ok: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ctx(r: f64, a: f64) -> ClipContext<'static> {
        ClipContext::from_ratio(r, a).unwrap()
    }

    #[test]
    fn constraint_examples() {
        let kl3 = ClipRule::Kl3 { delta: 0.07 };
        assert!(constraint_satisfied(&kl3, &ctx(1.0, 1.0)).unwrap());
        assert!(!constraint_satisfied(&kl3, &ctx(1.5, 1.0)).unwrap());
        let sym = ClipRule::RatioSymmetric { eps: 0.2 };
        assert!(constraint_satisfied(&sym, &ctx(0.85, 1.0)).unwrap());
        assert!(!constraint_satisfied(&sym, &ctx(1.25, 1.0)).unwrap());
    }

    #[test]
    fn clip_general_examples() {
        let kl3 = ClipRule::Kl3 { delta: 0.07 };
        let d = clip_general(&kl3, &ctx(1.2, 1.0), 1.0).unwrap();
        assert_eq!(d, ClipDecision { constraint_ok: true, effective_ratio: 1.2, gradient_gate: true });
        let d = clip_general(&kl3, &ctx(0.5, 1.0), 1.0).unwrap();
        assert_eq!(d, ClipDecision { constraint_ok: false, effective_ratio: 1.0, gradient_gate: false });

        let full = ClipRule::FullKl { delta: 0.01 };
        let p = [0.2, 0.3, 0.5];
        let c = ClipContext::new(LikelihoodRatio::one(), 0.3, 1.0).with_dists(&p, &p);
        let d = clip_general(&full, &c, 1.0).unwrap();
        assert_eq!(d, ClipDecision { constraint_ok: true, effective_ratio: 1.0, gradient_gate: true });
    }

    #[test]
    fn full_kl_requires_dists() {
        let full = ClipRule::FullKl { delta: 0.01 };
        assert!(matches!(constraint_satisfied(&full, &ctx(1.0, 1.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn full_kl_violation_freezes() {
        let full = ClipRule::FullKl { delta: 0.01 };
        let new = [0.6, 0.3, 0.1];
        let old = [0.2, 0.3, 0.5];
        let c = ClipContext::new(LikelihoodRatio::from_probs(0.6, 0.2).unwrap(), 0.2, 1.0).with_dists(&new, &old);
        let t = evaluate_term(&full, &c, SurrogateForm::Native).unwrap();
        assert_eq!((t.value, t.slope, t.constraint_ok), (1.0, 0.0, false));
    }

    #[test]
    fn clip_ratio_examples() {
        let r = |v| LikelihoodRatio::new(v).unwrap();
        assert_eq!(clip_ratio(r(1.0), 0.8, 1.2).unwrap(), 1.0);
        assert_eq!(clip_ratio(r(1.5), 0.8, 1.2).unwrap(), 1.2);
        assert_eq!(clip_ratio(r(0.671), 0.671, 1.422).unwrap(), 0.671);
        assert_eq!(clip_ratio(r(0.1), 0.671, 1.422).unwrap(), 0.671);
        assert!(clip_ratio(r(1.0), 1.2, 0.8).is_err());
        assert!(clip_ratio(r(1.0), 0.0, 0.8).is_err());
    }

    #[test]
    fn surrogate_examples() {
        let sym = ClipRule::RatioSymmetric { eps: 0.2 };
        assert_abs_diff_eq!(surrogate_term(&sym, &ctx(1.5, 1.0)).unwrap(), 1.2, epsilon = 1e-15);
        assert_eq!(surrogate_term(&sym, &ctx(1.5, -1.0)).unwrap(), -1.5);
        let kl3 = ClipRule::Kl3 { delta: 0.07 };
        let t = evaluate_term(&kl3, &ctx(1.5, 1.0), SurrogateForm::Native).unwrap();
        assert_eq!((t.value, t.slope), (1.0, 0.0));
        // frozen on both advantage signs
        let t = evaluate_term(&kl3, &ctx(1.5, -1.0), SurrogateForm::Native).unwrap();
        assert_eq!((t.value, t.slope), (-1.0, 0.0));
    }

    #[test]
    fn kl3_violation_has_zero_finite_difference() {
        let kl3 = ClipRule::Kl3 { delta: 0.07 };
        let h = 1e-6;
        let f = |r: f64| surrogate_term(&kl3, &ctx(r, 1.0)).unwrap();
        assert_eq!((f(1.5 + h) - f(1.5 - h)) / (2.0 * h), 0.0);
        let inside = (f(1.2 + h) - f(1.2 - h)) / (2.0 * h);
        assert_abs_diff_eq!(inside, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn dual_clip_floor() {
        let rule = ClipRule::DualClip { eps: 0.2, c: 3.0 };
        // unclipped -5 < clipped -1.2, floor -3 wins
        let t = evaluate_term(&rule, &ctx(5.0, -1.0), SurrogateForm::Native).unwrap();
        assert_eq!((t.value, t.slope), (-3.0, 0.0));
        let t = evaluate_term(&rule, &ctx(2.0, -1.0), SurrogateForm::Native).unwrap();
        assert_eq!((t.value, t.slope), (-2.0, -1.0));
        let t = evaluate_term(&rule, &ctx(5.0, 1.0), SurrogateForm::Native).unwrap();
        assert_abs_diff_eq!(t.value, 1.2, epsilon = 1e-15);
    }

    #[test]
    fn dcpo_band_widens_for_rare_tokens() {
        let (lo1, hi1) = dcpo_band(0.2, 0.28, 1.0);
        let (lo2, hi2) = dcpo_band(0.2, 0.28, 0.01);
        assert!(lo2 <= lo1 && hi2 > hi1);
        assert_eq!(lo2, 0.5);
        assert!(lo1 <= 1.0 && hi1 >= 1.0);
    }

    #[test]
    fn kl1_is_symmetric_in_log_space() {
        let rule = ClipRule::Kl1 { delta: 0.07 };
        let (lo, hi) = rule.admissible_range(1.0).unwrap();
        assert!(constraint_satisfied(&rule, &ctx(lo * 1.000001, 1.0)).unwrap());
        assert!(!constraint_satisfied(&rule, &ctx(lo * 0.99999, 1.0)).unwrap());
        assert!(constraint_satisfied(&rule, &ctx(hi * 0.999999, 1.0)).unwrap());
        assert!(!constraint_satisfied(&rule, &ctx(hi * 1.00001, 1.0)).unwrap());
    }

    #[test]
    fn rule_validation() {
        assert!(ClipRule::RatioSymmetric { eps: 1.0 }.validate().is_err());
        assert!(ClipRule::DualClip { eps: 0.2, c: 1.1 }.validate().is_err());
        assert!(ClipRule::DualClip { eps: 0.2, c: 1.3 }.validate().is_ok());
        assert!(ClipRule::Kl3 { delta: 0.0 }.validate().is_err());
        for rule in ClipRule::shipped() {
            rule.validate().unwrap();
        }
    }

    #[test]
    fn json_shape() {
        let rule = ClipRule::RatioAsymmetric { eps_low: 0.2, eps_high: 0.28 };
        let text = serde_json::to_string(&rule).unwrap();
        assert_eq!(text, r#"{"kind":"ratio_asymmetric","params":{"eps_low":0.2,"eps_high":0.28}}"#);
        let dual: ClipRule = serde_json::from_str(r#"{"kind":"dual_clip","params":{"eps":0.2}}"#).unwrap();
        assert_eq!(dual, ClipRule::DualClip { eps: 0.2, c: 3.0 });
        assert!(serde_json::from_str::<ClipRule>(r#"{"kind":"kl3","params":{"delta":0.07,"x":1}}"#).is_err());
        assert!(serde_json::from_str::<ClipRule>(r#"{"kind":"nope","params":{}}"#).is_err());
    }
}
