//! Tabular softmax policies over synthetic token-generation tasks.
//!
//! A [`TokenEnv`] generates responses of up to `horizon` tokens from a
//! vocabulary of `vocab_size` symbols, one prompt at a time. Its states are
//! the `(prompt, prefix)` pairs, enumerated explicitly so every expectation
//! over the policy can be computed exactly. Rewards are terminal and binary.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clipping::{evaluate_term, ClipContext, ClipRule, SurrogateForm};
use crate::divergence::{log_softmax, softmax, CategoricalDist, LikelihoodRatio};
use crate::error::{config, contract, Error, Result};

/// Default limit on the number of enumerated states.
pub const DEFAULT_STATE_CAP: usize = 200_000;

/// Reward predicate attached to each prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum Verifier {
    /// Prompt `p` is solved when `(p + Σ tokens) mod m == 0`, with
    /// `m = moduli[p % moduli.len()]`. Larger moduli make harder prompts.
    DigitSum { moduli: Vec<u32> },
    /// Prompt `p` is solved by reproducing `targets[p % targets.len()]` exactly.
    TargetSequence { targets: Vec<Vec<usize>> },
}

impl Verifier {
    /// Reward in `{0, 1}` for a completed response. A trailing stop token,
    /// if any, must already be stripped.
    pub fn reward(&self, prompt: usize, tokens: &[usize]) -> f64 {
        let hit = match self {
            Verifier::DigitSum { moduli } => {
                let m = moduli[prompt % moduli.len()] as usize;
                (prompt + tokens.iter().sum::<usize>()).is_multiple_of(m)
            }
            Verifier::TargetSequence { targets } => targets[prompt % targets.len()] == tokens,
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }

    fn validate(&self, vocab_size: usize, horizon: usize) -> Result<()> {
        match self {
            Verifier::DigitSum { moduli } => {
                if moduli.is_empty() || moduli.contains(&0) {
                    return Err(config("digit_sum needs at least one positive modulus"));
                }
            }
            Verifier::TargetSequence { targets } => {
                if targets.is_empty() {
                    return Err(config("target_sequence needs at least one target"));
                }
                for t in targets {
                    if t.len() > horizon || t.iter().any(|&a| a >= vocab_size) {
                        return Err(config(format!("target {t:?} does not fit the vocabulary/horizon")));
                    }
                }
            }
        }
        Ok(())
    }
}

fn default_cap() -> usize {
    DEFAULT_STATE_CAP
}

/// JSON-facing environment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub vocab_size: usize,
    pub horizon: usize,
    pub num_prompts: usize,
    pub verifier: Verifier,
    /// Optional end-of-response token; sampling it ends the episode early.
    #[serde(default)]
    pub stop_token: Option<usize>,
    #[serde(default = "default_cap")]
    pub state_cap: usize,
}

impl EnvConfig {
    /// One prompt, one step, one rewarded token.
    pub fn bandit(vocab_size: usize, rewarded: usize) -> Self {
        Self {
            vocab_size,
            horizon: 1,
            num_prompts: 1,
            verifier: Verifier::TargetSequence {
                targets: vec![vec![rewarded]],
            },
            stop_token: None,
            state_cap: DEFAULT_STATE_CAP,
        }
    }

    /// Prompts with digit-sum moduli `2..` giving a spread of difficulties.
    pub fn mixed_digit_sum(num_prompts: usize, horizon: usize, vocab_size: usize) -> Self {
        Self {
            vocab_size,
            horizon,
            num_prompts,
            verifier: Verifier::DigitSum {
                moduli: (0..num_prompts as u32).map(|p| 2 + p).collect(),
            },
            stop_token: None,
            state_cap: DEFAULT_STATE_CAP,
        }
    }
}

/// A validated environment with its state enumeration.
#[derive(Debug, Clone)]
pub struct TokenEnv {
    config: EnvConfig,
    /// `depth_offsets[t]` = id of the first depth-`t` prefix within a prompt.
    depth_offsets: Vec<usize>,
    per_prompt: usize,
}

impl TokenEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        if config.vocab_size == 0 || config.horizon == 0 || config.num_prompts == 0 {
            return Err(crate::error::config("vocab_size, horizon and num_prompts must be positive"));
        }
        if let Some(stop) = config.stop_token {
            if stop >= config.vocab_size {
                return Err(crate::error::config(format!("stop token {stop} outside vocabulary")));
            }
        }
        config.verifier.validate(config.vocab_size, config.horizon)?;

        let mut depth_offsets = Vec::with_capacity(config.horizon);
        let mut per_prompt: usize = 0;
        let mut layer: usize = 1;
        for _ in 0..config.horizon {
            depth_offsets.push(per_prompt);
            per_prompt = per_prompt
                .checked_add(layer)
                .ok_or_else(|| Error::Resource("state count overflows".into()))?;
            layer = layer.saturating_mul(config.vocab_size);
        }
        let total = per_prompt.saturating_mul(config.num_prompts);
        if total > config.state_cap {
            return Err(Error::Resource(format!(
                "{total} states exceed the enumeration cap of {}",
                config.state_cap
            )));
        }
        Ok(Self {
            config,
            depth_offsets,
            per_prompt,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn num_prompts(&self) -> usize {
        self.config.num_prompts
    }

    pub fn num_states(&self) -> usize {
        self.per_prompt * self.config.num_prompts
    }

    /// Id of the state reached after emitting `prefix` on `prompt`.
    pub fn state_id(&self, prompt: usize, prefix: &[usize]) -> usize {
        debug_assert!(prefix.len() < self.config.horizon);
        let v = self.config.vocab_size;
        let code = prefix.iter().fold(0usize, |acc, &a| acc * v + a);
        prompt * self.per_prompt + self.depth_offsets[prefix.len()] + code
    }

    /// Inverse of [`TokenEnv::state_id`].
    pub fn decode_state(&self, id: usize) -> (usize, Vec<usize>) {
        let prompt = id / self.per_prompt;
        let local = id % self.per_prompt;
        let depth = self.depth_offsets.partition_point(|&o| o <= local) - 1;
        let mut code = local - self.depth_offsets[depth];
        let v = self.config.vocab_size;
        let mut prefix = vec![0; depth];
        for slot in prefix.iter_mut().rev() {
            *slot = code % v;
            code /= v;
        }
        (prompt, prefix)
    }

    /// Reward of a finished response (stop token included or not).
    pub fn reward(&self, prompt: usize, tokens: &[usize]) -> f64 {
        let body = match (self.config.stop_token, tokens.last()) {
            (Some(stop), Some(&last)) if last == stop => &tokens[..tokens.len() - 1],
            _ => tokens,
        };
        self.config.verifier.reward(prompt, body)
    }
}

/// Logits `θ[s, a]` of a tabular softmax policy, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Checkpoint", into = "Checkpoint")]
pub struct LogitTable {
    num_states: usize,
    vocab: usize,
    logits: Vec<f64>,
}

/// On-disk checkpoint layout: `{"shape": [states, vocab], "logits": [...]}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    shape: [usize; 2],
    logits: Vec<f64>,
}

impl TryFrom<Checkpoint> for LogitTable {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        LogitTable::from_vec(c.shape[0], c.shape[1], c.logits)
    }
}

impl From<LogitTable> for Checkpoint {
    fn from(t: LogitTable) -> Self {
        Checkpoint {
            shape: [t.num_states, t.vocab],
            logits: t.logits,
        }
    }
}

impl LogitTable {
    pub fn zeros(num_states: usize, vocab: usize) -> Self {
        Self {
            num_states,
            vocab,
            logits: vec![0.0; num_states * vocab],
        }
    }

    pub fn for_env(env: &TokenEnv) -> Self {
        Self::zeros(env.num_states(), env.vocab_size())
    }

    pub fn from_vec(num_states: usize, vocab: usize, logits: Vec<f64>) -> Result<Self> {
        if num_states == 0 || vocab == 0 || logits.len() != num_states * vocab {
            return Err(contract(format!(
                "{} logits do not fill a {num_states}x{vocab} table",
                logits.len()
            )));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(contract("logit table has non-finite entries"));
        }
        Ok(Self {
            num_states,
            vocab,
            logits,
        })
    }

    /// One-state table from a single row.
    pub fn single(row: &[f64]) -> Result<Self> {
        Self::from_vec(1, row.len(), row.to_vec())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.logits
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.logits[s * self.vocab..(s + 1) * self.vocab]
    }

    pub fn row_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.logits[s * self.vocab..(s + 1) * self.vocab]
    }

    pub fn same_shape(&self, other: &LogitTable) -> bool {
        self.num_states == other.num_states && self.vocab == other.vocab
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s < self.num_states {
            Ok(())
        } else {
            Err(contract(format!("state {s} outside table of {} states", self.num_states)))
        }
    }

    /// `θ += scale · direction`.
    pub fn add_scaled(&mut self, direction: &[f64], scale: f64) {
        for (z, d) in self.logits.iter_mut().zip(direction) {
            *z += scale * d;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().all(|z| z.is_finite())
    }
}

/// Softmax of row `s`.
///
/// ```
/// use clipbench::policy::{action_dist, LogitTable};
/// let table = LogitTable::single(&[2f64.ln(), 0.0]).unwrap();
/// let p = action_dist(&table, 0).unwrap();
/// assert!((p.probs()[0] - 2.0 / 3.0).abs() < 1e-15);
/// ```
pub fn action_dist(table: &LogitTable, s: usize) -> Result<CategoricalDist> {
    table.check_state(s)?;
    Ok(CategoricalDist::softmax(table.row(s)))
}

/// Softmax of `row / temperature`.
pub fn tempered_probs(row: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        softmax(row)
    } else {
        let scaled: Vec<f64> = row.iter().map(|z| z / temperature).collect();
        softmax(&scaled)
    }
}

/// Shannon entropy (nats) of row `s`.
pub fn entropy(table: &LogitTable, s: usize) -> Result<f64> {
    table.check_state(s)?;
    Ok(row_entropy(table.row(s)))
}

pub(crate) fn row_entropy(row: &[f64]) -> f64 {
    let lp = log_softmax(row);
    -lp.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l }).sum::<f64>()
}

/// Normalized state-visitation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVisitation {
    weights: Vec<f64>,
}

impl StateVisitation {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(contract("visitation weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(contract(format!("visitation weights sum to {total}")));
        }
        Ok(Self { weights })
    }

    /// All mass on one state.
    pub fn point(num_states: usize, s: usize) -> Self {
        let mut weights = vec![0.0; num_states];
        weights[s] = 1.0;
        Self { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Exact prefix-probability mass of every state, normalized over all
/// `(prompt, depth)` pairs. Prompts are equally likely.
pub fn visitation_exact(table: &LogitTable, env: &TokenEnv) -> Result<StateVisitation> {
    let mass = prefix_mass(table, env)?;
    let total: f64 = mass.iter().sum();
    Ok(StateVisitation {
        weights: mass.into_iter().map(|m| m / total).collect(),
    })
}

/// Unnormalized probability that each prefix is reached, per prompt.
pub(crate) fn prefix_mass(table: &LogitTable, env: &TokenEnv) -> Result<Vec<f64>> {
    if table.num_states() != env.num_states() || table.vocab() != env.vocab_size() {
        return Err(contract("logit table does not match the environment"));
    }
    let v = env.vocab_size();
    let stop = env.config().stop_token;
    let mut mass = vec![0.0; env.num_states()];
    for prompt in 0..env.num_prompts() {
        let base = prompt * env.per_prompt;
        mass[base] = 1.0;
        for t in 1..env.horizon() {
            let parent_start = base + env.depth_offsets[t - 1];
            let child_start = base + env.depth_offsets[t];
            let parents = v.pow((t - 1) as u32);
            for j in 0..parents {
                let parent = parent_start + j;
                let m = mass[parent];
                if m == 0.0 {
                    continue;
                }
                let p = softmax(table.row(parent));
                for (a, pa) in p.iter().enumerate() {
                    if Some(a) == stop {
                        continue;
                    }
                    mass[child_start + j * v + a] = m * pa;
                }
            }
        }
    }
    Ok(mass)
}

/// Visitation-weighted mean entropy.
pub fn mean_entropy(table: &LogitTable, d: &StateVisitation) -> f64 {
    d.weights()
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(s, w)| w * row_entropy(table.row(s)))
        .sum()
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub prompt: usize,
    pub tokens: Vec<usize>,
    /// State id before each token.
    pub states: Vec<usize>,
    /// `ln π(token | state)` under the sampling policy.
    pub old_log_probs: Vec<f64>,
    pub reward: f64,
}

impl Transcript {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Autoregressive sample at temperature 1, deterministic in `rng_seed`.
pub fn rollout(table: &LogitTable, env: &TokenEnv, prompt: usize, rng_seed: u64) -> Result<Transcript> {
    rollout_with_temperature(table, env, prompt, rng_seed, 1.0)
}

/// Autoregressive sample from `softmax(θ / temperature)`.
pub fn rollout_with_temperature(
    table: &LogitTable,
    env: &TokenEnv,
    prompt: usize,
    rng_seed: u64,
    temperature: f64,
) -> Result<Transcript> {
    if prompt >= env.num_prompts() {
        return Err(contract(format!("prompt {prompt} outside 0..{}", env.num_prompts())));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(contract(format!("temperature must be > 0, got {temperature}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut tokens = Vec::with_capacity(env.horizon());
    let mut states = Vec::with_capacity(env.horizon());
    let mut old_log_probs = Vec::with_capacity(env.horizon());
    for _ in 0..env.horizon() {
        let s = env.state_id(prompt, &tokens);
        let probs = tempered_probs(table.row(s), temperature);
        let dist = WeightedIndex::new(&probs).map_err(|e| contract(format!("bad sampling weights: {e}")))?;
        let a = dist.sample(&mut rng);
        states.push(s);
        old_log_probs.push(probs[a].ln());
        tokens.push(a);
        if Some(a) == env.config().stop_token {
            break;
        }
    }
    let reward = env.reward(prompt, &tokens);
    Ok(Transcript {
        prompt,
        tokens,
        states,
        old_log_probs,
        reward,
    })
}

/// SplitMix64 finalizer used to derive independent per-sample seeds.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn check_pair(new: &LogitTable, old: &LogitTable, adv: &[f64], d: &StateVisitation) -> Result<()> {
    if !new.same_shape(old) {
        return Err(contract("new and old tables differ in shape"));
    }
    if adv.len() != new.as_slice().len() {
        return Err(contract("advantage table does not match the logit table"));
    }
    if d.len() != new.num_states() {
        return Err(contract("visitation does not cover the table's states"));
    }
    if adv.iter().any(|a| !a.is_finite()) {
        return Err(contract("advantages must be finite"));
    }
    Ok(())
}

/// Per-state value and `∂/∂θ[s, ·]` of `Σ_a π_old(a|s) term(s, a)`.
fn state_objective(
    new_row: &[f64],
    old_row: &[f64],
    adv_row: &[f64],
    rule: &ClipRule,
    form: SurrogateForm,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let p_new = softmax(new_row);
    let p_old = softmax(old_row);
    let lp_new = log_softmax(new_row);
    let lp_old = log_softmax(old_row);
    let mut value = 0.0;
    // Σ_a π(a) g_a with g_a = ∂term/∂r
    let mut weighted_slope = 0.0;
    let mut slopes = vec![0.0; p_new.len()];
    for a in 0..p_new.len() {
        let ratio = LikelihoodRatio::new((lp_new[a] - lp_old[a]).exp())?;
        let mut ctx = ClipContext::new(ratio, p_old[a], adv_row[a]);
        if rule.needs_dists() {
            ctx = ctx.with_dists(&p_new, &p_old);
        }
        let term = evaluate_term(rule, &ctx, form)?;
        value += p_old[a] * term.value;
        slopes[a] = term.slope;
        weighted_slope += p_new[a] * term.slope;
    }
    if let Some(g) = grad {
        // π_old(a) ∂r_a/∂θ_b = π(a) (1[a=b] - π(b))
        for b in 0..p_new.len() {
            g[b] = p_new[b] * (slopes[b] - weighted_slope);
        }
    }
    Ok(value)
}

/// `Σ_s d(s) Σ_a π_old(a|s) · term(rule, ctx(s, a))` by exact summation.
pub fn exact_surrogate_objective(
    new: &LogitTable,
    old: &LogitTable,
    rule: &ClipRule,
    form: SurrogateForm,
    adv: &[f64],
    d: &StateVisitation,
) -> Result<f64> {
    check_pair(new, old, adv, d)?;
    let v = new.vocab();
    let mut total = 0.0;
    for (s, &w) in d.weights().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        total += w * state_objective(new.row(s), old.row(s), &adv[s * v..(s + 1) * v], rule, form, None)?;
    }
    Ok(total)
}

/// Gradient of [`exact_surrogate_objective`] with respect to `new`'s
/// logits, holding every clip decision fixed.
pub fn exact_surrogate_gradient(
    new: &LogitTable,
    old: &LogitTable,
    rule: &ClipRule,
    form: SurrogateForm,
    adv: &[f64],
    d: &StateVisitation,
) -> Result<Vec<f64>> {
    check_pair(new, old, adv, d)?;
    let v = new.vocab();
    let mut grad = vec![0.0; new.as_slice().len()];
    for (s, &w) in d.weights().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let g = &mut grad[s * v..(s + 1) * v];
        state_objective(new.row(s), old.row(s), &adv[s * v..(s + 1) * v], rule, form, Some(g))?;
        g.iter_mut().for_each(|x| *x *= w);
    }
    Ok(grad)
}
