//! Group-relative policy-gradient training on a [`TokenEnv`].
//!
//! Each step snapshots `θ_old`, samples `G` responses per prompt, turns group
//! rewards into advantages and ascends the clipped surrogate of the chosen
//! [`ClipRule`] with plain gradient steps. With `inner_steps = 1` every ratio
//! equals 1 when the gradient is taken, so all rules produce the same
//! update; extra inner steps reuse the batch and let the rules disagree.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clipping::{evaluate_term, ClipContext, ClipRule, SurrogateForm};
use crate::divergence::{full_kl_slices, kl3_raw, log_softmax, softmax, LikelihoodRatio};
use crate::error::{config, contract, Error, Result};
use crate::policy::{
    mean_entropy, mix_seed, rollout, rollout_with_temperature, visitation_exact, LogitTable, TokenEnv,
    Transcript,
};

/// Standard-deviation floor in z-score mode.
pub const STD_FLOOR: f64 = 1e-8;

/// How group rewards become advantages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// `A_i = r_i - mean(r)`.
    #[default]
    MeanBaseline,
    /// `A_i = (r_i - mean(r)) / (std(r) + 1e-8)`.
    ZScore,
}

fn default_true() -> bool {
    true
}
fn default_one() -> usize {
    1
}
fn default_eval_temperature() -> f64 {
    0.3
}
fn default_eval_every() -> usize {
    50
}
fn default_eval_k() -> usize {
    8
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub rule: ClipRule,
    pub group_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// Coefficient of the exact `KL(π_θ || π_ref)` penalty.
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub advantage_mode: AdvantageMode,
    /// Weight each response's tokens by `1/|y|`.
    #[serde(default = "default_true")]
    pub token_average: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_eval_k")]
    pub eval_k: usize,
    #[serde(default = "default_eval_temperature")]
    pub eval_temperature: f64,
    /// Gradient steps taken on each sampled batch before re-snapshotting.
    #[serde(default = "default_one")]
    pub inner_steps: usize,
    #[serde(default)]
    pub form: SurrogateForm,
    /// Fill the `ms` column with measured time instead of 0.
    #[serde(default)]
    pub record_wall_clock: bool,
}

impl TrainConfig {
    /// Defaults for everything except the rule and the step budget.
    pub fn new(rule: ClipRule, steps: usize) -> Self {
        Self {
            rule,
            group_size: 8,
            learning_rate: 1.0,
            steps,
            beta: 0.0,
            advantage_mode: AdvantageMode::MeanBaseline,
            token_average: true,
            seed: 0,
            eval_every: default_eval_every(),
            eval_k: default_eval_k(),
            eval_temperature: default_eval_temperature(),
            inner_steps: 1,
            form: SurrogateForm::Native,
            record_wall_clock: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rule.validate()?;
        if self.group_size < 2 {
            return Err(config(format!("group_size must be >= 2, got {}", self.group_size)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.steps == 0 || self.eval_every == 0 || self.eval_k == 0 || self.inner_steps == 0 {
            return Err(config("steps, eval_every, eval_k and inner_steps must be positive"));
        }
        if !(self.eval_temperature.is_finite() && self.eval_temperature > 0.0) {
            return Err(config("eval_temperature must be > 0"));
        }
        Ok(())
    }
}

/// Advantages for one group of rewards.
///
/// ```
/// use clipbench::trainer::{group_advantages, AdvantageMode};
/// let a = group_advantages(&[1.0, 0.0, 0.0, 0.0], AdvantageMode::MeanBaseline).unwrap();
/// assert_eq!(a, vec![0.75, -0.25, -0.25, -0.25]);
/// ```
pub fn group_advantages(rewards: &[f64], mode: AdvantageMode) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(contract("empty reward group"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let centered = rewards.iter().map(|r| r - mean);
    Ok(match mode {
        AdvantageMode::MeanBaseline => centered.collect(),
        AdvantageMode::ZScore => {
            let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            let scale = var.sqrt() + STD_FLOOR;
            centered.map(|c| c / scale).collect()
        }
    })
}

/// The `G` responses sampled for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub prompt: usize,
    pub transcripts: Vec<Transcript>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    #[serde(rename = "return")]
    pub mean_return: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub mean_kl3: f64,
    pub length: f64,
    pub ms: f64,
}

/// Everything a step produced, for callers that need more than the row.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub row: MetricsRow,
    pub batches: Vec<GroupBatch>,
    /// Clip fraction seen by each inner step, measured before its update.
    pub inner_clip_fracs: Vec<f64>,
}

/// Mutable training state: current logits and the frozen reference policy.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub env: TokenEnv,
    pub table: LogitTable,
    pub reference: LogitTable,
    pub step: usize,
}

impl TrainState {
    /// Starts from all-zero logits (uniform policy), which is also the reference.
    pub fn new(env: TokenEnv) -> Self {
        let table = LogitTable::for_env(&env);
        Self::with_table(env, table)
    }

    pub fn with_table(env: TokenEnv, table: LogitTable) -> Self {
        Self {
            reference: table.clone(),
            env,
            table,
            step: 0,
        }
    }
}

struct Token {
    state: usize,
    action: usize,
    old_log_prob: f64,
    advantage: f64,
    weight: f64,
}

fn sample_groups(state: &TrainState, cfg: &TrainConfig, step: usize) -> Result<Vec<GroupBatch>> {
    let env = &state.env;
    let g = cfg.group_size;
    let jobs: Vec<(usize, usize)> = (0..env.num_prompts())
        .flat_map(|p| (0..g).map(move |i| (p, i)))
        .collect();
    let transcripts: Vec<Transcript> = jobs
        .par_iter()
        .map(|&(p, i)| rollout(&state.table, env, p, mix_seed(cfg.seed, &[step as u64, p as u64, i as u64])))
        .collect::<Result<_>>()?;
    let mut batches = Vec::with_capacity(env.num_prompts());
    for (p, chunk) in transcripts.chunks(g).enumerate() {
        let rewards: Vec<f64> = chunk.iter().map(|t| t.reward).collect();
        let advantages = group_advantages(&rewards, cfg.advantage_mode)?;
        batches.push(GroupBatch {
            prompt: p,
            transcripts: chunk.to_vec(),
            rewards,
            advantages,
        });
    }
    Ok(batches)
}

fn flatten(batches: &[GroupBatch], cfg: &TrainConfig) -> Vec<Token> {
    let total = batches.iter().map(|b| b.transcripts.len()).sum::<usize>() as f64;
    let mut tokens = Vec::new();
    for b in batches {
        for (t, &adv) in b.transcripts.iter().zip(&b.advantages) {
            let per_token = if cfg.token_average { 1.0 / t.len() as f64 } else { 1.0 };
            for k in 0..t.len() {
                tokens.push(Token {
                    state: t.states[k],
                    action: t.tokens[k],
                    old_log_prob: t.old_log_probs[k],
                    advantage: adv,
                    weight: per_token / total,
                });
            }
        }
    }
    tokens
}

/// Fraction of tokens whose constraint fails under `table`.
fn violation_fraction(table: &LogitTable, old: &LogitTable, rule: &ClipRule, tokens: &[Token]) -> Result<f64> {
    if tokens.is_empty() {
        return Ok(0.0);
    }
    let mut violated = 0usize;
    for tok in tokens {
        let ctx_new = softmax(table.row(tok.state));
        let ctx_old = softmax(old.row(tok.state));
        let ratio = LikelihoodRatio::new(ctx_new[tok.action] / ctx_old[tok.action])?;
        let mut ctx = ClipContext::new(ratio, ctx_old[tok.action], tok.advantage);
        if rule.needs_dists() {
            ctx = ctx.with_dists(&ctx_new, &ctx_old);
        }
        if !crate::clipping::constraint_satisfied(rule, &ctx)? {
            violated += 1;
        }
    }
    Ok(violated as f64 / tokens.len() as f64)
}

/// Sampled surrogate gradient (plus penalty) and the share of clipped tokens.
fn batch_gradient(state: &TrainState, old: &LogitTable, cfg: &TrainConfig, tokens: &[Token]) -> Result<(Vec<f64>, f64)> {
    let table = &state.table;
    let v = table.vocab();
    let mut grad = vec![0.0; table.as_slice().len()];
    let mut clipped = 0usize;
    for tok in tokens {
        let lp_new = log_softmax(table.row(tok.state));
        let p_new = softmax(table.row(tok.state));
        let p_old = softmax(old.row(tok.state));
        let ratio = LikelihoodRatio::new((lp_new[tok.action] - tok.old_log_prob).exp())?;
        let mut ctx = ClipContext::new(ratio, tok.old_log_prob.exp(), tok.advantage);
        if cfg.rule.needs_dists() {
            ctx = ctx.with_dists(&p_new, &p_old);
        }
        let term = evaluate_term(&cfg.rule, &ctx, cfg.form)?;
        if !term.constraint_ok {
            clipped += 1;
        }
        let row = &mut grad[tok.state * v..(tok.state + 1) * v];
        // ∂r/∂θ_b = r (1[b = a] - π(b))
        let scale = tok.weight * term.slope * ratio.get();
        if scale != 0.0 {
            for (b, g) in row.iter_mut().enumerate() {
                let indicator = if b == tok.action { 1.0 } else { 0.0 };
                *g += scale * (indicator - p_new[b]);
            }
        }
        if cfg.beta > 0.0 {
            let p_ref = softmax(state.reference.row(tok.state));
            let kl = full_kl_slices(&p_new, &p_ref)?;
            for (b, g) in row.iter_mut().enumerate() {
                let log_ratio = lp_new[b] - p_ref[b].ln();
                *g -= cfg.beta * tok.weight * p_new[b] * (log_ratio - kl);
            }
        }
    }
    let frac = if tokens.is_empty() { 0.0 } else { clipped as f64 / tokens.len() as f64 };
    Ok((grad, frac))
}

fn divergence_error(step: usize, cfg: &TrainConfig, grad: &[f64], table: &LogitTable) -> Error {
    let bad: Vec<usize> = grad
        .iter()
        .enumerate()
        .filter(|(_, g)| !g.is_finite())
        .map(|(i, _)| i)
        .take(16)
        .collect();
    let dump = serde_json::json!({
        "step": step,
        "rule": cfg.rule,
        "learning_rate": cfg.learning_rate,
        "non_finite_gradient_entries": bad,
        "max_abs_logit": table.as_slice().iter().fold(0.0f64, |m, z| m.max(z.abs())),
    });
    Error::Training {
        step,
        message: "non-finite gradient".into(),
        dump: dump.to_string(),
    }
}

/// Runs one training step and returns its metrics and batches.
pub fn train_step_detailed(state: &mut TrainState, cfg: &TrainConfig) -> Result<StepOutcome> {
    let started = Instant::now();
    let step = state.step + 1;
    let old = state.table.clone();
    let batches = sample_groups(state, cfg, step)?;
    let tokens = flatten(&batches, cfg);

    let mut inner_clip_fracs = Vec::with_capacity(cfg.inner_steps);
    for _ in 0..cfg.inner_steps {
        let (grad, frac) = batch_gradient(state, &old, cfg, &tokens)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(divergence_error(step, cfg, &grad, &state.table));
        }
        inner_clip_fracs.push(frac);
        state.table.add_scaled(&grad, cfg.learning_rate);
        if !state.table.is_finite() {
            return Err(divergence_error(step, cfg, &grad, &state.table));
        }
    }
    state.step = step;

    let transcripts = batches.iter().flat_map(|b| &b.transcripts);
    let n = batches.iter().map(|b| b.transcripts.len()).sum::<usize>() as f64;
    let mean_return = transcripts.clone().map(|t| t.reward).sum::<f64>() / n;
    let length = transcripts.map(|t| t.len() as f64).sum::<f64>() / n;
    let mean_kl3 = if tokens.is_empty() {
        0.0
    } else {
        tokens
            .iter()
            .map(|t| kl3_raw((log_softmax(state.table.row(t.state))[t.action] - t.old_log_prob).exp()))
            .sum::<f64>()
            / tokens.len() as f64
    };
    let clip_frac = violation_fraction(&state.table, &old, &cfg.rule, &tokens)?;
    let entropy = mean_entropy(&state.table, &visitation_exact(&state.table, &state.env)?);
    let ms = if cfg.record_wall_clock {
        started.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    };
    debug!("step {step}: return {mean_return:.4} entropy {entropy:.4} clip {clip_frac:.4}");
    Ok(StepOutcome {
        row: MetricsRow {
            step,
            mean_return,
            entropy,
            clip_frac,
            mean_kl3,
            length,
            ms,
        },
        batches,
        inner_clip_fracs,
    })
}

/// Runs one training step. `clip_frac` is the share of this step's sampled
/// tokens whose constraint the updated policy violates.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig) -> Result<MetricsRow> {
    Ok(train_step_detailed(state, cfg)?.row)
}

/// Mean@K / Pass@K over all prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub temperature: f64,
    pub mean_at_k: f64,
    pub pass_at_k: f64,
    pub per_prompt_mean: Vec<f64>,
}

/// Samples `k` responses per prompt at `temperature`.
pub fn evaluate(table: &LogitTable, env: &TokenEnv, k: usize, temperature: f64, seed: u64) -> Result<EvalReport> {
    if k == 0 {
        return Err(contract("K must be at least 1"));
    }
    let rewards: Vec<Vec<f64>> = (0..env.num_prompts())
        .into_par_iter()
        .map(|p| {
            (0..k)
                .map(|i| {
                    let s = mix_seed(seed, &[p as u64, i as u64]);
                    rollout_with_temperature(table, env, p, s, temperature).map(|t| t.reward)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let prompts = rewards.len() as f64;
    let per_prompt_mean: Vec<f64> = rewards.iter().map(|r| r.iter().sum::<f64>() / k as f64).collect();
    let mean_at_k = per_prompt_mean.iter().sum::<f64>() / prompts;
    let pass_at_k = rewards.iter().filter(|r| r.iter().any(|&x| x > 0.0)).count() as f64 / prompts;
    Ok(EvalReport {
        k,
        temperature,
        mean_at_k,
        pass_at_k,
        per_prompt_mean,
    })
}

/// `1 - (1 - p)^K`.
pub fn pass_at_k_analytic(p: f64, k: usize) -> f64 {
    1.0 - (1.0 - p).powi(k as i32)
}

/// An evaluation taken during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// End-of-run summary: final and best evaluation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rule: ClipRule,
    pub seed: u64,
    pub steps: usize,
    pub final_return: f64,
    pub final_entropy: f64,
    pub final_mean_at_k: f64,
    pub best_mean_at_k: f64,
    pub final_pass_at_k: f64,
    pub best_pass_at_k: f64,
}

/// Result of [`train`]: the metrics stream, evaluations and summary.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub evals: Vec<EvalRecord>,
    pub summary: RunSummary,
    pub final_table: LogitTable,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVALS_FILE: &str = "evals.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

struct RunWriter {
    dir: PathBuf,
    metrics: csv::Writer<File>,
    evals: BufWriter<File>,
}

impl RunWriter {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: csv::Writer::from_path(dir.join(METRICS_FILE)).map_err(csv_err)?,
            evals: BufWriter::new(File::create(dir.join(EVALS_FILE))?),
        })
    }

    fn row(&mut self, row: &MetricsRow) -> Result<()> {
        self.metrics.serialize(row).map_err(csv_err)
    }

    fn eval(&mut self, rec: &EvalRecord, table: &LogitTable) -> Result<()> {
        serde_json::to_writer(&mut self.evals, rec)?;
        self.evals.write_all(b"\n")?;
        let path = self.dir.join(CHECKPOINT_DIR).join(format!("step_{:06}.json", rec.step));
        serde_json::to_writer(BufWriter::new(File::create(path)?), table)?;
        Ok(())
    }

    fn finish(mut self, summary: &RunSummary) -> Result<()> {
        self.metrics.flush()?;
        self.evals.flush()?;
        fs::write(self.dir.join(SUMMARY_FILE), serde_json::to_string_pretty(summary)? + "\n")?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Contract(format!("csv: {other:?}")),
    }
}

/// Trains from `state` for `cfg.steps` steps, evaluating every `eval_every`
/// steps and at the last step. Writes the run directory when `out` is given.
pub fn train(mut state: TrainState, cfg: &TrainConfig, out: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let mut writer = out.map(RunWriter::create).transpose()?;
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    for _ in 0..cfg.steps {
        let row = train_step(&mut state, cfg)?;
        if let Some(w) = writer.as_mut() {
            w.row(&row)?;
        }
        let step = row.step;
        rows.push(row);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let report = evaluate(
                &state.table,
                &state.env,
                cfg.eval_k,
                cfg.eval_temperature,
                mix_seed(cfg.seed, &[u64::MAX, step as u64]),
            )?;
            info!("step {step}: mean@{} {:.4} pass@{} {:.4}", cfg.eval_k, report.mean_at_k, cfg.eval_k, report.pass_at_k);
            let rec = EvalRecord { step, report };
            if let Some(w) = writer.as_mut() {
                w.eval(&rec, &state.table)?;
            }
            evals.push(rec);
        }
    }
    let last = rows.last().expect("steps > 0");
    let final_eval = &evals.last().expect("final step is evaluated").report;
    let summary = RunSummary {
        rule: cfg.rule,
        seed: cfg.seed,
        steps: cfg.steps,
        final_return: last.mean_return,
        final_entropy: last.entropy,
        final_mean_at_k: final_eval.mean_at_k,
        best_mean_at_k: evals.iter().map(|e| e.report.mean_at_k).fold(f64::MIN, f64::max),
        final_pass_at_k: final_eval.pass_at_k,
        best_pass_at_k: evals.iter().map(|e| e.report.pass_at_k).fold(f64::MIN, f64::max),
    };
    if let Some(w) = writer {
        w.finish(&summary)?;
    }
    Ok(RunOutput {
        rows,
        evals,
        summary,
        final_table: state.table,
    })
}

/// A named configuration inside a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub name: String,
    pub config: TrainConfig,
}

/// One line of the sweep summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub name: String,
    pub seed: u64,
    pub dir: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<RunSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Trains every `(entry, seed)` pair into `out/<name>/seed_<seed>/` on a
/// pool of `jobs` threads, then writes `out/summary.json`. A failing run is
/// recorded in the summary without stopping the others.
pub fn sweep(env: &TokenEnv, entries: &[SweepEntry], seeds: &[u64], out: &Path, jobs: usize) -> Result<Vec<SweepRecord>> {
    if entries.is_empty() || seeds.is_empty() {
        return Err(contract("a sweep needs at least one configuration and one seed"));
    }
    for e in entries {
        e.config.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Setup(e.to_string()))?;
    let work: Vec<(&SweepEntry, u64)> = entries
        .iter()
        .flat_map(|e| seeds.iter().map(move |&s| (e, s)))
        .collect();
    let records: Vec<SweepRecord> = pool.install(|| {
        work.par_iter()
            .map(|&(entry, seed)| {
                let rel = format!("{}/seed_{seed}", entry.name);
                let cfg = TrainConfig {
                    seed,
                    ..entry.config.clone()
                };
                let result = train(TrainState::new(env.clone()), &cfg, Some(&out.join(&rel)));
                let (summary, error) = match result {
                    Ok(run) => (Some(run.summary), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                SweepRecord {
                    name: entry.name.clone(),
                    seed,
                    dir: rel,
                    summary,
                    error,
                }
            })
            .collect()
    });
    fs::create_dir_all(out)?;
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&records)? + "\n")?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::EnvConfig;
    use approx::assert_abs_diff_eq;

    fn bandit_state() -> TrainState {
        TrainState::new(TokenEnv::new(EnvConfig::bandit(8, 3)).unwrap())
    }

    #[test]
    fn advantage_examples() {
        let z = group_advantages(&[1.0, 1.0, 0.0, 0.0], AdvantageMode::ZScore).unwrap();
        for (a, e) in z.iter().zip([1.0, 1.0, -1.0, -1.0]) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-4);
        }
        for mode in [AdvantageMode::MeanBaseline, AdvantageMode::ZScore] {
            let flat = group_advantages(&[1.0; 5], mode).unwrap();
            assert!(flat.iter().all(|a| a.abs() < 1e-12));
        }
        assert!(group_advantages(&[], AdvantageMode::MeanBaseline).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(ClipRule::Kl3 { delta: 0.07 }, 10);
        assert!(cfg.validate().is_ok());
        cfg.group_size = 1;
        assert!(cfg.validate().is_err());
        cfg.group_size = 4;
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        let json = r#"{"rule":{"kind":"kl3","params":{"delta":0.07}},"group_size":4,"learning_rate":1,"steps":5,"bogus":0}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }

    #[test]
    fn zero_rewards_leave_policy_unchanged() {
        // an empty target never matches a one-token response
        let cfg_env = EnvConfig {
            verifier: crate::policy::Verifier::TargetSequence { targets: vec![vec![]] },
            ..EnvConfig::bandit(8, 0)
        };
        let mut state = TrainState::new(TokenEnv::new(cfg_env).unwrap());
        let before = state.table.clone();
        let cfg = TrainConfig::new(ClipRule::RatioSymmetric { eps: 0.2 }, 1);
        let row = train_step(&mut state, &cfg).unwrap();
        assert_eq!(row.mean_return, 0.0);
        assert_eq!(state.table, before);
    }

    #[test]
    fn first_inner_step_never_clips() {
        let mut state = bandit_state();
        let cfg = TrainConfig {
            inner_steps: 4,
            learning_rate: 3.0,
            ..TrainConfig::new(ClipRule::Kl3 { delta: 0.07 }, 1)
        };
        for _ in 0..5 {
            let out = train_step_detailed(&mut state, &cfg).unwrap();
            assert_eq!(out.inner_clip_fracs[0], 0.0);
            assert!(out.row.clip_frac >= 0.0 && out.row.clip_frac <= 1.0);
        }
    }

    #[test]
    fn groups_are_mean_zero() {
        let env = TokenEnv::new(EnvConfig::mixed_digit_sum(4, 3, 4)).unwrap();
        let mut state = TrainState::new(env);
        let cfg = TrainConfig::new(ClipRule::RatioSymmetric { eps: 0.2 }, 1);
        let out = train_step_detailed(&mut state, &cfg).unwrap();
        for b in &out.batches {
            assert_eq!(b.transcripts.len(), cfg.group_size);
            assert!(b.advantages.iter().sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let cfg = TrainConfig::new(ClipRule::Kl3 { delta: 0.07 }, 20);
        let a = train(bandit_state(), &cfg, None).unwrap();
        let b = train(bandit_state(), &cfg, None).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.summary, b.summary);
    }

    #[test]
    fn penalty_descends_reference_kl() {
        let env = TokenEnv::new(EnvConfig {
            verifier: crate::policy::Verifier::TargetSequence { targets: vec![vec![]] },
            ..EnvConfig::bandit(4, 0)
        })
        .unwrap();
        let reference = LogitTable::zeros(1, 4);
        let start = LogitTable::single(&[1.0, -0.5, 0.3, 0.0]).unwrap();
        let mut state = TrainState::with_table(env, start);
        state.reference = reference.clone();
        let cfg = TrainConfig {
            beta: 0.5,
            learning_rate: 0.1,
            ..TrainConfig::new(ClipRule::RatioSymmetric { eps: 0.2 }, 1)
        };
        let kl = |t: &LogitTable| full_kl_slices(&softmax(t.row(0)), &softmax(reference.row(0))).unwrap();
        let mut prev = kl(&state.table);
        for _ in 0..10 {
            train_step(&mut state, &cfg).unwrap();
            let now = kl(&state.table);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn evaluation_of_solved_policy() {
        let env = TokenEnv::new(EnvConfig::bandit(4, 1)).unwrap();
        let t = LogitTable::single(&[0.0, 60.0, 0.0, 0.0]).unwrap();
        for k in [1, 8, 32] {
            let r = evaluate(&t, &env, k, 0.3, 1).unwrap();
            assert_eq!(r.mean_at_k, 1.0);
            assert_eq!(r.pass_at_k, 1.0);
        }
        assert!(evaluate(&t, &env, 0, 1.0, 1).is_err());
    }

    #[test]
    fn pass_at_k_closed_form_is_monotone() {
        let mut prev = 0.0;
        for k in [1, 2, 8, 32, 128] {
            let v = pass_at_k_analytic(0.05, k);
            assert!(v > prev);
            prev = v;
        }
        assert_abs_diff_eq!(pass_at_k_analytic(0.5, 2), 0.75, epsilon = 1e-15);
    }
}
