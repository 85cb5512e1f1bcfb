//! Training loop: rollout, advantages, clipped update, old-policy refresh.
//!
//! Every random draw is seeded from `(seed, step, lane)`, so a run is fully
//! determined by its configuration and resuming from a checkpoint replays
//! the remaining steps bit for bit. Rollouts run in parallel per query;
//! gradients are reduced in a fixed order.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::group_advantages;
use crate::config::RunConfig;
use crate::diagnostics::{distinct_branched_chains, high_entropy_runs, histogram};
use crate::encoding::StateEncoder;
use crate::entropy::EntropyTrace;
use crate::env::{play_scripted, Env, Task};
use crate::error::{Error, Result};
use crate::policy::{log_softmax, score_from_probs, softmax, PolicyParams};
use crate::rollout::{rollout, write_pool_dump, PolicySampler, RolloutPool, SoftmaxPolicy};
use crate::update::{batch_gradient_with, gradient_factor, ClippedToken, PolicyView, TokenSample, UpdateRule};
use crate::Params;

const LANE_TASKS: u64 = 0;
const LANE_ROLLOUT: u64 = 1;
const LANE_SHUFFLE: u64 = 2;
const LANE_WARMUP: u64 = 3;
const LANE_EVAL: u64 = 4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one independent random stream.
pub fn stream_seed(seed: u64, step: u64, lane: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(splitmix(seed) ^ step) ^ lane) ^ index)
}

/// Behavior cloning of the scripted player on `tasks`: full-batch gradient
/// ascent on the mean log-likelihood of the demonstrated tokens.
pub fn warm_start(
    params: &Params,
    env: &Env,
    encoder: &StateEncoder,
    tasks: &[Task],
    steps: usize,
    lr: f64,
    temperature: f64,
) -> Result<Params> {
    let mut demos = Vec::new();
    for task in tasks {
        let (tokens, _) = play_scripted(env, task)?;
        let mut state = env.reset(task);
        let mut i = 0;
        while i < tokens.len() {
            demos.push((encoder.encode::<f64>(&state).0, tokens[i]));
            let out = env.step(&mut state, tokens[i])?;
            i += 1 + out.result.len();
        }
    }
    let mut w = params.weights.clone();
    let n = demos.len().max(1) as f64;
    for _ in 0..steps {
        let mut grad = Array2::<f64>::zeros(w.dim());
        for (x, a) in &demos {
            let z = w.dot(x);
            let p = softmax(z.as_slice().expect("contiguous"), temperature)?;
            grad += &score_from_probs(&p, x, temperature, *a);
        }
        w.scaled_add(lr / n, &grad);
    }
    PolicyParams::from_weights(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub rule: String,
    pub mean_reward: f64,
    /// Fraction of groups with at least one success.
    pub pass_at_k: f64,
    pub mean_entropy: f64,
    pub mean_tool_calls: f64,
    pub mean_length: f64,
    pub mean_m: f64,
    pub branched: usize,
    pub top_ups: usize,
    /// `[n]` = pools in which `n` distinct chains were branched.
    pub branch_hist: Vec<usize>,
    /// `[len]` = runs of `len` consecutive high-entropy tool steps.
    pub consecutive_hist: Vec<usize>,
    pub tokens: usize,
    pub zeroed_frac: f64,
    pub vanilla_zeroed_frac: f64,
    pub upper_clip_frac: f64,
    pub lower_clip_frac: f64,
    pub nonzero_grad_tokens: usize,
    pub vanilla_nonzero_grad_tokens: usize,
    pub mean_delta: f64,
    pub max_delta: f64,
    /// `max |delta - 1|` over the first mini-batch.
    pub first_minibatch_max_dev: f64,
    pub loss: f64,
    pub adv_min: f64,
    pub adv_mean: f64,
    pub adv_max: f64,
    pub top_clipped: Vec<ClippedToken>,
}

/// (min, mean, max) of the reshaped advantages of a step.
pub type AdvantageRange = (f64, f64, f64);

/// Token samples of a set of pools, in canonical (query, chain, token)
/// order, together with the reshaped advantages.
pub fn collect_samples(
    env: &Env,
    encoder: &StateEncoder,
    tasks: &[Task],
    pools: &[RolloutPool],
    a_weight: f64,
    scope: crate::advantage::EntropyScope,
) -> Result<(Vec<TokenSample<f64>>, AdvantageRange)> {
    let mut samples = Vec::new();
    let (mut lo, mut hi, mut sum, mut groups) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for (task, pool) in tasks.iter().zip(pools) {
        let adv = group_advantages::<f64>(&pool.trajectories, a_weight, scope)?;
        let (a, b, c) = adv.summary(&pool.trajectories);
        lo = lo.min(a);
        sum += b;
        hi = hi.max(c);
        groups += 1;
        for (traj, reshaped) in pool.trajectories.iter().zip(&adv.reshaped) {
            let states = env.replay(task, &traj.tokens, &traj.loss_mask)?;
            let positions = traj.loss_mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i);
            for (state, pos) in states.iter().zip(positions) {
                samples.push(TokenSample {
                    features: encoder.encode::<f64>(state).0,
                    token: traj.tokens[pos],
                    old_log_prob: traj.old_log_probs[pos],
                    advantage: reshaped[pos],
                });
            }
        }
    }
    let summary = if groups == 0 {
        (0.0, 0.0, 0.0)
    } else {
        (lo, sum / groups as f64, hi)
    };
    Ok((samples, summary))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct TrainState {
    seed: u64,
    step: usize,
}

pub struct Trainer {
    pub config: RunConfig,
    pub env: Env,
    pub encoder: StateEncoder,
    pub rule: UpdateRule<f64>,
    pub params: Params,
    pub reference: Params,
    /// Number of completed steps.
    pub step: usize,
}

impl Trainer {
    /// Fresh trainer: zero weights followed by the behavior-cloning warm
    /// start.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let env = config.env()?;
        let encoder = StateEncoder::new(config.vocab, config.max_len);
        let zero = PolicyParams::zeros(config.vocab, encoder.dim());
        let params = if config.warmup_steps > 0 {
            let tasks = config.generator()?.generate(
                &env.registry,
                64,
                stream_seed(config.seed, 0, LANE_WARMUP, 0),
            );
            warm_start(
                &zero,
                &env,
                &encoder,
                &tasks,
                config.warmup_steps,
                config.warmup_lr,
                config.temperature,
            )?
        } else {
            zero
        };
        Ok(Self {
            rule: config.update_rule(),
            reference: params.clone(),
            params,
            env,
            encoder,
            config,
            step: 0,
        })
    }

    /// Trainer restored from a checkpoint directory.
    pub fn resume(config: RunConfig, checkpoint: &Path) -> Result<Self> {
        config.validate()?;
        let state_path = checkpoint.join("state.json");
        let text = fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let state: TrainState = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: state_path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if state.seed != config.seed {
            return Err(Error::config(format!(
                "checkpoint seed {} differs from configured seed {}",
                state.seed, config.seed
            )));
        }
        let params = PolicyParams::load(&checkpoint.join("policy.bin"))?;
        let reference = PolicyParams::load(&checkpoint.join("reference.bin"))?;
        let env = config.env()?;
        let encoder = StateEncoder::new(config.vocab, config.max_len);
        if params.feature_dim() != encoder.dim() || params.vocab_size() != config.vocab {
            return Err(Error::config("checkpoint shape does not match the configuration"));
        }
        Ok(Self {
            rule: config.update_rule(),
            params,
            reference,
            env,
            encoder,
            config,
            step: state.step,
        })
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join("policy.bin"))?;
        self.reference.save(&dir.join("reference.bin"))?;
        let state = TrainState {
            seed: self.config.seed,
            step: self.step,
        };
        let path = dir.join("state.json");
        fs::write(&path, serde_json::to_string(&state).expect("serializable")).map_err(|e| Error::io(&path, e))
    }

    pub fn tasks_for_step(&self, step: usize) -> Result<Vec<Task>> {
        Ok(self.config.generator()?.generate(
            &self.env.registry,
            self.config.batch,
            stream_seed(self.config.seed, step as u64, LANE_TASKS, 0),
        ))
    }

    /// Rollout pools of the current policy for `tasks`.
    pub fn rollouts(&self, step: usize, tasks: &[Task]) -> Result<Vec<RolloutPool>> {
        let policy = SoftmaxPolicy {
            params: &self.params,
            encoder: self.encoder,
            temperature: self.config.temperature,
        };
        tasks
            .par_iter()
            .enumerate()
            .map(|(i, task)| {
                let sampler = PolicySampler {
                    env: &self.env,
                    task,
                    policy: &policy,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, step as u64, LANE_ROLLOUT, i as u64));
                rollout(&sampler, &self.config.rollout, &mut rng)
            })
            .collect()
    }

    /// Runs one outer step and returns its metrics.
    pub fn train_step(&mut self) -> Result<(StepMetrics, Vec<RolloutPool>)> {
        let step = self.step + 1;
        let tasks = self.tasks_for_step(step)?;
        let pools = self.rollouts(step, &tasks)?;
        let (samples, (adv_min, adv_mean, adv_max)) = collect_samples(
            &self.env,
            &self.encoder,
            &tasks,
            &pools,
            self.config.a_weight,
            self.config.entropy_adv_scope,
        )?;

        let mut m = rollout_metrics(step, &pools, self.config.vocab, self.config.rollout.window);
        m.rule = self.rule.name().to_string();
        m.adv_min = adv_min;
        m.adv_mean = adv_mean;
        m.adv_max = adv_max;

        if !samples.is_empty() {
            self.update(step, &samples, &mut m)?;
        }
        self.step = step;
        Ok((m, pools))
    }

    fn update(&mut self, step: usize, samples: &[TokenSample<f64>], m: &mut StepMetrics) -> Result<()> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, step as u64, LANE_SHUFFLE, 0));
        let chunks = self.config.minibatches.min(samples.len());
        let rule = self.rule;
        let (mut zeroed, mut vzeroed, mut upper, mut lower, mut total) = (0.0, 0.0, 0.0, 0.0, 0usize);
        let (mut sum_delta, mut max_delta, mut loss) = (0.0, 0.0f64, 0.0);
        let mut first = true;
        let mut clipped = Vec::new();
        for _ in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let size = order.len().div_ceil(chunks);
            for idx in order.chunks(size) {
                let batch: Vec<TokenSample<f64>> = idx.iter().map(|i| samples[*i].clone()).collect();
                let view = PolicyView {
                    params: &self.params,
                    temperature: self.config.temperature,
                    reference: Some(&self.reference),
                };
                let (grad, report) = batch_gradient_with(&view, &batch, &rule, |d, a| gradient_factor(d, a, &rule))?;
                if first {
                    m.first_minibatch_max_dev = report.max_abs_delta_dev;
                    first = false;
                }
                let n = report.tokens as f64;
                zeroed += report.zeroed_frac * n;
                vzeroed += report.vanilla_zeroed_frac * n;
                upper += report.upper_clip_frac * n;
                lower += report.lower_clip_frac * n;
                sum_delta += report.mean_delta * n;
                loss += report.loss * n;
                total += report.tokens;
                for s in &batch {
                    let z = self.params.weights.dot(&s.features);
                    let lp = log_softmax(z.as_slice().expect("contiguous"), self.config.temperature)?;
                    max_delta = max_delta.max((lp[s.token] - s.old_log_prob).exp());
                }
                clipped.extend(report.top_clipped);
                let w = &self.params.weights + &(grad * self.config.lr);
                self.params = PolicyParams::from_weights(w)?;
            }
        }
        let total_f = total as f64;
        m.tokens = total;
        m.zeroed_frac = zeroed / total_f;
        m.vanilla_zeroed_frac = vzeroed / total_f;
        m.upper_clip_frac = upper / total_f;
        m.lower_clip_frac = lower / total_f;
        m.nonzero_grad_tokens = total - zeroed.round() as usize;
        m.vanilla_nonzero_grad_tokens = total - vzeroed.round() as usize;
        m.mean_delta = sum_delta / total_f;
        m.max_delta = max_delta;
        m.loss = loss / total_f;
        clipped.sort_by(|a, b| {
            (b.delta - 1.0)
                .abs()
                .partial_cmp(&(a.delta - 1.0).abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        clipped.truncate(10);
        m.top_clipped = clipped;
        Ok(())
    }
}

fn rollout_metrics(step: usize, pools: &[RolloutPool], vocab: usize, window: usize) -> StepMetrics {
    let trajs: Vec<_> = pools.iter().flat_map(|p| p.trajectories.iter()).collect();
    let n = trajs.len().max(1) as f64;
    let (mut ent_sum, mut ent_n) = (0.0, 0usize);
    for t in &trajs {
        for (h, mk) in t.entropies.iter().zip(&t.loss_mask) {
            if *mk {
                ent_sum += h;
                ent_n += 1;
            }
        }
    }
    let runs = trajs
        .iter()
        .flat_map(|t| high_entropy_runs(&EntropyTrace::of(t, window, vocab).delta_h));
    StepMetrics {
        step,
        rule: String::new(),
        mean_reward: trajs.iter().map(|t| t.reward).sum::<f64>() / n,
        pass_at_k: pools
            .iter()
            .filter(|p| p.trajectories.iter().any(|t| t.reward > 0.0))
            .count() as f64
            / pools.len().max(1) as f64,
        mean_entropy: ent_sum / ent_n.max(1) as f64,
        mean_tool_calls: trajs.iter().map(|t| t.num_tool_steps()).sum::<usize>() as f64 / n,
        mean_length: trajs.iter().map(|t| t.len()).sum::<usize>() as f64 / n,
        mean_m: pools.iter().map(|p| p.allocation.m).sum::<usize>() as f64 / pools.len().max(1) as f64,
        branched: pools.iter().map(|p| p.branched).sum(),
        top_ups: pools.iter().map(|p| p.top_ups).sum(),
        branch_hist: histogram(pools.iter().map(|p| distinct_branched_chains(&p.events))),
        consecutive_hist: histogram(runs),
        tokens: 0,
        zeroed_frac: 0.0,
        vanilla_zeroed_frac: 0.0,
        upper_clip_frac: 0.0,
        lower_clip_frac: 0.0,
        nonzero_grad_tokens: 0,
        vanilla_nonzero_grad_tokens: 0,
        mean_delta: 1.0,
        max_delta: 1.0,
        first_minibatch_max_dev: 0.0,
        loss: 0.0,
        adv_min: 0.0,
        adv_mean: 0.0,
        adv_max: 0.0,
        top_clipped: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub metrics: Vec<StepMetrics>,
    pub final_checkpoint: PathBuf,
}

fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:06}"))
}

/// Runs (or continues) training to `config.steps`, writing the run
/// directory: `config.txt`, `metrics.jsonl`, `checkpoints/` and optionally
/// `pools/`.
pub fn run_training(mut trainer: Trainer, mut on_step: impl FnMut(&StepMetrics)) -> Result<TrainSummary> {
    let out = trainer.config.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, trainer.config.to_kv_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let metrics_path = out.join("metrics.jsonl");
    if trainer.step == 0 {
        File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        trainer.save_checkpoint(&checkpoint_dir(&out, 0))?;
    } else {
        truncate_metrics(&metrics_path, trainer.step)?;
    }
    let file = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut writer = BufWriter::new(file);
    let pools_dir = out.join("pools");
    if trainer.config.dump_pools {
        fs::create_dir_all(&pools_dir).map_err(|e| Error::io(&pools_dir, e))?;
    }

    let mut metrics = Vec::new();
    while trainer.step < trainer.config.steps {
        let (m, pools) = trainer.train_step()?;
        serde_json::to_writer(&mut writer, &m).expect("serializable metrics");
        writer.write_all(b"\n").map_err(|e| Error::io(&metrics_path, e))?;
        writer.flush().map_err(|e| Error::io(&metrics_path, e))?;
        if trainer.config.dump_pools {
            let path = pools_dir.join(format!("step_{:06}.jsonl", m.step));
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            for (i, p) in pools.iter().enumerate() {
                let id = (m.step as u64) * 1_000_000 + i as u64;
                write_pool_dump(&mut w, id, p, trainer.config.vocab, trainer.config.rollout.window)
                    .map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        if trainer.step.is_multiple_of(trainer.config.checkpoint_every) || trainer.step == trainer.config.steps {
            trainer.save_checkpoint(&checkpoint_dir(&out, trainer.step))?;
        }
        on_step(&m);
        metrics.push(m);
    }
    let final_checkpoint = checkpoint_dir(&out, trainer.step);
    if !final_checkpoint.exists() {
        trainer.save_checkpoint(&final_checkpoint)?;
    }
    Ok(TrainSummary {
        metrics,
        final_checkpoint,
    })
}

/// Drops metric records beyond `step` so a resumed run appends cleanly.
fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let kept: String = text.lines().take(step).map(|l| format!("{l}\n")).collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

pub fn train(config: RunConfig) -> Result<TrainSummary> {
    run_training(Trainer::new(config)?, |_| {})
}

/// Unbiased `pass@j` estimate from `c` successes in `n` samples.
pub fn pass_at(n: usize, c: usize, j: usize) -> f64 {
    if j > n {
        return f64::NAN;
    }
    if n - c < j {
        return 1.0;
    }
    // 1 - C(n - c, j) / C(n, j) as a running product
    let mut ratio = 1.0;
    for i in 0..j {
        ratio *= (n - c - i) as f64 / (n - i) as f64;
    }
    1.0 - ratio
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: usize,
    pub samples: usize,
    /// `pass[j - 1]` is the mean `pass@j`.
    pub pass: Vec<f64>,
    pub successes: Vec<usize>,
}

/// Tasks drawn from the configured distribution on a stream disjoint from
/// every training step.
pub fn held_out_tasks(config: &RunConfig, count: usize) -> Result<Vec<Task>> {
    let env = config.env()?;
    Ok(config
        .generator()?
        .generate(&env.registry, count, stream_seed(config.seed, 0, LANE_EVAL, u64::MAX)))
}

/// Samples `n` independent episodes per task and reports mean `pass@1..n`.
pub fn evaluate(
    params: &Params,
    env: &Env,
    encoder: &StateEncoder,
    tasks: &[Task],
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<EvalReport> {
    if n == 0 {
        return Err(Error::usage("evaluation needs at least one sample per task"));
    }
    let policy = SoftmaxPolicy {
        params,
        encoder: *encoder,
        temperature,
    };
    let successes: Vec<usize> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let sampler = PolicySampler { env, task, policy: &policy };
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0, LANE_EVAL, i as u64));
            let mut c = 0;
            for _ in 0..n {
                use crate::rollout::ChainSampler;
                if sampler.sample(&mut rng)?.reward > 0.0 {
                    c += 1;
                }
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let pass = (1..=n)
        .map(|j| successes.iter().map(|c| pass_at(n, *c, j)).sum::<f64>() / tasks.len().max(1) as f64)
        .collect();
    Ok(EvalReport {
        tasks: tasks.len(),
        samples: n,
        pass,
        successes,
    })
}

/// Runs one training job per rule with identical seeds and tasks and returns
/// the per-rule metrics.
pub fn compare(base: &RunConfig, rules: &[crate::update::Variant<f64>]) -> Result<Vec<(String, Vec<StepMetrics>)>> {
    if rules.len() < 2 {
        return Err(Error::usage("compare needs at least two rules"));
    }
    let names = column_names(rules);
    let mut out = Vec::new();
    for (rule, name) in rules.iter().zip(names) {
        let mut cfg = base.clone();
        cfg.rule = *rule;
        cfg.out_dir = base.out_dir.join(&name);
        let summary = train(cfg)?;
        out.push((name, summary.metrics));
    }
    Ok(out)
}

fn column_names(rules: &[crate::update::Variant<f64>]) -> Vec<String> {
    let mut seen = std::collections::HashMap::new();
    rules
        .iter()
        .map(|r| {
            let c = seen.entry(r.name()).or_insert(0usize);
            *c += 1;
            if *c == 1 {
                r.name().to_string()
            } else {
                format!("{}_{}", r.name(), c)
            }
        })
        .collect()
}

/// Step-aligned CSV of the comparison. The `vanilla_*` columns count what
/// vanilla clipping would zero on the very batch the rule trained on.
pub fn compare_csv(results: &[(String, Vec<StepMetrics>)]) -> String {
    const FIELDS: [&str; 7] = [
        "mean_reward",
        "mean_entropy",
        "zeroed_frac",
        "vanilla_zeroed_frac",
        "nonzero_grad_tokens",
        "vanilla_nonzero_grad_tokens",
        "mean_tool_calls",
    ];
    let mut out = String::from("step");
    for (name, _) in results {
        for f in FIELDS {
            out.push_str(&format!(",{name}_{f}"));
        }
    }
    out.push('\n');
    let rows = results.iter().map(|(_, m)| m.len()).max().unwrap_or(0);
    for i in 0..rows {
        out.push_str(&(i + 1).to_string());
        for (_, metrics) in results {
            match metrics.get(i) {
                Some(m) => out.push_str(&format!(
                    ",{},{},{},{},{},{},{}",
                    m.mean_reward,
                    m.mean_entropy,
                    m.zeroed_frac,
                    m.vanilla_zeroed_frac,
                    m.nonzero_grad_tokens,
                    m.vanilla_nonzero_grad_tokens,
                    m.mean_tool_calls
                )),
                None => out.push_str(&",".repeat(FIELDS.len())),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_at_estimator() {
        assert_eq!(pass_at(5, 5, 3), 1.0);
        assert_eq!(pass_at(5, 0, 3), 0.0);
        assert!((pass_at(4, 1, 1) - 0.25).abs() < 1e-15);
        // 1 - C(2,2)/C(4,2) = 5/6
        assert!((pass_at(4, 2, 2) - 5.0 / 6.0).abs() < 1e-15);
        for c in 0..=10 {
            let ps: Vec<f64> = (1..=10).map(|j| pass_at(10, c, j)).collect();
            assert!(ps.windows(2).all(|w| w[0] <= w[1] + 1e-15));
        }
    }

    #[test]
    fn column_names_are_unique() {
        use crate::update::Variant;
        let names = column_names(&[Variant::Aepo, Variant::Grpo, Variant::Aepo]);
        assert_eq!(names, vec!["aepo", "grpo", "aepo_2"]);
    }

    #[test]
    fn warm_start_raises_demo_likelihood() {
        let cfg = RunConfig::default();
        let env = cfg.env().unwrap();
        let enc = StateEncoder::new(cfg.vocab, cfg.max_len);
        let tasks = cfg.generator().unwrap().generate(&env.registry, 8, 1);
        let zero = PolicyParams::zeros(cfg.vocab, enc.dim());
        let warm = warm_start(&zero, &env, &enc, &tasks, 20, 0.5, 0.6).unwrap();
        let ll = |p: &Params| -> f64 {
            let mut s = 0.0;
            for t in &tasks {
                let (tokens, _) = play_scripted(&env, t).unwrap();
                let mut st = env.reset(t);
                let mut i = 0;
                while i < tokens.len() {
                    let z = p.weights.dot(&enc.encode::<f64>(&st).0);
                    s += log_softmax(z.as_slice().unwrap(), 0.6).unwrap()[tokens[i]];
                    let out = env.step(&mut st, tokens[i]).unwrap();
                    i += 1 + out.result.len();
                }
            }
            s
        };
        assert!(ll(&warm) > ll(&zero));
    }
}
