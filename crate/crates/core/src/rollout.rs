//! Entropy-balanced tree rollout.
//!
//! A probe trajectory measures the root and tool-step entropies of a query
//! and fixes the split of the budget `k` into `m` global samples and `b`
//! branch samples. Chains are then visited tool step by tool step (smallest
//! step first, ties by chain id); a chain forks `min(Z, b)` children after a
//! tool result when its branch probability exceeds the threshold. Budget
//! left over when no chain has unvisited tool steps is spent on fresh
//! global samples, so every pool holds exactly `k` trajectories.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::StateEncoder;
use crate::entropy::{self, EntropyTrace};
use crate::env::{reward, Env, EpisodeState, Lineage, Task, Trajectory, TrajectoryBuilder};
use crate::error::{Error, Result};
use crate::policy::{log_softmax, sample_token, token_entropy, PolicyParams};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Total trajectories per query.
    pub k: usize,
    pub beta_sens: f64,
    pub alpha_base: f64,
    pub gamma_ent: f64,
    pub lambda_pen: f64,
    pub tau_branch: f64,
    /// Children created per branch action.
    pub z: usize,
    /// Root-entropy window in generated tokens.
    pub window: usize,
    /// Draw the branch action from `Bernoulli(P_t)` instead of thresholding.
    pub bernoulli: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            k: 8,
            beta_sens: 0.2,
            alpha_base: 0.2,
            gamma_ent: 0.2,
            lambda_pen: 0.2,
            tau_branch: 0.15,
            z: 2,
            window: entropy::DEFAULT_ROOT_WINDOW,
            bernoulli: false,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.beta_sens > 0.0 && self.beta_sens.is_finite()) {
            return Err(Error::config("beta_sens must be positive"));
        }
        for (name, v) in [
            ("alpha_base", self.alpha_base),
            ("gamma_ent", self.gamma_ent),
            ("lambda_pen", self.lambda_pen),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.tau_branch > 0.0 && self.tau_branch < 1.0) {
            return Err(Error::config(format!(
                "tau_branch must lie in (0, 1), got {}",
                self.tau_branch
            )));
        }
        if self.z == 0 {
            return Err(Error::config("z must be at least 1"));
        }
        if self.window == 0 {
            return Err(Error::config("window must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetAllocation {
    pub k: usize,
    /// Global samples, including the probe.
    pub m: usize,
    /// Branch budget `k - m`.
    pub b: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `m = round(k * sigmoid(beta (H_root - H_tool_avg)))` clamped to
/// `[1, k - 1]`; `m = k` when the probe made no tool call.
pub fn allocate(k: usize, beta_sens: f64, h_root: f64, h_tool_avg: Option<f64>) -> BudgetAllocation {
    let m = match h_tool_avg {
        None => k,
        Some(avg) => {
            let raw = (k as f64 * sigmoid(beta_sens * (h_root - avg))).round() as usize;
            raw.clamp(1, k - 1)
        }
    };
    BudgetAllocation { k, m, b: k - m }
}

/// `clamp(alpha + gamma dH, 0, 1) * (1 - min(1, lambda l))`.
pub fn branch_probability(delta_h: f64, l: u32, config: &RolloutConfig) -> f64 {
    let base = (config.alpha_base + config.gamma_ent * delta_h).clamp(0.0, 1.0);
    let penalty = (config.lambda_pen * l as f64).min(1.0);
    base * (1.0 - penalty)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Branch(usize),
    Continue,
}

/// Thresholded branch action: `Branch(z)` iff `p > tau` strictly.
pub fn decide_action(p: f64, tau_branch: f64, z: usize) -> Action {
    if p > tau_branch {
        Action::Branch(z)
    } else {
        Action::Continue
    }
}

/// Token distribution of a policy in log space.
pub trait TokenPolicy: Sync {
    fn log_probs(&self, state: &EpisodeState) -> Result<Vec<f64>>;
}

/// Linear softmax policy over encoded states.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxPolicy<'a, T> {
    pub params: &'a PolicyParams<T>,
    pub encoder: StateEncoder,
    pub temperature: T,
}

impl<T: Scalar> TokenPolicy for SoftmaxPolicy<'_, T> {
    fn log_probs(&self, state: &EpisodeState) -> Result<Vec<f64>> {
        let x = self.encoder.encode::<T>(state);
        if x.dim() != self.params.feature_dim() {
            return Err(Error::config(format!(
                "feature dimension mismatch: params expect {}, encoder gives {}",
                self.params.feature_dim(),
                x.dim()
            )));
        }
        let z = self.params.weights.dot(&x.0);
        let lp = log_softmax(z.as_slice().expect("contiguous logits"), self.temperature)?;
        Ok(lp.into_iter().map(|v| v.to_f64_lossy()).collect())
    }
}

/// Produces complete chains and continuations of existing chains.
pub trait ChainSampler {
    fn vocab_size(&self) -> usize;

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Trajectory>;

    /// A new chain that copies `parent` through the result of tool step
    /// `tool_step` and continues independently from there.
    fn continue_from<R: Rng + ?Sized>(
        &self,
        parent: &Trajectory,
        tool_step: usize,
        rng: &mut R,
    ) -> Result<Trajectory>;
}

/// Samples chains by running a [`TokenPolicy`] in the tool world.
pub struct PolicySampler<'a, P> {
    pub env: &'a Env,
    pub task: &'a Task,
    pub policy: &'a P,
}

impl<P: TokenPolicy> PolicySampler<'_, P> {
    fn play<R: Rng + ?Sized>(
        &self,
        mut state: EpisodeState,
        mut builder: TrajectoryBuilder,
        rng: &mut R,
    ) -> Result<Trajectory> {
        while !state.terminal {
            let lp = self.policy.log_probs(&state)?;
            let probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
            let token = sample_token(&probs, rng);
            let h = token_entropy(&probs);
            let out = self.env.step(&mut state, token)?;
            builder.push_outcome(token, lp[token], h, &out);
        }
        Ok(builder.finish(0, reward(&state, self.task)))
    }

    fn restore(&self, prefix: &Trajectory, fork_pos: usize) -> Result<EpisodeState> {
        let mut state = self.env.reset(self.task);
        let mut i = 0;
        while i < fork_pos {
            let out = self.env.step(&mut state, prefix.tokens[i])?;
            i += 1 + out.result.len();
        }
        if i != fork_pos {
            return Err(Error::usage("fork position splits a tool result"));
        }
        Ok(state)
    }
}

impl<P: TokenPolicy> ChainSampler for PolicySampler<'_, P> {
    fn vocab_size(&self) -> usize {
        self.env.vocab.size()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Trajectory> {
        self.play(self.env.reset(self.task), TrajectoryBuilder::new(), rng)
    }

    fn continue_from<R: Rng + ?Sized>(
        &self,
        parent: &Trajectory,
        tool_step: usize,
        rng: &mut R,
    ) -> Result<Trajectory> {
        let (_, fork_pos) = *parent
            .tool_spans
            .get(tool_step)
            .ok_or_else(|| Error::usage(format!("no tool step {tool_step} to branch from")))?;
        let state = self.restore(parent, fork_pos)?;
        let builder = TrajectoryBuilder::from_prefix(parent, fork_pos);
        if state.terminal {
            return Ok(builder.finish(0, reward(&state, self.task)));
        }
        self.play(state, builder, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchEvent {
    pub chain: usize,
    pub step: usize,
    /// Children actually created.
    pub z: usize,
    pub p: f64,
    pub delta_h: f64,
    /// Counter in effect when the decision was made.
    pub l: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutPool {
    /// Sorted by chain id; ids are `0..k` in creation order.
    pub trajectories: Vec<Trajectory>,
    pub allocation: BudgetAllocation,
    pub events: Vec<BranchEvent>,
    pub branched: usize,
    pub top_ups: usize,
}

impl RolloutPool {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn mean_reward(&self) -> f64 {
        self.trajectories.iter().map(|t| t.reward).sum::<f64>() / self.len().max(1) as f64
    }
}

/// Samples the probe chain and derives the budget split from it.
pub fn premonitor<S: ChainSampler, R: Rng + ?Sized>(
    sampler: &S,
    config: &RolloutConfig,
    rng: &mut R,
) -> Result<(BudgetAllocation, Trajectory)> {
    config.validate()?;
    let probe = sampler.sample(rng)?;
    let trace = EntropyTrace::of(&probe, config.window, sampler.vocab_size());
    let alloc = allocate(config.k, config.beta_sens, trace.h_root, trace.h_tool_avg);
    Ok((alloc, probe))
}

#[derive(Debug, Clone, Copy)]
struct Cursor {
    next_step: usize,
    l: u32,
}

/// Runs the full entropy-balanced rollout for one query.
pub fn rollout<S: ChainSampler, R: Rng + ?Sized>(
    sampler: &S,
    config: &RolloutConfig,
    rng: &mut R,
) -> Result<RolloutPool> {
    let (alloc, probe) = premonitor(sampler, config, rng)?;
    let log_v = entropy::log_vocab(sampler.vocab_size());
    let mut pool = vec![probe];
    while pool.len() < alloc.m {
        let mut t = sampler.sample(rng)?;
        t.id = pool.len();
        pool.push(t);
    }
    let mut cursors = vec![Cursor { next_step: 0, l: 0 }; pool.len()];
    let mut budget = alloc.b;
    let mut events = Vec::new();
    let mut branched = 0;

    while budget > 0 {
        let next = (0..pool.len())
            .filter(|&c| cursors[c].next_step < pool[c].num_tool_steps())
            .min_by_key(|&c| (cursors[c].next_step, c));
        let Some(c) = next else { break };
        let Cursor { next_step: step, l } = cursors[c];

        let h_root = entropy::root_entropy(&pool[c], config.window);
        let h_step = entropy::tool_step_entropy(&pool[c], step)?;
        let delta_h = entropy::delta_entropy(h_step, h_root, log_v);
        let p = branch_probability(delta_h, l, config);
        pool[c].l_snapshots.push(l);
        let next_l = if delta_h > 0.0 { l + 1 } else { 0 };
        cursors[c] = Cursor {
            next_step: step + 1,
            l: next_l,
        };

        let action = if config.bernoulli {
            if rng.gen::<f64>() < p {
                Action::Branch(config.z)
            } else {
                Action::Continue
            }
        } else {
            decide_action(p, config.tau_branch, config.z)
        };
        if let Action::Branch(z) = action {
            let created = z.min(budget);
            for _ in 0..created {
                let mut child = sampler.continue_from(&pool[c], step, rng)?;
                child.id = pool.len();
                child.lineage = Some(Lineage {
                    parent: c,
                    tool_step: step,
                    fork_pos: pool[c].tool_spans[step].1,
                });
                child.l_snapshots = pool[c].l_snapshots.clone();
                cursors.push(Cursor {
                    next_step: step + 1,
                    l: next_l,
                });
                pool.push(child);
            }
            budget -= created;
            branched += created;
            events.push(BranchEvent {
                chain: c,
                step,
                z: created,
                p,
                delta_h,
                l,
            });
        }
    }

    let top_ups = budget;
    for _ in 0..top_ups {
        let mut t = sampler.sample(rng)?;
        t.id = pool.len();
        pool.push(t);
    }
    debug_assert_eq!(pool.len(), alloc.k);
    Ok(RolloutPool {
        trajectories: pool,
        allocation: alloc,
        events,
        branched,
        top_ups,
    })
}

/// One line of a pool dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpLine {
    pub pool: u64,
    pub allocation: BudgetAllocation,
    pub trajectory: Trajectory,
    pub entropy: EntropyTrace,
    /// Branch events taken on this chain.
    pub branch_events: Vec<BranchEvent>,
}

/// Appends a pool as JSONL, one trajectory per line.
pub fn write_pool_dump<W: Write>(
    out: &mut W,
    pool_id: u64,
    pool: &RolloutPool,
    vocab_size: usize,
    window: usize,
) -> std::io::Result<()> {
    for t in &pool.trajectories {
        let line = DumpLine {
            pool: pool_id,
            allocation: pool.allocation,
            trajectory: t.clone(),
            entropy: EntropyTrace::of(t, window, vocab_size),
            branch_events: pool.events.iter().filter(|e| e.chain == t.id).copied().collect(),
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TaskGenerator;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate(16, 0.2, 0.4, Some(0.4)).m, 8);
        assert_eq!(allocate(16, 1e6, 5.0, Some(0.0)).m, 15);
        assert_eq!(allocate(16, 1e6, 0.0, Some(5.0)).m, 1);
        assert_eq!(allocate(16, 0.2, 0.2, Some(0.6)).m, 8);
        let none = allocate(8, 0.2, 1.0, None);
        assert_eq!((none.m, none.b), (8, 0));
    }

    #[test]
    fn branch_probability_examples() {
        let c = RolloutConfig::default();
        assert!((branch_probability(0.5, 2, &c) - 0.18).abs() < 1e-15);
        assert_eq!(branch_probability(1.0, 5, &c), 0.0);
        assert_eq!(branch_probability(0.0, 0, &c), c.alpha_base);
        assert_eq!(decide_action(0.15, 0.15, 2), Action::Continue);
        assert_eq!(decide_action(0.18, 0.15, 2), Action::Branch(2));
        assert_eq!(decide_action(0.0, 0.15, 2), Action::Continue);
    }

    #[test]
    fn penalty_is_strictly_decreasing_until_zero() {
        let c = RolloutConfig::default();
        for dh in [-0.5, 0.0, 0.3, 1.0] {
            let ps: Vec<f64> = (0..8).map(|l| branch_probability(dh, l, &c)).collect();
            for w in ps.windows(2) {
                assert!(w[1] < w[0] || (w[0] == 0.0 && w[1] == 0.0));
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(RolloutConfig::default().validate().is_ok());
        for bad in [
            RolloutConfig { k: 1, ..Default::default() },
            RolloutConfig { z: 0, ..Default::default() },
            RolloutConfig { tau_branch: 1.0, ..Default::default() },
            RolloutConfig { alpha_base: 1.5, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn policy_rollout_is_reproducible_and_sized() {
        let env = Env::standard(24, 24).unwrap();
        let encoder = StateEncoder::new(24, 24);
        let mut wrng = ChaCha8Rng::seed_from_u64(9);
        let params = PolicyParams::from_weights(ndarray::Array2::from_shape_fn((24, encoder.dim()), |_| {
            wrng.gen_range(-0.5..0.5)
        }))
        .unwrap();
        let policy = SoftmaxPolicy {
            params: &params,
            encoder,
            temperature: 1.0,
        };
        let task = &TaskGenerator::new(1, 3).unwrap().generate(&env.registry, 1, 5)[0];
        let sampler = PolicySampler {
            env: &env,
            task,
            policy: &policy,
        };
        let cfg = RolloutConfig::default();
        let a = rollout(&sampler, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = rollout(&sampler, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), cfg.k);
        assert!(a.trajectories.iter().enumerate().all(|(i, t)| t.id == i));
        for t in &a.trajectories {
            t.check_invariants().unwrap();
        }
        let mut buf = Vec::new();
        write_pool_dump(&mut buf, 3, &a, 24, cfg.window).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), cfg.k);
        let first: DumpLine = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.pool, 3);
    }
}
