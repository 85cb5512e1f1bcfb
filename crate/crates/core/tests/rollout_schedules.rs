use aepo::encoding::StateEncoder;
use aepo::entropy::log_vocab;
use aepo::env::{Env, TaskGenerator, Trajectory, TrajectoryBuilder};
use aepo::policy::PolicyParams;
use aepo::rollout::{allocate, rollout, ChainSampler, PolicySampler, RolloutConfig, SoftmaxPolicy};
use aepo::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V: usize = 24;

/// Chains with a fixed layout: two root tokens at `h_root`, then per tool
/// step one result token followed by two generated tokens at `h_steps[i]`.
struct ScheduleSampler {
    h_root: f64,
    h_steps: Vec<f64>,
}

impl ScheduleSampler {
    fn extend<R: Rng + ?Sized>(&self, mut b: TrajectoryBuilder, from_step: usize, rng: &mut R) -> Trajectory {
        if from_step == 0 {
            for _ in 0..2 {
                b.push_generated(rng.gen_range(0..V), -1.0, self.h_root);
            }
        }
        for h in self.h_steps.iter().skip(from_step) {
            b.push_result(&[15]);
            b.push_generated(rng.gen_range(0..V), -1.0, *h);
            b.push_generated(rng.gen_range(0..V), -1.0, *h);
        }
        b.push_generated(14, -1.0, 0.0);
        b.finish(0, 0.0)
    }
}

impl ChainSampler for ScheduleSampler {
    fn vocab_size(&self) -> usize {
        V
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Trajectory> {
        Ok(self.extend(TrajectoryBuilder::new(), 0, rng))
    }

    fn continue_from<R: Rng + ?Sized>(&self, parent: &Trajectory, tool_step: usize, rng: &mut R) -> Result<Trajectory> {
        let fork = parent.tool_spans[tool_step].1;
        let mut b = TrajectoryBuilder::from_prefix(parent, fork);
        // The child regenerates the segment of the step it forked at.
        let h = self.h_steps[tool_step];
        b.push_generated(rng.gen_range(0..V), -1.0, h);
        b.push_generated(rng.gen_range(0..V), -1.0, h);
        Ok(self.extend(b, tool_step + 1, rng))
    }
}

fn lnv() -> f64 {
    log_vocab(V)
}

fn root_of(pool: &[Trajectory], mut id: usize) -> usize {
    while let Some(l) = pool[id].lineage {
        id = l.parent;
    }
    id
}

#[test]
fn low_entropy_schedule_never_branches() {
    let sampler = ScheduleSampler {
        h_root: 2.0,
        h_steps: vec![0.5, 0.4, 0.3],
    };
    let cfg = RolloutConfig::default();
    let pool = rollout(&sampler, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(pool.events.is_empty());
    assert_eq!(pool.allocation.m + pool.top_ups, cfg.k);
    assert_eq!(pool.len(), cfg.k);
    assert!(pool.trajectories.iter().all(|t| t.lineage.is_none()));
}

#[test]
fn forced_single_branch_uses_whole_budget_on_chain_zero() {
    let h_root = 0.0;
    let h_steps = vec![lnv(), lnv()];
    let cfg0 = RolloutConfig::default();
    let alloc = allocate(cfg0.k, cfg0.beta_sens, h_root, Some(lnv()));
    assert!(alloc.b >= 1);
    let cfg = RolloutConfig { z: alloc.b, ..cfg0 };
    let sampler = ScheduleSampler { h_root, h_steps };
    let pool = rollout(&sampler, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(pool.allocation, alloc);
    assert_eq!(pool.events.len(), 1);
    let ev = pool.events[0];
    assert_eq!((ev.chain, ev.step, ev.z, ev.l), (0, 0, alloc.b, 0));
    assert!((ev.p - 0.4).abs() < 1e-15);
    let children: Vec<&Trajectory> = pool.trajectories.iter().filter(|t| t.lineage.is_some()).collect();
    assert_eq!(children.len(), cfg.k - alloc.m);
    for c in children {
        let l = c.lineage.unwrap();
        assert_eq!((l.parent, l.tool_step), (0, 0));
        assert_eq!(c.tokens[..l.fork_pos], pool.trajectories[0].tokens[..l.fork_pos]);
    }
    assert_eq!(pool.top_ups, 0);
}

#[test]
fn consecutive_counter_increments_without_branching() {
    // dH = 0.25 at every step: P = 0.25 (1 - 0.2 l) stays below tau = 0.3,
    // so every tool step of every chain is visited and l still advances.
    let h_steps = vec![0.25 * lnv(); 4];
    let sampler = ScheduleSampler { h_root: 0.0, h_steps };
    let cfg = RolloutConfig {
        k: 16,
        tau_branch: 0.3,
        ..Default::default()
    };
    let pool = rollout(&sampler, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(pool.events.is_empty());
    for t in &pool.trajectories[..pool.allocation.m] {
        assert_eq!(t.l_snapshots, vec![0, 1, 2, 3]);
    }
    assert_eq!(pool.top_ups, pool.allocation.b);
}

#[test]
fn children_inherit_the_updated_counter() {
    let h_steps = vec![0.5 * lnv(); 3];
    let sampler = ScheduleSampler { h_root: 0.0, h_steps };
    let cfg = RolloutConfig {
        k: 4,
        z: 1,
        ..Default::default()
    };
    let pool = rollout(&sampler, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for t in pool.trajectories.iter().filter(|t| t.lineage.is_some()) {
        let lin = t.lineage.unwrap();
        let parent = &pool.trajectories[lin.parent];
        assert_eq!(t.l_snapshots[..=lin.tool_step], parent.l_snapshots[..=lin.tool_step]);
        if let Some(next) = t.l_snapshots.get(lin.tool_step + 1) {
            assert_eq!(*next, parent.l_snapshots[lin.tool_step] + 1);
        }
    }
    assert!(pool.branched > 0);
}

#[test]
fn counter_resets_on_non_positive_delta() {
    let l = lnv();
    let sampler = ScheduleSampler {
        h_root: 0.5 * l,
        h_steps: vec![0.9 * l, 0.9 * l, 0.1 * l, 0.9 * l],
    };
    let cfg = RolloutConfig { k: 4, ..Default::default() };
    let pool = rollout(&sampler, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let snaps = &pool.trajectories[0].l_snapshots;
    assert_eq!(&snaps[..snaps.len().min(4)], &[0, 1, 2, 0][..snaps.len().min(4)]);
}

#[test]
fn anti_collapse_spreads_budget_over_lineages() {
    for k in [6usize, 8, 12, 16] {
        let h_root = 0.0;
        let h_steps = vec![0.6 * lnv(); 5];
        let base = RolloutConfig { k, ..Default::default() };
        let alloc = allocate(k, base.beta_sens, h_root, Some(0.6 * lnv()));
        assert!(alloc.m >= 2 && alloc.b >= 2, "k={k} {alloc:?}");
        for z in 1..=alloc.b.div_ceil(2) {
            let cfg = RolloutConfig { z, ..base.clone() };
            let sampler = ScheduleSampler {
                h_root,
                h_steps: h_steps.clone(),
            };
            let pool = rollout(&sampler, &cfg, &mut ChaCha8Rng::seed_from_u64(k as u64)).unwrap();
            let roots: std::collections::BTreeSet<usize> = pool
                .trajectories
                .iter()
                .filter(|t| t.lineage.is_some())
                .map(|t| root_of(&pool.trajectories, t.id))
                .collect();
            assert!(roots.len() >= 2, "k={k} z={z}: one lineage took the whole budget");
        }
    }
}

fn random_policy(seed: u64, max_len: usize) -> (Env, PolicyParams<f64>, StateEncoder) {
    let env = Env::standard(V, max_len).unwrap();
    let enc = StateEncoder::new(V, max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Array2::from_shape_fn((V, enc.dim()), |_| rng.gen_range(-0.3..0.3));
    // bias toward tool calls so trajectories have tool steps
    w[[10, 0]] += 1.0;
    w[[11, 0]] += 1.5;
    w[[12, 0]] += 0.8;
    (env, PolicyParams::from_weights(w).unwrap(), enc)
}

#[test]
fn budget_conservation_and_prefix_consistency_over_random_runs() {
    let mut cfg_rng = ChaCha8Rng::seed_from_u64(99);
    let mut branched_runs = 0;
    for seed in 0..200u64 {
        let (env, params, encoder) = random_policy(seed % 7, 20);
        let policy = SoftmaxPolicy {
            params: &params,
            encoder,
            temperature: 1.0,
        };
        let task = &TaskGenerator::new(0, 4).unwrap().generate(&env.registry, 1, seed)[0];
        let sampler = PolicySampler {
            env: &env,
            task,
            policy: &policy,
        };
        let cfg = RolloutConfig {
            k: cfg_rng.gen_range(2..=16),
            beta_sens: cfg_rng.gen_range(0.05..3.0),
            alpha_base: cfg_rng.gen_range(0.0..1.0),
            gamma_ent: cfg_rng.gen_range(0.0..1.0),
            lambda_pen: cfg_rng.gen_range(0.0..1.0),
            tau_branch: cfg_rng.gen_range(0.01..0.99),
            z: cfg_rng.gen_range(1..=4),
            window: cfg_rng.gen_range(1..=16),
            bernoulli: cfg_rng.gen_bool(0.3),
        };
        let pool = rollout(&sampler, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(pool.len(), cfg.k, "seed {seed}");
        assert_eq!(pool.allocation.m + pool.branched + pool.top_ups, cfg.k);
        assert_eq!(pool.events.iter().map(|e| e.z).sum::<usize>(), pool.branched);
        branched_runs += (pool.branched > 0) as usize;
        for t in &pool.trajectories {
            t.check_invariants().unwrap();
            // replay regenerates every tool result
            env.replay(task, &t.tokens, &t.loss_mask).unwrap();
            if let Some(l) = t.lineage {
                let parent = &pool.trajectories[l.parent];
                assert!(l.parent < t.id);
                assert_eq!(t.tokens[..l.fork_pos], parent.tokens[..l.fork_pos]);
                assert_eq!(t.old_log_probs[..l.fork_pos], parent.old_log_probs[..l.fork_pos]);
                assert_eq!(l.fork_pos, parent.tool_spans[l.tool_step].1);
            }
        }
        let again = rollout(&sampler, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(pool, again);
    }
    assert!(branched_runs > 20, "sweep exercised branching only {branched_runs} times");
}
