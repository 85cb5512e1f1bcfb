//! Self-check harness: runs every numerical oracle of the crate and reports
//! measured error against tolerance per suite.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::advantage::{accuracy_advantage, entropy_advantage, reshape_advantage};
use crate::diagnostics::{fixture, DiagnosticsReport};
use crate::encoding::StateEncoder;
use crate::env::{Env, TaskGenerator};
use crate::policy::{log_prob, log_softmax, score_function, PolicyParams, StateFeatures};
use crate::rollout::{allocate, branch_probability, rollout, PolicySampler, RolloutConfig, SoftmaxPolicy};
use crate::trainer::pass_at;
use crate::update::{
    batch_gradient, batch_gradient_with, current_ratios, gradient_factor, surrogate_objective, surrogate_value,
    PolicyView, StopGradient, TokenSample, UpdateRule, Variant,
};
use crate::Result;

const TAU: f64 = 0.6;
const FD_STEP: f64 = 1e-5;
/// Magnitudes below this are compared absolutely in relative checks.
const SCALE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Perturbs the analytic gradient factor; the stop-gradient check must
    /// then fail.
    pub mutate_gradient_factor: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    fn measured(name: &'static str, cases: usize, max_error: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name,
            cases,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
            detail: detail.into(),
        }
    }

    fn failed(name: &'static str, err: crate::Error) -> Self {
        Self {
            name,
            cases: 0,
            max_error: f64::INFINITY,
            tolerance: 0.0,
            passed: false,
            detail: format!("error: {err}"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<28} {:>6} {:>12} {:>10}  result\n", "suite", "cases", "max_error", "tolerance");
        for s in &self.suites {
            out.push_str(&format!(
                "{:<28} {:>6} {:>12.3e} {:>10.1e}  {}{}\n",
                s.name,
                s.cases,
                s.max_error,
                s.tolerance,
                if s.passed { "PASS" } else { "FAIL" },
                if s.detail.is_empty() {
                    String::new()
                } else {
                    format!("  ({})", s.detail)
                }
            ));
        }
        let failed = self.suites.iter().filter(|s| !s.passed).count();
        out.push_str(&format!("{} suites, {} failed\n", self.suites.len(), failed));
        out
    }
}

pub fn verify(options: VerifyOptions) -> VerifyReport {
    type Suite = fn(&VerifyOptions) -> Result<SuiteResult>;
    let suites: [(&'static str, Suite); 11] = [
        ("score_function_fd", |_| score_function_fd()),
        ("sg_frozen_fd", sg_frozen_fd),
        ("raw_fd_equals_vanilla", |_| raw_fd_equals_vanilla()),
        ("forward_invariance", |_| Ok(forward_invariance())),
        ("gradient_factor_tables", |_| Ok(factor_tables())),
        ("budget_conservation", |_| budget_conservation()),
        ("premonitor_allocation", |_| Ok(premonitor_allocation())),
        ("branch_penalty_law", |_| Ok(branch_penalty_law())),
        ("advantage_normalization", |_| advantage_normalization()),
        ("pass_at_k", |_| Ok(pass_at_k())),
        ("diagnostics_fixture", |_| Ok(diagnostics_fixture())),
    ];
    VerifyReport {
        suites: suites
            .iter()
            .map(|(name, run)| run(&options).unwrap_or_else(|e| SuiteResult::failed(name, e)))
            .collect(),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(SCALE_FLOOR)
}

fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

fn random_params(rng: &mut ChaCha8Rng, v: usize, f: usize, scale: f64) -> Result<PolicyParams<f64>> {
    PolicyParams::from_weights(Array2::from_shape_fn((v, f), |_| rng.gen_range(-scale..scale)))
}

/// Closed-form score against central differences of the log-probability.
pub fn score_function_fd() -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (v, f) = (rng.gen_range(3..10), rng.gen_range(2..8));
        let params = random_params(&mut rng, v, f, 1.0)?;
        let state = StateFeatures(Array1::from_shape_fn(f, |_| rng.gen_range(-1.0..1.0)));
        let token = rng.gen_range(0..v);
        let analytic = score_function(&params, &state, TAU, token)?;
        let mut numeric = Array2::zeros((v, f));
        for idx in ndarray::indices((v, f)) {
            let at = |h: f64| -> Result<f64> {
                let mut w = params.weights.clone();
                w[idx] += h;
                log_prob(&PolicyParams::from_weights(w)?, &state, TAU, token)
            };
            numeric[idx] = (at(FD_STEP)? - at(-FD_STEP)?) / (2.0 * FD_STEP);
        }
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    Ok(SuiteResult::measured("score_function_fd", 100, worst, 1e-6, ""))
}

const RATIO_TARGETS: [f64; 8] = [0.3, 0.6, 0.77, 0.9, 1.0, 1.1, 1.24, 1.6];

fn fd_batch(rng: &mut ChaCha8Rng) -> Result<(PolicyParams<f64>, Vec<TokenSample<f64>>)> {
    let (v, f, n) = (5, 4, 16);
    let params = random_params(rng, v, f, 0.8)?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let x = Array1::from_shape_fn(f, |_| rng.gen_range(-1.0..1.0));
        let token = rng.gen_range(0..v);
        let lp = log_softmax(params.weights.dot(&x).as_slice().expect("contiguous"), TAU)?[token];
        let target = RATIO_TARGETS[(i + rng.gen_range(0..RATIO_TARGETS.len())) % RATIO_TARGETS.len()];
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        samples.push(TokenSample {
            features: x,
            token,
            old_log_prob: lp - target.ln(),
            advantage: sign * rng.gen_range(0.1..2.0),
        });
    }
    Ok((params, samples))
}

fn fd_gradient(
    params: &PolicyParams<f64>,
    samples: &[TokenSample<f64>],
    rule: &UpdateRule<f64>,
    frozen: Option<&[f64]>,
) -> Result<Array2<f64>> {
    let mut grad = Array2::zeros(params.weights.dim());
    for idx in ndarray::indices(params.weights.dim()) {
        let at = |h: f64| -> Result<f64> {
            let mut w = params.weights.clone();
            w[idx] += h;
            let p = PolicyParams::from_weights(w)?;
            let sg = match frozen {
                Some(d) => StopGradient::Frozen(d),
                None => StopGradient::Live,
            };
            surrogate_objective(&PolicyView::new(&p, TAU), samples, rule, sg)
        };
        grad[idx] = (at(FD_STEP)? - at(-FD_STEP)?) / (2.0 * FD_STEP);
    }
    Ok(grad)
}

fn all_rules() -> [UpdateRule<f64>; 6] {
    [
        UpdateRule::aepo(),
        UpdateRule::grpo(),
        UpdateRule::dapo(),
        UpdateRule::cispo(),
        UpdateRule::gppo(),
        UpdateRule::new(Variant::Gppo { beta1: 0.5, beta2: 1.7 }),
    ]
}

/// Analytic gradient against central differences of the objective with the
/// stop-gradient ratios frozen at their current values.
pub fn sg_frozen_fd(options: &VerifyOptions) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batches = 100;
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let (params, samples) = fd_batch(&mut rng)?;
        let view = PolicyView::new(&params, TAU);
        let frozen = current_ratios(&view, &samples)?;
        for rule in all_rules() {
            let (analytic, _) = if options.mutate_gradient_factor {
                batch_gradient_with(&view, &samples, &rule, |d, a| gradient_factor(d, a, &rule) + 1e-2 * d)?
            } else {
                batch_gradient(&view, &samples, &rule)?
            };
            let numeric = fd_gradient(&params, &samples, &rule, Some(&frozen))?;
            worst = worst.max(max_rel_err(&analytic, &numeric));
        }
    }
    let detail = if options.mutate_gradient_factor {
        "gradient factor mutated"
    } else {
        ""
    };
    Ok(SuiteResult::measured("sg_frozen_fd", batches * 6, worst, 1e-5, detail))
}

/// Finite differences of the raw AEPO forward loss reproduce the vanilla
/// clipped gradient, not the AEPO one.
pub fn raw_fd_equals_vanilla() -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batches = 100;
    let mut worst = 0.0f64;
    let mut differs = 0usize;
    for _ in 0..batches {
        let (params, samples) = fd_batch(&mut rng)?;
        let view = PolicyView::new(&params, TAU);
        let (grpo, _) = batch_gradient(&view, &samples, &UpdateRule::grpo())?;
        let (aepo, _) = batch_gradient(&view, &samples, &UpdateRule::aepo())?;
        let raw = fd_gradient(&params, &samples, &UpdateRule::aepo(), None)?;
        worst = worst.max(max_rel_err(&grpo, &raw));
        differs += (max_rel_err(&aepo, &raw) > 1e-3) as usize;
    }
    Ok(SuiteResult::measured(
        "raw_fd_equals_vanilla",
        batches,
        worst,
        1e-5,
        format!("stop-gradient changed the gradient in {differs} batches"),
    ))
}

/// AEPO and GRPO forward values are bitwise identical.
pub fn forward_invariance() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (aepo, grpo) = (UpdateRule::aepo(), UpdateRule::grpo());
    let n = 10_000;
    let mismatches = (0..n)
        .filter(|_| {
            let delta: f64 = 5.0 - rng.gen_range(0.0..5.0);
            let adv: f64 = rng.gen_range(-3.0..=3.0);
            surrogate_value(delta, adv, &aepo).to_bits() != surrogate_value(delta, adv, &grpo).to_bits()
        })
        .count();
    SuiteResult::measured("forward_invariance", n, mismatches as f64, 0.0, "error = mismatching values")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Region {
    Below,
    Inside,
    Above,
}

/// Case formula of each rule, written as a lookup over (region, sign).
fn case_formula(rule: &UpdateRule<f64>, delta: f64, adv: f64) -> f64 {
    let (lo, hi) = (rule.clip.lower(), rule.clip.upper());
    let region = if delta < lo {
        Region::Below
    } else if delta > hi {
        Region::Above
    } else {
        Region::Inside
    };
    let positive = adv > 0.0;
    match (rule.variant, region, positive) {
        (_, Region::Inside, _) => delta,
        (Variant::Grpo | Variant::Dapo, Region::Above, true) => 0.0,
        (Variant::Grpo | Variant::Dapo, Region::Below, false) => 0.0,
        (Variant::Grpo | Variant::Dapo, _, _) => delta,
        (Variant::Aepo, Region::Above, true) => hi,
        (Variant::Aepo, Region::Below, false) => 0.0,
        (Variant::Aepo, _, _) => delta,
        (Variant::Cispo, Region::Below, _) => lo,
        (Variant::Cispo, Region::Above, _) => hi,
        (Variant::Gppo { beta1, .. }, Region::Below, false) => beta1 * lo,
        (Variant::Gppo { beta2, .. }, Region::Above, true) => beta2 * hi,
        (Variant::Gppo { .. }, _, _) => delta,
    }
}

/// Boundary-straddling inputs for every rule reproduce the case formulas
/// exactly.
pub fn factor_tables() -> SuiteResult {
    let mut cases = 0;
    let mut mismatches = Vec::new();
    for rule in all_rules() {
        let (lo, hi) = (rule.clip.lower(), rule.clip.upper());
        for delta in [lo - 1e-6, lo + 1e-6, hi - 1e-6, hi + 1e-6] {
            for adv in [1.0, -1.0] {
                cases += 1;
                let got = gradient_factor(delta, adv, &rule);
                let want = case_formula(&rule, delta, adv);
                if got.to_bits() != want.to_bits() {
                    mismatches.push(format!("{} d={delta} A={adv}: {got} != {want}", rule.name()));
                }
            }
        }
    }
    SuiteResult::measured(
        "gradient_factor_tables",
        cases,
        mismatches.len() as f64,
        0.0,
        mismatches.join("; "),
    )
}

/// Randomized tree rollouts return exactly `k` trajectories and every branch
/// shares its parent's prefix.
pub fn budget_conservation() -> Result<SuiteResult> {
    const V: usize = 24;
    let env = Env::standard(V, 20)?;
    let encoder = StateEncoder::new(V, 20);
    let mut cfg_rng = ChaCha8Rng::seed_from_u64(5);
    let runs = 200;
    let (mut violations, mut branches) = (0usize, 0usize);
    for seed in 0..runs as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed % 7);
        let mut w = Array2::from_shape_fn((V, encoder.dim()), |_| rng.gen_range(-0.3..0.3));
        w[[10, 0]] += 1.0;
        w[[11, 0]] += 1.5;
        w[[12, 0]] += 0.8;
        let params = PolicyParams::from_weights(w)?;
        let policy = SoftmaxPolicy {
            params: &params,
            encoder,
            temperature: 1.0,
        };
        let task = &TaskGenerator::new(0, 4)?.generate(&env.registry, 1, seed)[0];
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
        let pool = rollout(&sampler, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        violations += (pool.len() != cfg.k) as usize;
        violations += (pool.allocation.m + pool.branched + pool.top_ups != cfg.k) as usize;
        for t in &pool.trajectories {
            if let Some(l) = t.lineage {
                branches += 1;
                let parent = &pool.trajectories[l.parent];
                let consistent = l.parent < t.id
                    && l.fork_pos == parent.tool_spans[l.tool_step].1
                    && t.tokens[..l.fork_pos] == parent.tokens[..l.fork_pos]
                    && t.old_log_probs[..l.fork_pos] == parent.old_log_probs[..l.fork_pos];
                violations += (!consistent) as usize;
            }
        }
    }
    Ok(SuiteResult::measured(
        "budget_conservation",
        runs,
        violations as f64,
        0.0,
        format!("{branches} branches checked; error = violations"),
    ))
}

/// Sigmoid split of the budget between global samples and branches.
pub fn premonitor_allocation() -> SuiteResult {
    let mut violations = 0usize;
    let mut cases = 0usize;
    for k in (2..=32).step_by(2) {
        for h in [0.0, 0.7, 2.3] {
            cases += 1;
            violations += (allocate(k, 1.0, h, Some(h)).m != k / 2) as usize;
        }
        cases += 1;
        violations += (allocate(k, 1.0, 1.0, None).m != k) as usize;
        let mut prev = 0;
        for i in -60..=60 {
            cases += 1;
            let m = allocate(k, 0.7, 0.05 * i as f64, Some(0.0)).m;
            violations += (m < prev) as usize;
            prev = m;
        }
    }
    SuiteResult::measured("premonitor_allocation", cases, violations as f64, 0.0, "error = violations")
}

/// `P_t` decreases strictly in `l` until it reaches zero, and the default
/// penalty is `0.2 l`.
pub fn branch_penalty_law() -> SuiteResult {
    let cfg = RolloutConfig::default();
    let mut worst = 0.0f64;
    let mut violations = 0usize;
    let mut cases = 0usize;
    for dh in [-0.5, 0.0, 0.3, 1.0] {
        let base = branch_probability(dh, 0, &cfg);
        let mut prev = base;
        for l in 1..=8u32 {
            cases += 1;
            let p = branch_probability(dh, l, &cfg);
            let penalty = (0.2 * l as f64).min(1.0);
            worst = worst.max((p - base * (1.0 - penalty)).abs());
            let ok = if prev > 0.0 { p < prev } else { p == 0.0 };
            violations += (!ok) as usize;
            prev = p;
        }
        violations += (base > 0.0 && branch_probability(dh, 5, &cfg) != 0.0) as usize;
    }
    let error = if violations > 0 { f64::INFINITY } else { worst };
    SuiteResult::measured(
        "branch_penalty_law",
        cases,
        error,
        1e-15,
        format!("{violations} monotonicity violations"),
    )
}

/// Group normalization: zero mean, unit variance, `a = 0` identity and sign
/// preservation.
pub fn advantage_normalization() -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut violations = 0usize;
    let groups = 1000;
    for _ in 0..groups {
        let g = rng.gen_range(2..=16);
        let rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(0..2) as f64).collect();
        let acc = accuracy_advantage(&rewards)?;
        worst = worst.max((acc.iter().sum::<f64>() / g as f64).abs());

        let ents: Vec<f64> = (0..g).map(|_| rng.gen_range(0.0..3.0)).collect();
        let ent = entropy_advantage(&ents);
        let mean = ent.iter().sum::<f64>() / g as f64;
        let var = ent.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / g as f64;
        worst = worst.max(mean.abs()).max((var - 1.0).abs());

        let a = rng.gen_range(0.0..1.0);
        for (x, e) in acc.iter().zip(&ent) {
            violations += (reshape_advantage(*x, *e, 0.0).to_bits() != x.to_bits()) as usize;
            let r = reshape_advantage(*x, *e, a);
            if (a * e).abs() < 1.0 && *x != 0.0 {
                violations += (r.signum() != x.signum()) as usize;
            }
        }
    }
    let error = if violations > 0 { f64::INFINITY } else { worst };
    Ok(SuiteResult::measured(
        "advantage_normalization",
        groups,
        error,
        1e-9,
        format!("{violations} identity or sign violations"),
    ))
}

/// The unbiased Pass@j estimator matches `1 - (1 - p)^j` in expectation.
pub fn pass_at_k() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (tasks, n) = (20_000, 10);
    let mut worst_z = 0.0f64;
    let mut cases = 0;
    for p in [0.1, 0.35, 0.7] {
        let counts: Vec<usize> = (0..tasks).map(|_| (0..n).filter(|_| rng.gen_bool(p)).count()).collect();
        let mut prev = 0.0;
        for j in 1..=n {
            cases += 1;
            let est = counts.iter().map(|c| pass_at(n, *c, j)).sum::<f64>() / tasks as f64;
            let want = 1.0 - (1.0 - p).powi(j as i32);
            let sd = (0.25 / tasks as f64).sqrt();
            worst_z = worst_z.max((est - want).abs() / sd);
            if est + 1e-15 < prev {
                worst_z = f64::INFINITY;
            }
            prev = est;
        }
    }
    SuiteResult::measured("pass_at_k", cases, worst_z, 5.0, "error in standard deviations")
}

/// Histograms of the hand-built three-pool fixture.
pub fn diagnostics_fixture() -> SuiteResult {
    let got = DiagnosticsReport::from_lines(&fixture::lines());
    let want = fixture::expected();
    let exact = got.consecutive_hist == want.consecutive_hist
        && got.branch_hist == want.branch_hist
        && got.tool_calls_hist == want.tool_calls_hist
        && got.pools == want.pools
        && got.trajectories == want.trajectories;
    let err = [
        (got.consecutive_fraction - want.consecutive_fraction).abs(),
        (got.mean_tool_calls - want.mean_tool_calls).abs(),
        (got.distinct_4gram_ratio - want.distinct_4gram_ratio).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    SuiteResult::measured(
        "diagnostics_fixture",
        3,
        if exact { err } else { f64::INFINITY },
        1e-15,
        "",
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes_every_suite() {
        let report = verify(VerifyOptions::default());
        assert!(report.suites.len() >= 8);
        assert!(report.all_passed(), "{}", report.render());
    }

    #[test]
    fn mutated_factor_fails_the_frozen_check() {
        let report = verify(VerifyOptions {
            mutate_gradient_factor: true,
        });
        let sg = report.suites.iter().find(|s| s.name == "sg_frozen_fd").unwrap();
        assert!(!sg.passed);
        assert!(!report.all_passed());
    }

    #[test]
    fn case_formula_examples() {
        let aepo = UpdateRule::aepo();
        assert_eq!(case_formula(&aepo, 1.3, 1.0), 1.2);
        assert_eq!(case_formula(&aepo, 0.7, -1.0), 0.0);
        assert_eq!(case_formula(&UpdateRule::cispo(), 0.7, 1.0), 0.8);
    }
}
