//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use crate::advantage::{EntropyScope, DEFAULT_ENTROPY_WEIGHT};
use crate::env::{Env, EnvConfig, TaskGenerator, ToolRegistry};
use crate::error::{Error, Result};
use crate::rollout::RolloutConfig;
use crate::update::{UpdateRule, Variant};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub rollout: RolloutConfig,
    pub rule: Variant<f64>,
    pub eps_low: f64,
    /// `None` selects the rule's default.
    pub eps_high: Option<f64>,
    pub gppo_beta1: f64,
    pub gppo_beta2: f64,
    pub kl_coef: f64,
    pub a_weight: f64,
    pub entropy_adv_scope: EntropyScope,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub minibatches: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub vocab: usize,
    pub max_len: usize,
    pub min_depth: usize,
    pub max_depth: usize,
    pub failure_rate: f64,
    pub shuffle_tables: bool,
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub checkpoint_every: usize,
    pub dump_pools: bool,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rollout: RolloutConfig::default(),
            rule: Variant::Aepo,
            eps_low: 0.2,
            eps_high: None,
            gppo_beta1: 1.0,
            gppo_beta2: 1.0,
            kl_coef: 0.0,
            a_weight: DEFAULT_ENTROPY_WEIGHT,
            entropy_adv_scope: EntropyScope::Trajectory,
            lr: 1.0,
            batch: 16,
            steps: 500,
            minibatches: 4,
            epochs: 1,
            temperature: 0.6,
            vocab: 24,
            max_len: 64,
            min_depth: 2,
            max_depth: 2,
            failure_rate: 0.0,
            shuffle_tables: true,
            warmup_steps: 40,
            warmup_lr: 2.0,
            checkpoint_every: 100,
            dump_pools: false,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Every accepted key, in the order written by [`RunConfig::to_kv_text`].
pub const KEYS: &[&str] = &[
    "seed",
    "k",
    "group_size",
    "beta_sens",
    "alpha_base",
    "gamma_ent",
    "lambda_pen",
    "tau_branch",
    "Z",
    "window",
    "bernoulli",
    "rule",
    "eps_low",
    "eps_high",
    "gppo_beta1",
    "gppo_beta2",
    "kl_coef",
    "a_weight",
    "entropy_adv_scope",
    "lr",
    "batch",
    "steps",
    "minibatches",
    "epochs",
    "temperature",
    "vocab",
    "max_len",
    "min_depth",
    "max_depth",
    "failure_rate",
    "shuffle_tables",
    "warmup_steps",
    "warmup_lr",
    "checkpoint_every",
    "dump_pools",
    "out_dir",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => self.seed = parse(key, value)?,
            "k" => self.rollout.k = parse(key, value)?,
            "group_size" => {
                let g: usize = parse(key, value)?;
                if g != self.rollout.k {
                    return Err(Error::config(format!(
                        "group_size {g} must equal k {}",
                        self.rollout.k
                    )));
                }
            }
            "beta_sens" => self.rollout.beta_sens = parse(key, value)?,
            "alpha_base" => self.rollout.alpha_base = parse(key, value)?,
            "gamma_ent" => self.rollout.gamma_ent = parse(key, value)?,
            "lambda_pen" => self.rollout.lambda_pen = parse(key, value)?,
            "tau_branch" => self.rollout.tau_branch = parse(key, value)?,
            "Z" | "z" => self.rollout.z = parse(key, value)?,
            "window" => self.rollout.window = parse(key, value)?,
            "bernoulli" => self.rollout.bernoulli = parse_bool(key, value)?,
            "rule" => self.rule = value.parse()?,
            "eps_low" => self.eps_low = parse(key, value)?,
            "eps_high" => self.eps_high = Some(parse(key, value)?),
            "gppo_beta1" => self.gppo_beta1 = parse(key, value)?,
            "gppo_beta2" => self.gppo_beta2 = parse(key, value)?,
            "kl_coef" => self.kl_coef = parse(key, value)?,
            "a_weight" => self.a_weight = parse(key, value)?,
            "entropy_adv_scope" => self.entropy_adv_scope = value.parse()?,
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "minibatches" => self.minibatches = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "vocab" => self.vocab = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "min_depth" => self.min_depth = parse(key, value)?,
            "max_depth" => self.max_depth = parse(key, value)?,
            "failure_rate" => self.failure_rate = parse(key, value)?,
            "shuffle_tables" => self.shuffle_tables = parse_bool(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "warmup_lr" => self.warmup_lr = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "dump_pools" => self.dump_pools = parse_bool(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("{}:{}: expected key = value", origin.display(), i + 1))
            })?;
            self.set(key.trim(), value).map_err(|e| match e {
                Error::Config(msg) => Error::config(format!("{}:{}: {msg}", origin.display(), i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        let r = &self.rollout;
        let eps_high = self.update_rule().clip.eps_high;
        let values: Vec<String> = vec![
            self.seed.to_string(),
            r.k.to_string(),
            r.k.to_string(),
            r.beta_sens.to_string(),
            r.alpha_base.to_string(),
            r.gamma_ent.to_string(),
            r.lambda_pen.to_string(),
            r.tau_branch.to_string(),
            r.z.to_string(),
            r.window.to_string(),
            r.bernoulli.to_string(),
            self.rule.name().to_string(),
            self.eps_low.to_string(),
            eps_high.to_string(),
            self.gppo_beta1.to_string(),
            self.gppo_beta2.to_string(),
            self.kl_coef.to_string(),
            self.a_weight.to_string(),
            self.entropy_adv_scope.to_string(),
            self.lr.to_string(),
            self.batch.to_string(),
            self.steps.to_string(),
            self.minibatches.to_string(),
            self.epochs.to_string(),
            self.temperature.to_string(),
            self.vocab.to_string(),
            self.max_len.to_string(),
            self.min_depth.to_string(),
            self.max_depth.to_string(),
            self.failure_rate.to_string(),
            self.shuffle_tables.to_string(),
            self.warmup_steps.to_string(),
            self.warmup_lr.to_string(),
            self.checkpoint_every.to_string(),
            self.dump_pools.to_string(),
            self.out_dir.display().to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn update_rule(&self) -> UpdateRule<f64> {
        let variant = match self.rule {
            Variant::Gppo { .. } => Variant::Gppo {
                beta1: self.gppo_beta1,
                beta2: self.gppo_beta2,
            },
            v => v,
        };
        let mut rule = UpdateRule::new(variant);
        rule.clip.eps_low = self.eps_low;
        if let Some(h) = self.eps_high {
            rule.clip.eps_high = h;
        }
        rule.kl_coef = self.kl_coef;
        rule
    }

    pub fn env(&self) -> Result<Env> {
        Env::new(
            Vocabulary::standard(self.vocab)?,
            ToolRegistry::default(),
            EnvConfig {
                max_len: self.max_len,
                failure_rate: self.failure_rate,
                failure_seed: self.seed,
            },
        )
    }

    pub fn generator(&self) -> Result<TaskGenerator> {
        Ok(TaskGenerator::new(self.min_depth, self.max_depth)?.with_shuffled_tables(self.shuffle_tables))
    }

    pub fn validate(&self) -> Result<()> {
        self.rollout.validate()?;
        self.update_rule().validate()?;
        self.generator()?;
        self.env()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.warmup_lr >= 0.0 && self.warmup_lr.is_finite()) {
            return Err(Error::config("warmup_lr must be nonnegative"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        if !self.a_weight.is_finite() {
            return Err(Error::config("a_weight must be finite"));
        }
        for (name, v) in [
            ("batch", self.batch),
            ("minibatches", self.minibatches),
            ("epochs", self.epochs),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}
