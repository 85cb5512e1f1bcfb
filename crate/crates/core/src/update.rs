//! Clipped policy-gradient update rules.
//!
//! Every rule's per-token gradient has the form `F(delta, A) * phi * A`, where
//! `phi` is the score function of the sampled token and `F` is the rule's
//! gradient factor. The rules differ only in `F`:
//!
//! | rule  | `delta > 1+eh, A > 0` | `delta < 1-el, A < 0` | other clipped | inside |
//! |-------|-----------------------|-----------------------|---------------|--------|
//! | AEPO  | `1+eh`                | `0`                   | `delta`       | `delta`|
//! | GRPO  | `0`                   | `0`                   | `delta`       | `delta`|
//! | DAPO  | as GRPO, `eh = 0.28`  |                       |               |        |
//! | CISPO | `1+eh`                | `1-el`                | bound         | `delta`|
//! | GPPO  | `b2 (1+eh)`           | `b1 (1-el)`           | `delta`       | `delta`|
//!
//! The forward surrogates are written with an explicit stop-gradient
//! argument so the objective can be differentiated numerically with the
//! stopped values frozen.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{log_softmax, outer, softmax, token_entropy, PolicyParams};
use crate::scalar::Scalar;
use crate::vocab::Token;

/// Importance ratios above this value are capped.
pub const RATIO_CAP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig<T> {
    pub eps_low: T,
    pub eps_high: T,
}

impl<T: Scalar> ClipConfig<T> {
    pub fn new(eps_low: T, eps_high: T) -> Result<Self> {
        let c = Self { eps_low, eps_high };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > T::zero() && self.eps_low < T::one()) {
            return Err(Error::config(format!(
                "eps_low must lie in (0, 1), got {}",
                self.eps_low
            )));
        }
        if !(self.eps_high > T::zero() && self.eps_high.is_finite()) {
            return Err(Error::config(format!(
                "eps_high must be positive, got {}",
                self.eps_high
            )));
        }
        Ok(())
    }

    pub fn lower(&self) -> T {
        T::one() - self.eps_low
    }

    pub fn upper(&self) -> T {
        T::one() + self.eps_high
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Variant<T> {
    Aepo,
    Grpo,
    Dapo,
    Cispo,
    Gppo { beta1: T, beta2: T },
}

impl<T> Variant<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Aepo => "aepo",
            Variant::Grpo => "grpo",
            Variant::Dapo => "dapo",
            Variant::Cispo => "cispo",
            Variant::Gppo { .. } => "gppo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRule<T> {
    pub variant: Variant<T>,
    pub clip: ClipConfig<T>,
    /// Weight of the KL penalty against the reference policy.
    pub kl_coef: T,
}

impl<T: Scalar> UpdateRule<T> {
    /// Rule with the default constants: `eps = 0.2` on both sides, except
    /// DAPO's clip-higher `eps_high = 0.28`; GPPO scales of 1; no KL term.
    pub fn new(variant: Variant<T>) -> Self {
        let eps_high = match variant {
            Variant::Dapo => T::lit(0.28),
            _ => T::lit(0.2),
        };
        Self {
            variant,
            clip: ClipConfig {
                eps_low: T::lit(0.2),
                eps_high,
            },
            kl_coef: T::zero(),
        }
    }

    pub fn aepo() -> Self {
        Self::new(Variant::Aepo)
    }

    pub fn grpo() -> Self {
        Self::new(Variant::Grpo)
    }

    pub fn dapo() -> Self {
        Self::new(Variant::Dapo)
    }

    pub fn cispo() -> Self {
        Self::new(Variant::Cispo)
    }

    pub fn gppo() -> Self {
        Self::new(Variant::Gppo {
            beta1: T::one(),
            beta2: T::one(),
        })
    }

    pub fn with_clip(mut self, eps_low: T, eps_high: T) -> Self {
        self.clip = ClipConfig { eps_low, eps_high };
        self
    }

    pub fn name(&self) -> &'static str {
        self.variant.name()
    }

    pub fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        if !(self.kl_coef >= T::zero() && self.kl_coef.is_finite()) {
            return Err(Error::config("kl_coef must be nonnegative"));
        }
        if let Variant::Gppo { beta1, beta2 } = self.variant {
            if !(beta1.is_finite() && beta2.is_finite()) {
                return Err(Error::config("GPPO scales must be finite"));
            }
        }
        Ok(())
    }

    /// The vanilla-clipping rule with the same bounds, used to count tokens
    /// that plain clipping would have zeroed.
    pub fn vanilla(&self) -> Self {
        Self {
            variant: Variant::Grpo,
            ..*self
        }
    }
}

impl FromStr for Variant<f64> {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aepo" => Ok(Variant::Aepo),
            "grpo" => Ok(Variant::Grpo),
            "dapo" => Ok(Variant::Dapo),
            "cispo" => Ok(Variant::Cispo),
            "gppo" => Ok(Variant::Gppo {
                beta1: 1.0,
                beta2: 1.0,
            }),
            other => Err(Error::config(format!("unknown update rule {other:?}"))),
        }
    }
}

impl<T> fmt::Display for Variant<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio<T> {
    pub value: T,
    pub capped: bool,
}

/// `exp(new - old)`, capped at [`RATIO_CAP`].
pub fn importance_ratio<T: Scalar>(new_log_prob: T, old_log_prob: T) -> Result<Ratio<T>> {
    if !(new_log_prob.is_finite() && old_log_prob.is_finite()) {
        return Err(Error::numeric("non-finite log-probability in importance ratio"));
    }
    let cap = T::lit(RATIO_CAP);
    let diff = new_log_prob - old_log_prob;
    if diff > cap.ln() {
        return Ok(Ratio {
            value: cap,
            capped: true,
        });
    }
    Ok(Ratio {
        value: diff.exp(),
        capped: false,
    })
}

fn clip<T: Scalar>(x: T, lo: T, hi: T) -> T {
    x.min(hi).max(lo)
}

/// Forward surrogate of one token with the stop-gradient argument given
/// explicitly as `delta_sg`. At `delta_sg == delta` this is the ordinary
/// forward value.
pub fn surrogate<T: Scalar>(delta: T, delta_sg: T, adv: T, rule: &UpdateRule<T>) -> T {
    let lo = rule.clip.lower();
    let hi = rule.clip.upper();
    match rule.variant {
        Variant::Grpo | Variant::Dapo => (delta * adv).min(clip(delta, lo, hi) * adv),
        Variant::Aepo => {
            // (1 + eh) / sg(delta) * delta, evaluated so that it is exactly
            // 1 + eh whenever delta == sg(delta).
            let hi_sg = hi * (delta / delta_sg);
            (delta * adv).min(clip(delta, lo, hi_sg) * adv)
        }
        Variant::Cispo => clip(delta_sg, lo, hi) * adv * delta.ln(),
        Variant::Gppo { beta1, beta2 } => {
            if adv < T::zero() && delta_sg < lo {
                beta1 * lo * (delta / delta_sg) * adv
            } else if adv > T::zero() && delta_sg > hi {
                beta2 * hi * (delta / delta_sg) * adv
            } else {
                delta * adv
            }
        }
    }
}

pub fn surrogate_value<T: Scalar>(delta: T, adv: T, rule: &UpdateRule<T>) -> T {
    surrogate(delta, delta, adv, rule)
}

/// Gradient factor `F(delta, A)` of the rule.
pub fn gradient_factor<T: Scalar>(delta: T, adv: T, rule: &UpdateRule<T>) -> T {
    let lo = rule.clip.lower();
    let hi = rule.clip.upper();
    let zero = T::zero();
    match rule.variant {
        Variant::Aepo => {
            if delta > hi && adv > zero {
                hi
            } else if delta < lo && adv < zero {
                zero
            } else {
                delta
            }
        }
        Variant::Grpo | Variant::Dapo => {
            if (delta > hi && adv > zero) || (delta < lo && adv < zero) {
                zero
            } else {
                delta
            }
        }
        Variant::Cispo => {
            if delta < lo {
                lo
            } else if delta > hi {
                hi
            } else {
                delta
            }
        }
        Variant::Gppo { beta1, beta2 } => {
            if adv < zero && delta < lo {
                beta1 * lo
            } else if adv > zero && delta > hi {
                beta2 * hi
            } else {
                delta
            }
        }
    }
}

/// `F * A * score`.
pub fn token_gradient<T: Scalar>(factor: T, score: &Array2<T>, adv: T) -> Array2<T> {
    score * (factor * adv)
}

/// Categorical `KL(p || q)`.
pub fn kl_penalty<T: Scalar>(p: &[T], q: &[T]) -> T {
    let floor = T::prob_floor();
    let kl = p.iter().zip(q).fold(T::zero(), |acc, (pi, qi)| {
        if *pi > T::zero() {
            acc + *pi * (pi.max(floor).ln() - qi.max(floor).ln())
        } else {
            acc
        }
    });
    kl.max(T::zero())
}

/// One loss-bearing token: tool-result tokens never appear here.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSample<T> {
    pub features: Array1<T>,
    pub token: Token,
    pub old_log_prob: T,
    pub advantage: T,
}

#[derive(Debug, Clone, Copy)]
pub enum StopGradient<'a, T> {
    /// `sg(delta)` takes the value of `delta` (ordinary forward loss).
    Live,
    /// `sg(delta)` is frozen at the given per-token ratios.
    Frozen(&'a [T]),
}

#[derive(Debug, Clone, Copy)]
pub struct PolicyView<'a, T> {
    pub params: &'a PolicyParams<T>,
    pub temperature: T,
    /// Reference policy for the KL term; required when `kl_coef > 0`.
    pub reference: Option<&'a PolicyParams<T>>,
}

impl<'a, T: Scalar> PolicyView<'a, T> {
    pub fn new(params: &'a PolicyParams<T>, temperature: T) -> Self {
        Self {
            params,
            temperature,
            reference: None,
        }
    }

    fn log_probs(&self, params: &PolicyParams<T>, x: &Array1<T>) -> Result<Vec<T>> {
        let z = params.weights.dot(x);
        log_softmax(z.as_slice().expect("contiguous logits"), self.temperature)
    }
}

/// Current importance ratios of every sample.
pub fn current_ratios<T: Scalar>(view: &PolicyView<'_, T>, samples: &[TokenSample<T>]) -> Result<Vec<T>> {
    samples
        .iter()
        .map(|s| {
            let lp = view.log_probs(view.params, &s.features)?;
            Ok(importance_ratio(lp[s.token], s.old_log_prob)?.value)
        })
        .collect()
}

/// Batch objective `(1 / sum T) sum_t [surrogate_t - kl_coef KL_t]`.
pub fn surrogate_objective<T: Scalar>(
    view: &PolicyView<'_, T>,
    samples: &[TokenSample<T>],
    rule: &UpdateRule<T>,
    sg: StopGradient<'_, T>,
) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    let mut total = T::zero();
    for (i, s) in samples.iter().enumerate() {
        let lp = view.log_probs(view.params, &s.features)?;
        let delta = importance_ratio(lp[s.token], s.old_log_prob)?.value;
        let delta_sg = match sg {
            StopGradient::Live => delta,
            StopGradient::Frozen(d) => d[i],
        };
        total += surrogate(delta, delta_sg, s.advantage, rule);
        if rule.kl_coef > T::zero() {
            let reference = view
                .reference
                .ok_or_else(|| Error::usage("kl_coef > 0 requires a reference policy"))?;
            let p: Vec<T> = lp.iter().map(|l| l.exp()).collect();
            let q: Vec<T> = view
                .log_probs(reference, &s.features)?
                .iter()
                .map(|l| l.exp())
                .collect();
            total -= rule.kl_coef * kl_penalty(&p, &q);
        }
    }
    Ok(total / T::lit(samples.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClippedToken {
    pub token: Token,
    pub delta: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub rule: String,
    pub tokens: usize,
    /// Forward value of the batch objective before the step.
    pub loss: f64,
    pub zeroed_frac: f64,
    pub upper_clip_frac: f64,
    pub lower_clip_frac: f64,
    /// Fraction the vanilla (GRPO-style) rule would have zeroed on the same
    /// tokens.
    pub vanilla_zeroed_frac: f64,
    pub nonzero_grad_tokens: usize,
    pub mean_delta: f64,
    pub max_abs_delta_dev: f64,
    pub capped: usize,
    pub mean_entropy: f64,
    pub top_clipped: Vec<ClippedToken>,
}

/// Analytic batch gradient with an injectable gradient factor.
pub fn batch_gradient_with<T, F>(
    view: &PolicyView<'_, T>,
    samples: &[TokenSample<T>],
    rule: &UpdateRule<T>,
    factor: F,
) -> Result<(Array2<T>, UpdateReport)>
where
    T: Scalar,
    F: Fn(T, T) -> T,
{
    if samples.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    let (v, f) = view.params.weights.dim();
    let n = T::lit(samples.len() as f64);
    let vanilla = rule.vanilla();
    let mut grad = Array2::<T>::zeros((v, f));
    let mut loss = T::zero();
    let (mut zeroed, mut upper, mut lower, mut vanilla_zeroed, mut capped) = (0, 0, 0, 0, 0);
    let (mut sum_delta, mut max_dev, mut sum_entropy) = (0.0, 0.0f64, 0.0);
    let mut clipped = Vec::new();

    for s in samples {
        let lp = view.log_probs(view.params, &s.features)?;
        let probs = softmax(
            view.params.weights.dot(&s.features).as_slice().expect("contiguous"),
            view.temperature,
        )?;
        let ratio = importance_ratio(lp[s.token], s.old_log_prob)?;
        let delta = ratio.value;
        let adv = s.advantage;
        let fac = factor(delta, adv);

        let d64 = delta.to_f64_lossy();
        sum_delta += d64;
        max_dev = max_dev.max((d64 - 1.0).abs());
        sum_entropy += token_entropy(&probs).to_f64_lossy();
        capped += ratio.capped as usize;
        if fac == T::zero() {
            zeroed += 1;
        }
        if gradient_factor(delta, adv, &vanilla) == T::zero() {
            vanilla_zeroed += 1;
        }
        let is_upper = delta > rule.clip.upper();
        let is_lower = delta < rule.clip.lower();
        upper += is_upper as usize;
        lower += is_lower as usize;
        if is_upper || is_lower {
            clipped.push(ClippedToken {
                token: s.token,
                delta: d64,
                advantage: adv.to_f64_lossy(),
            });
        }
        loss += surrogate_value(delta, adv, rule);

        // Row coefficients of F * A * (e_a - p) / tau.
        let scale = fac * adv / view.temperature;
        let mut coef: Array1<T> = Array1::from_iter(probs.iter().map(|p| -*p * scale));
        coef[s.token] += scale;

        if rule.kl_coef > T::zero() {
            let reference = view
                .reference
                .ok_or_else(|| Error::usage("kl_coef > 0 requires a reference policy"))?;
            let lq = view.log_probs(reference, &s.features)?;
            let q: Vec<T> = lq.iter().map(|l| l.exp()).collect();
            let kl = kl_penalty(&probs, &q);
            loss -= rule.kl_coef * kl;
            // d KL(p || q) / dz_j = p_j (ln p_j - ln q_j - KL) / tau
            for j in 0..v {
                let dkl = probs[j] * (lp[j] - lq[j] - kl) / view.temperature;
                coef[j] -= rule.kl_coef * dkl;
            }
        }
        grad = grad + outer(&coef, &s.features);
    }

    grad.mapv_inplace(|g| g / n);
    clipped.sort_by(|a, b| {
        (b.delta - 1.0)
            .abs()
            .partial_cmp(&(a.delta - 1.0).abs())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    clipped.truncate(10);
    let count = samples.len();
    let frac = |c: usize| c as f64 / count as f64;
    let report = UpdateReport {
        rule: rule.name().to_string(),
        tokens: count,
        loss: (loss / n).to_f64_lossy(),
        zeroed_frac: frac(zeroed),
        upper_clip_frac: frac(upper),
        lower_clip_frac: frac(lower),
        vanilla_zeroed_frac: frac(vanilla_zeroed),
        nonzero_grad_tokens: count - zeroed,
        mean_delta: sum_delta / count as f64,
        max_abs_delta_dev: max_dev,
        capped,
        mean_entropy: sum_entropy / count as f64,
        top_clipped: clipped,
    };
    Ok((grad, report))
}

pub fn batch_gradient<T: Scalar>(
    view: &PolicyView<'_, T>,
    samples: &[TokenSample<T>],
    rule: &UpdateRule<T>,
) -> Result<(Array2<T>, UpdateReport)> {
    batch_gradient_with(view, samples, rule, |d, a| gradient_factor(d, a, rule))
}

/// One gradient-ascent step on the batch objective.
pub fn batch_update<T: Scalar>(
    view: &PolicyView<'_, T>,
    samples: &[TokenSample<T>],
    rule: &UpdateRule<T>,
    learning_rate: T,
) -> Result<(PolicyParams<T>, UpdateReport)> {
    rule.validate()?;
    let (grad, report) = batch_gradient(view, samples, rule)?;
    let weights = &view.params.weights + &(grad * learning_rate);
    let params = PolicyParams::from_weights(weights)?;
    Ok((params, report))
}
