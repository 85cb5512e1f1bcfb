//! Group-normalized accuracy advantages and entropy-aware reshaping.

use serde::{Deserialize, Serialize};

use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const STD_FLOOR: f64 = 1e-8;
pub const DEFAULT_ENTROPY_WEIGHT: f64 = 0.2;

/// Token population over which entropies are standardized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EntropyScope {
    #[default]
    Trajectory,
    Group,
}

impl std::str::FromStr for EntropyScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trajectory" => Ok(Self::Trajectory),
            "group" => Ok(Self::Group),
            other => Err(Error::config(format!(
                "entropy_adv_scope must be trajectory or group, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for EntropyScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Trajectory => "trajectory",
            Self::Group => "group",
        })
    }
}

/// Per-token advantages of one group, indexed `[trajectory][token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdvantages<T> {
    pub acc: Vec<Vec<T>>,
    pub ent: Vec<Vec<T>>,
    pub reshaped: Vec<Vec<T>>,
    pub a_weight: T,
}

impl<T: Scalar> GroupAdvantages<T> {
    /// (min, mean, max) of the reshaped advantages over loss-bearing tokens.
    pub fn summary(&self, group: &[Trajectory]) -> (f64, f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut sum = 0.0;
        let mut n = 0usize;
        for (traj, adv) in group.iter().zip(&self.reshaped) {
            for (a, m) in adv.iter().zip(&traj.loss_mask) {
                if *m {
                    let a = a.to_f64_lossy();
                    lo = lo.min(a);
                    hi = hi.max(a);
                    sum += a;
                    n += 1;
                }
            }
        }
        if n == 0 {
            return (0.0, 0.0, 0.0);
        }
        (lo, sum / n as f64, hi)
    }
}

fn standardize<T: Scalar>(values: &[T]) -> Vec<T> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = T::lit(values.len() as f64);
    let mean = values.iter().fold(T::zero(), |a, v| a + *v) / n;
    let var = values
        .iter()
        .fold(T::zero(), |a, v| a + (*v - mean) * (*v - mean))
        / n;
    let std = var.sqrt();
    if std < T::lit(STD_FLOOR) {
        return vec![T::zero(); values.len()];
    }
    values.iter().map(|v| (*v - mean) / std).collect()
}

/// `(R_i - mean) / std` with population statistics; identical rewards give
/// exact zeros.
pub fn accuracy_advantage<T: Scalar>(rewards: &[T]) -> Result<Vec<T>> {
    if rewards.len() < 2 {
        return Err(Error::usage(format!(
            "advantage group needs at least 2 trajectories, got {}",
            rewards.len()
        )));
    }
    Ok(standardize(rewards))
}

/// Standardized token entropies. Constant input gives zeros.
pub fn entropy_advantage<T: Scalar>(entropies: &[T]) -> Vec<T> {
    standardize(entropies)
}

pub fn reshape_advantage<T: Scalar>(acc: T, ent: T, a: T) -> T {
    acc * (T::one() + a * ent)
}

/// Computes all advantages of a group. Entropy advantages are standardized
/// over unmasked tokens; masked tokens get an entropy advantage of 0.
pub fn group_advantages<T: Scalar>(
    group: &[Trajectory],
    a_weight: T,
    scope: EntropyScope,
) -> Result<GroupAdvantages<T>> {
    let rewards: Vec<T> = group.iter().map(|t| T::lit(t.reward)).collect();
    let per_traj = accuracy_advantage(&rewards)?;

    let unmasked = |t: &Trajectory| -> Vec<T> {
        t.entropies
            .iter()
            .zip(&t.loss_mask)
            .filter(|(_, m)| **m)
            .map(|(h, _)| T::lit(*h))
            .collect()
    };
    let standardized: Vec<Vec<T>> = match scope {
        EntropyScope::Trajectory => group.iter().map(|t| entropy_advantage(&unmasked(t))).collect(),
        EntropyScope::Group => {
            let lens: Vec<usize> = group.iter().map(|t| t.loss_mask.iter().filter(|m| **m).count()).collect();
            let flat: Vec<T> = group.iter().flat_map(unmasked).collect();
            let all = entropy_advantage(&flat);
            let mut out = Vec::with_capacity(group.len());
            let mut at = 0;
            for len in lens {
                out.push(all[at..at + len].to_vec());
                at += len;
            }
            out
        }
    };

    let mut acc = Vec::with_capacity(group.len());
    let mut ent = Vec::with_capacity(group.len());
    let mut reshaped = Vec::with_capacity(group.len());
    for ((traj, a_acc), std_ent) in group.iter().zip(&per_traj).zip(standardized) {
        let mut it = std_ent.into_iter();
        let e: Vec<T> = traj
            .loss_mask
            .iter()
            .map(|m| if *m { it.next().expect("one value per unmasked token") } else { T::zero() })
            .collect();
        let r: Vec<T> = e.iter().map(|x| reshape_advantage(*a_acc, *x, a_weight)).collect();
        acc.push(vec![*a_acc; traj.len()]);
        ent.push(e);
        reshaped.push(r);
    }
    Ok(GroupAdvantages {
        acc,
        ent,
        reshaped,
        a_weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(entropies: Vec<f64>, mask: Vec<bool>, reward: f64) -> Trajectory {
        Trajectory {
            tokens: vec![0; entropies.len()],
            old_log_probs: vec![0.0; entropies.len()],
            entropies,
            loss_mask: mask,
            reward,
            ..Trajectory::default()
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy_advantage(&[1.0f64, 0.0, 0.0, 1.0]).unwrap(), vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(accuracy_advantage(&[1.0f64; 5]).unwrap(), vec![0.0; 5]);
        assert!(accuracy_advantage(&[1.0f64]).is_err());
    }

    #[test]
    fn entropy_examples() {
        let e = entropy_advantage(&[0.1f64, 0.3]);
        assert!((e[0] + 1.0).abs() < 1e-12 && (e[1] - 1.0).abs() < 1e-12);
        assert_eq!(entropy_advantage(&[0.7f64; 4]), vec![0.0; 4]);
    }

    #[test]
    fn reshape_examples() {
        assert_eq!(reshape_advantage(1.0f64, 1.0, 0.5), 1.5);
        assert!((reshape_advantage(-1.0f64, 2.0, 0.2) + 1.4).abs() < 1e-15);
        assert_eq!(reshape_advantage(-0.37f64, 5.0, 0.0), -0.37);
    }

    #[test]
    fn masked_tokens_get_zero_entropy_advantage() {
        let g = vec![
            traj(vec![0.1, 0.0, 0.3, 0.5], vec![true, false, true, true], 1.0),
            traj(vec![0.2, 0.4], vec![true, true], 0.0),
        ];
        let adv = group_advantages(&g, 0.2, EntropyScope::Trajectory).unwrap();
        assert_eq!(adv.ent[0][1], 0.0);
        assert_eq!(adv.reshaped[0][1], adv.acc[0][1]);
        assert_eq!(adv.acc[0], vec![1.0; 4]);
        let (lo, _, hi) = adv.summary(&g);
        assert!(lo < hi);
    }

    #[test]
    fn group_scope_standardizes_across_trajectories() {
        let g = vec![
            traj(vec![0.1, 0.2], vec![true, true], 1.0),
            traj(vec![0.9, 1.0], vec![true, true], 0.0),
        ];
        let adv = group_advantages(&g, 0.2, EntropyScope::Group).unwrap();
        let flat: Vec<f64> = adv.ent.concat();
        let mean: f64 = flat.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!(adv.ent[0][0] < 0.0 && adv.ent[1][1] > 0.0);
        let t = group_advantages::<f64>(&g, 0.2, EntropyScope::Trajectory).unwrap();
        assert!((t.ent[0][0] + 1.0).abs() < 1e-9);
        assert_eq!("group".parse::<EntropyScope>().unwrap(), EntropyScope::Group);
        assert!("tokens".parse::<EntropyScope>().is_err());
    }

    fn two_pass(values: &[f64]) -> Vec<f64> {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        values.iter().map(|v| (v - mean) / std).collect()
    }

    proptest! {
        #[test]
        fn accuracy_matches_two_pass_and_sums_to_zero(r in prop::collection::vec(0.0f64..1.0, 2..32)) {
            let adv = accuracy_advantage(&r).unwrap();
            prop_assert!(adv.iter().sum::<f64>().abs() < 1e-9);
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            if std >= STD_FLOOR {
                for (a, b) in adv.iter().zip(two_pass(&r)) {
                    prop_assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
                }
            }
        }

        #[test]
        fn entropy_advantage_is_standardized(h in prop::collection::vec(0.0f64..3.0, 2..64)) {
            let e = entropy_advantage(&h);
            let n = e.len() as f64;
            let mean = e.iter().sum::<f64>() / n;
            let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is_const = two_pass(&h).iter().any(|v| !v.is_finite()) || e.iter().all(|v| *v == 0.0);
            if !is_const {
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn sign_is_preserved_when_perturbation_is_small(acc in -3.0f64..3.0, ent in -4.0f64..4.0, a in 0.0f64..1.0) {
            let r = reshape_advantage(acc, ent, a);
            if (a * ent).abs() < 1.0 {
                prop_assert_eq!(r.signum(), acc.signum());
            }
            prop_assert_eq!(reshape_advantage(acc, ent, 0.0).to_bits(), acc.to_bits());
        }
    }
}
