//! Fixed-length encoding of the visible episode prefix.
//!
//! Layout: `[bias | one-hot of the last 4 tokens | one-hot of the 2 query
//! tokens | step / max_len | role counts / max_len]`. Every entry lies in
//! `[0, 1]`, so the norm is bounded by `sqrt(dim)`.

use crate::env::EpisodeState;
use crate::policy::StateFeatures;
use crate::scalar::Scalar;
use crate::vocab::TokenRole;

pub const CONTEXT_WINDOW: usize = 4;
pub const QUERY_SLOTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateEncoder {
    pub vocab_size: usize,
    pub max_len: usize,
}

impl StateEncoder {
    pub fn new(vocab_size: usize, max_len: usize) -> Self {
        Self {
            vocab_size,
            max_len: max_len.max(1),
        }
    }

    pub fn dim(&self) -> usize {
        1 + (CONTEXT_WINDOW + QUERY_SLOTS) * self.vocab_size + 1 + TokenRole::ALL.len()
    }

    /// Upper bound on the feature norm.
    pub fn norm_cap(&self) -> f64 {
        (self.dim() as f64).sqrt()
    }

    pub fn encode<T: Scalar>(&self, state: &EpisodeState) -> StateFeatures<T> {
        let v = self.vocab_size;
        let mut x = vec![T::zero(); self.dim()];
        x[0] = T::one();
        // Slot 0 holds the most recent token.
        for (slot, tok) in state.emitted.iter().rev().take(CONTEXT_WINDOW).enumerate() {
            x[1 + slot * v + tok] = T::one();
        }
        let query_base = 1 + CONTEXT_WINDOW * v;
        for (slot, tok) in state.query().iter().take(QUERY_SLOTS).enumerate() {
            x[query_base + slot * v + tok] = T::one();
        }
        let scale = T::lit(self.max_len as f64);
        let step_idx = query_base + QUERY_SLOTS * v;
        x[step_idx] = (T::lit(state.step as f64) / scale).min(T::one());
        for (i, c) in state.role_counts.iter().enumerate() {
            x[step_idx + 1 + i] = (T::lit(*c as f64) / scale).min(T::one());
        }
        StateFeatures::new(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{scripted_action, Env, Task, ToolRegistry};

    #[test]
    fn encoding_is_bounded_and_sees_window_and_query() {
        let env = Env::standard(24, 64).unwrap();
        let enc = StateEncoder::new(24, 64);
        assert_eq!(enc.dim(), 1 + 6 * 24 + 1 + 7);
        let task = Task::new(&ToolRegistry::default(), 4, 2, 0).unwrap();
        let mut s = env.reset(&task);
        while !s.terminal {
            let x: StateFeatures<f64> = enc.encode(&s);
            assert!(x.norm() <= enc.norm_cap());
            assert!(x.0.iter().all(|v| (0.0..=1.0).contains(v)));
            let last = *s.emitted.last().unwrap();
            assert_eq!(x.0[1 + last], 1.0);
            assert_eq!(x.0[1 + 4 * 24 + 4], 1.0);
            assert_eq!(x.0[1 + 5 * 24 + 2], 1.0);
            let t = scripted_action(&task, &s);
            env.step(&mut s, t).unwrap();
        }
    }
}
