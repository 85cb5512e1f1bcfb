//! Entropy quantities that drive branching and budget allocation.
//!
//! All values are recomputed from the per-token entropies stored on a
//! trajectory; nothing here keeps state between calls.

use serde::{Deserialize, Serialize};

use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_ROOT_WINDOW: usize = 16;

fn mean<T: Scalar>(xs: impl IntoIterator<Item = T>) -> Option<T> {
    let mut n = 0usize;
    let mut sum = T::zero();
    for x in xs {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / T::lit(n as f64))
}

/// Mean entropy of the first `min(window, first tool boundary)` generated
/// tokens. Zero for a trajectory without generated tokens.
pub fn root_entropy(traj: &Trajectory, window: usize) -> f64 {
    let boundary = traj
        .tool_spans
        .first()
        .map(|(s, _)| *s)
        .unwrap_or(traj.len());
    let prefix = traj.entropies[..boundary]
        .iter()
        .zip(&traj.loss_mask[..boundary])
        .filter(|(_, m)| **m)
        .map(|(h, _)| *h)
        .take(window);
    mean(prefix).unwrap_or(0.0)
}

/// Mean entropy of the generated tokens between the end of tool result
/// `step` and the next tool result (or the end of the trajectory). An empty
/// segment counts as zero.
pub fn tool_step_entropy(traj: &Trajectory, step: usize) -> Result<f64> {
    let &(_, start) = traj.tool_spans.get(step).ok_or_else(|| {
        Error::usage(format!(
            "tool step {step} out of range ({} steps)",
            traj.tool_spans.len()
        ))
    })?;
    let end = traj
        .tool_spans
        .get(step + 1)
        .map(|(s, _)| *s)
        .unwrap_or(traj.len());
    let seg = traj.entropies[start..end]
        .iter()
        .zip(&traj.loss_mask[start..end])
        .filter(|(_, m)| **m)
        .map(|(h, _)| *h);
    Ok(mean(seg).unwrap_or(0.0))
}

/// Arithmetic mean of tool-step entropies; `None` when there were no tool
/// calls.
pub fn tool_avg_entropy<T: Scalar>(tool_entropies: &[T]) -> Option<T> {
    mean(tool_entropies.iter().copied())
}

/// `(h_step - h_root) / ln V`, clamped to `[-1, 1]`. Takes `ln V` directly.
pub fn delta_entropy<T: Scalar>(h_step: T, h_root: T, log_vocab: T) -> T {
    ((h_step - h_root) / log_vocab).max(-T::one()).min(T::one())
}

pub fn log_vocab(vocab_size: usize) -> f64 {
    (vocab_size as f64).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyTrace {
    pub h_root: f64,
    pub h_tool: Vec<f64>,
    pub h_tool_avg: Option<f64>,
    pub delta_h: Vec<f64>,
}

impl EntropyTrace {
    pub fn of(traj: &Trajectory, window: usize, vocab_size: usize) -> Self {
        let h_root = root_entropy(traj, window);
        let h_tool: Vec<f64> = (0..traj.num_tool_steps())
            .map(|i| tool_step_entropy(traj, i).expect("step in range"))
            .collect();
        let delta_h = h_tool
            .iter()
            .map(|h| delta_entropy(*h, h_root, log_vocab(vocab_size)))
            .collect();
        Self {
            h_root,
            h_tool_avg: tool_avg_entropy(&h_tool),
            h_tool,
            delta_h,
        }
    }
}
