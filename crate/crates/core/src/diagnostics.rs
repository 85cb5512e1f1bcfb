//! Rollout statistics over pool dumps: consecutive high-entropy tool-call
//! runs, branch concentration, tool usage and trajectory diversity.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::{BranchEvent, DumpLine};
use crate::vocab::Token;

/// Lengths of maximal runs of consecutive tool steps with `dH > 0`.
pub fn high_entropy_runs(delta_h: &[f64]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut cur = 0;
    for d in delta_h {
        if *d > 0.0 {
            cur += 1;
        } else if cur > 0 {
            runs.push(cur);
            cur = 0;
        }
    }
    if cur > 0 {
        runs.push(cur);
    }
    runs
}

/// Number of distinct chains that received at least one branch.
pub fn distinct_branched_chains(events: &[BranchEvent]) -> usize {
    events
        .iter()
        .filter(|e| e.z > 0)
        .map(|e| e.chain)
        .collect::<BTreeSet<_>>()
        .len()
}

/// Dense histogram: `out[v]` counts occurrences of `v`.
pub fn histogram(values: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut out = Vec::new();
    for v in values {
        if out.len() <= v {
            out.resize(v + 1, 0);
        }
        out[v] += 1;
    }
    out
}

/// Distinct 4-grams over total 4-grams across all sequences; 0 when there
/// are no 4-grams.
pub fn distinct_ngram_ratio(sequences: &[&[Token]]) -> f64 {
    const N: usize = 4;
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for s in sequences {
        for w in s.windows(N) {
            seen.insert(w.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub pools: usize,
    pub trajectories: usize,
    /// `[len]` = number of high-entropy runs of that length.
    pub consecutive_hist: Vec<usize>,
    /// Runs of length >= 2 over all runs.
    pub consecutive_fraction: f64,
    /// `[n]` = number of pools in which exactly `n` chains were branched.
    pub branch_hist: Vec<usize>,
    /// `[n]` = number of trajectories with `n` tool calls.
    pub tool_calls_hist: Vec<usize>,
    pub mean_tool_calls: f64,
    pub distinct_4gram_ratio: f64,
}

impl DiagnosticsReport {
    pub fn from_lines(lines: &[DumpLine]) -> Self {
        let mut pools: BTreeMap<u64, Vec<&DumpLine>> = BTreeMap::new();
        for l in lines {
            pools.entry(l.pool).or_default().push(l);
        }
        let runs: Vec<usize> = lines
            .iter()
            .flat_map(|l| high_entropy_runs(&l.entropy.delta_h))
            .collect();
        let consecutive = runs.iter().filter(|r| **r >= 2).count();
        let branch_hist = histogram(pools.values().map(|p| {
            let events: Vec<BranchEvent> = p.iter().flat_map(|l| l.branch_events.iter().copied()).collect();
            distinct_branched_chains(&events)
        }));
        let calls: Vec<usize> = lines.iter().map(|l| l.trajectory.num_tool_steps()).collect();
        let seqs: Vec<&[Token]> = lines.iter().map(|l| l.trajectory.tokens.as_slice()).collect();
        Self {
            pools: pools.len(),
            trajectories: lines.len(),
            consecutive_fraction: if runs.is_empty() {
                0.0
            } else {
                consecutive as f64 / runs.len() as f64
            },
            consecutive_hist: histogram(runs),
            branch_hist,
            mean_tool_calls: if calls.is_empty() {
                0.0
            } else {
                calls.iter().sum::<usize>() as f64 / calls.len() as f64
            },
            tool_calls_hist: histogram(calls),
            distinct_4gram_ratio: distinct_ngram_ratio(&seqs),
        }
    }

    pub fn render(&self) -> String {
        let fmt_hist = |h: &[usize]| {
            h.iter()
                .enumerate()
                .map(|(i, c)| format!("{i}:{c}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "pools {}\ntrajectories {}\nconsecutive high-entropy runs (length:count) {}\n\
             fraction of runs with length >= 2 {:.4}\nbranched chains per pool (chains:pools) {}\n\
             tool calls per trajectory (calls:trajectories) {}\nmean tool calls {:.4}\n\
             distinct 4-gram ratio {:.4}\n",
            self.pools,
            self.trajectories,
            fmt_hist(&self.consecutive_hist),
            self.consecutive_fraction,
            fmt_hist(&self.branch_hist),
            fmt_hist(&self.tool_calls_hist),
            self.mean_tool_calls,
            self.distinct_4gram_ratio,
        )
    }
}

/// Reads a pool dump; a malformed line yields a parse error naming it.
pub fn read_dump(path: &Path) -> Result<Vec<DumpLine>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DumpLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(parsed);
    }
    Ok(out)
}

pub fn diagnose(paths: &[impl AsRef<Path>]) -> Result<DiagnosticsReport> {
    if paths.is_empty() {
        return Err(Error::usage("diagnose needs at least one pool dump"));
    }
    let mut lines = Vec::new();
    for p in paths {
        lines.extend(read_dump(p.as_ref())?);
    }
    Ok(DiagnosticsReport::from_lines(&lines))
}

/// A hand-built dump of three pools with known statistics.
///
/// Each trajectory with `n` tool steps has tokens `[11, 5] * n + [14]`.
///
/// | pool | chain | dH per tool step        | runs  | branch events  |
/// |------|-------|-------------------------|-------|----------------|
/// | 0    | 0     | 0.1, 0.2, -0.1          | 2     |                |
/// | 0    | 1     | (no tool call)          |       |                |
/// | 1    | 0     | 0.3, 0.4, 0.5           | 3     | step 0, step 1 |
/// | 1    | 1     | 0.3, 0.0                | 1     |                |
/// | 1    | 2     | 0.2                     | 1     |                |
/// | 2    | 0     | 0.1, -0.2, 0.1, 0.1     | 1, 2  | step 0         |
/// | 2    | 1     | -0.5                    |       | step 0 (z = 2) |
/// | 2    | 2     | 0.2, 0.2                | 2     |                |
pub mod fixture {
    use super::DiagnosticsReport;
    use crate::entropy::EntropyTrace;
    use crate::env::TrajectoryBuilder;
    use crate::rollout::{BranchEvent, BudgetAllocation, DumpLine};

    fn alloc() -> BudgetAllocation {
        BudgetAllocation { k: 3, m: 2, b: 1 }
    }

    const CHAINS: [(u64, usize, &[f64]); 8] = [
        (0, 0, &[0.1, 0.2, -0.1]),
        (0, 1, &[]),
        (1, 0, &[0.3, 0.4, 0.5]),
        (1, 1, &[0.3, 0.0]),
        (1, 2, &[0.2]),
        (2, 0, &[0.1, -0.2, 0.1, 0.1]),
        (2, 1, &[-0.5]),
        (2, 2, &[0.2, 0.2]),
    ];

    fn event(chain: usize, step: usize, z: usize) -> BranchEvent {
        BranchEvent {
            chain,
            step,
            z,
            p: 0.5,
            delta_h: 0.3,
            l: 0,
        }
    }

    pub fn lines() -> Vec<DumpLine> {
        CHAINS
            .iter()
            .map(|&(pool, chain, dh)| {
                let mut b = TrajectoryBuilder::new();
                for _ in dh {
                    b.push_generated(11, -1.0, 1.0);
                    b.push_result(&[5]);
                }
                b.push_generated(14, -1.0, 0.5);
                let branch_events = match (pool, chain) {
                    (1, 0) => vec![event(0, 0, 1), event(0, 1, 1)],
                    (2, 0) => vec![event(0, 0, 1)],
                    (2, 1) => vec![event(1, 0, 2)],
                    _ => Vec::new(),
                };
                DumpLine {
                    pool,
                    allocation: alloc(),
                    trajectory: b.finish(chain, 0.0),
                    entropy: EntropyTrace {
                        h_root: 1.0,
                        h_tool: vec![1.0; dh.len()],
                        h_tool_avg: (!dh.is_empty()).then_some(1.0),
                        delta_h: dh.to_vec(),
                    },
                    branch_events,
                }
            })
            .collect()
    }

    /// Statistics of [`lines`] counted by hand.
    pub fn expected() -> DiagnosticsReport {
        DiagnosticsReport {
            pools: 3,
            trajectories: 8,
            consecutive_hist: vec![0, 3, 3, 1],
            consecutive_fraction: 4.0 / 7.0,
            branch_hist: vec![1, 1, 1],
            tool_calls_hist: vec![1, 2, 2, 2, 1],
            mean_tool_calls: 2.0,
            distinct_4gram_ratio: 3.0 / 18.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs_of_positive_deltas() {
        assert_eq!(high_entropy_runs(&[0.1, 0.2, -0.1, 0.3, 0.0, 0.5, 0.5, 0.5]), vec![2, 1, 3]);
        assert!(high_entropy_runs(&[0.0, -0.2]).is_empty());
        assert!(high_entropy_runs(&[]).is_empty());
    }

    #[test]
    fn histogram_and_ngrams() {
        assert_eq!(histogram([0, 2, 2, 1]), vec![1, 1, 2]);
        assert!(histogram(std::iter::empty()).is_empty());
        let a = [1, 2, 3, 4, 5];
        let b = [1, 2, 3, 4];
        // 4-grams: 1234, 2345, 1234 -> 2 distinct of 3
        assert!((distinct_ngram_ratio(&[&a, &b]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(distinct_ngram_ratio(&[&[1, 2]]), 0.0);
    }

    #[test]
    fn fixture_report_matches_hand_count() {
        let report = DiagnosticsReport::from_lines(&fixture::lines());
        let want = fixture::expected();
        assert_eq!(report.consecutive_hist, want.consecutive_hist);
        assert_eq!(report.branch_hist, want.branch_hist);
        assert_eq!(report.tool_calls_hist, want.tool_calls_hist);
        assert_eq!((report.pools, report.trajectories), (want.pools, want.trajectories));
        assert!((report.consecutive_fraction - want.consecutive_fraction).abs() < 1e-15);
        assert!((report.mean_tool_calls - want.mean_tool_calls).abs() < 1e-15);
        assert!((report.distinct_4gram_ratio - want.distinct_4gram_ratio).abs() < 1e-15);
    }

    #[test]
    fn zero_branch_pool_puts_all_mass_at_zero() {
        let lines: Vec<DumpLine> = fixture::lines().into_iter().filter(|l| l.pool == 0).collect();
        assert_eq!(DiagnosticsReport::from_lines(&lines).branch_hist, vec![1]);
        let one: Vec<DumpLine> = fixture::lines().into_iter().filter(|l| l.pool == 1).collect();
        assert_eq!(DiagnosticsReport::from_lines(&one).branch_hist, vec![0, 1]);
    }
}
