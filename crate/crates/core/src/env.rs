//! Synthetic multi-turn tool-use world.
//!
//! A task query is `[key, depth]`. Solving a depth-`d` task takes `d` tool
//! calls: `d - 1` chained lookups starting at `key`, then (for `d >= 2`) a
//! `CALC` that adds `key` back onto the last lookup value. Depth 1 is a single
//! lookup and depth 0 asks for the key itself. Tool results are spliced into
//! the token stream and carry a `false` loss mask.
//!
//! Grammar: `CALL_* args END_CALL` invokes a tool, `ANSWER digits END`
//! submits an answer. `END` anywhere else terminates with reward 0.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{ids, Token, TokenRole, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tool {
    Calc,
    Lookup,
}

impl Tool {
    pub fn from_token(token: Token) -> Option<Tool> {
        match token {
            ids::CALL_CALC => Some(Tool::Calc),
            ids::CALL_LOOKUP => Some(Tool::Lookup),
            _ => None,
        }
    }

    pub fn open_token(self) -> Token {
        match self {
            Tool::Calc => ids::CALL_CALC,
            Tool::Lookup => ids::CALL_LOOKUP,
        }
    }
}

/// The two deterministic tools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRegistry {
    /// `LOOKUP` table indexed by key digit.
    pub table: [u32; 10],
}

impl Default for ToolRegistry {
    fn default() -> Self {
        Self {
            table: [3, 7, 0, 5, 9, 1, 8, 2, 6, 4],
        }
    }
}

/// Digit tokens of a nonnegative integer, most significant first.
pub fn number_tokens(mut n: u32) -> Vec<Token> {
    let mut out = Vec::new();
    loop {
        out.push(ids::digit(n % 10));
        n /= 10;
        if n == 0 {
            break;
        }
    }
    out.reverse();
    out
}

impl ToolRegistry {
    /// Runs a tool. Malformed arguments produce the single `ERROR` token.
    pub fn invoke(&self, tool: Tool, args: &[Token]) -> Vec<Token> {
        let digits: Option<Vec<u32>> = args
            .iter()
            .map(|t| (*t < 10).then_some(*t as u32))
            .collect();
        match (tool, digits.as_deref()) {
            (Tool::Calc, Some([a, b])) => number_tokens(a + b),
            (Tool::Lookup, Some([k])) => number_tokens(self.table[*k as usize]),
            _ => vec![ids::ERROR],
        }
    }

    pub fn lookup(&self, key: u32) -> u32 {
        self.table[key as usize]
    }

    /// Registry whose `LOOKUP` table is a seeded permutation of the digits.
    pub fn shuffled(seed: u64) -> Self {
        let mut table: [u32; 10] = std::array::from_fn(|i| i as u32);
        table.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self { table }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub query: Vec<Token>,
    pub answer: Vec<Token>,
    pub depth: usize,
    pub seed: u64,
    /// Tools the episode runs against; not visible in the query.
    pub tools: ToolRegistry,
}

impl Task {
    /// Builds the task for `key` at `depth`, deriving the answer by composing
    /// the registry tools.
    pub fn new(registry: &ToolRegistry, key: u32, depth: usize, seed: u64) -> Result<Self> {
        if key > 9 || depth > 9 {
            return Err(Error::config(format!(
                "task key {key} and depth {depth} must be single digits"
            )));
        }
        let answer = match depth {
            0 => key,
            1 => registry.lookup(key),
            d => {
                let mut v = key;
                for _ in 0..d - 1 {
                    v = registry.lookup(v);
                }
                v + key
            }
        };
        Ok(Self {
            query: vec![ids::digit(key), ids::digit(depth as u32)],
            answer: number_tokens(answer),
            depth,
            seed,
            tools: registry.clone(),
        })
    }

    pub fn key(&self) -> u32 {
        self.query[0] as u32
    }
}

/// Seeded generator of tasks with single-digit answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskGenerator {
    pub min_depth: usize,
    pub max_depth: usize,
    /// Give every task its own seeded `LOOKUP` permutation instead of the
    /// shared registry, so lookup results cannot be inferred from the query.
    pub shuffle_tables: bool,
}

impl TaskGenerator {
    pub fn new(min_depth: usize, max_depth: usize) -> Result<Self> {
        if min_depth > max_depth || max_depth > 9 {
            return Err(Error::config(format!(
                "invalid depth range {min_depth}..={max_depth}"
            )));
        }
        Ok(Self {
            min_depth,
            max_depth,
            shuffle_tables: false,
        })
    }

    pub fn with_shuffled_tables(mut self, shuffle: bool) -> Self {
        self.shuffle_tables = shuffle;
        self
    }

    pub fn generate(&self, registry: &ToolRegistry, count: usize, seed: u64) -> Vec<Task> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let task_seed: u64 = rng.gen();
                let depth = rng.gen_range(self.min_depth..=self.max_depth);
                let own;
                let registry = if self.shuffle_tables {
                    own = ToolRegistry::shuffled(task_seed);
                    &own
                } else {
                    registry
                };
                let keys: Vec<u32> = (0..10)
                    .filter(|k| {
                        Task::new(registry, *k, depth, 0)
                            .map(|t| t.answer.len() == 1)
                            .unwrap_or(false)
                    })
                    .collect();
                let key = keys[rng.gen_range(0..keys.len())];
                Task::new(registry, key, depth, task_seed).expect("key and depth validated")
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingCall {
    pub tool: Tool,
    pub args: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeState {
    /// Query followed by every generated and spliced token.
    pub emitted: Vec<Token>,
    pub query_len: usize,
    pub pending: Option<PendingCall>,
    /// `Some` once the answer marker has been emitted.
    pub answer: Option<Vec<Token>>,
    /// Number of tokens after the query.
    pub step: usize,
    pub terminal: bool,
    /// Role counts over the tokens after the query; spliced tokens count as
    /// `ToolResult` regardless of their id.
    pub role_counts: [u32; 7],
    pub tool_calls: usize,
    pub tools: ToolRegistry,
    answered: bool,
}

impl EpisodeState {
    pub fn query(&self) -> &[Token] {
        &self.emitted[..self.query_len]
    }

    pub fn generated(&self) -> &[Token] {
        &self.emitted[self.query_len..]
    }

    /// True when the episode ended with `ANSWER ... END`.
    pub fn answered(&self) -> bool {
        self.answered
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepEvent {
    None,
    ToolBoundary,
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub event: StepEvent,
    /// Tool result tokens spliced after the generated token.
    pub result: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub max_len: usize,
    /// Probability that a well-formed tool call returns `ERROR` anyway.
    pub failure_rate: f64,
    pub failure_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_len: 64,
            failure_rate: 0.0,
            failure_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Env {
    pub vocab: Vocabulary,
    pub registry: ToolRegistry,
    pub config: EnvConfig,
}

impl Env {
    pub fn new(vocab: Vocabulary, registry: ToolRegistry, config: EnvConfig) -> Result<Self> {
        if vocab.size() < crate::vocab::MIN_TOOL_VOCAB {
            return Err(Error::config("tool world needs the standard vocabulary"));
        }
        if config.max_len == 0 {
            return Err(Error::config("max_len must be positive"));
        }
        if !(0.0..=1.0).contains(&config.failure_rate) {
            return Err(Error::config("failure_rate must lie in [0, 1]"));
        }
        Ok(Self {
            vocab,
            registry,
            config,
        })
    }

    pub fn standard(vocab_size: usize, max_len: usize) -> Result<Self> {
        Self::new(
            Vocabulary::standard(vocab_size)?,
            ToolRegistry::default(),
            EnvConfig {
                max_len,
                ..EnvConfig::default()
            },
        )
    }

    pub fn reset(&self, task: &Task) -> EpisodeState {
        EpisodeState {
            emitted: task.query.clone(),
            query_len: task.query.len(),
            pending: None,
            answer: None,
            step: 0,
            terminal: false,
            role_counts: [0; 7],
            tool_calls: 0,
            tools: task.tools.clone(),
            answered: false,
        }
    }

    fn push(&self, state: &mut EpisodeState, token: Token, role: TokenRole) {
        state.emitted.push(token);
        state.step += 1;
        state.role_counts[role.index()] += 1;
    }

    pub fn invoke_tool(&self, tools: &ToolRegistry, tool: Tool, args: &[Token], step: usize) -> Vec<Token> {
        if self.config.failure_rate > 0.0 {
            let mut h = self.config.failure_seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            for a in args {
                h = splitmix(h ^ *a as u64);
            }
            let u = (splitmix(h) >> 11) as f64 / (1u64 << 53) as f64;
            if u < self.config.failure_rate {
                return vec![ids::ERROR];
            }
        }
        tools.invoke(tool, args)
    }

    /// Advances the episode by one generated token.
    pub fn step(&self, state: &mut EpisodeState, token: Token) -> Result<StepOutcome> {
        if state.terminal {
            return Err(Error::usage("step called on a terminal episode"));
        }
        if token >= self.vocab.size() {
            return Err(Error::usage(format!("token {token} out of range")));
        }
        let role = self.vocab.role(token);
        self.push(state, token, role);
        let mut outcome = StepOutcome {
            event: StepEvent::None,
            result: Vec::new(),
        };

        if let Some(call) = state.pending.as_mut() {
            match role {
                TokenRole::ToolClose => {
                    let call = state.pending.take().expect("pending call");
                    let result = self.invoke_tool(&state.tools, call.tool, &call.args, state.step);
                    for t in &result {
                        self.push(state, *t, TokenRole::ToolResult);
                    }
                    state.tool_calls += 1;
                    outcome.result = result;
                    outcome.event = StepEvent::ToolBoundary;
                }
                TokenRole::End => {
                    state.pending = None;
                    state.terminal = true;
                }
                _ => call.args.push(token),
            }
        } else if let Some(answer) = state.answer.as_mut() {
            if role == TokenRole::End {
                state.terminal = true;
                state.answered = true;
            } else {
                answer.push(token);
            }
        } else {
            match role {
                TokenRole::ToolOpen => {
                    let tool = Tool::from_token(token).expect("tool-open token maps to a tool");
                    state.pending = Some(PendingCall {
                        tool,
                        args: Vec::new(),
                    });
                }
                TokenRole::AnswerMarker => state.answer = Some(Vec::new()),
                TokenRole::End => state.terminal = true,
                _ => {}
            }
        }

        if !state.terminal && state.step >= self.config.max_len {
            state.terminal = true;
        }
        if state.terminal {
            outcome.event = StepEvent::Terminal;
        }
        Ok(outcome)
    }

    /// Replays generated tokens of `tokens` (positions where `mask` is true),
    /// returning the state observed before each generated token. Spliced
    /// tokens are regenerated by the tools and checked against the record.
    pub fn replay(&self, task: &Task, tokens: &[Token], mask: &[bool]) -> Result<Vec<EpisodeState>> {
        let mut state = self.reset(task);
        let mut before = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            if !mask[i] {
                return Err(Error::usage(format!(
                    "replay desynchronized: unexpected tool-result token at {i}"
                )));
            }
            before.push(state.clone());
            let out = self.step(&mut state, tokens[i])?;
            i += 1;
            if !out.result.is_empty() {
                let end = i + out.result.len();
                if end > tokens.len() || tokens[i..end] != out.result[..] {
                    return Err(Error::usage(format!(
                        "replay desynchronized: tool result mismatch at {i}"
                    )));
                }
                i = end;
            }
        }
        Ok(before)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Binary exact-match reward of a terminal episode.
pub fn reward(state: &EpisodeState, task: &Task) -> f64 {
    match &state.answer {
        Some(ans) if state.answered && *ans == task.answer => 1.0,
        _ => 0.0,
    }
}

/// Lineage of a branched trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub parent: usize,
    /// Index of the parent's tool step the child was forked after.
    pub tool_step: usize,
    /// Number of tokens copied from the parent.
    pub fork_pos: usize,
}

/// A completed episode, excluding the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: usize,
    pub tokens: Vec<Token>,
    pub old_log_probs: Vec<f64>,
    pub entropies: Vec<f64>,
    /// False exactly on spliced tool-result tokens.
    pub loss_mask: Vec<bool>,
    /// Half-open `[start, end)` spans of tool-result tokens.
    pub tool_spans: Vec<(usize, usize)>,
    pub reward: f64,
    pub lineage: Option<Lineage>,
    /// Consecutive high-entropy counter in effect at each tool step.
    pub l_snapshots: Vec<u32>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_tool_steps(&self) -> usize {
        self.tool_spans.len()
    }

    pub fn generated_count(&self) -> usize {
        self.loss_mask.iter().filter(|m| **m).count()
    }

    /// Checks the mask and span invariants.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let n = self.tokens.len();
        if self.old_log_probs.len() != n || self.entropies.len() != n || self.loss_mask.len() != n {
            return Err("per-token arrays disagree in length".into());
        }
        let mut expected = vec![true; n];
        let mut prev_end = 0;
        for &(s, e) in &self.tool_spans {
            if s < prev_end || e <= s || e > n {
                return Err(format!("bad tool span ({s}, {e})"));
            }
            expected[s..e].iter_mut().for_each(|m| *m = false);
            prev_end = e;
        }
        if expected != self.loss_mask {
            return Err("loss mask disagrees with tool spans".into());
        }
        if !(0.0..=1.0).contains(&self.reward) {
            return Err(format!("reward {} outside [0, 1]", self.reward));
        }
        Ok(())
    }
}

/// Accumulates a trajectory while an episode is played.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryBuilder {
    traj: Trajectory,
}

impl Default for Trajectory {
    fn default() -> Self {
        Self {
            id: 0,
            tokens: Vec::new(),
            old_log_probs: Vec::new(),
            entropies: Vec::new(),
            loss_mask: Vec::new(),
            tool_spans: Vec::new(),
            reward: 0.0,
            lineage: None,
            l_snapshots: Vec::new(),
        }
    }
}

impl TrajectoryBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts from the first `fork_pos` tokens of `parent`.
    pub fn from_prefix(parent: &Trajectory, fork_pos: usize) -> Self {
        let spans = parent
            .tool_spans
            .iter()
            .copied()
            .filter(|(_, e)| *e <= fork_pos)
            .collect();
        Self {
            traj: Trajectory {
                tokens: parent.tokens[..fork_pos].to_vec(),
                old_log_probs: parent.old_log_probs[..fork_pos].to_vec(),
                entropies: parent.entropies[..fork_pos].to_vec(),
                loss_mask: parent.loss_mask[..fork_pos].to_vec(),
                tool_spans: spans,
                ..Trajectory::default()
            },
        }
    }

    pub fn len(&self) -> usize {
        self.traj.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traj.tokens.is_empty()
    }

    pub fn push_generated(&mut self, token: Token, log_prob: f64, entropy: f64) {
        self.traj.tokens.push(token);
        self.traj.old_log_probs.push(log_prob);
        self.traj.entropies.push(entropy);
        self.traj.loss_mask.push(true);
    }

    pub fn push_result(&mut self, result: &[Token]) {
        if result.is_empty() {
            return;
        }
        let start = self.traj.tokens.len();
        for t in result {
            self.traj.tokens.push(*t);
            self.traj.old_log_probs.push(0.0);
            self.traj.entropies.push(0.0);
            self.traj.loss_mask.push(false);
        }
        self.traj.tool_spans.push((start, start + result.len()));
    }

    pub fn push_outcome(&mut self, token: Token, log_prob: f64, entropy: f64, outcome: &StepOutcome) {
        self.push_generated(token, log_prob, entropy);
        self.push_result(&outcome.result);
    }

    pub fn finish(mut self, id: usize, reward: f64) -> Trajectory {
        self.traj.id = id;
        self.traj.reward = reward;
        self.traj
    }
}

/// Next token of the optimal scripted player.
pub fn scripted_action(task: &Task, state: &EpisodeState) -> Token {
    let key = task.key() as Token;
    let calls_needed = task.depth;
    if let Some(call) = &state.pending {
        let args_needed = match call.tool {
            Tool::Lookup => 1,
            Tool::Calc => 2,
        };
        if call.args.len() >= args_needed {
            return ids::END_CALL;
        }
        return match (call.tool, state.tool_calls) {
            (Tool::Lookup, 0) => key,
            (Tool::Lookup, _) => last_result_digit(state),
            (Tool::Calc, _) if call.args.is_empty() => last_result_digit(state),
            (Tool::Calc, _) => key,
        };
    }
    if let Some(answer) = &state.answer {
        let value = if calls_needed == 0 {
            vec![key]
        } else {
            last_result(state)
        };
        return value.get(answer.len()).copied().unwrap_or(ids::END);
    }
    if state.tool_calls < calls_needed {
        if calls_needed >= 2 && state.tool_calls == calls_needed - 1 {
            ids::CALL_CALC
        } else {
            ids::CALL_LOOKUP
        }
    } else {
        ids::ANSWER
    }
}

fn last_result(state: &EpisodeState) -> Vec<Token> {
    // Spliced tokens follow the most recent END_CALL.
    let gen = state.generated();
    match gen.iter().rposition(|t| *t == ids::END_CALL) {
        Some(p) => gen[p + 1..]
            .iter()
            .take_while(|t| **t < 10 || **t == ids::ERROR)
            .copied()
            .collect(),
        None => Vec::new(),
    }
}

fn last_result_digit(state: &EpisodeState) -> Token {
    last_result(state).last().copied().unwrap_or(0)
}

/// Plays the scripted player to termination.
pub fn play_scripted(env: &Env, task: &Task) -> Result<(Vec<Token>, f64)> {
    let mut state = env.reset(task);
    while !state.terminal {
        let t = scripted_action(task, &state);
        env.step(&mut state, t)?;
    }
    Ok((state.generated().to_vec(), reward(&state, task)))
}

#[derive(Serialize, Deserialize)]
struct TaskLine {
    query: Vec<Token>,
    answer: Vec<Token>,
    depth: usize,
    seed: u64,
    #[serde(default)]
    table: Option<[u32; 10]>,
}

pub fn write_tasks(path: &Path, tasks: &[Task]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for t in tasks {
        let line = TaskLine {
            query: t.query.clone(),
            answer: t.answer.clone(),
            depth: t.depth,
            seed: t.seed,
            table: Some(t.tools.table),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tasks(path: &Path) -> Result<Vec<Task>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tasks = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TaskLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        tasks.push(Task {
            query: parsed.query,
            answer: parsed.answer,
            depth: parsed.depth,
            seed: parsed.seed,
            tools: parsed
                .table
                .map(|table| ToolRegistry { table })
                .unwrap_or_default(),
        });
    }
    Ok(tasks)
}
