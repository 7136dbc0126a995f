//! Reasoning state, per-turn records and trajectories.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::Embedding;
use crate::error::{Error, Result};

/// Name of a registered agent role.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoleId(String);

impl RoleId {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(Error::Config("role id must be non-empty".into()));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RoleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Name of a backend in the model pool.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelId(String);

impl ModelId {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(Error::Config("model id must be non-empty".into()));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One role output appended to the reasoning context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub turn: usize,
    pub role: RoleId,
    pub model: ModelId,
    pub text: String,
}

impl ContextEntry {
    fn render(&self) -> String {
        format!(
            "[turn {} | {} | {}]\n{}",
            self.turn, self.role, self.model, self.text
        )
    }
}

/// Query plus the ordered context accumulated so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningState {
    query: String,
    context: Vec<ContextEntry>,
    turn: usize,
}

impl ReasoningState {
    pub fn new(query: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            context: Vec::new(),
            turn: 0,
        }
    }

    /// Builds a state from an existing context, which must be ordered by turn.
    pub fn from_parts(query: impl Into<String>, context: Vec<ContextEntry>) -> Result<Self> {
        if context.windows(2).any(|w| w[0].turn > w[1].turn) {
            return Err(Error::InvalidArgument(
                "context entries must be ordered by turn".into(),
            ));
        }
        let turn = context.last().map_or(0, |e| e.turn + 1);
        Ok(Self {
            query: query.into(),
            context,
            turn,
        })
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn context(&self) -> &[ContextEntry] {
        &self.context
    }

    pub fn turn(&self) -> usize {
        self.turn
    }

    /// Returns the successor state after the current turn's outputs.
    ///
    /// `outputs` must already be in canonical role order.
    pub fn advance(&self, outputs: Vec<(RoleId, ModelId, String)>) -> ReasoningState {
        let mut context = self.context.clone();
        let turn = self.turn;
        context.extend(outputs.into_iter().map(|(role, model, text)| ContextEntry {
            turn,
            role,
            model,
            text,
        }));
        ReasoningState {
            query: self.query.clone(),
            context,
            turn: turn + 1,
        }
    }
}

/// State plus the routing decision for one generation call.
#[derive(Debug, Clone)]
pub struct PostDecisionState<'a> {
    pub state: &'a ReasoningState,
    pub role: RoleId,
    pub model: ModelId,
}

const ENTRY_SEPARATOR: &str = "\n\n";

/// Serializes the context into at most `char_budget` characters.
///
/// Oldest entries are dropped whole until the rest fits; if the newest entry
/// alone is still too long, its head is cut.
pub fn render_context(state: &ReasoningState, char_budget: usize) -> Result<String> {
    if char_budget < 64 {
        return Err(Error::InvalidArgument(format!(
            "char_budget must be >= 64, got {char_budget}"
        )));
    }
    let blocks: Vec<String> = state.context.iter().map(ContextEntry::render).collect();
    let sep_len = ENTRY_SEPARATOR.chars().count();
    let lens: Vec<usize> = blocks.iter().map(|b| b.chars().count()).collect();

    let mut start = 0;
    let mut total: usize = lens.iter().sum::<usize>() + sep_len * blocks.len().saturating_sub(1);
    while total > char_budget && blocks.len() - start > 1 {
        total -= lens[start] + sep_len;
        start += 1;
    }
    let joined = blocks[start..].join(ENTRY_SEPARATOR);
    if total <= char_budget {
        return Ok(joined);
    }
    let skip = total - char_budget;
    Ok(joined.chars().skip(skip).collect())
}

fn render_full(state: &ReasoningState) -> String {
    state
        .context
        .iter()
        .map(ContextEntry::render)
        .collect::<Vec<_>>()
        .join(ENTRY_SEPARATOR)
}

/// SHA-256 of the canonical rendering (query and full context), hex encoded.
pub fn state_digest(state: &ReasoningState) -> String {
    let mut hasher = Sha256::new();
    hasher.update((state.query.len() as u64).to_le_bytes());
    hasher.update(state.query.as_bytes());
    hasher.update(render_full(state).as_bytes());
    hex::encode(hasher.finalize())
}

/// Selected role and its probability under the role distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleChoice {
    pub role: RoleId,
    pub prob: f64,
}

/// One backend call made within a turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: RoleId,
    pub model: ModelId,
    pub model_prob: f64,
    pub model_logprob: f64,
    pub conf_base: f64,
    pub conf_adj: f64,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub cost: f64,
    pub latency: f64,
    #[serde(default)]
    pub answer: Option<String>,
}

/// Inputs needed to recompute routing log-probabilities for training.
///
/// Held in memory only; never written to logs.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub query_emb: Embedding,
    pub context_emb: Embedding,
    /// Registry indices of the selected roles.
    pub selected: Vec<usize>,
    /// `(role index, model index)` per call; `None` model when the model router was bypassed.
    pub calls: Vec<(usize, Option<usize>)>,
}

/// Audit record of one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: usize,
    pub roles: Vec<RoleChoice>,
    pub selection_logprob: f64,
    pub calls: Vec<CallRecord>,
    pub early_stop: bool,
    #[serde(skip)]
    pub trace: Option<RoutingTrace>,
}

impl TurnRecord {
    pub fn cost(&self) -> f64 {
        self.calls.iter().map(|c| c.cost).sum()
    }

    /// Checks the record-level invariants.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.early_stop && !self.calls.is_empty() {
            return Err(format!("turn {}: early_stop record has calls", self.turn));
        }
        if self.roles.is_empty() {
            return Err(format!("turn {}: no roles selected", self.turn));
        }
        for c in &self.calls {
            if !(c.cost >= 0.0) {
                return Err(format!("turn {}: negative cost {}", self.turn, c.cost));
            }
            if !(0.0..=1.0).contains(&c.conf_adj) {
                return Err(format!("turn {}: conf_adj {} outside [0,1]", self.turn, c.conf_adj));
            }
            if !(c.conf_base <= 0.0) {
                return Err(format!("turn {}: conf_base {} > 0", self.turn, c.conf_base));
            }
            if !(c.latency >= 0.0) {
                return Err(format!("turn {}: negative latency", self.turn));
            }
        }
        Ok(())
    }
}

/// Full audit of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode: String,
    pub query: String,
    pub gold: Option<String>,
    pub turns: Vec<TurnRecord>,
    pub final_answer: String,
    pub total_cost: f64,
    pub total_latency: f64,
    pub reward: Option<u8>,
    #[serde(default)]
    pub failure: Option<String>,
}

impl Trajectory {
    pub fn calls(&self) -> impl Iterator<Item = &CallRecord> {
        self.turns.iter().flat_map(|t| t.calls.iter())
    }

    pub fn n_calls(&self) -> usize {
        self.turns.iter().map(|t| t.calls.len()).sum()
    }

    /// Checks trajectory invariants against the turn cap `max_turns`.
    pub fn validate(&self, max_turns: usize) -> std::result::Result<(), String> {
        if self.turns.len() > max_turns {
            return Err(format!(
                "{} turns exceed the cap of {max_turns}",
                self.turns.len()
            ));
        }
        for (i, t) in self.turns.iter().enumerate() {
            t.validate()?;
            if t.turn != i {
                return Err(format!("turn index {} at position {i}", t.turn));
            }
            if t.early_stop && i + 1 != self.turns.len() {
                return Err(format!("early_stop record at turn {i} is not the last"));
            }
        }
        Ok(())
    }
}

/// One line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub episode: String,
    #[serde(default)]
    pub task_id: Option<String>,
    #[serde(flatten)]
    pub record: TurnRecord,
    /// Milliseconds since the Unix epoch; the only non-deterministic field.
    pub wall_clock: u64,
}

/// Append-only JSON-lines writer for turn records.
pub struct TrajectoryLog<W: Write> {
    out: W,
}

impl<W: Write> TrajectoryLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn append(&mut self, trajectory: &Trajectory, task_id: Option<&str>) -> Result<()> {
        let wall_clock = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        for record in &trajectory.turns {
            let line = LogLine {
                episode: trajectory.episode.clone(),
                task_id: task_id.map(str::to_owned),
                record: record.clone(),
                wall_clock,
            };
            serde_json::to_writer(&mut self.out, &line)?;
            self.out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn read_log<R: BufRead>(input: R) -> Result<Vec<LogLine>> {
    let mut lines = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("log line {}: {e}", i + 1)))?;
        lines.push(parsed);
    }
    Ok(lines)
}
