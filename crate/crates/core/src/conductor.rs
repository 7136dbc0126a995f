//! Per-episode control loop: route roles, route models, execute, transition
//! the reasoning state, and stop on EarlyStop or the turn cap.

use serde::{Deserialize, Serialize};

use crate::backend::BackendPool;
use crate::confidence::{conf_adj, conf_base, RunningStats};
use crate::cost::PriceTable;
use crate::embedding::{CachedEmbedder, Embedding};
use crate::error::{Error, Result};
use crate::model_router::{choose_model, model_distribution, ChoiceMode};
use crate::policy::PolicyParams;
use crate::role_router::{role_distribution, select_roles};
use crate::roles::{execute_role, ExecutionContext, RoleKind, RoleRegistry, VerifierHook};
use crate::seeding::derive_seed;
use crate::state::{
    render_context, state_digest, CallRecord, ModelId, ReasoningState, RoleChoice, RoutingTrace,
    Trajectory, TurnRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    #[default]
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConductorConfig {
    pub max_turns: usize,
    pub theta: f64,
    pub char_budget: usize,
    pub mode: RoutingMode,
    pub max_tokens: u32,
    /// Bypasses the model router and sends every call to this backend.
    pub force_model: Option<ModelId>,
}

impl Default for ConductorConfig {
    fn default() -> Self {
        Self {
            max_turns: 4,
            theta: 0.3,
            char_budget: 4000,
            mode: RoutingMode::Greedy,
            max_tokens: 1024,
            force_model: None,
        }
    }
}

impl ConductorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_turns < 1 {
            return Err(Error::Config("max_turns (L) must be >= 1".into()));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Config(format!("theta must be in (0, 1], got {}", self.theta)));
        }
        if self.char_budget < 64 {
            return Err(Error::Config("char_budget must be >= 64".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    EarlyStop,
    TurnLimit,
    /// A backend failure aborted the episode.
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub trajectory: Trajectory,
    pub final_answer: String,
    pub terminated_by: Termination,
}

pub struct TurnOutcome {
    pub record: TurnRecord,
    /// `None` once EarlyStop was selected.
    pub next: Option<ReasoningState>,
}

/// Immutable wiring shared by all episodes: roles, backends, prices and the embedder.
pub struct Engine {
    pub registry: RoleRegistry,
    pub role_embs: Vec<Embedding>,
    pub pool: BackendPool,
    pub prices: PriceTable,
    pub embedder: CachedEmbedder,
    pub hook: Box<dyn VerifierHook>,
}

impl Engine {
    pub fn new(
        registry: RoleRegistry,
        pool: BackendPool,
        prices: PriceTable,
        embedder: CachedEmbedder,
        hook: Box<dyn VerifierHook>,
    ) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Config("no backends registered".into()));
        }
        for m in pool.models() {
            if prices.get(&m).is_none() {
                return Err(Error::Config(format!("backend {m} has no price entry")));
            }
        }
        let role_embs = embedder.inner().embed_batch(&registry.descriptions())?;
        Ok(Self {
            registry,
            role_embs,
            pool,
            prices,
            embedder,
            hook,
        })
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }

    pub fn models(&self) -> Vec<ModelId> {
        self.pool.models()
    }

    pub fn init_params(&self, d_lat: usize, seed: u64) -> PolicyParams {
        PolicyParams::init(self.dim(), d_lat, self.pool.len(), seed)
    }

    fn embed_state(&self, state: &ReasoningState, char_budget: usize) -> Result<(Embedding, Embedding)> {
        let q_key = format!("q:{}", state_digest(&ReasoningState::new(state.query())));
        let q = self.embedder.embed_keyed(&q_key, state.query())?;
        let c_key = format!("c{char_budget}:{}", state_digest(state));
        let c = self
            .embedder
            .embed_keyed(&c_key, &render_context(state, char_budget)?)?;
        Ok((q, c))
    }

    /// Executes one routing-and-generation step.
    pub fn run_turn(
        &self,
        state: &ReasoningState,
        params: &PolicyParams,
        stats: &mut RunningStats,
        config: &ConductorConfig,
        episode_seed: u64,
    ) -> Result<TurnOutcome> {
        if state.turn() >= config.max_turns {
            return Err(Error::InvalidArgument(format!(
                "turn {} is past the cap of {}",
                state.turn(),
                config.max_turns
            )));
        }
        let turn = state.turn();
        let (q_emb, c_emb) = self.embed_state(state, config.char_budget)?;
        let dist = role_distribution(
            &q_emb,
            &c_emb,
            &self.role_embs,
            self.registry.ids(),
            self.registry.early_stop(),
            &params.role,
        )?;
        let selection = select_roles(&dist, config.theta)?;
        let roles: Vec<RoleChoice> = selection
            .selected
            .iter()
            .map(|&i| RoleChoice {
                role: self.registry.ids()[i].clone(),
                prob: dist.probs[i],
            })
            .collect();
        let mut trace = RoutingTrace {
            query_emb: q_emb.clone(),
            context_emb: c_emb.clone(),
            selected: selection.selected.clone(),
            calls: Vec::new(),
        };

        if selection.early_stop {
            return Ok(TurnOutcome {
                record: TurnRecord {
                    turn,
                    roles,
                    selection_logprob: selection.selection_logprob,
                    calls: Vec::new(),
                    early_stop: true,
                    trace: Some(trace),
                },
                next: None,
            });
        }

        let forced = match &config.force_model {
            Some(m) => Some(self.pool.index_of(m).ok_or_else(|| {
                Error::Config(format!("forced backend {m} is not registered"))
            })?),
            None => None,
        };
        let models = self.pool.models();
        let exec = ExecutionContext {
            registry: &self.registry,
            pool: &self.pool,
            prices: &self.prices,
            hook: self.hook.as_ref(),
            char_budget: config.char_budget,
            max_tokens: config.max_tokens,
        };

        let mut order = selection.selected.clone();
        order.sort_unstable();
        let mut calls = Vec::with_capacity(order.len());
        let mut outputs = Vec::with_capacity(order.len());
        for role_idx in order {
            if self.registry.get(role_idx).kind == RoleKind::Control {
                continue;
            }
            let role_emb = &self.role_embs[role_idx];
            let call_seed = derive_seed(episode_seed, "call", &[turn as u64, role_idx as u64]);
            let (model_idx, model_prob, model_logprob, traced) = match forced {
                Some(idx) => (idx, 1.0, 0.0, None),
                None => {
                    let md = model_distribution(&q_emb, &c_emb, role_emb, &models, &params.model)?;
                    let mode = match config.mode {
                        RoutingMode::Greedy => ChoiceMode::Greedy,
                        RoutingMode::Sample => {
                            ChoiceMode::Sample(derive_seed(call_seed, "sample", &[]))
                        }
                    };
                    let (idx, lp) = choose_model(&md, mode);
                    (idx, md.probs[idx], lp, Some(idx))
                }
            };
            let ran = execute_role(&exec, role_idx, model_idx, state, call_seed)?;
            let base = conf_base(&ran.completion.token_logprobs)?;
            let model = models[model_idx].clone();
            let adjusted = conf_adj(base, &model, stats);
            stats.observe(&model, base);
            trace.calls.push((role_idx, traced));
            calls.push(CallRecord {
                role: ran.output.role.clone(),
                model: model.clone(),
                model_prob,
                model_logprob,
                conf_base: base,
                conf_adj: adjusted,
                tokens_in: ran.cost.tokens_in,
                tokens_out: ran.cost.tokens_out,
                cost: ran.cost.usd,
                latency: ran.completion.latency_s,
                answer: ran.output.answer.clone(),
            });
            outputs.push((ran.output.role, model, ran.output.text));
        }

        Ok(TurnOutcome {
            record: TurnRecord {
                turn,
                roles,
                selection_logprob: selection.selection_logprob,
                calls,
                early_stop: false,
                trace: Some(trace),
            },
            next: Some(state.advance(outputs)),
        })
    }

    /// Runs turns until EarlyStop or the turn cap.
    #[allow(clippy::too_many_arguments)]
    pub fn run_episode(
        &self,
        episode: &str,
        query: &str,
        gold: Option<&str>,
        params: &PolicyParams,
        stats: &mut RunningStats,
        config: &ConductorConfig,
        episode_seed: u64,
    ) -> Result<EpisodeResult> {
        if query.trim().is_empty() {
            return Err(Error::InvalidArgument("query must be non-empty".into()));
        }
        config.validate()?;
        let mut state = ReasoningState::new(query);
        let mut turns: Vec<TurnRecord> = Vec::new();
        let mut failure = None;
        let mut terminated_by = Termination::TurnLimit;
        while state.turn() < config.max_turns {
            match self.run_turn(&state, params, stats, config, episode_seed) {
                Ok(outcome) => {
                    turns.push(outcome.record);
                    match outcome.next {
                        Some(next) => state = next,
                        None => {
                            terminated_by = Termination::EarlyStop;
                            break;
                        }
                    }
                }
                Err(e @ (Error::Backend(_) | Error::EmptyGeneration)) => {
                    tracing::warn!(episode, error = %e, "episode aborted");
                    failure = Some(e.to_string());
                    terminated_by = Termination::Failed;
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        let final_answer = resolve_final_answer(&self.registry, &turns);
        let total_cost = turns.iter().flat_map(|t| &t.calls).map(|c| c.cost).sum();
        let total_latency = turns.iter().flat_map(|t| &t.calls).map(|c| c.latency).sum();
        let trajectory = Trajectory {
            episode: episode.to_string(),
            query: query.to_string(),
            gold: gold.map(str::to_owned),
            turns,
            final_answer: final_answer.clone(),
            total_cost,
            total_latency,
            reward: None,
            failure,
        };
        Ok(EpisodeResult {
            trajectory,
            final_answer,
            terminated_by,
        })
    }
}

/// Aggregate-role answer of the last working turn, else the last extracted
/// answer anywhere in the trajectory, else empty.
pub fn resolve_final_answer(registry: &RoleRegistry, turns: &[TurnRecord]) -> String {
    let is_aggregate = |c: &CallRecord| {
        registry
            .index_of(c.role.as_str())
            .is_some_and(|i| registry.get(i).kind == RoleKind::Aggregate)
    };
    if let Some(last) = turns.iter().rev().find(|t| !t.calls.is_empty()) {
        if let Some(a) = last
            .calls
            .iter()
            .rev()
            .filter(|c| is_aggregate(c))
            .find_map(|c| c.answer.clone())
        {
            return a;
        }
    }
    turns
        .iter()
        .rev()
        .flat_map(|t| t.calls.iter().rev())
        .find_map(|c| c.answer.clone())
        .unwrap_or_default()
}
