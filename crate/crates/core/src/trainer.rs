//! Score-function training of the role and model routers against the
//! confidence-weighted cost-penalized return.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conductor::{ConductorConfig, Engine, RoutingMode, Termination};
use crate::confidence::RunningStats;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::harness::{judge, TaskRecord};
use crate::linalg::softmax;
use crate::model_router::grad_model_logprob;
use crate::policy::{PolicyParams, DEFAULT_D_LAT};
use crate::role_router::grad_role_logprob;
use crate::seeding::derive_seed;
use crate::state::{ModelId, Trajectory};

pub const GRAD_CLIP_NORM: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub baseline_decay: f64,
    pub epochs: usize,
    /// Taken from the run-level seed, never from the training table.
    #[serde(skip)]
    pub seed: u64,
    pub d_lat: usize,
    pub disable_model_router: bool,
    pub disable_cost_term: bool,
    pub disable_conf_weight: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 200.0,
            lr: 0.01,
            batch_size: 16,
            baseline_decay: 0.9,
            epochs: 1,
            seed: 0,
            d_lat: DEFAULT_D_LAT,
            disable_model_router: false,
            disable_cost_term: false,
            disable_conf_weight: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.baseline_decay) {
            return Err(Error::Config("baseline_decay must be in [0, 1]".into()));
        }
        if self.d_lat == 0 {
            return Err(Error::Config("d_lat must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLoss {
    pub reward: u8,
    pub penalty: f64,
    pub penalized_return: f64,
    pub trajectory_logprob: f64,
}

/// `lambda * sum_calls conf_adj * usd`, honoring the ablation flags.
pub fn penalty(trajectory: &Trajectory, cfg: &TrainingConfig) -> f64 {
    if cfg.disable_cost_term {
        return 0.0;
    }
    let weighted: f64 = trajectory
        .calls()
        .map(|c| {
            let w = if cfg.disable_conf_weight { 1.0 } else { c.conf_adj };
            w * c.cost
        })
        .sum();
    cfg.lambda * weighted
}

pub fn penalized_return(trajectory: &Trajectory, reward: u8, cfg: &TrainingConfig) -> f64 {
    f64::from(reward) - penalty(trajectory, cfg)
}

/// Logged selection and model-choice log-probabilities of a trajectory.
pub fn logged_logprob(trajectory: &Trajectory) -> f64 {
    trajectory
        .turns
        .iter()
        .map(|t| t.selection_logprob + t.calls.iter().map(|c| c.model_logprob).sum::<f64>())
        .sum()
}

pub fn episode_loss(trajectory: &Trajectory, reward: u8, cfg: &TrainingConfig) -> EpisodeLoss {
    let penalty = penalty(trajectory, cfg);
    EpisodeLoss {
        reward,
        penalty,
        penalized_return: f64::from(reward) - penalty,
        trajectory_logprob: logged_logprob(trajectory),
    }
}

fn missing_trace(t: usize) -> Error {
    Error::InvalidArgument(format!("turn {t} carries no routing trace"))
}

/// Log-probability of the trajectory's routing decisions under `params`,
/// recomputed from the stored embeddings.
pub fn trajectory_logprob(
    trajectory: &Trajectory,
    params: &PolicyParams,
    role_embs: &[Embedding],
) -> Result<f64> {
    let mut total = 0.0;
    for turn in &trajectory.turns {
        let tr = turn.trace.as_ref().ok_or_else(|| missing_trace(turn.turn))?;
        let probs = softmax(&params.role.scores(&tr.query_emb, &tr.context_emb, role_embs)?);
        total += tr.selected.iter().map(|&i| probs[i].ln()).sum::<f64>();
        for &(role_idx, model_idx) in &tr.calls {
            let Some(m) = model_idx else { continue };
            let scores = params
                .model
                .scores(&tr.query_emb, &tr.context_emb, &role_embs[role_idx])?;
            total += softmax(&scores)[m].ln();
        }
    }
    Ok(total)
}

/// Gradient of [`trajectory_logprob`] with respect to all parameters.
pub fn grad_trajectory_logprob(
    trajectory: &Trajectory,
    params: &PolicyParams,
    role_embs: &[Embedding],
) -> Result<PolicyParams> {
    let mut grad = params.zeros_like();
    for turn in &trajectory.turns {
        let tr = turn.trace.as_ref().ok_or_else(|| missing_trace(turn.turn))?;
        let g = grad_role_logprob(&tr.query_emb, &tr.context_emb, role_embs, &params.role, &tr.selected)?;
        grad.role.add_scaled(1.0, &g)?;
        for &(role_idx, model_idx) in &tr.calls {
            let Some(m) = model_idx else { continue };
            let role_emb = role_embs.get(role_idx).ok_or_else(|| {
                Error::InvalidArgument(format!("traced role index {role_idx} out of range"))
            })?;
            let g = grad_model_logprob(&tr.query_emb, &tr.context_emb, role_emb, &params.model, m)?;
            grad.model.add_scaled(1.0, &g)?;
        }
    }
    Ok(grad)
}

/// Moving-average return baseline. Starts unset and takes the first batch
/// mean when first updated.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Baseline(pub Option<f64>);

impl Baseline {
    pub fn value(&self) -> f64 {
        self.0.unwrap_or(0.0)
    }

    pub fn update(&mut self, batch_mean: f64, decay: f64) {
        self.0 = Some(match self.0 {
            None => batch_mean,
            Some(b) => decay * b + (1.0 - decay) * batch_mean,
        });
    }
}

/// REINFORCE gradient of the loss `-(1/B) sum_i A_i log pi(tau_i)`.
///
/// The baseline used for the advantages is the value before this batch
/// (or the batch mean when still unset); it is updated afterwards.
pub fn policy_gradient(
    batch: &[(&Trajectory, u8)],
    params: &PolicyParams,
    role_embs: &[Embedding],
    cfg: &TrainingConfig,
    baseline: &mut Baseline,
) -> Result<PolicyParams> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let returns: Vec<f64> = batch
        .iter()
        .map(|(t, r)| penalized_return(t, *r, cfg))
        .collect();
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let b = baseline.0.unwrap_or(mean);
    let mut grad = params.zeros_like();
    let inv_b = 1.0 / batch.len() as f64;
    for ((traj, _), ret) in batch.iter().zip(&returns) {
        let advantage = ret - b;
        if advantage == 0.0 {
            continue;
        }
        let g = grad_trajectory_logprob(traj, params, role_embs)?;
        grad.add_scaled(-advantage * inv_b, &g)?;
    }
    baseline.update(mean, cfg.baseline_decay);
    Ok(grad)
}

/// One gradient-descent step with global-norm clipping, as a fresh snapshot.
pub fn sgd_update(params: &PolicyParams, grads: &PolicyParams, lr: f64) -> Result<PolicyParams> {
    let norm = grads.norm();
    let scale = if norm > GRAD_CLIP_NORM { GRAD_CLIP_NORM / norm } else { 1.0 };
    let mut next = params.clone();
    next.add_scaled(-lr * scale, grads)?;
    Ok(next)
}

/// Mutable training state; everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub params: PolicyParams,
    pub stats: RunningStats,
    pub baseline: Baseline,
    /// Number of completed batches.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub batch: u64,
    pub epoch: u64,
    pub mean_return: f64,
    pub accuracy: f64,
    pub mean_cost: f64,
    pub mean_turns: f64,
    /// Mean per-million-token price of the backend chosen per call.
    pub mean_call_price: f64,
    pub failed: usize,
}

pub fn render_curve(points: &[CurvePoint]) -> String {
    let mut out = String::from(
        "batch\tepoch\tmean_return\taccuracy\tmean_cost\tmean_turns\tmean_call_price\tfailed\n",
    );
    for p in points {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.4}\t{:.8}\t{:.3}\t{:.4}\t{}\n",
            p.batch, p.epoch, p.mean_return, p.accuracy, p.mean_cost, p.mean_turns, p.mean_call_price, p.failed
        ));
    }
    out
}

pub struct Trainer<'a> {
    engine: &'a Engine,
    conductor: ConductorConfig,
    cfg: TrainingConfig,
}

impl<'a> Trainer<'a> {
    /// Rollouts run in sample mode; with `disable_model_router` every call is
    /// forced onto `large` (the largest priced backend when `None`).
    pub fn new(
        engine: &'a Engine,
        conductor: &ConductorConfig,
        cfg: TrainingConfig,
        large: Option<ModelId>,
    ) -> Result<Self> {
        cfg.validate()?;
        conductor.validate()?;
        let mut conductor = conductor.clone();
        conductor.mode = RoutingMode::Sample;
        conductor.force_model = if cfg.disable_model_router {
            let large = match large {
                Some(m) => m,
                None => engine
                    .prices
                    .largest()
                    .cloned()
                    .ok_or_else(|| Error::Config("price table is empty".into()))?,
            };
            if engine.pool.index_of(&large).is_none() {
                return Err(Error::Config(format!("large backend {large} is not registered")));
            }
            Some(large)
        } else {
            None
        };
        Ok(Self {
            engine,
            conductor,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    pub fn conductor(&self) -> &ConductorConfig {
        &self.conductor
    }

    pub fn init_state(&self) -> TrainerState {
        TrainerState {
            params: self.engine.init_params(self.cfg.d_lat, self.cfg.seed),
            stats: RunningStats::default(),
            baseline: Baseline::default(),
            step: 0,
        }
    }

    pub fn batches_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_batches(&self, n: usize) -> u64 {
        self.batches_per_epoch(n) * self.cfg.epochs as u64
    }

    /// Dataset indices of global batch `k`.
    fn batch_indices(&self, n: usize, k: u64) -> Vec<usize> {
        let nb = self.batches_per_epoch(n);
        let epoch = k / nb;
        let within = (k % nb) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, "shuffle", &[epoch]));
        order.shuffle(&mut rng);
        let start = within * self.cfg.batch_size;
        order[start..(start + self.cfg.batch_size).min(n)].to_vec()
    }

    fn call_price(&self, model: &ModelId) -> f64 {
        self.engine
            .prices
            .get(model)
            .map_or(0.0, |e| 0.5 * (e.price_in + e.price_out))
    }

    /// Runs batch `state.step`: rollouts, judging, gradient and update.
    pub fn step(&self, state: &mut TrainerState, dataset: &[TaskRecord]) -> Result<CurvePoint> {
        if dataset.is_empty() {
            return Err(Error::Dataset("training dataset is empty".into()));
        }
        let k = state.step;
        let mut episodes = Vec::new();
        let mut failed = 0;
        for (slot, idx) in self.batch_indices(dataset.len(), k).into_iter().enumerate() {
            let task = &dataset[idx];
            let seed = derive_seed(self.cfg.seed, "episode", &[k, slot as u64]);
            let res = self.engine.run_episode(
                &task.id,
                &task.query,
                Some(&task.gold),
                &state.params,
                &mut state.stats,
                &self.conductor,
                seed,
            )?;
            if res.terminated_by == Termination::Failed {
                failed += 1;
                continue;
            }
            let mut traj = res.trajectory;
            let reward = judge(&traj.final_answer, &task.gold);
            traj.reward = Some(reward);
            episodes.push((traj, reward));
        }

        let nb = self.batches_per_epoch(dataset.len());
        let mut point = CurvePoint {
            batch: k,
            epoch: k / nb,
            mean_return: 0.0,
            accuracy: 0.0,
            mean_cost: 0.0,
            mean_turns: 0.0,
            mean_call_price: 0.0,
            failed,
        };
        if !episodes.is_empty() {
            let n = episodes.len() as f64;
            point.mean_return = episodes
                .iter()
                .map(|(t, r)| penalized_return(t, *r, &self.cfg))
                .sum::<f64>()
                / n;
            point.accuracy = episodes.iter().map(|(_, r)| f64::from(*r)).sum::<f64>() / n;
            point.mean_cost = episodes.iter().map(|(t, _)| t.total_cost).sum::<f64>() / n;
            point.mean_turns = episodes.iter().map(|(t, _)| t.turns.len() as f64).sum::<f64>() / n;
            let prices: Vec<f64> = episodes
                .iter()
                .flat_map(|(t, _)| t.calls().map(|c| self.call_price(&c.model)))
                .collect();
            if !prices.is_empty() {
                point.mean_call_price = prices.iter().sum::<f64>() / prices.len() as f64;
            }

            let batch: Vec<(&Trajectory, u8)> = episodes.iter().map(|(t, r)| (t, *r)).collect();
            let grads = policy_gradient(
                &batch,
                &state.params,
                &self.engine.role_embs,
                &self.cfg,
                &mut state.baseline,
            )?;
            state.params = sgd_update(&state.params, &grads, self.cfg.lr)?;
        }
        state.step += 1;
        tracing::debug!(
            batch = k,
            mean_return = point.mean_return,
            accuracy = point.accuracy,
            "training batch"
        );
        Ok(point)
    }

    /// Runs the remaining batches of the configured epochs, calling
    /// `on_epoch(state, epoch)` after each completed epoch.
    pub fn train<F>(
        &self,
        state: &mut TrainerState,
        dataset: &[TaskRecord],
        mut on_epoch: F,
    ) -> Result<Vec<CurvePoint>>
    where
        F: FnMut(&TrainerState, u64) -> Result<()>,
    {
        if dataset.is_empty() {
            return Err(Error::Dataset("training dataset is empty".into()));
        }
        state.params.validate(self.engine.dim(), self.engine.pool.len())?;
        let nb = self.batches_per_epoch(dataset.len());
        let total = self.total_batches(dataset.len());
        let mut curve = Vec::new();
        while state.step < total {
            curve.push(self.step(state, dataset)?);
            if state.step.is_multiple_of(nb) {
                on_epoch(state, state.step / nb - 1)?;
            }
        }
        Ok(curve)
    }
}
