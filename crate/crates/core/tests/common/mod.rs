//! Shared fixtures: toy engines, hand-built trajectories and finite-difference oracles.
#![allow(dead_code)]

use conductor_core::conductor::{ConductorConfig, Engine, RoutingMode};
use conductor_core::confidence::RunningStats;
use conductor_core::config::RunConfig;
use conductor_core::embedding::Embedding;
use conductor_core::linalg::Matrix;
use conductor_core::model_router::ModelPolicyParams;
use conductor_core::policy::PolicyParams;
use conductor_core::role_router::RolePolicyParams;
use conductor_core::state::{CallRecord, ModelId, RoleChoice, RoleId, RoutingTrace, Trajectory, TurnRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const QUERY: &str = "What is 17 + 25?";
/// Latent magnitude of the hand-built role parameters.
pub const STRENGTH: f64 = 30.0;

/// Repository path of a shipped config.
pub fn shipped_config(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

/// A mock backend answering the arithmetic solution with a constant logprob.
pub fn mock_backend(model: &str, response: &str, logprob: f64) -> String {
    format!(
        "[[backends]]\nmodel = \"{model}\"\nkind = \"mock\"\n\
         [backends.script.default]\nresponse = \"{response}\"\nlogprob = {logprob}\n"
    )
}

/// Config text with the given role list (all nine roles when `None`).
pub fn config_text(seed: u64, roles: Option<&[&str]>, backends: &[String]) -> String {
    let mut text = format!("seed = {seed}\n");
    if let Some(roles) = roles {
        let quoted: Vec<String> = roles.iter().map(|r| format!("\"{r}\"")).collect();
        text.push_str(&format!("roles = [{}]\n", quoted.join(", ")));
    }
    text.push_str("[embedder]\nkind = \"hash\"\ndim = 32\n");
    for b in backends {
        text.push_str(b);
    }
    text
}

pub fn default_backends() -> Vec<String> {
    vec![
        mock_backend("Qwen2.5-7B", "Answer: {solution}", -0.2),
        mock_backend("Llama3.1-70B", "Answer: {solution}", -0.05),
    ]
}

pub fn engine_from(text: &str) -> (RunConfig, Engine) {
    let cfg = RunConfig::parse(text).expect("test config parses");
    let engine = cfg.build_engine().expect("test engine builds");
    (cfg, engine)
}

pub fn greedy(max_turns: usize) -> ConductorConfig {
    ConductorConfig {
        max_turns,
        mode: RoutingMode::Greedy,
        ..ConductorConfig::default()
    }
}

pub fn random_embedding<R: Rng>(dim: usize, rng: &mut R) -> Embedding {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Embedding::normalized(v).expect("non-zero random vector")
}

pub fn random_params<R: Rng>(dim: usize, d_lat: usize, n_models: usize, scale: f64, rng: &mut R) -> PolicyParams {
    let fill = |rows: usize, cols: usize, rng: &mut R| {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
            .expect("shape matches")
    };
    PolicyParams {
        role: RolePolicyParams {
            w_state: fill(d_lat, 2 * dim, rng),
            w_role: fill(d_lat, dim, rng),
        },
        model: ModelPolicyParams {
            w_ctx: fill(d_lat, 3 * dim, rng),
            model_table: fill(n_models, d_lat, rng),
        },
    }
}

/// A call record with only the accounting fields meaningful.
pub fn call(role: &str, model: &str, conf_adj: f64, cost: f64) -> CallRecord {
    CallRecord {
        role: RoleId::new(role).unwrap(),
        model: ModelId::new(model).unwrap(),
        model_prob: 1.0,
        model_logprob: 0.0,
        conf_base: -0.1,
        conf_adj,
        tokens_in: 10,
        tokens_out: 5,
        cost,
        latency: 0.0,
        answer: None,
    }
}

pub fn trajectory(turns: Vec<TurnRecord>) -> Trajectory {
    let total_cost = turns.iter().map(TurnRecord::cost).sum();
    Trajectory {
        episode: "ep".into(),
        query: "q".into(),
        gold: None,
        turns,
        final_answer: String::new(),
        total_cost,
        total_latency: 0.0,
        reward: None,
        failure: None,
    }
}

/// A random traced trajectory over `n_roles` roles and `n_models` backends.
pub fn random_traced_trajectory<R: Rng>(
    dim: usize,
    n_roles: usize,
    n_models: usize,
    rng: &mut R,
) -> Trajectory {
    let n_turns = rng.random_range(1..=3);
    let turns = (0..n_turns)
        .map(|turn| {
            let mut selected: Vec<usize> = (0..n_roles).filter(|_| rng.random_bool(0.5)).collect();
            if selected.is_empty() {
                selected.push(rng.random_range(0..n_roles));
            }
            let calls: Vec<(usize, Option<usize>)> = selected
                .iter()
                .map(|&r| (r, Some(rng.random_range(0..n_models))))
                .collect();
            TurnRecord {
                turn,
                roles: selected
                    .iter()
                    .map(|&i| RoleChoice {
                        role: RoleId::new(format!("r{i}")).unwrap(),
                        prob: 0.5,
                    })
                    .collect(),
                selection_logprob: 0.0,
                calls: calls
                    .iter()
                    .map(|(r, _)| call(&format!("r{r}"), "m", rng.random_range(0.0..1.0), rng.random_range(0.0..0.01)))
                    .collect(),
                early_stop: false,
                trace: Some(RoutingTrace {
                    query_emb: random_embedding(dim, rng),
                    context_emb: random_embedding(dim, rng),
                    selected,
                    calls,
                }),
            }
        })
        .collect();
    trajectory(turns)
}

/// Central finite-difference gradient of `f` over every flat parameter.
pub fn fd_gradient(params: &PolicyParams, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    let mut p = params.clone();
    (0..params.n_params())
        .map(|i| {
            let orig = *p.flat_mut(i);
            *p.flat_mut(i) = orig + FD_EPS;
            let up = f(&p);
            *p.flat_mut(i) = orig - FD_EPS;
            let down = f(&p);
            *p.flat_mut(i) = orig;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

/// Norm-wise relative error with a floor for vanishing gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|b| b * b).sum::<f64>().sqrt())
        .max(1e-6);
    diff / scale
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Role parameters (latent width 1) with latent state fixed at `-strength`
/// and role scores `h * (v . e_i)`, `v` the EarlyStop embedding. EarlyStop
/// ranks last, so a working turn runs.
pub fn anti_early_stop(q: &Embedding, role_embs: &[Embedding], early_stop: usize, strength: f64) -> RolePolicyParams {
    let dim = q.dim();
    let w_state: Vec<f64> = q
        .values()
        .iter()
        .map(|qi| -strength * qi)
        .chain(std::iter::repeat_n(0.0, dim))
        .collect();
    RolePolicyParams {
        w_state: Matrix::from_vec(1, 2 * dim, w_state).unwrap(),
        w_role: Matrix::from_vec(1, dim, role_embs[early_stop].values().to_vec()).unwrap(),
    }
}

/// Like [`anti_early_stop`] at context `c0`, but the latent state flips to
/// `+strength` at context `c1`, ranking EarlyStop first from then on.
///
/// `h = g * (u . c - mid)` with `u = c1 - c0`; the bias comes through the
/// fixed query embedding and `g` is chosen so that `h(c0) = -strength`.
pub fn early_stop_after_first_turn(
    q: &Embedding,
    c0: &Embedding,
    c1: &Embedding,
    role_embs: &[Embedding],
    early_stop: usize,
    strength: f64,
) -> RolePolicyParams {
    let dim = q.dim();
    let u: Vec<f64> = c1.values().iter().zip(c0.values()).map(|(a, b)| a - b).collect();
    let proj = |c: &Embedding| u.iter().zip(c.values()).map(|(a, b)| a * b).sum::<f64>();
    let half_gap = 0.5 * (proj(c1) - proj(c0));
    assert!(half_gap > 0.0, "contexts must differ");
    let gain = strength / half_gap;
    let mid = 0.5 * (proj(c0) + proj(c1));
    let w_state: Vec<f64> = q
        .values()
        .iter()
        .map(|qi| -gain * mid * qi)
        .chain(u.iter().map(|ui| gain * ui))
        .collect();
    RolePolicyParams {
        w_state: Matrix::from_vec(1, 2 * dim, w_state).unwrap(),
        w_role: Matrix::from_vec(1, dim, role_embs[early_stop].values().to_vec()).unwrap(),
    }
}

/// Query and turn-0/turn-1 context embeddings of a working first turn.
fn first_turn_contexts(engine: &Engine, query: &str, base: &PolicyParams) -> (Embedding, Embedding, Embedding) {
    let es = engine.registry.early_stop().unwrap();
    let q = engine.embedder.inner().embed(query).unwrap();
    let params = PolicyParams {
        role: anti_early_stop(&q, &engine.role_embs, es, STRENGTH),
        model: base.model.clone(),
    };
    let res = engine
        .run_episode("probe", query, None, &params, &mut RunningStats::default(), &greedy(2), 0)
        .unwrap();
    let trace = |i: usize| res.trajectory.turns[i].trace.clone().unwrap();
    (q, trace(0).context_emb, trace(1).context_emb)
}

/// Frozen parameters ranking EarlyStop first from turn 1 on.
pub fn stop_at_turn_one(engine: &Engine, query: &str) -> PolicyParams {
    let base = engine.init_params(1, 0);
    let (q, c0, c1) = first_turn_contexts(engine, query, &base);
    PolicyParams {
        role: early_stop_after_first_turn(&q, &c0, &c1, &engine.role_embs, engine.registry.early_stop().unwrap(), STRENGTH),
        model: base.model,
    }
}

