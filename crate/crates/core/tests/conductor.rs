mod common;

use common::{anti_early_stop, config_text, default_backends, engine_from, greedy, stop_at_turn_one, QUERY, STRENGTH};
use conductor_core::conductor::Termination;
use conductor_core::confidence::RunningStats;
use conductor_core::policy::PolicyParams;
use conductor_core::state::Trajectory;

#[test]
fn early_stop_at_turn_one_halts_generation() {
    let (_, engine) = engine_from(&config_text(0, None, &default_backends()));
    let params = stop_at_turn_one(&engine, QUERY);
    engine.pool.reset_counters();
    let res = engine
        .run_episode("e", QUERY, Some("42"), &params, &mut RunningStats::default(), &greedy(4), 5)
        .unwrap();
    let t = &res.trajectory;
    assert_eq!(res.terminated_by, Termination::EarlyStop);
    assert_eq!(t.turns.len(), 2);
    assert!(!t.turns[0].early_stop && !t.turns[0].calls.is_empty());
    assert!(t.turns[1].early_stop && t.turns[1].calls.is_empty());
    assert_eq!(t.turns[1].roles.len(), 1);
    assert_eq!(engine.pool.total_calls(), t.turns[0].calls.len() as u64);
    let extracted = t.turns[0].calls.iter().rev().find_map(|c| c.answer.clone()).unwrap_or_default();
    assert_eq!(res.final_answer, extracted);
    t.validate(4).unwrap();
}

#[test]
fn early_stop_at_turn_zero_makes_no_calls() {
    let (_, engine) = engine_from(&config_text(0, None, &default_backends()));
    let es = engine.registry.early_stop().unwrap();
    let q = engine.embedder.inner().embed(QUERY).unwrap();
    let mut role = anti_early_stop(&q, &engine.role_embs, es, STRENGTH);
    role.w_state.scale(-1.0);
    let params = PolicyParams { role, model: engine.init_params(1, 0).model };
    engine.pool.reset_counters();
    let res = engine
        .run_episode("e", QUERY, None, &params, &mut RunningStats::default(), &greedy(4), 0)
        .unwrap();
    assert_eq!(res.terminated_by, Termination::EarlyStop);
    assert_eq!(res.trajectory.turns.len(), 1);
    assert_eq!(res.trajectory.total_cost, 0.0);
    assert_eq!(engine.pool.total_calls(), 0);
    assert_eq!(res.final_answer, "");
}

#[test]
fn without_early_stop_every_episode_hits_the_cap() {
    let roles = ["Decomposer", "Generator", "GeneratorCoT", "Programmer", "Critique", "Verifier", "Refiner", "Ensembler"];
    let (_, engine) = engine_from(&config_text(3, Some(&roles), &default_backends()));
    for seed in 0..10 {
        let params = engine.init_params(8, seed);
        let res = engine
            .run_episode("e", QUERY, None, &params, &mut RunningStats::default(), &greedy(4), seed)
            .unwrap();
        assert_eq!(res.terminated_by, Termination::TurnLimit);
        assert_eq!(res.trajectory.turns.len(), 4);
        res.trajectory.validate(4).unwrap();
    }
}

fn run_all(seed: u64) -> Vec<Trajectory> {
    let (_, engine) = engine_from(&config_text(seed, None, &default_backends()));
    let params = engine.init_params(16, seed);
    let mut stats = RunningStats::default();
    (0..6)
        .map(|i| {
            engine
                .run_episode(&format!("e{i}"), &format!("What is {i} * 7 + 1?"), None, &params, &mut stats, &greedy(4), i)
                .unwrap()
                .trajectory
        })
        .collect()
}

#[test]
fn greedy_replay_is_deterministic() {
    let a = run_all(9);
    let b = run_all(9);
    for (x, y) in a.iter().zip(&b) {
        let mut x = serde_json::to_value(x).unwrap();
        let mut y = serde_json::to_value(y).unwrap();
        strip_latency(&mut x);
        strip_latency(&mut y);
        assert_eq!(x, y);
    }
}

fn strip_latency(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.remove("latency");
            m.remove("total_latency");
            m.values_mut().for_each(strip_latency);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_latency),
        _ => {}
    }
}

#[test]
fn costs_add_up_and_match_prices() {
    for t in run_all(4) {
        let sum: f64 = t.calls().map(|c| c.cost).sum();
        assert!((sum - t.total_cost).abs() < 1e-15);
        for c in t.calls() {
            let price = match c.model.as_str() {
                "Qwen2.5-7B" => 0.30,
                "Llama3.1-70B" => 0.88,
                other => panic!("unexpected backend {other}"),
            };
            let expected = (c.tokens_in + c.tokens_out) as f64 * price / 1e6;
            assert!((c.cost - expected).abs() < 1e-15, "{} vs {expected}", c.cost);
        }
    }
}

#[test]
fn selected_roles_are_distinct_and_executed_in_registry_order() {
    for t in run_all(2) {
        for turn in &t.turns {
            let mut names: Vec<&str> = turn.roles.iter().map(|r| r.role.as_str()).collect();
            names.sort_unstable();
            names.dedup();
            assert_eq!(names.len(), turn.roles.len());
            assert_eq!(turn.calls.len(), turn.roles.len() - usize::from(turn.early_stop));
        }
    }
}

#[test]
fn forced_backend_receives_every_call() {
    let (_, engine) = engine_from(&config_text(1, None, &default_backends()));
    let params = engine.init_params(16, 1);
    let mut cfg = greedy(4);
    cfg.force_model = Some(conductor_core::state::ModelId::new("Llama3.1-70B").unwrap());
    let res = engine
        .run_episode("e", QUERY, None, &params, &mut RunningStats::default(), &cfg, 1)
        .unwrap();
    for c in res.trajectory.calls() {
        assert_eq!(c.model.as_str(), "Llama3.1-70B");
        assert_eq!(c.model_logprob, 0.0);
    }
    for turn in &res.trajectory.turns {
        assert!(turn.trace.as_ref().unwrap().calls.iter().all(|(_, m)| m.is_none()));
    }
}

#[test]
fn blank_query_is_rejected() {
    let (_, engine) = engine_from(&config_text(0, None, &default_backends()));
    let params = engine.init_params(4, 0);
    assert!(engine
        .run_episode("e", "  ", None, &params, &mut RunningStats::default(), &greedy(4), 0)
        .is_err());
}

#[test]
fn failing_backend_marks_episode_failed() {
    let backends = vec![
        "[[backends]]\nmodel = \"Qwen2.5-7B\"\nkind = \"mock\"\n[backends.script.default]\nresponse = \"Answer: 1\"\nlogprob = -0.1\nerror_rate = 1.0\n".to_string(),
    ];
    let (_, engine) = engine_from(&config_text(0, Some(&["Generator"]), &backends));
    let params = engine.init_params(4, 0);
    let res = engine
        .run_episode("e", QUERY, None, &params, &mut RunningStats::default(), &greedy(4), 0)
        .unwrap();
    assert_eq!(res.terminated_by, Termination::Failed);
    assert!(res.trajectory.failure.is_some());
    assert!(res.trajectory.turns.is_empty());
}
