//! Datasets, answer judging, splits, evaluation metrics and routing reports.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conductor::{ConductorConfig, Engine, RoutingMode, Termination};
use crate::confidence::RunningStats;
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::seeding::derive_seed;
use crate::state::{LogLine, Trajectory, TrajectoryLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub id: String,
    pub query: String,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
}

/// Checks that ids are unique and non-empty and golds are non-empty.
pub fn validate_dataset(records: &[TaskRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if r.id.is_empty() {
            return Err(Error::Dataset("record with empty id".into()));
        }
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Dataset(format!("duplicate record id {}", r.id)));
        }
        if r.gold.trim().is_empty() {
            return Err(Error::Dataset(format!("record {} has an empty gold answer", r.id)));
        }
        if r.query.trim().is_empty() {
            return Err(Error::Dataset(format!("record {} has an empty query", r.id)));
        }
    }
    Ok(())
}

/// Reads line-delimited JSON records, skipping blank lines.
pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<TaskRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaskRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    validate_dataset(&out)?;
    Ok(out)
}

pub fn load_dataset(path: &std::path::Path) -> Result<Vec<TaskRecord>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    read_dataset(std::io::BufReader::new(file))
}

pub fn write_dataset<W: Write>(mut out: W, records: &[TaskRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn normalize(text: &str) -> String {
    let mut s = text.trim();
    while let Some(rest) = s.strip_suffix('.') {
        s = rest.trim_end();
    }
    let s = s.strip_prefix('+').unwrap_or(s).trim();
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => {
            if v == v.trunc() && v.abs() < 1e15 {
                format!("{}", v as i64)
            } else {
                format!("{v}")
            }
        }
        _ => s.to_string(),
    }
}

/// 1 when the final `Answer:` line of `answer_text` (or the whole text when
/// there is none) matches `gold` after normalization.
pub fn judge(answer_text: &str, gold: &str) -> u8 {
    let extracted = match answer_text.rfind(ANSWER_MARKER) {
        Some(pos) => {
            let rest = &answer_text[pos + ANSWER_MARKER.len()..];
            rest.lines().next().unwrap_or("")
        }
        None => answer_text,
    };
    u8::from(normalize(extracted) == normalize(gold))
}

const ANSWER_MARKER: &str = "Answer:";

/// Seeded shuffle, then the first `train_parts / (train_parts + test_parts)`
/// share (rounded) goes to the train split.
pub fn split(
    records: &[TaskRecord],
    ratio: (u32, u32),
    seed: u64,
) -> Result<(Vec<TaskRecord>, Vec<TaskRecord>)> {
    if records.is_empty() {
        return Err(Error::Dataset("cannot split an empty dataset".into()));
    }
    let (a, b) = ratio;
    if a + b == 0 {
        return Err(Error::InvalidArgument("split ratio must have a positive part".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", &[])));
    let n_train = (records.len() as f64 * f64::from(a) / f64::from(a + b)).round() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub correct: usize,
    /// Episodes aborted by backend failures; counted as incorrect.
    pub failed: usize,
    pub accuracy: f64,
    pub total_cost: f64,
    pub mean_cost: f64,
    pub mean_latency: f64,
    pub mean_turns: f64,
    pub early_stop_rate: f64,
}

impl EvalReport {
    pub fn header() -> &'static str {
        "n\tcorrect\tfailed\taccuracy\ttotal_cost\tmean_cost\tmean_latency\tmean_turns\tearly_stop_rate"
    }

    pub fn row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.4}\t{:.8}\t{:.8}\t{:.4}\t{:.3}\t{:.4}",
            self.n,
            self.correct,
            self.failed,
            self.accuracy,
            self.total_cost,
            self.mean_cost,
            self.mean_latency,
            self.mean_turns,
            self.early_stop_rate
        )
    }

    pub fn render(&self) -> String {
        format!("{}\n{}\n", Self::header(), self.row())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalEpisode {
    pub task_id: String,
    pub trajectory: Trajectory,
    pub terminated_by: Termination,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub episodes: Vec<EvalEpisode>,
}

/// Runs one greedy episode per record, judges it and appends it to `log`.
pub fn evaluate<W: Write>(
    engine: &Engine,
    params: &PolicyParams,
    stats: &mut RunningStats,
    dataset: &[TaskRecord],
    config: &ConductorConfig,
    seed: u64,
    log: &mut TrajectoryLog<W>,
) -> Result<EvalOutcome> {
    if dataset.is_empty() {
        return Err(Error::Dataset("evaluation dataset is empty".into()));
    }
    if config.mode != RoutingMode::Greedy {
        return Err(Error::InvalidArgument("evaluation runs in greedy mode".into()));
    }
    params.validate(engine.dim(), engine.pool.len())?;
    let mut episodes = Vec::with_capacity(dataset.len());
    for (i, task) in dataset.iter().enumerate() {
        let ep_seed = derive_seed(seed, "eval", &[i as u64]);
        let res = engine.run_episode(
            &task.id,
            &task.query,
            Some(&task.gold),
            params,
            stats,
            config,
            ep_seed,
        )?;
        let mut trajectory = res.trajectory;
        let reward = if res.terminated_by == Termination::Failed {
            0
        } else {
            judge(&trajectory.final_answer, &task.gold)
        };
        trajectory.reward = Some(reward);
        log.append(&trajectory, Some(&task.id))?;
        episodes.push(EvalEpisode {
            task_id: task.id.clone(),
            trajectory,
            terminated_by: res.terminated_by,
        });
    }
    log.flush()?;
    Ok(EvalOutcome {
        report: summarize(&episodes),
        episodes,
    })
}

pub fn summarize(episodes: &[EvalEpisode]) -> EvalReport {
    let n = episodes.len();
    let nf = n.max(1) as f64;
    let correct = episodes
        .iter()
        .filter(|e| e.trajectory.reward == Some(1))
        .count();
    let failed = episodes
        .iter()
        .filter(|e| e.terminated_by == Termination::Failed)
        .count();
    let total_cost: f64 = episodes.iter().map(|e| e.trajectory.total_cost).sum();
    EvalReport {
        n,
        correct,
        failed,
        accuracy: correct as f64 / nf,
        total_cost,
        mean_cost: total_cost / nf,
        mean_latency: episodes.iter().map(|e| e.trajectory.total_latency).sum::<f64>() / nf,
        mean_turns: episodes.iter().map(|e| e.trajectory.turns.len() as f64).sum::<f64>() / nf,
        early_stop_rate: episodes
            .iter()
            .filter(|e| e.terminated_by == Termination::EarlyStop)
            .count() as f64
            / nf,
    }
}

/// One histogram row: call counts per backend and their normalized shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub key: String,
    pub total: u64,
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    /// Column order of every row's `fractions`.
    pub models: Vec<String>,
    pub by_difficulty: Vec<HistogramRow>,
    pub by_role: Vec<HistogramRow>,
    /// Episodes whose task id did not join to the dataset.
    pub skipped: usize,
}

fn histogram_rows(
    counts: &BTreeMap<String, BTreeMap<String, u64>>,
    models: &[String],
) -> Vec<HistogramRow> {
    counts
        .iter()
        .map(|(key, per_model)| {
            let total: u64 = per_model.values().sum();
            let fractions = models
                .iter()
                .map(|m| per_model.get(m).copied().unwrap_or(0) as f64 / total as f64)
                .collect();
            HistogramRow {
                key: key.clone(),
                total,
                fractions,
            }
        })
        .collect()
}

/// Model-selection histograms by task difficulty and by role.
///
/// Episodes are joined to records by task id; records without a difficulty
/// tag contribute only to the per-role histogram.
pub fn routing_report(log: &[LogLine], dataset: &[TaskRecord]) -> RoutingReport {
    let by_id: HashMap<&str, &TaskRecord> = dataset.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut models = BTreeSet::new();
    let mut by_difficulty: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    let mut by_role: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    let mut skipped = 0;
    for line in log {
        let Some(task) = line.task_id.as_deref().and_then(|id| by_id.get(id)) else {
            skipped += 1;
            continue;
        };
        for call in &line.record.calls {
            let model = call.model.as_str().to_string();
            models.insert(model.clone());
            if let Some(d) = task.difficulty {
                *by_difficulty
                    .entry(format!("{d:03}"))
                    .or_default()
                    .entry(model.clone())
                    .or_default() += 1;
            }
            *by_role
                .entry(call.role.as_str().to_string())
                .or_default()
                .entry(model)
                .or_default() += 1;
        }
    }
    if skipped > 0 {
        tracing::warn!(skipped, "log episodes without a matching dataset record");
    }
    let models: Vec<String> = models.into_iter().collect();
    let mut by_difficulty = histogram_rows(&by_difficulty, &models);
    for row in &mut by_difficulty {
        row.key = row.key.trim_start_matches('0').to_string();
        if row.key.is_empty() {
            row.key = "0".into();
        }
    }
    RoutingReport {
        by_role: histogram_rows(&by_role, &models),
        by_difficulty,
        models,
        skipped,
    }
}

impl RoutingReport {
    fn table(&self, label: &str, rows: &[HistogramRow]) -> String {
        let mut out = format!("{label}\tcalls\t{}\n", self.models.join("\t"));
        for r in rows {
            let cells: Vec<String> = r.fractions.iter().map(|f| format!("{f:.4}")).collect();
            out.push_str(&format!("{}\t{}\t{}\n", r.key, r.total, cells.join("\t")));
        }
        out
    }

    /// Wide tables: one row per difficulty level / role, one column per backend.
    pub fn render(&self) -> String {
        format!(
            "{}\n{}",
            self.table("difficulty", &self.by_difficulty),
            self.table("role", &self.by_role)
        )
    }

    /// Long format for plotting: `group, key, model, fraction`.
    pub fn render_long(&self) -> String {
        let mut out = String::from("group\tkey\tmodel\tfraction\n");
        for (group, rows) in [("difficulty", &self.by_difficulty), ("role", &self.by_role)] {
            for r in rows {
                for (m, f) in self.models.iter().zip(&r.fractions) {
                    out.push_str(&format!("{group}\t{}\t{m}\t{f:.6}\n", r.key));
                }
            }
        }
        out
    }
}

pub const EASY_FAMILY: &str = "easy";
pub const HARD_FAMILY: &str = "hard";
/// Phrase present in every hard query; mock scripts key on it.
pub const HARD_MARKER: &str = "Multi-step nested evaluation";

fn easy_task<R: Rng>(rng: &mut R, id: String) -> TaskRecord {
    let a: i64 = rng.random_range(1..50);
    let b: i64 = rng.random_range(1..50);
    TaskRecord {
        id,
        query: format!("Quick sum: what is {a} + {b}?"),
        gold: (a + b).to_string(),
        difficulty: Some(1),
        family: Some(EASY_FAMILY.into()),
    }
}

fn hard_task<R: Rng>(rng: &mut R, id: String) -> TaskRecord {
    let mut draw = || rng.random_range(2..13i64);
    let (a, b, c, d, e) = (draw(), draw(), draw(), draw(), draw());
    TaskRecord {
        id,
        query: format!(
            "{HARD_MARKER} required, carry every intermediate product exactly: \
             compute (({a}*{b})-({c}*{d}))*{e}"
        ),
        gold: ((a * b - c * d) * e).to_string(),
        difficulty: Some(2),
        family: Some(HARD_FAMILY.into()),
    }
}

/// Easy two-term sums (difficulty 1) and nested products (difficulty 2), with
/// a `hard_fraction` share of hard tasks, interleaved by seeded shuffle.
pub fn synthetic_arithmetic(n: usize, hard_fraction: f64, seed: u64) -> Vec<TaskRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synthetic", &[]));
    let n_hard = (n as f64 * hard_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut kinds: Vec<bool> = (0..n).map(|i| i < n_hard).collect();
    kinds.shuffle(&mut rng);
    kinds
        .into_iter()
        .enumerate()
        .map(|(i, hard)| {
            let id = format!("arith-{i:05}");
            if hard {
                hard_task(&mut rng, id)
            } else {
                easy_task(&mut rng, id)
            }
        })
        .collect()
}

pub const PASS_TAG: &str = "[expect:pass]";
pub const FAIL_TAG: &str = "[expect:fail]";

/// Sums tagged with whether a mock backend is scripted to get them right;
/// a script rule matching [`FAIL_TAG`] answers `{wrong}`.
pub fn synthetic_scripted(n: usize, fail_fraction: f64, seed: u64) -> Vec<TaskRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "scripted", &[]));
    (0..n)
        .map(|i| {
            let fail = rng.random::<f64>() < fail_fraction;
            let a: i64 = rng.random_range(1..100);
            let b: i64 = rng.random_range(1..100);
            let tag = if fail { FAIL_TAG } else { PASS_TAG };
            TaskRecord {
                id: format!("scripted-{i:05}"),
                query: format!("Scripted check {tag}: add {a} + {b}"),
                gold: (a + b).to_string(),
                difficulty: None,
                family: Some(if fail { "scripted-fail" } else { "scripted-pass" }.into()),
            }
        })
        .collect()
}
