use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conductor_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use conductor_core::conductor::{ConductorConfig, Engine};
use conductor_core::config::{load_config, RunConfig};
use conductor_core::confidence::RunningStats;
use conductor_core::cost::{PriceConfig, PriceTable};
use conductor_core::harness::{
    evaluate, load_dataset, routing_report, split, synthetic_arithmetic, synthetic_scripted,
    write_dataset, EvalReport, TaskRecord,
};
use conductor_core::policy::PolicyParams;
use conductor_core::state::{read_log, Trajectory, TrajectoryLog};
use conductor_core::trainer::{render_curve, Trainer, TrainingConfig};
use conductor_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "conductor", version, about = "Cost-aware multi-agent role and model routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the routers on a dataset; writes per-epoch checkpoints and a training curve.
    Train(TrainArgs),
    /// Evaluate a checkpoint greedily; prints the report and writes the trajectory log.
    Eval(EvalArgs),
    /// Route a single query and print its trajectory.
    Route(RouteArgs),
    /// Model-selection histograms from a trajectory log.
    Report(ReportArgs),
    /// Price-table utilities.
    Price {
        #[command(subcommand)]
        command: PriceCommand,
    },
    /// Grid over lambda, theta and turn cap; trains and evaluates every cell.
    Sweep(SweepArgs),
    /// Write a synthetic dataset with a 4:1 train/test split.
    Synth(SynthArgs),
}

#[derive(Subcommand)]
enum PriceCommand {
    /// Fit the scaling exponent and impute missing prices.
    Fit {
        /// Run config whose price table to use; the built-in table otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Training records; defaults to `paths.dataset` of the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training-curve output; defaults to `<checkpoint_dir>/curve.tsv`.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// Parameters to evaluate; seeded initial parameters otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Trajectory log output; defaults to `<log_dir>/eval.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Send every call to the large backend (model-router ablation).
    #[arg(long)]
    force_large: bool,
}

#[derive(Args)]
struct RouteArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    query: String,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Emit the plot-ready long format instead of wide tables.
    #[arg(long)]
    long: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    theta: Vec<f64>,
    #[arg(long = "turns", value_delimiter = ',')]
    turns: Vec<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// `arithmetic` (easy/hard families) or `scripted` (pass/fail tags).
    #[arg(long, default_value = "arithmetic")]
    family: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Share of hard (arithmetic) or failing (scripted) tasks.
    #[arg(long, default_value_t = 0.2)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_config() || matches!(e, Error::CheckpointVersion { .. } | Error::Checkpoint(_)) {
            EXIT_CONFIG
        } else {
            EXIT_RUNTIME
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Route(a) => route(a),
        Command::Report(a) => report(a),
        Command::Price {
            command: PriceCommand::Fit { config },
        } => price_fit(config.as_deref()),
        Command::Sweep(a) => sweep(a),
        Command::Synth(a) => synth(a),
    }
}

fn dataset_path(arg: Option<PathBuf>, cfg: &RunConfig) -> CliResult<PathBuf> {
    arg.or_else(|| cfg.paths.dataset.clone())
        .ok_or_else(|| usage("no dataset given (use --dataset or set paths.dataset)"))
}

fn load_params(
    checkpoint: Option<&Path>,
    engine: &Engine,
    training: &TrainingConfig,
) -> CliResult<(PolicyParams, RunningStats)> {
    match checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            ckpt.params.validate(engine.dim(), engine.pool.len())?;
            Ok((ckpt.params, ckpt.stats))
        }
        None => Ok((
            engine.init_params(training.d_lat, training.seed),
            RunningStats::default(),
        )),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn train(a: TrainArgs) -> CliResult {
    let cfg = load_config(&a.config)?;
    let data = load_dataset(&dataset_path(a.dataset, &cfg)?)?;
    let engine = cfg.build_engine()?;
    let mut training = cfg.training_config();
    if let Some(e) = a.epochs {
        training.epochs = e;
    }
    let seed = training.seed;
    let large = cfg.large_backend(&engine.prices)?;
    let trainer = Trainer::new(&engine, &cfg.conductor_config(), training, Some(large))?;
    let mut state = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.seed != seed {
                return Err(usage(format!(
                    "checkpoint seed {} differs from config seed {seed}",
                    ckpt.seed
                )));
            }
            ckpt.into_state()
        }
        None => trainer.init_state(),
    };
    let ckpt_dir = cfg.paths.checkpoint_dir.clone();
    let curve = trainer.train(&mut state, &data, |st, epoch| {
        let path = ckpt_dir.join(format!("epoch-{epoch:03}.json"));
        save_checkpoint(&Checkpoint::from_state(st, seed), &path)
    })?;
    let final_path = ckpt_dir.join("final.json");
    save_checkpoint(&Checkpoint::from_state(&state, seed), &final_path)?;
    let curve_path = a.curve.unwrap_or_else(|| ckpt_dir.join("curve.tsv"));
    let mut out = create(&curve_path)?;
    out.write_all(render_curve(&curve).as_bytes())?;
    out.flush()?;
    if let Some(last) = curve.last() {
        println!(
            "trained {} batches; last batch mean_return {:.4} accuracy {:.3}",
            state.step, last.mean_return, last.accuracy
        );
    }
    println!("checkpoint: {}", final_path.display());
    println!("curve: {}", curve_path.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let cfg = load_config(&a.config)?;
    let data = load_dataset(&dataset_path(a.dataset, &cfg)?)?;
    let engine = cfg.build_engine()?;
    let (params, mut stats) = load_params(a.checkpoint.as_deref(), &engine, &cfg.training_config())?;
    let mut conductor = cfg.conductor_config();
    conductor.mode = conductor_core::conductor::RoutingMode::Greedy;
    if a.force_large {
        conductor.force_model = Some(cfg.large_backend(&engine.prices)?);
    }
    let log_path = a.log.unwrap_or_else(|| cfg.paths.log_dir.join("eval.jsonl"));
    let mut log = TrajectoryLog::new(create(&log_path)?);
    let outcome = evaluate(&engine, &params, &mut stats, &data, &conductor, cfg.seed, &mut log)?;
    print!("{}", outcome.report.render());
    println!("log: {}", log_path.display());
    Ok(())
}

fn print_trajectory(t: &Trajectory) {
    println!("query: {}", t.query);
    for turn in &t.turns {
        let roles: Vec<String> = turn
            .roles
            .iter()
            .map(|r| format!("{} ({:.3})", r.role, r.prob))
            .collect();
        println!("turn {}: {}", turn.turn, roles.join(", "));
        if turn.early_stop {
            println!("  early stop");
        }
        for c in &turn.calls {
            println!(
                "  {} -> {} p={:.3} conf={:.3} tokens={}/{} cost=${:.6} answer={}",
                c.role,
                c.model,
                c.model_prob,
                c.conf_adj,
                c.tokens_in,
                c.tokens_out,
                c.cost,
                c.answer.as_deref().unwrap_or("-")
            );
        }
    }
    println!("total cost: ${:.6}", t.total_cost + 0.0);
    println!("final answer: {}", t.final_answer);
}

fn route(a: RouteArgs) -> CliResult {
    let cfg = load_config(&a.config)?;
    let engine = cfg.build_engine()?;
    let (params, mut stats) = load_params(a.checkpoint.as_deref(), &engine, &cfg.training_config())?;
    let mut conductor = cfg.conductor_config();
    conductor.mode = conductor_core::conductor::RoutingMode::Greedy;
    let res = engine.run_episode("route", &a.query, None, &params, &mut stats, &conductor, cfg.seed)?;
    print_trajectory(&res.trajectory);
    if let Some(f) = &res.trajectory.failure {
        return Err(Failure {
            code: EXIT_RUNTIME,
            message: format!("episode failed: {f}"),
        });
    }
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    let lines = read_log(BufReader::new(File::open(&a.log)?))?;
    let data = load_dataset(&a.dataset)?;
    let rep = routing_report(&lines, &data);
    if a.long {
        print!("{}", rep.render_long());
    } else {
        print!("{}", rep.render());
    }
    if rep.skipped > 0 {
        eprintln!("skipped {} log lines without a matching record", rep.skipped);
    }
    Ok(())
}

fn price_fit(config: Option<&Path>) -> CliResult {
    let prices = match config {
        Some(p) => load_config(p)?.prices,
        None => PriceConfig::default(),
    };
    let table = PriceTable::from_config(&prices)?;
    match table.alpha() {
        Some(alpha) => println!(
            "alpha = {alpha:.2} (full precision {alpha:.4}) from {} / {}",
            prices.fit_pair[0], prices.fit_pair[1]
        ),
        None => println!("alpha = n/a (no fit pair)"),
    }
    println!("base = {}", table.base());
    print!("{}", table.render_table());
    for e in table.entries().filter(|e| table.is_imputed(&e.model)) {
        println!("{} = {:.2} (imputed)", e.model, e.price_in);
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> CliResult {
    let cfg = load_config(&a.config)?;
    let train_data = load_dataset(&a.train)?;
    let test_data = load_dataset(&a.test)?;
    let base_training = cfg.training_config();
    let base_conductor = cfg.conductor_config();
    let lambdas = if a.lambda.is_empty() { vec![base_training.lambda] } else { a.lambda };
    let thetas = if a.theta.is_empty() { vec![base_conductor.theta] } else { a.theta };
    let turns = if a.turns.is_empty() { vec![base_conductor.max_turns] } else { a.turns };
    let large = cfg.large_backend(&PriceTable::from_config(&cfg.prices)?)?;

    println!("lambda\ttheta\tturns\t{}", EvalReport::header());
    for &lambda in &lambdas {
        for &theta in &thetas {
            for &max_turns in &turns {
                let engine = cfg.build_engine()?;
                let training = TrainingConfig {
                    lambda,
                    ..base_training.clone()
                };
                let conductor = ConductorConfig {
                    theta,
                    max_turns,
                    ..base_conductor.clone()
                };
                let trainer = Trainer::new(&engine, &conductor, training, Some(large.clone()))?;
                let mut state = trainer.init_state();
                trainer.train(&mut state, &train_data, |_, _| Ok(()))?;
                let mut eval_conductor = conductor.clone();
                eval_conductor.mode = conductor_core::conductor::RoutingMode::Greedy;
                let mut stats = state.stats.clone();
                let outcome = evaluate(
                    &engine,
                    &state.params,
                    &mut stats,
                    &test_data,
                    &eval_conductor,
                    cfg.seed,
                    &mut TrajectoryLog::new(std::io::sink()),
                )?;
                println!("{lambda}\t{theta}\t{max_turns}\t{}", outcome.report.row());
            }
        }
    }
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult {
    let records: Vec<TaskRecord> = match a.family.as_str() {
        "arithmetic" => synthetic_arithmetic(a.n, a.fraction, a.seed),
        "scripted" => synthetic_scripted(a.n, a.fraction, a.seed),
        other => return Err(usage(format!("unknown family {other}"))),
    };
    let (train, test) = split(&records, (4, 1), a.seed)?;
    std::fs::create_dir_all(&a.out_dir)?;
    for (name, set) in [("all", &records), ("train", &train), ("test", &test)] {
        let path = a.out_dir.join(format!("{name}.jsonl"));
        let mut out = create(&path)?;
        write_dataset(&mut out, set)?;
        out.flush()?;
        println!("{}: {} records", path.display(), set.len());
    }
    Ok(())
}
