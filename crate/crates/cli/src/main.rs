//! Command-line front end: pretraining, single adaptation steps, the full
//! protocol, ablation sweeps, the standalone escape solver, and config
//! inspection. Every command is reproducible: (config, seed) fully
//! determines all outputs.
//!
//! Exit codes: 0 success, 2 configuration error, 3 training divergence,
//! 4 protocol-invariant violation, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use triadapt::checkpoint::Checkpoint;
use triadapt::config::RunConfig;
use triadapt::data;
use triadapt::error::Error;
use triadapt::escape::{self, Centroid, EscapeSolverOpts, EscapeTarget, GeometrySnapshot};
use triadapt::harness::{self, EngineMode, SlidingWindowPlan, SweepParameter};
use triadapt::model::Model;
use triadapt::report;

/// Environment variable naming the default output root (default `./runs`).
const OUT_ROOT_ENV: &str = "TRIADAPT_OUT_ROOT";

#[derive(Parser)]
#[command(name = "triadapt", version, about = "Continual learning-unlearning engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Adaptation engine.
    #[arg(long, default_value = "bid")]
    mode: String,
    /// Output directory (default: output root / config stem).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Trains the initial model on the plan's starting window and writes a
    /// checkpoint.
    Pretrain {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Runs one CLU step from a checkpoint and persists the merged model
    /// plus its metrics report.
    Adapt {
        #[command(flatten)]
        common: CommonOpts,
        /// Checkpoint produced by `pretrain` or a previous `adapt`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task index to run (checkpoint must be at task - 1).
        #[arg(long)]
        task: usize,
    },
    /// Runs the full multi-task protocol and writes per-task artifacts plus
    /// the aggregate CSV.
    Protocol {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Runs an ablation sweep and writes its table.
    Sweep {
        #[command(flatten)]
        common: CommonOpts,
        /// One of: rank, buffer_ratio, lambda_esc, pathway_gate.
        #[arg(long)]
        parameter: String,
        /// Comma-separated values (ignored for pathway_gate).
        #[arg(long, default_value = "")]
        values: String,
        /// Parallel value runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Solves the escape direction for a centroid file and writes the
    /// geometry export.
    Escape {
        /// CSV rows: class_id, then the centroid coordinates.
        #[arg(long)]
        centroids: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        lambda: f64,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 16)]
        restarts: usize,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Geometry output file (default `escape_geometry.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Configuration helpers.
    Config {
        /// Prints the default configuration as TOML.
        #[arg(long, default_value_t = false)]
        print_defaults: bool,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Training { .. } => 3,
        Error::InvariantViolation(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain { common } => cmd_pretrain(&common),
        Command::Adapt {
            common,
            checkpoint,
            task,
        } => cmd_adapt(&common, &checkpoint, task),
        Command::Protocol { common } => cmd_protocol(&common),
        Command::Sweep {
            common,
            parameter,
            values,
            jobs,
        } => cmd_sweep(&common, &parameter, &values, jobs),
        Command::Escape {
            centroids,
            lambda,
            iters,
            restarts,
            step,
            seed,
            out,
        } => cmd_escape(&centroids, lambda, iters, restarts, step, seed, out.as_deref()),
        Command::Config { print_defaults } => cmd_config(print_defaults),
    }
}

fn load_config(common: &CommonOpts) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &CommonOpts, cfg: &RunConfig) -> PathBuf {
    if let Some(out) = &common.out {
        return out.clone();
    }
    if let Some(out) = &cfg.output {
        return PathBuf::from(out);
    }
    let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "runs".into());
    let stem = common
        .config
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "run".into());
    Path::new(&root).join(stem)
}

fn parse_mode(common: &CommonOpts) -> Result<EngineMode, Error> {
    common.mode.parse()
}

fn cmd_pretrain(common: &CommonOpts) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, &cfg);
    let dataset = data::generate::<f64>(&cfg.dataset);
    let plan = SlidingWindowPlan::from_config(&cfg.plan)?;
    let (model, trace) = harness::pretrain_initial(&cfg, &dataset, &plan)?;
    let pre_dir = dir.join("pretrain");
    std::fs::create_dir_all(&pre_dir)?;
    Checkpoint::capture(&model, &cfg, 0).save(&pre_dir.join("checkpoint.bin"))?;
    let log: String = trace
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{{\"batch\":{i},\"loss\":{l}}}\n"))
        .collect();
    std::fs::write(pre_dir.join("log.jsonl"), log)?;
    println!(
        "pretrained on classes {:?}; checkpoint at {}",
        plan.initial_classes,
        pre_dir.join("checkpoint.bin").display()
    );
    Ok(())
}

fn cmd_adapt(common: &CommonOpts, checkpoint: &Path, task: usize) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let mode = parse_mode(common)?;
    let dir = out_dir(common, &cfg);
    let ck = Checkpoint::load(checkpoint)?;
    if ck.task_index + 1 != task {
        return Err(Error::Config(format!(
            "checkpoint is at task {}, cannot run task {task} (expected task {})",
            ck.task_index,
            ck.task_index + 1
        )));
    }
    let mut student: Model<f64> = ck.restore()?;
    let dataset = data::generate::<f64>(&cfg.dataset);
    let plan = SlidingWindowPlan::from_config(&cfg.plan)?;
    if task == 0 || task > plan.tasks.len() {
        return Err(Error::Config(format!(
            "task {task} outside plan (1..={})",
            plan.tasks.len()
        )));
    }
    let oracle_dir = dir.join("oracles");
    std::fs::create_dir_all(&oracle_dir)?;
    let outcome = harness::run_task(
        &mut student,
        &plan,
        task - 1,
        &dataset,
        mode,
        &cfg,
        Some(&oracle_dir),
    )?;
    let task_dir = dir.join(format!("task_{task}"));
    std::fs::create_dir_all(&task_dir)?;
    Checkpoint::capture(&student, &cfg, task).save(&task_dir.join("checkpoint.bin"))?;
    report::write_report_json(&outcome.report, &task_dir.join("report.json"))?;
    outcome.step.write_jsonl(&task_dir.join("log.jsonl"))?;
    println!("{}", serde_summary(&outcome.report)?);
    Ok(())
}

fn cmd_protocol(common: &CommonOpts) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let mode = parse_mode(common)?;
    let dir = out_dir(common, &cfg);
    std::fs::create_dir_all(&dir)?;
    let dataset = data::generate::<f64>(&cfg.dataset);
    let plan = SlidingWindowPlan::from_config(&cfg.plan)?;

    // Reuse an existing pretraining checkpoint; train one otherwise.
    let pre_path = dir.join("pretrain").join("checkpoint.bin");
    let pretrained: Model<f64> = if pre_path.exists() {
        Checkpoint::load(&pre_path)?.restore()?
    } else {
        let (model, _) = harness::pretrain_initial(&cfg, &dataset, &plan)?;
        std::fs::create_dir_all(pre_path.parent().unwrap())?;
        Checkpoint::capture(&model, &cfg, 0).save(&pre_path)?;
        model
    };

    let artifacts = harness::run_protocol(&pretrained, &dataset, mode, &cfg, Some(&dir))?;
    for r in &artifacts.reports {
        println!("{}", serde_summary(r)?);
    }
    artifacts.check_invariants(&plan)?;
    verify_final_task_determinism(&dir, &plan, &dataset, &cfg)?;
    println!("aggregate written to {}", dir.join("aggregate.csv").display());
    Ok(())
}

/// Reloads the final task's checkpoint, recomputes its metrics, and demands
/// an exact match with the persisted report.
fn verify_final_task_determinism(
    dir: &Path,
    plan: &SlidingWindowPlan,
    dataset: &data::SyntheticDataset<f64>,
    cfg: &RunConfig,
) -> Result<(), Error> {
    let Some(task) = plan.tasks.last() else {
        return Ok(());
    };
    let task_dir = dir.join(format!("task_{}", task.index));
    let stored = report::read_report_json(&task_dir.join("report.json"))?;
    let student: Model<f64> = Checkpoint::load(&task_dir.join("checkpoint.bin"))?.restore()?;
    let (oracle, _) = harness::train_oracle(task, dataset, cfg, Some(&dir.join("oracles")))?;
    let recomputed = harness::evaluate_task_metrics(
        &student,
        &oracle,
        plan,
        task,
        dataset,
        cfg,
        stored.tunable_ratio,
    )?;
    if recomputed != stored {
        return Err(Error::InvariantViolation(format!(
            "determinism check failed for task {}: reloaded checkpoint reproduces {recomputed:?}, \
             stored report is {stored:?}",
            task.index
        )));
    }
    Ok(())
}

fn cmd_sweep(common: &CommonOpts, parameter: &str, values: &str, jobs: usize) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, &cfg);
    let param: SweepParameter = parameter.parse()?;
    let parsed: Vec<f64> = if values.trim().is_empty() {
        Vec::new()
    } else {
        values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad sweep value '{v}': {e}")))
            })
            .collect::<Result<_, _>>()?
    };
    if parsed.is_empty() && param != SweepParameter::PathwayGate {
        return Err(Error::Config(
            "sweep requires --values for this parameter".into(),
        ));
    }
    let rows = harness::sweep::<f64>(param, &parsed, &cfg, jobs, Some(&dir))?;
    print!("{}", report::sweep_csv(&rows));
    Ok(())
}

fn cmd_escape(
    centroid_file: &Path,
    lambda: f64,
    iters: usize,
    restarts: usize,
    step: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), Error> {
    let centroids = read_centroid_file(centroid_file)?;
    let opts = EscapeSolverOpts {
        iters,
        step,
        restarts,
        seed,
        smoothing_temperature: None,
    };
    let dir = escape::solve_escape_direction(&centroids, &opts)?;
    println!(
        "direction: [{}]",
        dir.direction
            .iter()
            .map(|v| format!("{v:.9}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    println!("minimax_value: {:.9}", dir.minimax_value);
    let target = EscapeTarget::from_direction(dir, lambda)?;
    println!(
        "escape_point (lambda {lambda}): [{}]",
        target
            .point
            .iter()
            .map(|v| format!("{v:.9}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("escape_geometry.csv"));
    escape::export_geometry(
        GeometrySnapshot {
            centroids: &centroids,
            embeddings: &[],
        },
        GeometrySnapshot::<f64>::empty(),
        &target,
        &out_path,
    )?;
    println!("geometry written to {}", out_path.display());
    Ok(())
}

fn read_centroid_file(path: &Path) -> Result<Vec<Centroid<f64>>, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut centroids = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::Config(format!(
                "{}:{}: need class_id plus at least one coordinate",
                path.display(),
                lineno + 1
            )));
        }
        let class_id: usize = fields[0].parse().map_err(|e| {
            Error::Config(format!("{}:{}: bad class id: {e}", path.display(), lineno + 1))
        })?;
        let vector: Result<Vec<f64>, Error> = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| {
                    Error::Config(format!(
                        "{}:{}: bad coordinate '{f}': {e}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect();
        centroids.push(Centroid {
            class_id,
            vector: vector?,
            sample_count: 1,
        });
    }
    if centroids.is_empty() {
        return Err(Error::Config(format!(
            "no centroids found in {}",
            path.display()
        )));
    }
    Ok(centroids)
}

fn cmd_config(print_defaults: bool) -> Result<(), Error> {
    if print_defaults {
        print!("{}", RunConfig::default().to_toml()?);
    } else {
        println!("use --print-defaults to emit the default configuration");
    }
    Ok(())
}

fn serde_summary(report: &triadapt::metrics::MetricsReport) -> Result<String, Error> {
    Ok(format!(
        "task {}: acc_f={:.3} acc_r={:.3} acc_n={:.3} acc_o={:.3} kl={:.3} mia={:.3} tunable={:.4}",
        report.task,
        report.acc_f,
        report.acc_r,
        report.acc_n,
        report.acc_o,
        report.kl_to_oracle,
        report.mia_rate,
        report.tunable_ratio
    ))
}
