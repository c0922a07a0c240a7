use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use murphy_core::config::{parse_overrides, PRESETS};
use murphy_core::error::{Error, Result};
use murphy_core::eval::EvalConfig;
use murphy_core::reporting::{
    cmd_compare, cmd_eval, cmd_inspect_tree, cmd_plot, cmd_train, format_report, run_id, EvalRequest,
    TaskSource, TrainRequest, DEFAULT_PLOT_METRICS, OUT_ROOT_ENV,
};
use murphy_core::toy_env::Family;

/// Multi-turn GRPO with feedback-conditioned rollout trees on a toy
/// program-synthesis task.
#[derive(Parser)]
#[command(name = "murphy", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write a self-describing run directory.
    Train(TrainArgs),
    /// Reflexion-style pass@1 evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Print a dumped rollout tree.
    InspectTree(InspectArgs),
    /// Plot metric curves of one or more runs as SVG.
    Plot(PlotArgs),
    /// Rank runs by evaluation results and final solved fraction.
    Compare(CompareArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Named preset applied before the config file.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: Option<String>,
    /// TOML config file; its keys override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory. Defaults to `$MURPHY_OUT_ROOT/<run id>` (or `runs/<run id>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sets both env_seed and sample_seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    env_seed: Option<u64>,
    #[arg(long)]
    sample_seed: Option<u64>,
    /// Extra config override, repeatable; the value is TOML.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Write every step's rollout trees as JSONL.
    #[arg(long)]
    dump_trees: bool,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// JSONL task file; without it tasks are sampled from --family.
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long, default_value = "hidden_offset", conflicts_with = "tasks")]
    family: String,
    #[arg(long, default_value_t = 4242, conflicts_with = "tasks")]
    task_seed: u64,
    #[arg(long, default_value_t = 200, conflicts_with = "tasks")]
    count: usize,
    /// Iteration budget.
    #[arg(long, default_value_t = 3)]
    iters: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0.6)]
    temperature: f64,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Row label; defaults to the run directory name.
    #[arg(long)]
    label: Option<String>,
    /// Report directory; defaults to the checkpoint's run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    run_dir: PathBuf,
    #[arg(long)]
    step: u64,
    /// Task id; defaults to the first tree of the step.
    #[arg(long)]
    task: Option<String>,
    /// Also expand the subtrees of pruned generations.
    #[arg(long)]
    show_pruned: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Metrics CSV files or run directories.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// SVG path; defaults to `$MURPHY_OUT_ROOT/plot.svg`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metric column to plot, repeatable.
    #[arg(long = "metric")]
    metrics: Vec<String>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(required = true)]
    run_dirs: Vec<PathBuf>,
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn train(args: TrainArgs) -> Result<()> {
    if args.preset.is_none() && args.config.is_none() {
        return Err(Error::Config("give --preset, --config or both".into()));
    }
    let mut pairs = args.set.clone();
    let seeds = [
        ("env_seed", args.env_seed.or(args.seed)),
        ("sample_seed", args.sample_seed.or(args.seed)),
    ];
    for (key, value) in seeds {
        if let Some(v) = value {
            pairs.push(format!("{key}={v}"));
        }
    }
    let mut req = TrainRequest {
        preset: args.preset,
        config: args.config,
        overrides: parse_overrides(&pairs)?,
        out: PathBuf::new(),
        dump_trees: args.dump_trees,
        resume: args.resume,
    };
    req.out = match args.out {
        Some(out) => out,
        None => out_root().join(run_id(&req.resolve_config()?)),
    };
    let run = cmd_train(&req)?;
    println!("run {} -> {}", run.manifest.run_id, req.out.display());
    if let Some(last) = run.summary.metrics.last() {
        println!(
            "step {}: turn-1 reward {:.4}, best reward {:.4}, solved fraction {:.4}",
            last.step, last.turn1_reward, last.best_reward, last.solved_fraction
        );
    }
    println!("final checkpoint {}", run.summary.final_checkpoint.display());
    Ok(())
}

fn run_name(checkpoint: &Path) -> String {
    let dir = checkpoint.parent().filter(|p| p.ends_with("checkpoints")).and_then(Path::parent);
    dir.and_then(Path::file_name)
        .or_else(|| checkpoint.file_stem())
        .map_or_else(|| "eval".to_string(), |n| n.to_string_lossy().into_owned())
}

fn eval(args: EvalArgs) -> Result<()> {
    let tasks = match args.tasks {
        Some(path) => TaskSource::File(path),
        None => TaskSource::Family {
            family: args.family.parse::<Family>()?,
            seed: args.task_seed,
            count: args.count,
        },
    };
    let req = EvalRequest {
        label: args.label.unwrap_or_else(|| run_name(&args.checkpoint)),
        checkpoint: args.checkpoint,
        tasks,
        config: EvalConfig {
            max_iterations: args.iters,
            repetitions: args.reps,
            temperature: args.temperature,
            top_p: args.top_p,
            seed: args.seed,
        },
        out: args.out,
    };
    let out = cmd_eval(&req)?;
    print!("{}", format_report(&out.report));
    println!("report {}", out.report_path.display());
    println!("row appended to {}", out.csv_path.display());
    Ok(())
}

fn plot(args: PlotArgs) -> Result<()> {
    let inputs: Vec<PathBuf> = args
        .inputs
        .into_iter()
        .map(|p| if p.is_dir() { p.join("metrics.csv") } else { p })
        .collect();
    let metrics = if args.metrics.is_empty() {
        DEFAULT_PLOT_METRICS.iter().map(|s| s.to_string()).collect()
    } else {
        args.metrics
    };
    let out = args.out.unwrap_or_else(|| out_root().join("plot.svg"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    }
    cmd_plot(&inputs, &out, &metrics)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::InspectTree(a) => {
            cmd_inspect_tree(&a.run_dir, a.step, a.task.as_deref(), a.show_pruned).map(|s| print!("{s}"))
        }
        Command::Plot(a) => plot(a),
        Command::Compare(a) => cmd_compare(&a.run_dirs).map(|c| print!("{c}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
