//! Operator commands: run directories and manifests, evaluation reports,
//! tree inspection, metric plots and run comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use toml::Table;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::{append_row, evaluate, EvalConfig, EvalReport, EvalRow, PolicyActor};
use crate::policy::Checkpoint;
use crate::rollout_tree::{load_forest, Node, NodeId, RolloutTree};
use crate::toy_env::{read_tasks, sample_tasks, Family, FeedbackRecord, Outcome, Program, Task};
use crate::trainer::{read_metrics, train, tree_dump_path, MetricsRecord, TrainOptions, TrainSummary};

/// Environment variable naming the directory under which runs are created
/// when no explicit output path is given.
pub const OUT_ROOT_ENV: &str = "MURPHY_OUT_ROOT";
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const EVAL_CSV: &str = "eval.csv";

fn now() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Training runs
// ---------------------------------------------------------------------------

/// Self-description of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub engine_version: String,
    pub env_seed: u64,
    pub sample_seed: u64,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// Artifact name to path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        serde_json::from_str(&read_file(&path)?)
            .map_err(|e| Error::parse(e.line(), format!("{}: {e}", path.display())))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(&run_dir.join(MANIFEST_FILE), text + "\n")
    }

    /// Recomputes the hash of the stored config and compares it.
    pub fn verify(&self, run_dir: &Path) -> Result<TrainConfig> {
        let text = read_file(&run_dir.join(CONFIG_FILE))?;
        let cfg = TrainConfig::resolve(None, Some(&text), Table::new())?;
        if cfg.hash() != self.config_hash {
            return Err(Error::Integrity(format!(
                "{}: stored config hashes to {}, manifest says {}",
                run_dir.display(),
                cfg.hash(),
                self.config_hash
            )));
        }
        Ok(cfg)
    }
}

pub fn run_id(cfg: &TrainConfig) -> String {
    format!(
        "{}-{}-e{}-s{}",
        cfg.mode.as_str(),
        &cfg.hash()[..8],
        cfg.env_seed,
        cfg.sample_seed
    )
}

#[derive(Debug, Clone, Default)]
pub struct TrainRequest {
    pub preset: Option<String>,
    pub config: Option<PathBuf>,
    /// Highest-precedence keys, e.g. seed overrides.
    pub overrides: Table,
    pub out: PathBuf,
    pub dump_trees: bool,
    pub resume: bool,
}

impl TrainRequest {
    pub fn resolve_config(&self) -> Result<TrainConfig> {
        let text = self.config.as_deref().map(read_file).transpose()?;
        TrainConfig::resolve(self.preset.as_deref(), text.as_deref(), self.overrides.clone())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub manifest: RunManifest,
    pub summary: TrainSummary,
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).display().to_string()
}

/// Validates the config, then trains into `req.out` and writes the stored
/// config and manifest next to the metrics and checkpoints.
pub fn cmd_train(req: &TrainRequest) -> Result<TrainOutcome> {
    let cfg = req.resolve_config()?;
    fs::create_dir_all(&req.out).map_err(|e| Error::io(&req.out, e))?;
    write_file(&req.out.join(CONFIG_FILE), cfg.to_toml())?;
    let mut manifest = RunManifest {
        run_id: run_id(&cfg),
        config_hash: cfg.hash(),
        engine_version: ENGINE_VERSION.to_string(),
        env_seed: cfg.env_seed,
        sample_seed: cfg.sample_seed,
        started_at: now(),
        finished_at: None,
        artifacts: BTreeMap::from([("config".to_string(), CONFIG_FILE.to_string())]),
    };
    manifest.save(&req.out)?;
    let summary = train(
        &cfg,
        &req.out,
        &TrainOptions {
            dump_trees: req.dump_trees,
            resume: req.resume,
        },
    )?;
    let root = &req.out;
    let mut put = |k: &str, p: &Path| {
        manifest.artifacts.insert(k.to_string(), relative(root, p));
    };
    put("metrics", &summary.metrics_path);
    put("timings", &summary.timings_path);
    put("checkpoints", &root.join("checkpoints"));
    put("final_checkpoint", &summary.final_checkpoint);
    if let Some(trees) = &summary.trees_dir {
        put("trees", trees);
    }
    manifest.finished_at = Some(now());
    manifest.save(&req.out)?;
    Ok(TrainOutcome {
        config: cfg,
        manifest,
        summary,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum TaskSource {
    File(PathBuf),
    Family { family: Family, seed: u64, count: usize },
}

impl TaskSource {
    pub fn load(&self) -> Result<Vec<Task>> {
        match self {
            TaskSource::File(path) => read_tasks(path),
            TaskSource::Family { family, seed, count } => Ok(sample_tasks(*seed, *family, *count)),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            TaskSource::File(path) => path.display().to_string(),
            TaskSource::Family { family, seed, count } => format!("{family}:seed={seed}:n={count}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub tasks: TaskSource,
    pub config: EvalConfig,
    pub label: String,
    /// Receives the JSON report and the `eval.csv` row. Defaults to the run
    /// directory owning the checkpoint.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub row: EvalRow,
    pub report_path: PathBuf,
    pub csv_path: PathBuf,
}

/// `run/checkpoints/step_x.ckpt` belongs to `run`; any other checkpoint
/// reports next to itself.
fn default_eval_dir(checkpoint: &Path) -> PathBuf {
    let parent = checkpoint.parent().unwrap_or(Path::new("."));
    match parent.file_name() {
        Some(name) if name == "checkpoints" => parent.parent().unwrap_or(parent).to_path_buf(),
        _ => parent.to_path_buf(),
    }
}

pub fn cmd_eval(req: &EvalRequest) -> Result<EvalOutcome> {
    req.config.validate()?;
    let ck = Checkpoint::load(&req.checkpoint)?;
    let tasks = req.tasks.load()?;
    let actor = PolicyActor {
        params: &ck.params,
        options: req.config.sampling(),
    };
    let report = evaluate(&actor, &tasks, &req.config)?;
    let out = req.out.clone().unwrap_or_else(|| default_eval_dir(&req.checkpoint));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let stem = req
        .checkpoint
        .file_stem()
        .map_or_else(|| "checkpoint".to_string(), |s| s.to_string_lossy().into_owned());
    let report_path = out.join(format!(
        "eval_{}_{stem}_k{}.json",
        req.label, req.config.max_iterations
    ));
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&report_path, json + "\n")?;
    let row = report.row(
        &req.label,
        &req.checkpoint.display().to_string(),
        &req.tasks.describe(),
    );
    let csv_path = out.join(EVAL_CSV);
    append_row(&csv_path, &row)?;
    Ok(EvalOutcome {
        report,
        row,
        report_path,
        csv_path,
    })
}

/// One line per iteration budget: `pass@1 (k iterations): mean ± stdev`.
pub fn format_report(report: &EvalReport) -> String {
    let mut s = String::new();
    for b in &report.budgets {
        let _ = writeln!(
            s,
            "pass@1 ({} iteration{}): {:.4} ± {:.4}",
            b.budget,
            if b.budget == 1 { "" } else { "s" },
            b.mean,
            b.stdev
        );
    }
    let _ = writeln!(
        s,
        "visible solves by iteration: {:?}, unsolved: {}",
        report.solved_at, report.unsolved
    );
    s
}

// ---------------------------------------------------------------------------
// Tree inspection
// ---------------------------------------------------------------------------

pub fn load_dumped_forest(run_dir: &Path, step: u64) -> Result<Vec<RolloutTree>> {
    let path = tree_dump_path(run_dir, step);
    if !path.exists() {
        return Err(Error::Config(format!(
            "no tree dump for step {step} at {}; rerun `train` with --dump-trees",
            path.display()
        )));
    }
    load_forest(&read_file(&path)?)
}

fn feedback_summary(f: &FeedbackRecord) -> String {
    let mut s = format!("{}/{} passed", f.passed, f.total);
    if let Some(first) = f.failures.first() {
        let got = match first.got {
            Outcome::Value(v) => v.to_string(),
            Outcome::Error(e) => e.to_string(),
        };
        let _ = write!(s, "; f({}) = {got}, expected {}", first.input, first.expected);
    }
    s
}

fn program_text(tokens: &[crate::toy_env::Token]) -> String {
    Program::new(tokens.to_vec())
        .map_or_else(|_| crate::toy_env::render_tokens(tokens), |p| p.to_string())
}

/// Indented rendering of one tree. Pruned generations are marked and, unless
/// `show_pruned`, their subtrees are elided.
pub fn render_tree(tree: &RolloutTree, show_pruned: bool) -> Result<String> {
    let mut out = format!(
        "tree {} (prompt {}, S = {}, schedule {:?}, credit {})\n",
        tree.task_id(),
        tree.prompt_id(),
        tree.max_turns(),
        tree.schedule(),
        if tree.credit_applied() { "applied" } else { "pending" }
    );
    render_prompt(tree, tree.root(), 1, show_pruned, &mut out)?;
    Ok(out)
}

fn render_prompt(tree: &RolloutTree, id: NodeId, depth: usize, show_pruned: bool, out: &mut String) -> Result<()> {
    let p = tree.prompt(id)?;
    let pad = "  ".repeat(depth - 1);
    let _ = writeln!(out, "{pad}prompt {id} turn {}{}", p.turn, if p.pruned { " [pruned]" } else { "" });
    if p.pruned && !show_pruned {
        return Ok(());
    }
    for &g in &p.child_generations {
        let Node::Generation(gen) = tree.node(g)? else {
            return Err(Error::Lookup(format!("{g} is not a generation")));
        };
        let reward = match gen.propagated_reward {
            Some(r) => format!("{:.3} -> {r:.3}", gen.raw_reward),
            None => format!("{:.3}", gen.raw_reward),
        };
        let _ = writeln!(
            out,
            "{pad}  gen {g} `{}` reward {reward}{}  ({})",
            program_text(&gen.tokens),
            if gen.pruned { " [pruned]" } else { "" },
            feedback_summary(&gen.feedback)
        );
        if let Some(child) = gen.child_prompt {
            if !gen.pruned || show_pruned {
                render_prompt(tree, child, depth + 2, show_pruned, out)?;
            }
        }
    }
    Ok(())
}

/// Renders the dumped tree of `task_id` at `step`, or the step's first tree.
pub fn cmd_inspect_tree(run_dir: &Path, step: u64, task_id: Option<&str>, show_pruned: bool) -> Result<String> {
    let forest = load_dumped_forest(run_dir, step)?;
    let tree = match task_id {
        Some(id) => forest.iter().find(|t| t.task_id() == id).ok_or_else(|| {
            let known: Vec<&str> = forest.iter().map(RolloutTree::task_id).collect();
            Error::Lookup(format!("no tree for task `{id}` at step {step}; dumped tasks: {}", known.join(", ")))
        })?,
        None => forest
            .first()
            .ok_or_else(|| Error::Config(format!("tree dump for step {step} is empty")))?,
    };
    render_tree(tree, show_pruned)
}

// ---------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------

pub const DEFAULT_PLOT_METRICS: &[&str] = &["turn1_reward", "best_reward", "solved_fraction", "objective"];

fn metric_value(r: &MetricsRecord, name: &str) -> Result<f64> {
    Ok(match name {
        "turn1_reward" => r.turn1_reward,
        "best_reward" => r.best_reward,
        "solved_fraction" => r.solved_fraction,
        "tree_solved_fraction" => r.tree_solved_fraction,
        "objective" => r.objective,
        "kl" => r.kl,
        "clip_frac" => r.clip_frac,
        "rollouts" => r.rollouts as f64,
        "updates" => r.updates as f64,
        "pruned" => r.pruned as f64,
        other => return Err(Error::Config(format!("unknown metric `{other}`"))),
    })
}

/// Label of a metrics file: its run directory name.
fn run_label(path: &Path) -> String {
    path.parent()
        .and_then(Path::file_name)
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(23, 190, 207),
];

/// One SVG panel per metric, one curve per run. Nothing is written unless
/// every input parses and has rows.
pub fn cmd_plot(metrics: &[PathBuf], out: &Path, names: &[String]) -> Result<()> {
    if metrics.is_empty() {
        return Err(Error::Config("plot needs at least one metrics CSV".into()));
    }
    if names.is_empty() {
        return Err(Error::Config("plot needs at least one metric".into()));
    }
    let mut runs = Vec::new();
    for path in metrics {
        let rows = read_metrics(path)?;
        if rows.is_empty() {
            return Err(Error::Config(format!("{} has no rows", path.display())));
        }
        runs.push((run_label(path), rows));
    }
    let mut series = Vec::new();
    for name in names {
        let curves = runs
            .iter()
            .map(|(label, rows)| {
                let pts = rows
                    .iter()
                    .map(|r| Ok((r.step as f64, metric_value(r, name)?)))
                    .collect::<Result<Vec<_>>>()?;
                Ok((label.clone(), pts))
            })
            .collect::<Result<Vec<_>>>()?;
        series.push((name.clone(), curves));
    }
    draw_panels(out, &series).map_err(|e| Error::Config(format!("plot {}: {e}", out.display())))
}

type Curves = Vec<(String, Vec<(f64, f64)>)>;

fn draw_panels(out: &Path, series: &[(String, Curves)]) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let height = 260 * series.len() as u32;
    let root = SVGBackend::new(out, (720, height)).into_drawing_area();
    root.fill(&WHITE)?;
    for (area, (name, curves)) in root.split_evenly((series.len(), 1)).iter().zip(series) {
        let pts = curves.iter().flat_map(|(_, p)| p.iter());
        let (mut x1, mut y0, mut y1) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if y1 - y0 < 1e-9 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let margin = 0.05 * (y1 - y0);
        let mut chart = ChartBuilder::on(area)
            .caption(name, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..x1, (y0 - margin)..(y1 + margin))?;
        chart.configure_mesh().x_desc("step").draw()?;
        for (i, (label, points)) in curves.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))?
                .label(label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
    }
    root.present()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

/// Rows averaged for the "final" solved fraction.
pub const FINAL_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run: String,
    pub mode: String,
    pub steps: usize,
    pub final_solved_fraction: f64,
    pub pass1_iter1: Option<f64>,
    pub pass1_iter3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Ranked by pass@1 at three iterations, then iteration one, then final
    /// solved fraction.
    pub runs: Vec<RunSummary>,
}

fn read_eval_rows(path: &Path) -> Result<Vec<EvalRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Integrity(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn summarize_run(run_dir: &Path) -> Result<RunSummary> {
    let manifest = RunManifest::load(run_dir)?;
    let cfg = manifest.verify(run_dir)?;
    let rows = read_metrics(&run_dir.join("metrics.csv"))?;
    if rows.is_empty() {
        return Err(Error::Config(format!("{}: metrics.csv has no rows", run_dir.display())));
    }
    let tail = &rows[rows.len().saturating_sub(FINAL_WINDOW)..];
    let final_solved = tail.iter().map(|r| r.solved_fraction).sum::<f64>() / tail.len() as f64;
    let evals = read_eval_rows(&run_dir.join(EVAL_CSV))?;
    let pass1_iter1 = evals.iter().rev().next().map(|r| r.pass1_iter1_mean);
    let pass1_iter3 = evals
        .iter()
        .rev()
        .find(|r| r.max_iterations == 3)
        .map(|r| r.pass1_mean);
    Ok(RunSummary {
        run: run_dir
            .file_name()
            .map_or_else(|| run_dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
        mode: cfg.mode.as_str().to_string(),
        steps: rows.len(),
        final_solved_fraction: final_solved,
        pass1_iter1,
        pass1_iter3,
    })
}

pub fn cmd_compare(run_dirs: &[PathBuf]) -> Result<Comparison> {
    if run_dirs.is_empty() {
        return Err(Error::Config("compare needs at least one run directory".into()));
    }
    let mut runs = run_dirs
        .iter()
        .map(|d| summarize_run(d))
        .collect::<Result<Vec<_>>>()?;
    let key = |o: Option<f64>| o.unwrap_or(f64::NEG_INFINITY);
    runs.sort_by(|a, b| {
        key(b.pass1_iter3)
            .total_cmp(&key(a.pass1_iter3))
            .then(key(b.pass1_iter1).total_cmp(&key(a.pass1_iter1)))
            .then(b.final_solved_fraction.total_cmp(&a.final_solved_fraction))
            .then(a.run.cmp(&b.run))
    });
    Ok(Comparison { runs })
}

impl std::fmt::Display for Comparison {
    /// Fixed-width table; `*` marks the best value of each numeric column.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let best = |get: &dyn Fn(&RunSummary) -> Option<f64>| {
            self.runs.iter().filter_map(get).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        };
        let getters: [&dyn Fn(&RunSummary) -> Option<f64>; 3] = [
            &|r| Some(r.final_solved_fraction),
            &|r| r.pass1_iter1,
            &|r| r.pass1_iter3,
        ];
        let bests: Vec<Option<f64>> = getters.iter().map(|g| best(*g)).collect();
        let width = self.runs.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
        writeln!(
            f,
            "{:<4} {:<width$}  {:<13}  {:>6}  {:>15}  {:>13}  {:>13}",
            "rank", "run", "mode", "steps", "final solved", "pass@1 iter-1", "pass@1 iter-3"
        )?;
        for (i, r) in self.runs.iter().enumerate() {
            let cells: Vec<String> = getters
                .iter()
                .zip(&bests)
                .map(|(g, b)| match g(r) {
                    Some(v) => format!("{v:.4}{}", if Some(v) == *b { "*" } else { " " }),
                    None => "-".to_string(),
                })
                .collect();
            writeln!(
                f,
                "{:<4} {:<width$}  {:<13}  {:>6}  {:>15}  {:>13}  {:>13}",
                i + 1,
                r.run,
                r.mode,
                r.steps,
                cells[0],
                cells[1],
                cells[2]
            )?;
        }
        Ok(())
    }
}
