//! Training loop: snapshot, tree rollouts, pruning and credit, objective
//! ascent, checkpoints and the metrics log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Init, Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::objective::{
    grpo_loss_and_grad, murphy_loss_and_grad, simple_loss_and_grad, GrpoGroup, GrpoSample,
    ObjectiveOutput,
};
use crate::optim::{Moments, Optimizer};
use crate::policy::{Checkpoint, PolicyParams, RngState, SamplingOptions, Snapshot};
use crate::pruning::prune_and_propagate;
use crate::rollout_tree::{dump_forest, GenerationRecord, RolloutTree};
use crate::seed::derive_seed;
use crate::toy_env::{evaluate, read_tasks, sample_task, Suite, Task, PROGRAM_LEN};

/// Stream tags keeping the task and sampling seed streams apart.
const TASK_STREAM: u64 = 0x7461_736b;
const SAMPLE_STREAM: u64 = 0x726f_6c6c;
const PROBE_STREAM: u64 = 0x7072_6f62;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub turn1_reward: f64,
    pub best_reward: f64,
    /// Fraction of tasks where some turn-1 sample passes the train suite.
    pub solved_fraction: f64,
    /// Fraction of tasks solved anywhere in the tree.
    pub tree_solved_fraction: f64,
    pub objective: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub rollouts: usize,
    pub updates: usize,
    pub pruned: usize,
    /// Kept out of the metrics CSV so reruns compare byte for byte; written to
    /// `timings.csv` instead.
    #[serde(skip)]
    pub wall_seconds: f64,
}

pub const METRICS_COLUMNS: &[&str] = &[
    "step",
    "turn1_reward",
    "best_reward",
    "solved_fraction",
    "tree_solved_fraction",
    "objective",
    "kl",
    "clip_frac",
    "rollouts",
    "updates",
    "pruned",
];

/// The initial policy, which is also the KL reference.
pub fn initial_params(cfg: &TrainConfig) -> Result<PolicyParams> {
    match cfg.init {
        Init::Uniform => PolicyParams::zeros(cfg.buckets, PROGRAM_LEN),
        Init::Syntax => PolicyParams::syntax_prior(cfg.buckets, PROGRAM_LEN),
    }
}

/// Tasks of one step: resampled from the seeded generator, or cycled from the
/// task file in fixed-epoch mode.
pub fn step_tasks(cfg: &TrainConfig, step: u64, pool: Option<&[Task]>) -> Vec<Task> {
    (0..cfg.tasks_per_step)
        .map(|i| match pool {
            Some(pool) => {
                let k = (step as usize * cfg.tasks_per_step + i) % pool.len();
                pool[k].clone()
            }
            None => sample_task(
                derive_seed(&[cfg.env_seed, TASK_STREAM, step, i as u64]),
                cfg.family,
            ),
        })
        .collect()
}

fn sample_records(
    task: &Task,
    tree: &RolloutTree,
    prompt: crate::rollout_tree::NodeId,
    policy: &PolicyParams,
    count: usize,
    seed: u64,
) -> Result<Vec<GenerationRecord>> {
    let ctx = policy.encode(&tree.prompt(prompt)?.context);
    policy
        .sample(ctx, count, SamplingOptions::training(), seed)?
        .into_iter()
        .map(|s| {
            let (reward, feedback) = evaluate(task, &s.tokens, Suite::Train)?;
            Ok(GenerationRecord {
                tokens: s.tokens,
                logprobs: s.logprobs,
                reward,
                feedback,
            })
        })
        .collect()
}

/// Grows one tree turn by turn. Each prompt's group is sampled with a seed
/// derived from `(base, prompt node id)`, so the tree does not depend on the
/// order in which prompts are visited.
fn grow_tree(task: &Task, schedule: &[usize], policy: &Snapshot, base: u64) -> Result<RolloutTree> {
    let turns = schedule.len();
    let mut tree = RolloutTree::with_prompt(task.id.clone(), task.prompt_id(), schedule.to_vec(), turns)?;
    tree.set_policy_version(policy.version());
    let mut frontier = vec![tree.root()];
    for turn in 1..=turns {
        let mut next = Vec::new();
        for prompt in frontier {
            let seed = derive_seed(&[base, prompt.0 as u64]);
            let records = sample_records(task, &tree, prompt, policy, schedule[turn - 1], seed)?;
            for id in tree.attach_generations(prompt, records)? {
                if turn < turns && tree.generation(id)?.raw_reward < 1.0 {
                    next.push(tree.expand(id)?);
                }
            }
        }
        frontier = next;
    }
    Ok(tree)
}

fn grow_forest(
    tasks: &[Task],
    schedule: &[usize],
    policy: &Snapshot,
    sample_seed: u64,
    step: u64,
) -> Result<Vec<RolloutTree>> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let base = derive_seed(&[sample_seed, SAMPLE_STREAM, step, i as u64]);
            grow_tree(task, schedule, policy, base)
                .map_err(|e| with_context(e, &format!("task {}", task.id)))
        })
        .collect()
}

/// Multi-turn rollout trees: every failing generation below the last turn is
/// expanded and receives a full group of children.
pub fn rollout_phase(tasks: &[Task], old: &Snapshot, cfg: &TrainConfig, step: u64) -> Result<Vec<RolloutTree>> {
    grow_forest(tasks, &cfg.generations, old, cfg.sample_seed, step)
}

/// Feedback chains: G₁ samples at turn 1, then a single retry per failure.
pub fn rollout_phase_simple(
    tasks: &[Task],
    old: &Snapshot,
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<RolloutTree>> {
    let mut schedule = vec![1; cfg.max_turns];
    schedule[0] = cfg.generations[0];
    grow_forest(tasks, &schedule, old, cfg.sample_seed, step)
}

fn with_context(e: Error, what: &str) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{what}: {m}")),
        Error::Domain(m) => Error::Domain(format!("{what}: {m}")),
        Error::Lookup(m) => Error::Lookup(format!("{what}: {m}")),
        Error::State(m) => Error::State(format!("{what}: {m}")),
        Error::Integrity(m) => Error::Integrity(format!("{what}: {m}")),
        other => other,
    }
}

fn grpo_groups(forest: &[RolloutTree], old: &PolicyParams) -> Result<Vec<GrpoGroup>> {
    forest
        .iter()
        .map(|tree| {
            let root = tree.root();
            let samples = tree
                .live_children(root)?
                .into_iter()
                .map(|id| {
                    let g = tree.generation(id)?;
                    Ok(GrpoSample {
                        tokens: g.tokens.clone(),
                        behavior_logprobs: g.behavior_logprobs.clone(),
                        reward: g.raw_reward,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(GrpoGroup {
                ctx: old.encode(&tree.prompt(root)?.context),
                samples,
            })
        })
        .collect()
}

fn forest_rewards(forest: &[RolloutTree]) -> Result<(f64, f64, f64, f64)> {
    let n = forest.len() as f64;
    let (mut turn1, mut best, mut solved, mut tree_solved) = (0.0, 0.0, 0.0, 0.0);
    for tree in forest {
        let first = tree.live_children(tree.root())?;
        let mut sum = 0.0;
        let mut any = false;
        for &id in &first {
            let r = tree.generation(id)?.raw_reward;
            sum += r;
            any |= r >= 1.0;
        }
        turn1 += sum / first.len().max(1) as f64;
        let b = tree.best_raw_reward();
        best += b;
        solved += f64::from(u8::from(any));
        tree_solved += f64::from(u8::from(b >= 1.0));
    }
    Ok((turn1 / n, best / n, solved / n, tree_solved / n))
}

/// One update: pruning and credit per config, the objective gradient, then the
/// ascent step. `forest` is left pruned and credited.
pub fn train_step(
    forest: &mut [RolloutTree],
    params: &mut PolicyParams,
    optimizer: &mut Optimizer,
    old: &Snapshot,
    reference: &PolicyParams,
    cfg: &TrainConfig,
    step: u64,
) -> Result<MetricsRecord> {
    let start = Instant::now();
    let at_step = |e: Error| with_context(e, &format!("step {step}"));
    let rollouts: usize = forest.iter().map(RolloutTree::generation_count).sum();
    let (turn1_reward, best_reward, solved_fraction, tree_solved_fraction) = forest_rewards(forest)?;
    let mut pruned = 0;
    let out: ObjectiveOutput = match cfg.mode {
        Mode::Grpo => {
            let groups = grpo_groups(forest, old)?;
            grpo_loss_and_grad(&groups, params, old, reference, &cfg.objective).map_err(at_step)?
        }
        Mode::Murphy => {
            for tree in forest.iter_mut() {
                pruned += prune_and_propagate(tree, cfg.prune, cfg.credit).map_err(at_step)?;
            }
            murphy_loss_and_grad(forest, params, old, reference, &cfg.objective).map_err(at_step)?
        }
        Mode::MurphySimple => {
            simple_loss_and_grad(forest, params, old, reference, &cfg.objective).map_err(at_step)?
        }
    };
    optimizer.step(params, &out.grad).map_err(at_step)?;
    Ok(MetricsRecord {
        step,
        turn1_reward,
        best_reward,
        solved_fraction,
        tree_solved_fraction,
        objective: out.value,
        kl: out.stats.mean_kl(),
        clip_frac: out.stats.clip_frac(),
        rollouts,
        updates: out.stats.updates,
        pruned,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Rollouts for `step` in the configured mode.
pub fn rollouts_for(tasks: &[Task], old: &Snapshot, cfg: &TrainConfig, step: u64) -> Result<Vec<RolloutTree>> {
    match cfg.mode {
        Mode::MurphySimple => rollout_phase_simple(tasks, old, cfg, step),
        Mode::Grpo | Mode::Murphy => rollout_phase(tasks, old, cfg, step),
    }
}

/// Fraction of `tasks` where at least one of `samples` turn-1 programs from
/// `params` passes the train suite.
pub fn probe_solved_fraction(params: &PolicyParams, tasks: &[Task], samples: usize, seed: u64) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Config("probe needs at least one task".into()));
    }
    let solved = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let tree = RolloutTree::with_prompt(task.id.clone(), task.prompt_id(), vec![samples], 1)?;
            let ctx = params.encode(&tree.prompt(tree.root())?.context);
            let s = params.sample(
                ctx,
                samples,
                SamplingOptions::training(),
                derive_seed(&[seed, PROBE_STREAM, i as u64]),
            )?;
            for g in s {
                if evaluate(task, &g.tokens, Suite::Train)?.1.is_success() {
                    return Ok(1usize);
                }
            }
            Ok(0)
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(solved.iter().sum::<usize>() as f64 / tasks.len() as f64)
}

// ---------------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub dump_trees: bool,
    /// Continue from the newest checkpoint in the run directory.
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Vec<MetricsRecord>,
    pub metrics_path: PathBuf,
    pub timings_path: PathBuf,
    pub trees_dir: Option<PathBuf>,
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

pub fn tree_dump_path(out: &Path, step: u64) -> PathBuf {
    out.join("trees").join(format!("step_{step:06}.jsonl"))
}

fn latest_checkpoint(out: &Path) -> Result<Option<(u64, PathBuf)>> {
    let dir = out.join("checkpoints");
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best)
}

/// Reads the metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    for col in METRICS_COLUMNS {
        if !headers.iter().any(|h| h == *col) {
            return Err(Error::Config(format!(
                "{}: missing column `{col}`",
                path.display()
            )));
        }
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(line, format!("{}: {other:?}", path.display())),
    }
}

/// Keeps the header and the rows whose step precedes `next_step`.
fn truncate_log(path: &Path, next_step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s < next_step);
        if keep {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn open_log(path: &Path, header: &str) -> Result<BufWriter<File>> {
    let fresh = !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

fn metrics_row(r: &MetricsRecord) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.serialize(r).expect("metrics serialize");
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
}

/// Runs `cfg.steps` updates, writing `metrics.csv`, `timings.csv`,
/// checkpoints and optional tree dumps under `out`.
pub fn train(cfg: &TrainConfig, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    let ck_dir = out.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let trees_dir = out.join("trees");
    if opts.dump_trees {
        fs::create_dir_all(&trees_dir).map_err(|e| Error::io(&trees_dir, e))?;
    }
    let pool = match &cfg.task_file {
        Some(path) => {
            let tasks = read_tasks(path)?;
            if tasks.is_empty() {
                return Err(Error::Config(format!("task file {} is empty", path.display())));
            }
            Some(tasks)
        }
        None => None,
    };
    let hash = cfg.hash();
    let reference = initial_params(cfg)?;
    let metrics_path = out.join("metrics.csv");
    let timings_path = out.join("timings.csv");
    let mut checkpoints = Vec::new();

    let resumed = if opts.resume { latest_checkpoint(out)? } else { None };
    let (mut params, moments, first_step) = match resumed {
        Some((_, path)) => {
            let ck = Checkpoint::load(&path)?;
            if ck.config_hash != hash {
                return Err(Error::Config(format!(
                    "{} was written by config {}, current config is {hash}",
                    path.display(),
                    ck.config_hash
                )));
            }
            if ck.rng.env_seed != cfg.env_seed || ck.rng.sample_seed != cfg.sample_seed {
                return Err(Error::Config(format!("{}: seeds differ from config", path.display())));
            }
            truncate_log(&metrics_path, ck.rng.next_step)?;
            truncate_log(&timings_path, ck.rng.next_step)?;
            checkpoints.push(path);
            (ck.params, ck.moments, ck.rng.next_step)
        }
        None => {
            for p in [&metrics_path, &timings_path] {
                if p.exists() {
                    fs::remove_file(p).map_err(|e| Error::io(p, e))?;
                }
            }
            let params = reference.clone();
            let path = checkpoint_path(out, 0);
            save_checkpoint(&params, None, cfg, &hash, 0, &path)?;
            checkpoints.push(path);
            (params, None, 0)
        }
    };

    let mut metrics_log = open_log(&metrics_path, &METRICS_COLUMNS.join(","))?;
    let mut timings_log = open_log(&timings_path, "step,wall_seconds")?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay);
    optimizer.set_moments(moments, &params)?;
    let mut records = Vec::new();
    for step in first_step..cfg.steps {
        let start = Instant::now();
        let old = params.snapshot();
        let tasks = step_tasks(cfg, step, pool.as_deref());
        let mut forest = rollouts_for(&tasks, &old, cfg, step)?;
        let mut record = train_step(&mut forest, &mut params, &mut optimizer, &old, &reference, cfg, step)?;
        record.wall_seconds = start.elapsed().as_secs_f64();
        if opts.dump_trees {
            let path = tree_dump_path(out, step);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            dump_forest(&forest, &mut w)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))?;
        }
        metrics_log
            .write_all(metrics_row(&record).as_bytes())
            .and_then(|_| metrics_log.flush())
            .map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(timings_log, "{},{}", step, record.wall_seconds)
            .and_then(|_| timings_log.flush())
            .map_err(|e| Error::io(&timings_path, e))?;
        records.push(record);
        let done = step + 1;
        if done == cfg.steps || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            let path = checkpoint_path(out, done);
            save_checkpoint(&params, optimizer.moments(), cfg, &hash, done, &path)?;
            checkpoints.push(path);
        }
    }
    let final_checkpoint = checkpoints.last().cloned().expect("at least one checkpoint");
    Ok(TrainSummary {
        final_checkpoint,
        checkpoints,
        metrics: records,
        metrics_path,
        timings_path,
        trees_dir: opts.dump_trees.then_some(trees_dir),
    })
}

fn save_checkpoint(
    params: &PolicyParams,
    moments: Option<&Moments>,
    cfg: &TrainConfig,
    hash: &str,
    next_step: u64,
    path: &Path,
) -> Result<()> {
    Checkpoint {
        params: params.clone(),
        rng: RngState {
            env_seed: cfg.env_seed,
            sample_seed: cfg.sample_seed,
            next_step,
        },
        config_hash: hash.to_string(),
        moments: moments.cloned(),
    }
    .save(path)
}
