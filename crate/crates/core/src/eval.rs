//! Reflexion-style evaluation: sample, test on the visible cases, re-prompt
//! with the feedback, and score the last program on the hidden cases.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, SamplingOptions};
use crate::rollout_tree::ContextChain;
use crate::seed::derive_seed;
use crate::toy_env::{evaluate as run_suite, Family, FeedbackRecord, Program, Suite, Task, Token};

/// Produces one program for a context. `seed` fixes its randomness.
pub trait Actor: Sync {
    fn act(&self, chain: &ContextChain, seed: u64) -> Result<Vec<Token>>;
}

impl<F> Actor for F
where
    F: Fn(&ContextChain, u64) -> Result<Vec<Token>> + Sync,
{
    fn act(&self, chain: &ContextChain, seed: u64) -> Result<Vec<Token>> {
        self(chain, seed)
    }
}

pub struct PolicyActor<'p> {
    pub params: &'p PolicyParams,
    pub options: SamplingOptions,
}

impl Actor for PolicyActor<'_> {
    fn act(&self, chain: &ContextChain, seed: u64) -> Result<Vec<Token>> {
        let ctx = self.params.encode(chain);
        let mut s = self.params.sample(ctx, 1, self.options, seed)?;
        Ok(s.pop().expect("one sample").tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub max_iterations: usize,
    pub repetitions: usize,
    pub temperature: f64,
    pub top_p: Option<f64>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_iterations: 3,
            repetitions: 3,
            temperature: 0.6,
            top_p: None,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        self.sampling().validate()
    }

    pub fn sampling(&self) -> SamplingOptions {
        SamplingOptions {
            temperature: self.temperature,
            top_p: self.top_p,
        }
    }
}

/// One Reflexion run on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// Every program produced, in order.
    pub programs: Vec<Vec<Token>>,
    pub visible: Vec<FeedbackRecord>,
    /// Hidden-suite success of each program.
    pub hidden: Vec<bool>,
}

impl Episode {
    pub fn iterations(&self) -> usize {
        self.programs.len()
    }

    pub fn final_program(&self) -> &[Token] {
        self.programs.last().expect("episodes have at least one iteration")
    }

    pub fn hidden_pass(&self) -> bool {
        *self.hidden.last().expect("episodes have at least one iteration")
    }

    /// Hidden result the episode would have reported under a smaller budget.
    pub fn hidden_pass_at(&self, budget: usize) -> bool {
        self.hidden[budget.clamp(1, self.hidden.len()) - 1]
    }

    /// Iteration at which the visible tests first all passed.
    pub fn solved_at(&self) -> Option<usize> {
        self.visible.iter().position(FeedbackRecord::is_success).map(|i| i + 1)
    }
}

/// Generate, test on the visible suite, stop on success or after
/// `max_iterations`, re-prompting with the accumulated feedback otherwise.
/// Iteration `i` draws its randomness from `derive_seed(&[seed, i])`.
pub fn reflexion_episode(actor: &dyn Actor, task: &Task, max_iterations: usize, seed: u64) -> Result<Episode> {
    if max_iterations == 0 {
        return Err(Error::Config("max_iterations must be at least 1".into()));
    }
    let mut chain = ContextChain::new(task.prompt_id());
    let mut ep = Episode {
        programs: Vec::new(),
        visible: Vec::new(),
        hidden: Vec::new(),
    };
    for i in 0..max_iterations {
        let tokens = actor.act(&chain, derive_seed(&[seed, i as u64]))?;
        let (_, visible) = run_suite(task, &tokens, Suite::Visible)?;
        let (_, hidden) = run_suite(task, &tokens, Suite::Hidden)?;
        let done = visible.is_success();
        ep.hidden.push(hidden.is_success());
        ep.programs.push(tokens.clone());
        ep.visible.push(visible.clone());
        if done {
            break;
        }
        chain = chain.extended(tokens, visible);
    }
    Ok(ep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetResult {
    pub budget: usize,
    pub mean: f64,
    /// Population standard deviation over repetitions.
    pub stdev: f64,
    pub per_repetition: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: String,
    pub repetition: usize,
    pub iterations: usize,
    pub final_program: String,
    pub hidden_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub tasks: usize,
    /// pass@1 at every budget from 1 to `max_iterations`.
    pub budgets: Vec<BudgetResult>,
    pub outcomes: Vec<TaskOutcome>,
    /// Visible-suite solves by iteration (index 0 is iteration 1), plus
    /// episodes never solved.
    pub solved_at: Vec<usize>,
    pub unsolved: usize,
}

impl EvalReport {
    pub fn at(&self, budget: usize) -> Option<&BudgetResult> {
        self.budgets.iter().find(|b| b.budget == budget)
    }

    pub fn final_budget(&self) -> &BudgetResult {
        self.budgets.last().expect("at least one budget")
    }
}

pub fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// pass@1 over `tasks`, repeated with distinct seeds.
pub fn evaluate(actor: &dyn Actor, tasks: &[Task], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("evaluation needs at least one task".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.repetitions)
        .flat_map(|r| (0..tasks.len()).map(move |t| (r, t)))
        .collect();
    let episodes = jobs
        .par_iter()
        .map(|&(r, t)| {
            let seed = derive_seed(&[cfg.seed, r as u64, t as u64]);
            reflexion_episode(actor, &tasks[t], cfg.max_iterations, seed)
        })
        .collect::<Result<Vec<Episode>>>()?;

    let n = tasks.len() as f64;
    let budgets = (1..=cfg.max_iterations)
        .map(|b| {
            let per_repetition: Vec<f64> = (0..cfg.repetitions)
                .map(|r| {
                    let eps = &episodes[r * tasks.len()..(r + 1) * tasks.len()];
                    eps.iter().filter(|e| e.hidden_pass_at(b)).count() as f64 / n
                })
                .collect();
            let (mean, stdev) = mean_stdev(&per_repetition);
            BudgetResult {
                budget: b,
                mean,
                stdev,
                per_repetition,
            }
        })
        .collect();
    let mut solved_at = vec![0; cfg.max_iterations];
    let mut unsolved = 0;
    let outcomes = jobs
        .iter()
        .zip(&episodes)
        .map(|(&(r, t), e)| {
            match e.solved_at() {
                Some(i) => solved_at[i - 1] += 1,
                None => unsolved += 1,
            }
            TaskOutcome {
                task_id: tasks[t].id.clone(),
                repetition: r,
                iterations: e.iterations(),
                final_program: Program::new(e.final_program().to_vec())
                    .map_or_else(|_| crate::toy_env::render_tokens(e.final_program()), |p| p.to_string()),
                hidden_pass: e.hidden_pass(),
            }
        })
        .collect();
    Ok(EvalReport {
        config: *cfg,
        tasks: tasks.len(),
        budgets,
        outcomes,
        solved_at,
        unsolved,
    })
}

/// Flat summary row shared by `eval` output and `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub checkpoint: String,
    pub task_source: String,
    pub tasks: usize,
    pub repetitions: usize,
    pub max_iterations: usize,
    pub temperature: f64,
    pub seed: u64,
    pub pass1_iter1_mean: f64,
    pub pass1_iter1_stdev: f64,
    pub pass1_mean: f64,
    pub pass1_stdev: f64,
}

impl EvalReport {
    pub fn row(&self, label: &str, checkpoint: &str, task_source: &str) -> EvalRow {
        let first = &self.budgets[0];
        let last = self.final_budget();
        EvalRow {
            label: label.to_string(),
            checkpoint: checkpoint.to_string(),
            task_source: task_source.to_string(),
            tasks: self.tasks,
            repetitions: self.config.repetitions,
            max_iterations: self.config.max_iterations,
            temperature: self.config.temperature,
            seed: self.config.seed,
            pass1_iter1_mean: first.mean,
            pass1_iter1_stdev: first.stdev,
            pass1_mean: last.mean,
            pass1_stdev: last.stdev,
        }
    }
}

/// Appends `row` to a CSV file, writing the header if the file is new.
pub fn append_row(path: &Path, row: &EvalRow) -> Result<()> {
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row)
        .and_then(|_| w.flush().map_err(Into::into))
        .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
}

/// The postfix program computing `a·x + b`.
pub fn linear_program(a: i64, b: i64) -> String {
    let mut out = if a == 1 {
        "x".to_string()
    } else if a > 0 {
        format!("x {a} *")
    } else {
        format!("0 x {} * -", a.abs())
    };
    match b.signum() {
        1 => out.push_str(&format!(" {b} +")),
        -1 => out.push_str(&format!(" {} -", b.abs())),
        _ => {}
    }
    out
}

/// Parameters that emit each linear task's exact program from its turn-1
/// context. Errors if two tasks needing different programs share a bucket.
pub fn oracle_params(tasks: &[Task], buckets: usize, length: usize) -> Result<PolicyParams> {
    let mut params = PolicyParams::zeros(buckets, length)?;
    let mut claimed: BTreeMap<usize, String> = BTreeMap::new();
    for task in tasks {
        if task.family != Family::Linear {
            return Err(Error::Config(format!(
                "oracle policy needs linear tasks, {} is {}",
                task.id, task.family
            )));
        }
        let text = linear_program(task.coeffs[0], task.coeffs[1]);
        let program = Program::padded(&text, length)?;
        let bucket = params.encode(&ContextChain::new(task.prompt_id())).bucket;
        if let Some(prev) = claimed.get(&bucket) {
            if *prev != text {
                return Err(Error::Config(format!(
                    "bucket {bucket} is shared by programs `{prev}` and `{text}`"
                )));
            }
            continue;
        }
        claimed.insert(bucket, text);
        for (pos, tok) in program.tokens().iter().enumerate() {
            let row = params.ctx_row_mut(bucket, pos)?;
            row.fill(0.0);
            row[tok.index()] = 20.0;
        }
    }
    Ok(params)
}
