//! Python bindings. Values cross the boundary as JSON through Python's
//! `json` module, so results are plain dicts and lists.

use std::path::PathBuf;

use murphy_core::config::PRESETS;
use murphy_core::error::Error;
use murphy_core::eval::EvalConfig;
use murphy_core::reporting::{self, EvalRequest, TaskSource, TrainRequest};
use murphy_core::toy_env::{self, Family, Suite, Task};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(murphy, MurphyError, PyException);
create_exception!(murphy, ConfigError, MurphyError);
create_exception!(murphy, IntegrityError, MurphyError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Parse { .. } => ConfigError::new_err(msg),
        Error::Integrity(_) => IntegrityError::new_err(msg),
        _ => MurphyError::new_err(msg),
    }
}

fn ser<'py, T: serde::Serialize + ?Sized>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| MurphyError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn de<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>, what: &str) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| ConfigError::new_err(format!("{what}: {e}")))
}

fn suite(name: &str) -> PyResult<Suite> {
    match name {
        "train" => Ok(Suite::Train),
        "visible" => Ok(Suite::Visible),
        "hidden" => Ok(Suite::Hidden),
        other => Err(ConfigError::new_err(format!(
            "unknown suite {other:?} (expected train, visible or hidden)"
        ))),
    }
}

/// Names accepted by `train(preset=...)`.
#[pyfunction]
fn presets() -> Vec<&'static str> {
    PRESETS.to_vec()
}

/// Deterministic tasks of one family; each is a dict.
#[pyfunction]
#[pyo3(signature = (seed, family = "hidden_offset", count = 1))]
fn sample_tasks<'py>(py: Python<'py>, seed: u64, family: &str, count: usize) -> PyResult<Bound<'py, PyAny>> {
    let family: Family = family.parse().map_err(to_py)?;
    ser(py, &toy_env::sample_tasks(seed, family, count))
}

/// Runs `program` on one suite of `task`; returns `(reward, feedback)`.
#[pyfunction]
#[pyo3(signature = (task, program, suite_name = "visible"))]
fn score_program<'py>(
    py: Python<'py>,
    task: &Bound<'py, PyAny>,
    program: &str,
    suite_name: &str,
) -> PyResult<(f64, Bound<'py, PyAny>)> {
    let task: Task = de(task, "task")?;
    task.validate().map_err(to_py)?;
    let tokens = toy_env::parse_tokens(program).map_err(to_py)?;
    let (reward, feedback) = toy_env::evaluate(&task, &tokens, suite(suite_name)?).map_err(to_py)?;
    Ok((reward, ser(py, &feedback)?))
}

/// Trains into `out`; returns the manifest plus per-step metrics.
#[pyfunction]
#[pyo3(signature = (out, preset = None, config = None, overrides = None, dump_trees = false, resume = false))]
fn train<'py>(
    py: Python<'py>,
    out: PathBuf,
    preset: Option<String>,
    config: Option<PathBuf>,
    overrides: Option<&Bound<'py, PyDict>>,
    dump_trees: bool,
    resume: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let overrides: toml::Table = match overrides {
        Some(d) => de(d.as_any(), "overrides")?,
        None => toml::Table::new(),
    };
    let req = TrainRequest { preset, config, overrides, out, dump_trees, resume };
    let run = py.detach(|| reporting::cmd_train(&req)).map_err(to_py)?;
    let dict = PyDict::new(py);
    dict.set_item("manifest", ser(py, &run.manifest)?)?;
    dict.set_item("metrics", ser(py, &run.summary.metrics)?)?;
    dict.set_item("final_checkpoint", run.summary.final_checkpoint)?;
    Ok(dict.into_any())
}

/// Reflexion-style pass@1 of a checkpoint; returns the report dict.
#[pyfunction]
#[pyo3(signature = (
    checkpoint, tasks_file = None, family = "hidden_offset", task_seed = 4242, count = 200,
    iters = 3, reps = 3, temperature = 0.6, top_p = None, seed = 0, label = "python", out = None
))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    tasks_file: Option<PathBuf>,
    family: &str,
    task_seed: u64,
    count: usize,
    iters: usize,
    reps: usize,
    temperature: f64,
    top_p: Option<f64>,
    seed: u64,
    label: &str,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let tasks = match tasks_file {
        Some(path) => TaskSource::File(path),
        None => TaskSource::Family { family: family.parse().map_err(to_py)?, seed: task_seed, count },
    };
    let req = EvalRequest {
        checkpoint,
        tasks,
        config: EvalConfig { max_iterations: iters, repetitions: reps, temperature, top_p, seed },
        label: label.to_string(),
        out,
    };
    let outcome = py.detach(|| reporting::cmd_eval(&req)).map_err(to_py)?;
    ser(py, &outcome.report)
}

#[pyfunction]
#[pyo3(signature = (run_dir, step, task = None, show_pruned = false))]
fn inspect_tree(run_dir: PathBuf, step: u64, task: Option<&str>, show_pruned: bool) -> PyResult<String> {
    reporting::cmd_inspect_tree(&run_dir, step, task, show_pruned).map_err(to_py)
}

/// Ranked run summaries, best first.
#[pyfunction]
fn compare<'py>(py: Python<'py>, run_dirs: Vec<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let cmp = reporting::cmd_compare(&run_dirs).map_err(to_py)?;
    ser(py, &cmp.runs)
}

#[pymodule]
pub fn murphy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("MurphyError", py.get_type::<MurphyError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("IntegrityError", py.get_type::<IntegrityError>())?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(sample_tasks, m)?)?;
    m.add_function(wrap_pyfunction!(score_program, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_tree, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    Ok(())
}
