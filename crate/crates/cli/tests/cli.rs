use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "mode = \"murphy\"\nmax_turns = 2\ngenerations = [4, 4]\ncredit = \"mars\"\n\
prune = \"intrap\"\nprune_budget = 2\nbeta = 0.04\nclip_eps = 0.2\ninit = \"syntax\"\n\
optimizer = \"adamw\"\nlearning_rate = 0.03\nsteps = 3\ntasks_per_step = 4\ncheckpoint_every = 3\n\
env_seed = 1\nsample_seed = 2\n";

fn murphy(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_murphy"))
        .env("MURPHY_OUT_ROOT", root)
        .current_dir(root)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn err(out: &Output) -> String {
    assert!(!out.status.success(), "unexpected success: {}", String::from_utf8_lossy(&out.stdout));
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn small_config(root: &Path, extra: &str) -> PathBuf {
    let path = root.join("small.toml");
    fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path
}

fn train(root: &Path, name: &str, args: &[&str]) -> PathBuf {
    let cfg = small_config(root, "");
    let run = root.join(name);
    let mut full = vec!["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()];
    full.extend_from_slice(args);
    ok(&murphy(root, &full));
    run
}

#[test]
fn train_writes_a_self_describing_run() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(tmp.path(), "run", &[]);
    for f in ["manifest.json", "config.toml", "metrics.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let ckpts: Vec<_> = fs::read_dir(run.join("checkpoints")).unwrap().collect();
    assert!(!ckpts.is_empty());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["env_seed"], 1);
    assert_eq!(manifest["sample_seed"], 2);
    assert!(manifest["finished_at"].is_string());
    let rows = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4, "header plus one row per step");
}

#[test]
fn identical_invocations_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train(tmp.path(), "a", &[]);
    let b = train(tmp.path(), "b", &[]);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn seed_flag_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train(tmp.path(), "a", &[]);
    let b = train(tmp.path(), "b", &["--seed", "77"]);
    assert_ne!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    let cfg = fs::read_to_string(b.join("config.toml")).unwrap();
    assert!(cfg.contains("env_seed = 77") && cfg.contains("sample_seed = 77"), "{cfg}");
}

#[test]
fn default_out_dir_lives_under_the_env_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let stdout = ok(&murphy(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]));
    let dirs: Vec<PathBuf> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    assert_eq!(dirs.len(), 1, "{stdout}");
    let name = dirs[0].file_name().unwrap().to_string_lossy().into_owned();
    assert!(name.starts_with("murphy-") && name.ends_with("-e1-s2"), "{name}");
}

#[test]
fn out_of_range_value_is_rejected_with_its_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "gamma = 1.5\n");
    let stderr = err(&murphy(tmp.path(), &["train", "--config", cfg.to_str().unwrap(), "--out", "x"]));
    assert!(stderr.contains("gamma") && stderr.contains("1.5"), "{stderr}");
    assert!(!tmp.path().join("x").join("metrics.csv").exists());
}

#[test]
fn unknown_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "learnin_rate = 0.1\n");
    let stderr = err(&murphy(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]));
    assert!(stderr.contains("learnin_rate"), "{stderr}");
}

#[test]
fn set_override_beats_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(tmp.path(), "run", &["--set", "steps=2"]);
    let rows = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
}

#[test]
fn eval_rows_record_their_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(tmp.path(), "run", &[]);
    let ckpt = fs::read_dir(run.join("checkpoints")).unwrap().next().unwrap().unwrap().path();
    for iters in ["1", "3"] {
        let stdout = ok(&murphy(
            tmp.path(),
            &["eval", ckpt.to_str().unwrap(), "--count", "10", "--reps", "1", "--iters", iters],
        ));
        assert!(stdout.contains("pass@1"), "{stdout}");
    }
    let mut reader = csv::Reader::from_path(run.join("eval.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "max_iterations").unwrap();
    let budgets: Vec<String> = reader.records().map(|r| r.unwrap()[col].to_string()).collect();
    assert_eq!(budgets, ["1", "3"]);
}

#[test]
fn missing_and_corrupt_checkpoints_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let stderr = err(&murphy(tmp.path(), &["eval", "nope.ckpt", "--count", "2"]));
    assert!(stderr.contains("nope.ckpt"), "{stderr}");

    let run = train(tmp.path(), "run", &[]);
    let ckpt = fs::read_dir(run.join("checkpoints")).unwrap().next().unwrap().unwrap().path();
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let stderr = err(&murphy(tmp.path(), &["eval", bad.to_str().unwrap(), "--count", "2"]));
    assert!(stderr.starts_with("error:"), "{stderr}");
    assert!(!stderr.contains("panicked"), "{stderr}");
}

#[test]
fn inspect_tree_renders_a_dumped_step() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(tmp.path(), "run", &["--dump-trees"]);
    let step = fs::read_dir(run.join("trees"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .min()
        .unwrap();
    let step = step.trim_start_matches("step_").trim_end_matches(".jsonl").trim_start_matches('0');
    let step = if step.is_empty() { "0" } else { step };
    let stdout = ok(&murphy(tmp.path(), &["inspect-tree", run.to_str().unwrap(), "--step", step]));
    let first = stdout.lines().next().unwrap();
    assert!(first.starts_with("tree "), "{stdout}");
    let turn1 = stdout.lines().filter(|l| l.starts_with("  gen ")).count();
    assert_eq!(turn1, 4, "{stdout}");
    assert!(stdout.contains("    prompt"), "second-turn prompts are indented\n{stdout}");
    assert!(stdout.contains("[pruned]"), "{stdout}");
    let full = ok(&murphy(tmp.path(), &["inspect-tree", run.to_str().unwrap(), "--step", step, "--show-pruned"]));
    assert!(full.lines().count() > stdout.lines().count());
}

#[test]
fn inspect_tree_without_dump_says_how_to_get_one() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(tmp.path(), "run", &[]);
    let stderr = err(&murphy(tmp.path(), &["inspect-tree", run.to_str().unwrap(), "--step", "0"]));
    assert!(stderr.contains("--dump-trees"), "{stderr}");
}

#[test]
fn plot_writes_svg_and_rejects_empty_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(tmp.path(), "run", &[]);
    let stdout = ok(&murphy(tmp.path(), &["plot", run.to_str().unwrap()]));
    let svg = fs::read_to_string(tmp.path().join("plot.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"), "{stdout}");

    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let out = tmp.path().join("empty.svg");
    let stderr = err(&murphy(tmp.path(), &["plot", empty.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert!(stderr.contains("empty.csv"), "{stderr}");
    assert!(!out.exists());
}

#[test]
fn compare_ranks_two_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let murphy_run = train(tmp.path(), "murphy", &[]);
    let grpo_run = train(tmp.path(), "grpo", &["--set", "mode=\"grpo\"", "--set", "max_turns=1", "--set", "generations=[4]", "--set", "prune=\"none\""]);
    let stdout = ok(&murphy(tmp.path(), &["compare", murphy_run.to_str().unwrap(), grpo_run.to_str().unwrap()]));
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 3, "{stdout}");
    assert!(lines[0].starts_with("rank"));
    assert!(stdout.contains(" grpo ") && stdout.contains(" murphy "), "{stdout}");
    assert!(stdout.contains('*'));
}
