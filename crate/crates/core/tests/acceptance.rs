//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one result line; exits nonzero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use murphy_core::config::TrainConfig;
use murphy_core::credit::{propagate, propagate_unchecked, CreditConfig};
use murphy_core::eval::{
    evaluate, linear_program, mean_stdev, reflexion_episode, EvalConfig, PolicyActor,
};
use murphy_core::objective::{murphy_loss_and_grad, ObjectiveConfig};
use murphy_core::policy::{Gradient, PolicyParams, SamplingOptions, BOS, VOCAB};
use murphy_core::pruning::{prune_and_propagate, select_intra, PruneConfig};
use murphy_core::reporting::{cmd_train, TrainRequest};
use murphy_core::rollout_tree::{worst_case_rollouts, ContextChain, GenerationRecord, NodeId, RolloutTree};
use murphy_core::toy_env::{
    evaluate as run_suite, sample_task, sample_tasks, Failure, Family, FeedbackRecord, Outcome,
    Program, Suite, Task, Token, PROGRAM_LEN,
};
use murphy_core::trainer::{probe_solved_fraction, train, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

fn feedback(passed: u32, total: u32) -> FeedbackRecord {
    FeedbackRecord {
        passed,
        total,
        failures: (passed..total)
            .map(|i| Failure {
                input: i64::from(i),
                expected: i64::from(i) + 1,
                got: Outcome::Value(i64::from(i)),
            })
            .collect(),
    }
}

fn record(k: u32) -> GenerationRecord {
    GenerationRecord {
        tokens: vec![Token::X],
        logprobs: vec![-1.0],
        reward: f64::from(k) / 12.0,
        feedback: feedback(k, 12),
    }
}

/// Depth 1..=4, branching 1..=4, rewards k/12; failing nodes above the last
/// turn expand with probability 0.7.
fn random_tree(rng: &mut ChaCha8Rng) -> RolloutTree {
    let turns = rng.random_range(1..=4);
    let schedule: Vec<usize> = (0..turns).map(|_| rng.random_range(1..=4)).collect();
    let mut tree = RolloutTree::new("acc", schedule.clone(), turns).unwrap();
    let mut frontier = vec![tree.root()];
    while let Some(p) = frontier.pop() {
        let turn = tree.prompt(p).unwrap().turn;
        let n = rng.random_range(1..=schedule[turn - 1]);
        let recs = (0..n).map(|_| record(rng.random_range(0..=12))).collect();
        for g in tree.attach_generations(p, recs).unwrap() {
            if tree.generation(g).unwrap().raw_reward < 1.0 && turn < turns && rng.random_bool(0.7) {
                frontier.push(tree.expand(g).unwrap());
            }
        }
    }
    tree
}

fn tree_corpus() -> Vec<RolloutTree> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..1500).map(|_| random_tree(&mut rng)).collect()
}

fn generations(tree: &RolloutTree) -> Vec<NodeId> {
    tree.generations().map(|g| g.id).collect()
}

fn child_generations(tree: &RolloutTree, g: NodeId) -> Vec<NodeId> {
    match tree.generation(g).unwrap().child_prompt {
        Some(p) => tree.prompt(p).unwrap().child_generations.clone(),
        None => Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// 1. GRPO reduction
// ---------------------------------------------------------------------------

/// Log-softmax of `W_ctx[bucket, t] + W_big[prev]`, computed from the raw
/// weight tables.
fn oracle_logprobs(p: &PolicyParams, bucket: usize, t: usize, prev: usize) -> [f64; VOCAB] {
    let c = (bucket * p.length() + t) * VOCAB;
    let b = prev * VOCAB;
    let mut z = [0.0; VOCAB];
    for v in 0..VOCAB {
        z[v] = p.w_ctx()[c + v] + p.w_big()[b + v];
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.map(|v| v - lse)
}

struct DenseGrad {
    ctx: Vec<f64>,
    big: Vec<f64>,
}

/// Group-relative PPO surrogate with k3 KL, one prompt per tree, averaged
/// over prompts; gradient accumulated densely.
fn oracle_grpo(
    forest: &[RolloutTree],
    params: &PolicyParams,
    reference: &PolicyParams,
    eps: f64,
    beta: f64,
) -> (f64, DenseGrad) {
    let n_trees = forest.len() as f64;
    let inv_n = 1.0 / n_trees;
    let mut total = 0.0;
    let mut out = DenseGrad {
        ctx: vec![0.0; params.w_ctx().len()],
        big: vec![0.0; params.w_big().len()],
    };
    for tree in forest {
        let root = tree.prompt(tree.root()).unwrap();
        let bucket = params.encode(&root.context).bucket;
        let group: Vec<_> = root
            .child_generations
            .iter()
            .map(|&g| tree.generation(g).unwrap())
            .collect();
        let rewards: Vec<f64> = group.iter().map(|g| g.raw_reward).collect();
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
        let adv: Vec<f64> = rewards
            .iter()
            .map(|r| if std <= 1e-8 { 0.0 } else { (r - mean) / std })
            .collect();
        let scale = 1.0 / (group.len() * params.length()) as f64;
        let mut sum = 0.0;
        let mut ctx_g = vec![0.0; out.ctx.len()];
        let mut big_g = vec![0.0; out.big.len()];
        for (g, &a) in group.iter().zip(&adv) {
            let mut prev = BOS;
            for (t, tok) in g.tokens.iter().enumerate() {
                let v = tok.index();
                let lp = oracle_logprobs(params, bucket, t, prev);
                let ref_lp = oracle_logprobs(reference, bucket, t, prev)[v];
                let ratio = (lp[v] - g.behavior_logprobs[t]).exp();
                let unclipped = ratio * a;
                let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
                let x = ref_lp - lp[v];
                let kl = x.exp() - x - 1.0;
                sum += unclipped.min(clipped) - beta * kl;
                let d_surrogate = if unclipped <= clipped { unclipped } else { 0.0 };
                let w = scale * (d_surrogate - beta * (1.0 - x.exp()));
                let c = (bucket * params.length() + t) * VOCAB;
                for u in 0..VOCAB {
                    ctx_g[c + u] += w * (f64::from(u8::from(u == v)) - lp[u].exp());
                }
                for u in 0..VOCAB {
                    big_g[prev * VOCAB + u] += w * (f64::from(u8::from(u == v)) - lp[u].exp());
                }
                prev = v;
            }
        }
        total += sum * scale;
        for (d, s) in out.ctx.iter_mut().zip(&ctx_g) {
            *d += inv_n * s;
        }
        for (d, s) in out.big.iter_mut().zip(&big_g) {
            *d += inv_n * s;
        }
    }
    (total * inv_n, out)
}

fn grad_matches_dense(g: &Gradient, dense: &DenseGrad, params: &PolicyParams) -> bool {
    let mut lib = DenseGrad {
        ctx: vec![0.0; dense.ctx.len()],
        big: vec![0.0; dense.big.len()],
    };
    for (&(b, t), row) in &g.ctx {
        let o = (b * params.length() + t) * VOCAB;
        lib.ctx[o..o + VOCAB].copy_from_slice(row);
    }
    for (&prev, row) in &g.big {
        lib.big[prev * VOCAB..(prev + 1) * VOCAB].copy_from_slice(row);
    }
    let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    same(&lib.ctx, &dense.ctx) && same(&lib.big, &dense.big)
}

/// Adds uniform noise in `[-amount, amount]` to every weight.
fn perturbed(p: &PolicyParams, seed: u64, amount: f64) -> PolicyParams {
    let mut out = p.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in 0..p.buckets() {
        for t in 0..p.length() {
            for x in out.ctx_row_mut(b, t).unwrap().iter_mut() {
                *x += rng.random_range(-amount..=amount);
            }
        }
    }
    for prev in 0..=BOS {
        for x in out.big_row_mut(prev).unwrap().iter_mut() {
            *x += rng.random_range(-amount..=amount);
        }
    }
    out
}

/// Samples a forest of `trees` trees from `old` with random k/12 rewards,
/// expanding failures with probability 0.6, then applies credit.
fn sampled_forest(
    old: &PolicyParams,
    trees: usize,
    turns: usize,
    max_group: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<RolloutTree> {
    (0..trees)
        .map(|i| {
            let schedule: Vec<usize> = (0..turns).map(|_| rng.random_range(2..=max_group)).collect();
            let mut tree =
                RolloutTree::with_prompt(format!("t{i}"), format!("p{}", i % 3), schedule.clone(), turns)
                    .unwrap();
            let mut frontier = vec![tree.root()];
            while let Some(p) = frontier.pop() {
                let prompt = tree.prompt(p).unwrap();
                let turn = prompt.turn;
                let ctx = old.encode(&prompt.context);
                let samples = old
                    .sample(ctx, schedule[turn - 1], SamplingOptions::training(), rng.random())
                    .unwrap();
                let recs = samples
                    .into_iter()
                    .map(|s| {
                        let k = rng.random_range(0..=12);
                        GenerationRecord {
                            tokens: s.tokens,
                            logprobs: s.logprobs,
                            reward: f64::from(k) / 12.0,
                            feedback: feedback(k, 12),
                        }
                    })
                    .collect();
                for g in tree.attach_generations(p, recs).unwrap() {
                    if tree.generation(g).unwrap().raw_reward < 1.0 && turn < turns && rng.random_bool(0.6) {
                        frontier.push(tree.expand(g).unwrap());
                    }
                }
            }
            tree.set_policy_version(old.version());
            prune_and_propagate(&mut tree, PruneConfig::none(), CreditConfig::mars()).unwrap();
            tree
        })
        .collect()
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let cfg = ObjectiveConfig {
        clip_eps: 0.2,
        beta: 0.04,
        adv_eps: 1e-8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut clipped = 0;
    for i in 0..100u64 {
        let old = PolicyParams::random(16, PROGRAM_LEN, 1.0, i).unwrap();
        let live = perturbed(&old, 1000 + i, 0.3);
        let reference = PolicyParams::random(16, PROGRAM_LEN, 0.5, 2000 + i).unwrap();
        let trees = rng.random_range(1..=4);
        let forest = sampled_forest(&old, trees, 1, 8, &mut rng);
        let out = murphy_loss_and_grad(&forest, &live, &old, &reference, &cfg).map_err(|e| e.to_string())?;
        let (value, grad) = oracle_grpo(&forest, &live, &reference, cfg.clip_eps, cfg.beta);
        ensure(out.value.to_bits() == value.to_bits(), || {
            format!("forest {i}: value {} != reference {value}", out.value)
        })?;
        ensure(grad_matches_dense(&out.grad, &grad, &live), || format!("forest {i}: gradients differ"))?;
        clipped += usize::from(out.stats.clipped > 0);
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(5), || format!("took {}", secs(t)))?;
    Ok(format!("100 forests bitwise equal ({clipped} with clipped tokens), {}", secs(t)))
}

// ---------------------------------------------------------------------------
// 2-3. Credit assignment
// ---------------------------------------------------------------------------

/// Largest raw reward anywhere in the subtree rooted at `g`.
fn subtree_max(tree: &RolloutTree, g: NodeId) -> f64 {
    let mut best = tree.generation(g).unwrap().raw_reward;
    let mut stack = child_generations(tree, g);
    while let Some(c) = stack.pop() {
        best = best.max(tree.generation(c).unwrap().raw_reward);
        stack.extend(child_generations(tree, c));
    }
    best
}

fn mers_reference(tree: &RolloutTree, g: NodeId, gamma: f64) -> f64 {
    let node = tree.generation(g).unwrap();
    let children = child_generations(tree, g);
    if node.child_prompt.is_none() {
        return node.raw_reward;
    }
    let values: Vec<f64> = children.iter().map(|&c| mers_reference(tree, c, gamma)).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (node.raw_reward + gamma * mean) / (tree.max_turns() - node.turn + 1) as f64
}

const GAMMAS: [f64; 4] = [0.0, 0.5, 0.9, 1.0];

fn criterion_2(corpus: &[RolloutTree]) -> Check {
    let start = Instant::now();
    let mut nodes = 0;
    for (i, tree) in corpus.iter().enumerate() {
        let mut mars = tree.clone();
        propagate(&mut mars, CreditConfig::mars()).map_err(|e| e.to_string())?;
        for g in generations(tree) {
            let got = mars.generation(g).unwrap().propagated_reward;
            ensure(got == Some(subtree_max(tree, g)), || format!("tree {i} {g}: MaRS {got:?}"))?;
            nodes += 1;
        }
        for gamma in GAMMAS {
            let mut mers = tree.clone();
            propagate(&mut mers, CreditConfig::mers(gamma)).map_err(|e| e.to_string())?;
            for g in generations(tree) {
                let got = mers.generation(g).unwrap().propagated_reward;
                let want = mers_reference(tree, g, gamma);
                ensure(got == Some(want), || format!("tree {i} {g} γ={gamma}: MeRS {got:?} != {want}"))?;
            }
        }
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(10), || format!("took {}", secs(t)))?;
    Ok(format!("{} trees, {nodes} generations, exact, {}", corpus.len(), secs(t)))
}

fn criterion_3(corpus: &[RolloutTree]) -> Check {
    let mut violations = Vec::new();
    for (i, tree) in corpus.iter().enumerate() {
        let mut mars = tree.clone();
        propagate(&mut mars, CreditConfig::mars()).map_err(|e| e.to_string())?;
        for g in generations(tree) {
            let node = mars.generation(g).unwrap();
            let v = node.propagated_reward.unwrap();
            if v < node.raw_reward {
                violations.push(format!("tree {i} {g}: MaRS below raw"));
            }
            for c in child_generations(&mars, g) {
                if v < mars.generation(c).unwrap().propagated_reward.unwrap() {
                    violations.push(format!("tree {i} {g}: MaRS below child {c}"));
                }
            }
        }
        let mut again = mars.clone();
        propagate_unchecked(&mut again, CreditConfig::mars()).map_err(|e| e.to_string())?;
        if again != mars {
            violations.push(format!("tree {i}: MaRS not idempotent"));
        }
        for gamma in GAMMAS {
            let mut mers = tree.clone();
            propagate(&mut mers, CreditConfig::mers(gamma)).map_err(|e| e.to_string())?;
            for g in mers.generations() {
                let v = g.propagated_reward.unwrap();
                if !(0.0..=1.0).contains(&v) {
                    violations.push(format!("tree {i} {} γ={gamma}: MeRS {v}", g.id));
                }
            }
        }
    }
    ensure(violations.is_empty(), || {
        format!("{} violations, first: {}", violations.len(), violations[0])
    })?;
    Ok(format!("{} trees, 0 violations", corpus.len()))
}

// ---------------------------------------------------------------------------
// 4. Pruning accounting
// ---------------------------------------------------------------------------

/// Full S=2, G=[8,8] tree where every generation fails.
fn worst_case_tree(seed: u64) -> RolloutTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = RolloutTree::with_prompt(format!("w{seed}"), "w", vec![8, 8], 2).unwrap();
    let top = tree
        .attach_generations(tree.root(), (0..8).map(|_| record(rng.random_range(0..12))).collect())
        .unwrap();
    for g in top {
        let p = tree.expand(g).unwrap();
        tree.attach_generations(p, (0..8).map(|_| record(rng.random_range(0..12))).collect())
            .unwrap();
    }
    tree.set_policy_version(0);
    tree
}

fn criterion_4() -> Check {
    let params = PolicyParams::zeros(8, 1).unwrap();
    let cfg = ObjectiveConfig::default();
    let worst = worst_case_rollouts(&[8, 8]);
    ensure(worst == 72, || format!("worst_case_rollouts([8, 8]) = {worst}"))?;
    let mut counts = BTreeMap::new();
    for (name, prune, want) in [
        ("none", PruneConfig::none(), 72),
        ("intrap", PruneConfig::intra(4), 36),
        ("interp", PruneConfig::inter(4), 40),
    ] {
        let mut forest: Vec<RolloutTree> = (0..20).map(worst_case_tree).collect();
        for tree in &mut forest {
            ensure(tree.generation_count() == 72, || format!("{} rollouts", tree.generation_count()))?;
            prune_and_propagate(tree, prune, CreditConfig::mars()).map_err(|e| e.to_string())?;
            let live = tree.live_generation_count();
            ensure(live == want, || format!("{name}: {live} updates, expected {want}"))?;
        }
        let out = murphy_loss_and_grad(&forest, &params, &params, &params, &cfg).map_err(|e| e.to_string())?;
        ensure(out.stats.updates == want * forest.len(), || {
            format!("{name}: objective touched {} generations", out.stats.updates)
        })?;
        counts.insert(name, want);
    }
    Ok(format!(
        "rollouts 72, updates none/intrap/interp = {}/{}/{}",
        counts["none"], counts["intrap"], counts["interp"]
    ))
}

// ---------------------------------------------------------------------------
// 5. IntraP optimality
// ---------------------------------------------------------------------------

/// `b² · Var` of the chosen integer numerators, exact.
fn scaled_variance(ks: &[i64], chosen: impl Iterator<Item = usize>) -> i64 {
    let (mut n, mut s, mut s2) = (0i64, 0i64, 0i64);
    for i in chosen {
        n += 1;
        s += ks[i];
        s2 += ks[i] * ks[i];
    }
    n * s2 - s * s
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..10_000 {
        let n = rng.random_range(1..=12usize);
        let denom = if case % 2 == 0 { 12 } else { 1000 };
        let ks: Vec<i64> = (0..n).map(|_| rng.random_range(0..=denom)).collect();
        let rewards: Vec<f64> = ks.iter().map(|&k| k as f64 / denom as f64).collect();
        let b = rng.random_range(1..=n + 1);
        let picked = select_intra(&rewards, b).map_err(|e| e.to_string())?;
        let size = b.min(n);
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        sorted.dedup();
        ensure(sorted.len() == size && sorted.iter().all(|&i| i < n), || {
            format!("case {case}: picked {picked:?} from {n} with b = {b}")
        })?;
        let best = (0u32..1 << n)
            .filter(|m| m.count_ones() as usize == size)
            .map(|m| scaled_variance(&ks, (0..n).filter(|i| m >> i & 1 == 1)))
            .max()
            .unwrap();
        let got = scaled_variance(&ks, picked.iter().copied());
        ensure(got == best, || {
            format!("case {case}: rewards {rewards:?}, b = {b}: picked {picked:?} with b²·var {got}, optimum {best}")
        })?;
    }
    Ok("10000 groups match exhaustive enumeration".into())
}

// ---------------------------------------------------------------------------
// 6. Gradient correctness
// ---------------------------------------------------------------------------

fn weight(p: &mut PolicyParams, is_ctx: bool, a: usize, t: usize, v: usize) -> &mut f64 {
    if is_ctx {
        &mut p.ctx_row_mut(a, t).unwrap()[v]
    } else {
        &mut p.big_row_mut(a).unwrap()[v]
    }
}

fn criterion_6() -> Check {
    let h = 1e-5;
    let cfg = ObjectiveConfig {
        clip_eps: 0.2,
        beta: 0.04,
        adv_eps: 1e-8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let (mut checked, mut kinks, mut with_clipping) = (0usize, 0usize, 0usize);
    for i in 0..50u64 {
        let turns = 2 + (i % 2) as usize;
        let old = PolicyParams::random(8, PROGRAM_LEN, 1.0, 300 + i).unwrap();
        let mut live = perturbed(&old, 400 + i, 0.3);
        let reference = PolicyParams::random(8, PROGRAM_LEN, 0.5, 500 + i).unwrap();
        let forest = sampled_forest(&old, 2, turns, 3, &mut rng);
        let out = murphy_loss_and_grad(&forest, &live, &old, &reference, &cfg).map_err(|e| e.to_string())?;
        with_clipping += usize::from(out.stats.clipped > 0);
        let eval = |p: &PolicyParams| murphy_loss_and_grad(&forest, p, &old, &reference, &cfg).unwrap();
        let mut coords: Vec<(bool, usize, usize)> = Vec::new();
        for b in 0..live.buckets() {
            for t in 0..live.length() {
                coords.push((true, b, t));
            }
        }
        for prev in 0..=BOS {
            coords.push((false, prev, 0));
        }
        for (is_ctx, a, t) in coords {
            for v in 0..VOCAB {
                let analytic = if is_ctx {
                    out.grad.ctx_entry(a, t, v)
                } else {
                    out.grad.big_entry(a, v)
                };
                let orig = *weight(&mut live, is_ctx, a, t, v);
                *weight(&mut live, is_ctx, a, t, v) = orig + h;
                let up = eval(&live);
                *weight(&mut live, is_ctx, a, t, v) = orig - h;
                let down = eval(&live);
                *weight(&mut live, is_ctx, a, t, v) = orig;
                if up.stats.clipped != down.stats.clipped {
                    // The step crosses a clip boundary, where the objective
                    // has no derivative.
                    kinks += 1;
                    continue;
                }
                let numeric = (up.value - down.value) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    ensure(with_clipping >= 10, || format!("only {with_clipping} instances had active clipping"))?;
    ensure(worst < 1e-5, || format!("max relative error {worst:.3e}"))?;
    Ok(format!(
        "50 instances ({with_clipping} clipping), {checked} coordinates, max rel err {worst:.2e} ({kinks} kink crossings skipped)"
    ))
}

// ---------------------------------------------------------------------------
// 7-8. Learning runs
// ---------------------------------------------------------------------------

fn preset_config(name: &str, extra: &str) -> TrainConfig {
    let overrides = murphy_core::config::parse_table(extra).unwrap();
    TrainConfig::resolve(Some(name), None, overrides).unwrap()
}

const PROBE_SEED: u64 = 777;
const EVAL_SEED: u64 = 4242;

fn criterion_7(tmp: &Path) -> Check {
    let cfg = preset_config("toy-grpo", "checkpoint_every = 0");
    if cfg.family != Family::HiddenOffset || cfg.tasks_per_step != 40 || cfg.steps != 200 {
        return Err(format!("toy-grpo preset drifted: {cfg:?}"));
    }
    let probe = sample_tasks(PROBE_SEED, Family::HiddenOffset, 1000);
    let g = cfg.generations[0];
    let start = Instant::now();
    let a = train(&cfg, &tmp.join("c7a"), &TrainOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let b = train(&cfg, &tmp.join("c7b"), &TrainOptions::default()).map_err(|e| e.to_string())?;
    let read = |p: &Path| fs::read(p).unwrap();
    ensure(read(&a.metrics_path) == read(&b.metrics_path), || "reruns differ in metrics".into())?;
    ensure(read(&a.final_checkpoint) == read(&b.final_checkpoint), || "reruns differ in checkpoint".into())?;
    let init = murphy_core::trainer::initial_params(&cfg).map_err(|e| e.to_string())?;
    let last = murphy_core::policy::Checkpoint::load(&a.final_checkpoint).map_err(|e| e.to_string())?;
    let before = probe_solved_fraction(&init, &probe, g, 5).map_err(|e| e.to_string())?;
    let after = probe_solved_fraction(&last.params, &probe, g, 5).map_err(|e| e.to_string())?;
    let lift = 100.0 * (after - before);
    ensure(elapsed < Duration::from_secs(300), || format!("training took {}", secs(elapsed)))?;
    ensure(lift >= 10.0, || format!("solved fraction {before:.3} -> {after:.3} (+{lift:.1} points)"))?;
    Ok(format!(
        "solved fraction {before:.3} -> {after:.3} (+{lift:.1} points) on 1000 held-out tasks, {} per run, reruns identical",
        secs(elapsed)
    ))
}

/// pass@1 at budgets 1 and 3 after training `preset` with seed `seed`.
fn trained_pass_at(preset: &str, seed: u64, tmp: &Path, tasks: &[Task]) -> std::result::Result<(f64, f64), String> {
    let cfg = preset_config(
        preset,
        &format!("env_seed = {seed}\nsample_seed = {seed}\ncheckpoint_every = 0"),
    );
    let dir = tmp.join(format!("{preset}-{seed}"));
    let run = train(&cfg, &dir, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let ck = murphy_core::policy::Checkpoint::load(&run.final_checkpoint).map_err(|e| e.to_string())?;
    let ecfg = EvalConfig {
        seed,
        ..EvalConfig::default()
    };
    let actor = PolicyActor {
        params: &ck.params,
        options: ecfg.sampling(),
    };
    let report = evaluate(&actor, tasks, &ecfg).map_err(|e| e.to_string())?;
    let _ = fs::remove_dir_all(&dir);
    Ok((report.at(1).unwrap().mean, report.at(3).unwrap().mean))
}

fn criterion_8(tmp: &Path) -> Check {
    let tasks = sample_tasks(EVAL_SEED, Family::HiddenOffset, 200);
    let seeds: Vec<u64> = (100..110).collect();
    let mut summary = Vec::new();
    let mut results = BTreeMap::new();
    for preset in ["toy-murphy", "toy-grpo", "toy-grpo-matched"] {
        let cfg = preset_config(preset, "");
        ensure(cfg.worst_case_rollouts() == 72, || format!("{preset}: budget {}", cfg.worst_case_rollouts()))?;
        let mut it1 = Vec::new();
        let mut it3 = Vec::new();
        for &s in &seeds {
            let (a, b) = trained_pass_at(preset, s, tmp, &tasks)?;
            it1.push(a);
            it3.push(b);
        }
        let (m1, s1) = mean_stdev(&it1);
        let (m3, s3) = mean_stdev(&it3);
        summary.push(format!("{preset} iter-1 {m1:.3} ± {s1:.3}, iter-3 {m3:.3} ± {s3:.3}"));
        results.insert(preset, (m1, m3));
    }
    let (murphy1, murphy3) = results["toy-murphy"];
    let text = summary.join("; ");
    ensure(murphy3 >= results["toy-grpo"].1, || format!("Murphy below GRPO: {text}"))?;
    ensure(murphy3 >= results["toy-grpo-matched"].1, || format!("Murphy below matched GRPO: {text}"))?;
    ensure(murphy3 > murphy1, || format!("no gain from iterations: {text}"))?;
    Ok(format!("{} seeds: {text}", seeds.len()))
}

// ---------------------------------------------------------------------------
// 9. Reflexion harness
// ---------------------------------------------------------------------------

fn tokens(program: &str) -> Vec<Token> {
    Program::padded(program, PROGRAM_LEN).unwrap().tokens().to_vec()
}

fn linear_task(seed: u64) -> Task {
    sample_task(seed, Family::Linear)
}

fn solution(task: &Task) -> Vec<Token> {
    tokens(&linear_program(task.coeffs[0], task.coeffs[1]))
}

fn criterion_9() -> Check {
    type R = murphy_core::error::Result<Vec<Token>>;
    let task = linear_task(3);
    let right = solution(&task);

    // Early stop.
    let oracle = |_: &ContextChain, _: u64| -> R { Ok(right.clone()) };
    let ep = reflexion_episode(&oracle, &task, 3, 0).map_err(|e| e.to_string())?;
    let hidden = run_suite(&task, &right, Suite::Hidden).map_err(|e| e.to_string())?.1.is_success();
    ensure(ep.iterations() == 1 && ep.hidden_pass() == hidden && hidden, || {
        format!("early stop: {} iterations", ep.iterations())
    })?;

    // Budget stop: the k-th attempt is the constant k, never correct.
    let wrong = |chain: &ContextChain, _: u64| -> R { Ok(tokens(&chain.turn().to_string())) };
    let ep = reflexion_episode(&wrong, &task, 3, 0).map_err(|e| e.to_string())?;
    ensure(ep.iterations() == 3 && ep.final_program() == tokens("3").as_slice() && !ep.hidden_pass(), || {
        format!("budget stop: {} iterations, final {:?}", ep.iterations(), ep.final_program())
    })?;

    // Solves exactly at the second attempt.
    let second = |chain: &ContextChain, _: u64| -> R {
        Ok(if chain.turn() == 1 { tokens("0") } else { right.clone() })
    };
    let ep = reflexion_episode(&second, &task, 3, 0).map_err(|e| e.to_string())?;
    ensure(ep.iterations() == 2 && ep.solved_at() == Some(2), || {
        format!("second-try solve: {} iterations", ep.iterations())
    })?;

    // pass@1 arithmetic.
    let tasks: Vec<Task> = (10..13).map(linear_task).collect();
    let cfg = EvalConfig {
        max_iterations: 1,
        repetitions: 1,
        ..EvalConfig::default()
    };
    let by_prompt: BTreeMap<String, Vec<Token>> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| (t.prompt_id(), if i == 1 { tokens("0") } else { solution(t) }))
        .collect();
    ensure(by_prompt.len() == 3, || "fixture tasks share a prompt".into())?;
    let scripted = |chain: &ContextChain, _: u64| -> R { Ok(by_prompt[&chain.task_id].clone()) };
    let report = evaluate(&scripted, &tasks, &cfg).map_err(|e| e.to_string())?;
    ensure(report.at(1).unwrap().mean == 2.0 / 3.0, || format!("pass@1 {}", report.at(1).unwrap().mean))?;

    let all = |chain: &ContextChain, _: u64| -> R {
        let t = tasks.iter().find(|t| t.prompt_id() == chain.task_id).unwrap();
        Ok(solution(t))
    };
    let three = EvalConfig {
        repetitions: 3,
        ..cfg
    };
    let report = evaluate(&all, &tasks, &three).map_err(|e| e.to_string())?;
    let b = report.at(1).unwrap();
    ensure(b.mean == 1.0 && b.stdev == 0.0, || format!("oracle pass@1 {} ± {}", b.mean, b.stdev))?;
    let report = evaluate(&wrong, &tasks, &three).map_err(|e| e.to_string())?;
    ensure(report.at(1).unwrap().mean == 0.0, || "constant failure scored".into())?;
    Ok("early stop, budget stop, second-try solve and pass@1 = 2/3, 1, 0 reproduced".into())
}

// ---------------------------------------------------------------------------
// 10. Reproducibility
// ---------------------------------------------------------------------------

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn criterion_10(tmp: &Path) -> Check {
    let config = tmp.join("repro.toml");
    fs::write(
        &config,
        "mode = \"murphy\"\nmax_turns = 2\ngenerations = [8, 8]\ncredit = \"mars\"\nprune = \"interp\"\nprune_budget = 4\n\
         beta = 0.04\nclip_eps = 0.2\ninit = \"syntax\"\noptimizer = \"adamw\"\nlearning_rate = 0.03\n\
         steps = 12\ntasks_per_step = 12\ncheckpoint_every = 4\nenv_seed = 9\nsample_seed = 10\n",
    )
    .unwrap();
    let mut runs = Vec::new();
    for name in ["r1", "r2"] {
        let req = TrainRequest {
            config: Some(config.clone()),
            out: tmp.join(name),
            ..TrainRequest::default()
        };
        runs.push(cmd_train(&req).map_err(|e| e.to_string())?);
    }
    let metrics: Vec<Vec<u8>> = runs.iter().map(|r| fs::read(&r.summary.metrics_path).unwrap()).collect();
    ensure(metrics[0] == metrics[1], || "metrics CSVs differ".into())?;
    let cks: Vec<_> = ["r1", "r2"].iter().map(|n| files_under(&tmp.join(n).join("checkpoints"))).collect();
    ensure(cks[0] == cks[1], || "checkpoints differ".into())?;
    ensure(runs[0].manifest.config_hash == runs[1].manifest.config_hash, || "config hashes differ".into())?;
    Ok(format!("metrics CSV and {} checkpoints byte-identical", cks[0].len()))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let corpus = tree_corpus();
    let checks: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("GRPO reduction", Box::new(criterion_1)),
        ("credit-assignment oracle", Box::new(|| criterion_2(&corpus))),
        ("credit invariants", Box::new(|| criterion_3(&corpus))),
        ("pruning accounting", Box::new(criterion_4)),
        ("IntraP optimality", Box::new(criterion_5)),
        ("gradient correctness", Box::new(criterion_6)),
        ("end-to-end learning", Box::new(|| criterion_7(tmp.path()))),
        ("multi-turn gain", Box::new(|| criterion_8(tmp.path()))),
        ("reflexion harness", Box::new(criterion_9)),
        ("reproducibility", Box::new(|| criterion_10(tmp.path()))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
