//! Group-relative advantages, clipped surrogate, k3 KL penalty and the
//! multi-turn objective with its exact gradient.
//!
//! For one response group of size `G` and sequence length `L` the term is
//!
//! ```text
//! (1 / (G·L)) · Σ_i Σ_t [ min(R·A, clip(R, 1−ε, 1+ε)·A) − β·k3(π, π_ref) ]
//! ```
//!
//! with `R = π_θ / π_old` per token. Every unpruned prompt node of a tree
//! contributes one such term, and the forest value is the mean over trees.
//!
//! Summation order is fixed (tree, group, generation, token) so values and
//! gradients are bit-reproducible; `grpo_loss_and_grad` follows the same order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ContextEncoding, Gradient, PolicyParams};
use crate::rollout_tree::{NodeId, RolloutTree};
use crate::toy_env::Token;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub clip_eps: f64,
    pub beta: f64,
    /// Groups whose reward σ is at most this get zero advantages.
    pub adv_eps: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            clip_eps: 0.2,
            beta: 0.04,
            adv_eps: 1e-8,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps.is_finite()) {
            return Err(Error::Domain(format!("clip_eps = {} must be positive", self.clip_eps)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Domain(format!("beta = {} must be non-negative", self.beta)));
        }
        if !(self.adv_eps >= 0.0 && self.adv_eps.is_finite()) {
            return Err(Error::Domain(format!("adv_eps = {} must be non-negative", self.adv_eps)));
        }
        Ok(())
    }
}

/// `(r − μ) / σ` with population σ; all zeros when σ ≤ `adv_eps`.
pub fn group_advantages(rewards: &[f64], cfg: &ObjectiveConfig) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::Domain("advantages of an empty group".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= cfg.adv_eps {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// k3 estimator `r − log r − 1` with `r = π_ref / π`.
pub fn kl_token(pi_logprob: f64, ref_logprob: f64) -> f64 {
    let log_r = ref_logprob - pi_logprob;
    log_r.exp() - log_r - 1.0
}

/// One generation's contribution to a group term.
#[derive(Debug, Clone, Copy)]
pub struct Member<'a> {
    pub ctx: ContextEncoding,
    pub tokens: &'a [Token],
    pub behavior_logprobs: &'a [f64],
    pub advantage: f64,
}

/// Generations normalized together.
pub type Group<'a> = Vec<Member<'a>>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveStats {
    pub tokens: usize,
    /// Generations that received a gradient.
    pub updates: usize,
    pub groups: usize,
    pub ratio_sum: f64,
    pub kl_sum: f64,
    /// Tokens whose ratio left the trust region.
    pub clipped: usize,
    /// Sum over generations of their mean per-token term.
    pub per_update_sum: f64,
}

impl ObjectiveStats {
    fn merge(&mut self, o: &ObjectiveStats) {
        self.tokens += o.tokens;
        self.updates += o.updates;
        self.groups += o.groups;
        self.ratio_sum += o.ratio_sum;
        self.kl_sum += o.kl_sum;
        self.clipped += o.clipped;
        self.per_update_sum += o.per_update_sum;
    }

    fn per_token(&self, x: f64) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            x / self.tokens as f64
        }
    }

    pub fn mean_ratio(&self) -> f64 {
        self.per_token(self.ratio_sum)
    }

    pub fn mean_kl(&self) -> f64 {
        self.per_token(self.kl_sum)
    }

    pub fn clip_frac(&self) -> f64 {
        self.per_token(self.clipped as f64)
    }

    /// Non-normative diagnostic: mean per-token term per updated generation.
    pub fn objective_per_update(&self) -> f64 {
        if self.updates == 0 {
            0.0
        } else {
            self.per_update_sum / self.updates as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    pub value: f64,
    pub grad: Gradient,
    pub stats: ObjectiveStats,
}

fn check_shapes(params: &PolicyParams, old: &PolicyParams, reference: &PolicyParams) -> Result<()> {
    let shape = |p: &PolicyParams| (p.buckets(), p.length());
    if shape(params) != shape(old) || shape(params) != shape(reference) {
        return Err(Error::Config(format!(
            "policy shapes differ: live {:?}, old {:?}, reference {:?}",
            shape(params),
            shape(old),
            shape(reference)
        )));
    }
    Ok(())
}

/// Accumulates the groups of one tree into a value and a gradient.
fn groups_term(
    params: &PolicyParams,
    reference: &PolicyParams,
    groups: &[Group<'_>],
    cfg: &ObjectiveConfig,
) -> Result<(f64, Gradient, ObjectiveStats)> {
    let mut value = 0.0;
    let mut grad = Gradient::default();
    let mut stats = ObjectiveStats::default();
    let (lo, hi) = (1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    for group in groups {
        if group.is_empty() {
            continue;
        }
        let scale = 1.0 / (group.len() * params.length()) as f64;
        let mut group_sum = 0.0;
        for m in group {
            let lps = params.logprob(m.ctx, m.tokens)?;
            let ref_lps = reference.logprob(m.ctx, m.tokens)?;
            if m.behavior_logprobs.len() != lps.len() {
                return Err(Error::State(format!(
                    "{} behavior log-probs for {} tokens",
                    m.behavior_logprobs.len(),
                    lps.len()
                )));
            }
            let mut weights = Vec::with_capacity(lps.len());
            let mut member_sum = 0.0;
            for t in 0..lps.len() {
                let ratio = (lps[t] - m.behavior_logprobs[t]).exp();
                let unclipped = ratio * m.advantage;
                let clipped = ratio.clamp(lo, hi) * m.advantage;
                let (surrogate, d_surrogate) = if unclipped <= clipped {
                    (unclipped, unclipped)
                } else {
                    (clipped, 0.0)
                };
                let r_ref = (ref_lps[t] - lps[t]).exp();
                let kl = kl_token(lps[t], ref_lps[t]);
                let term = surrogate - cfg.beta * kl;
                group_sum += term;
                member_sum += term;
                weights.push(scale * (d_surrogate - cfg.beta * (1.0 - r_ref)));
                stats.ratio_sum += ratio;
                stats.kl_sum += kl;
                stats.clipped += usize::from(!(lo..=hi).contains(&ratio));
            }
            stats.tokens += lps.len();
            stats.updates += 1;
            stats.per_update_sum += member_sum / lps.len() as f64;
            params.accumulate_logprob_grad(m.ctx, m.tokens, &weights, &mut grad)?;
        }
        stats.groups += 1;
        value += group_sum * scale;
    }
    Ok((value, grad, stats))
}

/// Advantage groups of a credited tree: one per live prompt node, normalized
/// over its live generations' propagated rewards.
pub fn murphy_groups<'t>(
    tree: &'t RolloutTree,
    params: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<Vec<Group<'t>>> {
    if !tree.credit_applied() {
        return Err(Error::State(format!(
            "tree {}: credit must be applied before computing the objective",
            tree.task_id()
        )));
    }
    let mut groups = Vec::new();
    for prompt in tree.prompts().filter(|p| !p.pruned) {
        let ids = tree.live_children(prompt.id)?;
        if ids.is_empty() {
            continue;
        }
        let ctx = params.encode(&prompt.context);
        let rewards = ids
            .iter()
            .map(|&id| {
                let g = tree.generation(id)?;
                g.propagated_reward.ok_or_else(|| {
                    Error::State(format!("{id} has no propagated reward"))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let advantages = group_advantages(&rewards, cfg)?;
        groups.push(members(tree, &ids, |_| Ok(ctx), &advantages)?);
    }
    Ok(groups)
}

fn members<'t>(
    tree: &'t RolloutTree,
    ids: &[NodeId],
    ctx: impl Fn(NodeId) -> Result<ContextEncoding> + Copy,
    advantages: &[f64],
) -> Result<Group<'t>> {
    ids.iter()
        .zip(advantages)
        .map(|(&id, &advantage)| {
            let g = tree.generation(id)?;
            Ok(Member {
                ctx: ctx(id)?,
                tokens: &g.tokens,
                behavior_logprobs: &g.behavior_logprobs,
                advantage,
            })
        })
        .collect()
}

/// The chain-terminal generation of every turn-1 chain in a feedback-chain
/// tree, grouped together with advantages from their final rewards.
pub fn simple_groups<'t>(
    tree: &'t RolloutTree,
    params: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<Vec<Group<'t>>> {
    let mut finals = Vec::new();
    for start in tree.live_children(tree.root())? {
        let mut id = start;
        loop {
            let g = tree.generation(id)?;
            let next = match g.child_prompt {
                Some(p) => tree.live_children(p)?.first().copied(),
                None => None,
            };
            match next {
                Some(n) => id = n,
                None => break,
            }
        }
        finals.push(id);
    }
    if finals.is_empty() {
        return Ok(Vec::new());
    }
    let rewards = finals
        .iter()
        .map(|&id| tree.generation(id).map(|g| g.raw_reward))
        .collect::<Result<Vec<f64>>>()?;
    let advantages = group_advantages(&rewards, cfg)?;
    let ctx = |id: NodeId| -> Result<ContextEncoding> {
        let parent = tree.generation(id)?.parent_prompt;
        Ok(params.encode(&tree.prompt(parent)?.context))
    };
    Ok(vec![members(tree, &finals, ctx, &advantages)?])
}

/// How a forest's trees are turned into advantage groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeObjective {
    Murphy,
    Simple,
}

fn forest_loss_and_grad(
    forest: &[RolloutTree],
    kind: TreeObjective,
    params: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveOutput> {
    cfg.validate()?;
    check_shapes(params, old, reference)?;
    if forest.is_empty() {
        return Err(Error::Domain("objective over an empty forest".into()));
    }
    for tree in forest {
        if tree.policy_version() != Some(old.version()) {
            return Err(Error::State(format!(
                "tree {} was sampled by policy version {:?}, old snapshot is version {}",
                tree.task_id(),
                tree.policy_version(),
                old.version()
            )));
        }
    }
    let parts: Vec<(f64, Gradient, ObjectiveStats)> = forest
        .par_iter()
        .map(|tree| {
            let groups = match kind {
                TreeObjective::Murphy => murphy_groups(tree, params, cfg)?,
                TreeObjective::Simple => simple_groups(tree, params, cfg)?,
            };
            groups_term(params, reference, &groups, cfg)
        })
        .collect::<Result<_>>()?;
    Ok(reduce(parts))
}

fn reduce(parts: Vec<(f64, Gradient, ObjectiveStats)>) -> ObjectiveOutput {
    let inv_n = 1.0 / parts.len() as f64;
    let mut total = 0.0;
    let mut grad = Gradient::default();
    let mut stats = ObjectiveStats::default();
    for (v, g, s) in &parts {
        total += v;
        grad.add_scaled(g, inv_n);
        stats.merge(s);
    }
    ObjectiveOutput {
        value: total * inv_n,
        grad,
        stats,
    }
}

/// Mean over trees of the summed per-prompt-node terms.
pub fn murphy_loss_and_grad(
    forest: &[RolloutTree],
    params: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveOutput> {
    forest_loss_and_grad(forest, TreeObjective::Murphy, params, old, reference, cfg)
}

/// Objective of the feedback-chain baseline: one group of chain-final
/// generations per tree.
pub fn simple_loss_and_grad(
    forest: &[RolloutTree],
    params: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveOutput> {
    forest_loss_and_grad(forest, TreeObjective::Simple, params, old, reference, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoSample {
    pub tokens: Vec<Token>,
    pub behavior_logprobs: Vec<f64>,
    pub reward: f64,
}

/// One prompt and its sampled response group.
#[derive(Debug, Clone, PartialEq)]
pub struct GrpoGroup {
    pub ctx: ContextEncoding,
    pub samples: Vec<GrpoSample>,
}

/// Single-turn GRPO: mean over prompts of the clipped, KL-penalized
/// group-relative surrogate.
pub fn grpo_loss_and_grad(
    groups: &[GrpoGroup],
    params: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveOutput> {
    cfg.validate()?;
    check_shapes(params, old, reference)?;
    if groups.is_empty() {
        return Err(Error::Domain("objective over no groups".into()));
    }
    let mut parts = Vec::with_capacity(groups.len());
    for group in groups {
        let rewards: Vec<f64> = group.samples.iter().map(|s| s.reward).collect();
        let advantages = group_advantages(&rewards, cfg)?;
        let scale = 1.0 / (group.samples.len() * params.length()) as f64;
        let (lo, hi) = (1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
        let mut sum = 0.0;
        let mut grad = Gradient::default();
        let mut stats = ObjectiveStats {
            groups: 1,
            ..Default::default()
        };
        for (s, &adv) in group.samples.iter().zip(&advantages) {
            let lps = params.logprob(group.ctx, &s.tokens)?;
            let ref_lps = reference.logprob(group.ctx, &s.tokens)?;
            let mut weights = Vec::with_capacity(lps.len());
            let mut own = 0.0;
            for t in 0..lps.len() {
                let ratio = (lps[t] - s.behavior_logprobs[t]).exp();
                let a = ratio * adv;
                let b = ratio.clamp(lo, hi) * adv;
                let kl = kl_token(lps[t], ref_lps[t]);
                let term = a.min(b) - cfg.beta * kl;
                sum += term;
                own += term;
                let d_clip = if a <= b { a } else { 0.0 };
                let d_kl = 1.0 - (ref_lps[t] - lps[t]).exp();
                weights.push(scale * (d_clip - cfg.beta * d_kl));
                stats.ratio_sum += ratio;
                stats.kl_sum += kl;
                stats.clipped += usize::from(!(lo..=hi).contains(&ratio));
            }
            stats.tokens += lps.len();
            stats.updates += 1;
            stats.per_update_sum += own / lps.len() as f64;
            params.accumulate_logprob_grad(group.ctx, &s.tokens, &weights, &mut grad)?;
        }
        parts.push((0.0 + sum * scale, grad, stats));
    }
    Ok(reduce(parts))
}
