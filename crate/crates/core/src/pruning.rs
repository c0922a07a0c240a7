//! Rollout pruning interleaved with credit propagation.
//!
//! IntraP keeps, inside each sibling group, the `b` generations whose rewards
//! have the largest variance. InterP scores whole child groups by
//! `α₁·mean + α₂·σ` and keeps the best `b` groups of each tree level.

use serde::{Deserialize, Serialize};

use crate::credit::{propagate_level, CreditConfig};
use crate::error::{Error, Result};
use crate::rollout_tree::{GenerationNode, NodeId, RolloutTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneStrategy {
    None,
    IntraP,
    InterP,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub strategy: PruneStrategy,
    pub budget: usize,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl PruneConfig {
    pub fn none() -> Self {
        PruneConfig {
            strategy: PruneStrategy::None,
            budget: usize::MAX,
            alpha1: 0.0,
            alpha2: 1.0,
        }
    }

    pub fn intra(budget: usize) -> Self {
        PruneConfig {
            strategy: PruneStrategy::IntraP,
            budget,
            ..Self::none()
        }
    }

    pub fn inter(budget: usize) -> Self {
        PruneConfig {
            strategy: PruneStrategy::InterP,
            budget,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy != PruneStrategy::None && self.budget == 0 {
            return Err(Error::Domain("prune_budget must be at least 1".into()));
        }
        if !self.alpha1.is_finite() || !self.alpha2.is_finite() {
            return Err(Error::Domain("alpha1 and alpha2 must be finite".into()));
        }
        Ok(())
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population variance; 0 for a singleton.
fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

/// Indices (ascending) of the size-`b` subset with maximal reward variance.
///
/// The optimum always consists of some `k` smallest and `b − k` largest
/// values, so only those `b + 1` candidates are scored. Ties favor smaller `k`.
pub fn select_intra(rewards: &[f64], b: usize) -> Result<Vec<usize>> {
    if b == 0 {
        return Err(Error::Domain("IntraP budget must be at least 1".into()));
    }
    let n = rewards.len();
    if b >= n {
        return Ok((0..n).collect());
    }
    let mut asc: Vec<usize> = (0..n).collect();
    asc.sort_by(|&i, &j| rewards[i].total_cmp(&rewards[j]).then(i.cmp(&j)));
    let mut desc: Vec<usize> = (0..n).collect();
    desc.sort_by(|&i, &j| rewards[j].total_cmp(&rewards[i]).then(i.cmp(&j)));

    let mut best: Option<(f64, Vec<usize>)> = None;
    for k in 0..=b {
        let mut chosen: Vec<usize> = asc[..k].to_vec();
        chosen.extend(
            desc.iter()
                .filter(|i| !asc[..k].contains(i))
                .take(b - k)
                .copied(),
        );
        let mut values: Vec<f64> = chosen.iter().map(|&i| rewards[i]).collect();
        values.sort_by(f64::total_cmp);
        let var = variance(&values);
        let better = match &best {
            None => true,
            Some((v, _)) => var > v + 1e-12 * v.abs().max(1.0),
        };
        if better {
            chosen.sort_unstable();
            best = Some((var, chosen));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

/// `α₁·mean + α₂·σ` with population σ.
pub fn score_group(rewards: &[f64], alpha1: f64, alpha2: f64) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::Domain("cannot score an empty group".into()));
    }
    Ok(alpha1 * mean(rewards) + alpha2 * variance(rewards).sqrt())
}

fn current_rewards(tree: &RolloutTree, ids: &[NodeId]) -> Result<Vec<f64>> {
    ids.iter()
        .map(|&id| tree.generation(id).map(GenerationNode::current_reward))
        .collect()
}

/// Keeps the `b` best-scoring child groups at `turn`; returns how many groups
/// were pruned.
pub fn prune_level_inter(
    tree: &mut RolloutTree,
    turn: usize,
    b: usize,
    alpha1: f64,
    alpha2: f64,
) -> Result<usize> {
    if turn < 2 {
        return Err(Error::Config(format!(
            "InterP ranks child groups, which start at turn 2 (got turn {turn})"
        )));
    }
    let mut scored = Vec::new();
    for prompt in tree.live_prompts_at(turn) {
        let children = tree.live_children(prompt)?;
        if children.is_empty() {
            continue;
        }
        let rewards = current_rewards(tree, &children)?;
        scored.push((score_group(&rewards, alpha1, alpha2)?, prompt));
    }
    // Prompts come in creation order, which is their parents' order; the
    // stable sort keeps it among equal scores.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let losers: Vec<NodeId> = scored.iter().skip(b).map(|&(_, p)| p).collect();
    for &p in &losers {
        tree.prune_subtree(p)?;
    }
    Ok(losers.len())
}

/// Applies `select_intra` to every sibling group at `turn`; returns how many
/// generations were pruned.
pub fn prune_level_intra(tree: &mut RolloutTree, turn: usize, b: usize) -> Result<usize> {
    let mut pruned = 0;
    for prompt in tree.live_prompts_at(turn) {
        let children = tree.live_children(prompt)?;
        let rewards = current_rewards(tree, &children)?;
        let keep = select_intra(&rewards, b)?;
        for (i, &id) in children.iter().enumerate() {
            if keep.binary_search(&i).is_err() {
                tree.prune_subtree(id)?;
                pruned += 1;
            }
        }
    }
    Ok(pruned)
}

/// Walks levels `S−1 … 1`: prunes per strategy, then propagates into the
/// level. Returns the number of generations pruned.
pub fn prune_and_propagate(
    tree: &mut RolloutTree,
    prune: PruneConfig,
    credit: CreditConfig,
) -> Result<usize> {
    prune.validate()?;
    credit.validate()?;
    if tree.credit_applied() {
        return Err(Error::State(format!(
            "credit already applied to tree {}",
            tree.task_id()
        )));
    }
    let before = tree.live_generation_count();
    let s_max = tree.max_turns();
    propagate_level(tree, s_max, credit)?;
    for s in (1..s_max).rev() {
        match prune.strategy {
            PruneStrategy::None => {}
            PruneStrategy::InterP => {
                prune_level_inter(tree, s + 1, prune.budget, prune.alpha1, prune.alpha2)?;
            }
            PruneStrategy::IntraP => {
                prune_level_intra(tree, s, prune.budget)?;
            }
        }
        propagate_level(tree, s, credit)?;
    }
    tree.mark_credit_applied()?;
    Ok(before - tree.live_generation_count())
}
