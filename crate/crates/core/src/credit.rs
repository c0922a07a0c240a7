//! Backward reward propagation over a finished rollout tree.
//!
//! MaRS replaces a generation's reward with the best reward reachable below it.
//! MeRS mixes in the discounted mean of its children and divides by the number
//! of remaining turns. Both walk from the last turn up to the root, reading each
//! child's already-propagated value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout_tree::{NodeId, RolloutTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CreditStrategy {
    Mars,
    Mers,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CreditConfig {
    pub strategy: CreditStrategy,
    /// Discount on descendant rewards; MeRS only.
    pub gamma: f64,
}

impl CreditConfig {
    pub fn mars() -> Self {
        CreditConfig {
            strategy: CreditStrategy::Mars,
            gamma: 0.0,
        }
    }

    pub fn mers(gamma: f64) -> Self {
        CreditConfig {
            strategy: CreditStrategy::Mers,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy == CreditStrategy::Mers && !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Domain(format!(
                "gamma = {} outside [0, 1]",
                self.gamma
            )));
        }
        Ok(())
    }
}

pub fn propagate_mars(tree: &mut RolloutTree) -> Result<()> {
    propagate(tree, CreditConfig::mars())
}

pub fn propagate_mers(tree: &mut RolloutTree, gamma: f64) -> Result<()> {
    propagate(tree, CreditConfig::mers(gamma))
}

/// Propagates every level and marks the tree as credited.
pub fn propagate(tree: &mut RolloutTree, cfg: CreditConfig) -> Result<()> {
    cfg.validate()?;
    if tree.credit_applied() {
        return Err(Error::State(format!(
            "credit already applied to tree {}",
            tree.task_id()
        )));
    }
    propagate_unchecked(tree, cfg)?;
    tree.mark_credit_applied()
}

/// Recomputes propagated rewards without consulting or setting the credit flag.
pub fn propagate_unchecked(tree: &mut RolloutTree, cfg: CreditConfig) -> Result<()> {
    cfg.validate()?;
    for turn in (1..=tree.max_turns()).rev() {
        propagate_level(tree, turn, cfg)?;
    }
    Ok(())
}

/// Sets the propagated reward of every unpruned generation at `turn` from its
/// own raw reward and its children's current rewards.
pub(crate) fn propagate_level(tree: &mut RolloutTree, turn: usize, cfg: CreditConfig) -> Result<()> {
    let remaining = (tree.max_turns() - turn + 1) as f64;
    for id in tree.live_generations_at(turn) {
        let value = credited_value(tree, id, remaining, cfg)?;
        tree.generation_mut(id)?.propagated_reward = Some(value);
    }
    Ok(())
}

fn credited_value(tree: &RolloutTree, id: NodeId, remaining: f64, cfg: CreditConfig) -> Result<f64> {
    let g = tree.generation(id)?;
    let raw = g.raw_reward;
    let children = tree.children_rewards(id)?;
    Ok(match cfg.strategy {
        CreditStrategy::Mars => children.into_iter().fold(raw, f64::max),
        CreditStrategy::Mers => {
            if g.child_prompt.is_none() {
                raw
            } else {
                // An expanded node whose children were all pruned falls back to
                // a zero child mean.
                let mean = if children.is_empty() {
                    0.0
                } else {
                    children.iter().sum::<f64>() / children.len() as f64
                };
                (raw + cfg.gamma * mean) / remaining
            }
        }
    })
}
