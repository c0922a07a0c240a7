//! Arena-backed multi-turn rollout tree.
//!
//! Prompt nodes and generation nodes alternate: the root prompt (turn 1) owns a
//! response group of generations; every failing generation below the last turn
//! may be expanded into a feedback-conditioned prompt one turn deeper. Nodes are
//! never removed. Pruning only flags them, so dumps show every decision.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::toy_env::{FeedbackRecord, Token};

/// Rewards at this value are never expanded.
pub const MAX_REWARD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// One prior attempt and the feedback it earned.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub tokens: Vec<Token>,
    pub feedback: FeedbackRecord,
}

/// Structured form of the concatenated `[prompt, output, feedback, ...]` context.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextChain {
    pub task_id: String,
    pub segments: Vec<Segment>,
}

impl ContextChain {
    pub fn new(task_id: impl Into<String>) -> Self {
        ContextChain {
            task_id: task_id.into(),
            segments: Vec::new(),
        }
    }

    /// Turn this context is presented at.
    pub fn turn(&self) -> usize {
        self.segments.len() + 1
    }

    pub fn extended(&self, tokens: Vec<Token>, feedback: FeedbackRecord) -> Self {
        let mut next = self.clone();
        next.segments.push(Segment { tokens, feedback });
        next
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptNode {
    pub id: NodeId,
    pub turn: usize,
    pub parent_generation: Option<NodeId>,
    pub context: ContextChain,
    pub child_generations: Vec<NodeId>,
    pub pruned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationNode {
    pub id: NodeId,
    pub parent_prompt: NodeId,
    pub turn: usize,
    pub tokens: Vec<Token>,
    pub behavior_logprobs: Vec<f64>,
    pub raw_reward: f64,
    pub propagated_reward: Option<f64>,
    pub feedback: FeedbackRecord,
    pub child_prompt: Option<NodeId>,
    pub pruned: bool,
}

impl GenerationNode {
    /// Propagated reward when credit has been assigned, raw otherwise.
    pub fn current_reward(&self) -> f64 {
        self.propagated_reward.unwrap_or(self.raw_reward)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Prompt(PromptNode),
    Generation(GenerationNode),
}

impl Node {
    pub fn id(&self) -> NodeId {
        match self {
            Node::Prompt(p) => p.id,
            Node::Generation(g) => g.id,
        }
    }

    pub fn turn(&self) -> usize {
        match self {
            Node::Prompt(p) => p.turn,
            Node::Generation(g) => g.turn,
        }
    }

    pub fn is_pruned(&self) -> bool {
        match self {
            Node::Prompt(p) => p.pruned,
            Node::Generation(g) => g.pruned,
        }
    }
}

/// A sampled generation ready to be attached under a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub tokens: Vec<Token>,
    pub logprobs: Vec<f64>,
    pub reward: f64,
    pub feedback: FeedbackRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTree {
    task_id: String,
    nodes: Vec<Node>,
    max_turns: usize,
    schedule: Vec<usize>,
    credit_applied: bool,
    policy_version: Option<u64>,
}

impl RolloutTree {
    pub fn new(task_id: impl Into<String>, schedule: Vec<usize>, max_turns: usize) -> Result<Self> {
        let task_id = task_id.into();
        Self::with_prompt(task_id.clone(), task_id, schedule, max_turns)
    }

    /// Tree whose root context carries `prompt_id`, the part of the task the
    /// policy may see, while `task_id` names the task itself.
    pub fn with_prompt(
        task_id: impl Into<String>,
        prompt_id: impl Into<String>,
        schedule: Vec<usize>,
        max_turns: usize,
    ) -> Result<Self> {
        if max_turns == 0 {
            return Err(Error::Config("max_turns must be at least 1".into()));
        }
        if schedule.len() != max_turns {
            return Err(Error::Config(format!(
                "generation schedule has {} entries, expected max_turns = {max_turns}",
                schedule.len()
            )));
        }
        if let Some(pos) = schedule.iter().position(|&g| g == 0) {
            return Err(Error::Config(format!(
                "generation schedule entry {} is 0; every turn needs at least one generation",
                pos + 1
            )));
        }
        let root = PromptNode {
            id: NodeId(0),
            turn: 1,
            parent_generation: None,
            context: ContextChain::new(prompt_id),
            child_generations: Vec::new(),
            pruned: false,
        };
        Ok(RolloutTree {
            task_id: task_id.into(),
            nodes: vec![Node::Prompt(root)],
            max_turns,
            schedule,
            credit_applied: false,
            policy_version: None,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn prompt_id(&self) -> &str {
        match &self.nodes[0] {
            Node::Prompt(p) => &p.context.task_id,
            Node::Generation(_) => unreachable!("root is always a prompt"),
        }
    }

    pub fn max_turns(&self) -> usize {
        self.max_turns
    }

    pub fn schedule(&self) -> &[usize] {
        &self.schedule
    }

    pub fn credit_applied(&self) -> bool {
        self.credit_applied
    }

    /// Flips the credit flag; fails if credit was already assigned.
    pub fn mark_credit_applied(&mut self) -> Result<()> {
        if self.credit_applied {
            return Err(Error::State(format!(
                "credit already applied to tree {}",
                self.task_id
            )));
        }
        self.credit_applied = true;
        Ok(())
    }

    /// Version of the snapshot policy that produced the behavior log-probs.
    pub fn policy_version(&self) -> Option<u64> {
        self.policy_version
    }

    pub fn set_policy_version(&mut self, version: u64) {
        self.policy_version = Some(version);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::Lookup(format!("no node {id} in tree {}", self.task_id)))
    }

    pub fn prompt(&self, id: NodeId) -> Result<&PromptNode> {
        match self.node(id)? {
            Node::Prompt(p) => Ok(p),
            Node::Generation(_) => Err(Error::Lookup(format!("{id} is not a prompt node"))),
        }
    }

    pub fn generation(&self, id: NodeId) -> Result<&GenerationNode> {
        match self.node(id)? {
            Node::Generation(g) => Ok(g),
            Node::Prompt(_) => Err(Error::Lookup(format!("{id} is not a generation node"))),
        }
    }

    pub(crate) fn generation_mut(&mut self, id: NodeId) -> Result<&mut GenerationNode> {
        match self.nodes.get_mut(id.0) {
            Some(Node::Generation(g)) => Ok(g),
            Some(Node::Prompt(_)) => Err(Error::Lookup(format!("{id} is not a generation node"))),
            None => Err(Error::Lookup(format!("no node {id}"))),
        }
    }

    pub fn prompts(&self) -> impl Iterator<Item = &PromptNode> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Prompt(p) => Some(p),
            Node::Generation(_) => None,
        })
    }

    pub fn generations(&self) -> impl Iterator<Item = &GenerationNode> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Generation(g) => Some(g),
            Node::Prompt(_) => None,
        })
    }

    /// Unpruned generation ids at `turn`, in creation order.
    pub fn live_generations_at(&self, turn: usize) -> Vec<NodeId> {
        self.generations()
            .filter(|g| g.turn == turn && !g.pruned)
            .map(|g| g.id)
            .collect()
    }

    /// Unpruned prompt ids at `turn`, in creation order.
    pub fn live_prompts_at(&self, turn: usize) -> Vec<NodeId> {
        self.prompts()
            .filter(|p| p.turn == turn && !p.pruned)
            .map(|p| p.id)
            .collect()
    }

    /// Unpruned generations directly under `prompt`.
    pub fn live_children(&self, prompt: NodeId) -> Result<Vec<NodeId>> {
        let p = self.prompt(prompt)?;
        Ok(p.child_generations
            .iter()
            .copied()
            .filter(|&id| !self.nodes[id.0].is_pruned())
            .collect())
    }

    pub fn attach_generations(
        &mut self,
        prompt: NodeId,
        records: Vec<GenerationRecord>,
    ) -> Result<Vec<NodeId>> {
        let (turn, pruned, has_children) = {
            let p = self.prompt(prompt)?;
            (p.turn, p.pruned, !p.child_generations.is_empty())
        };
        if has_children {
            return Err(Error::State(format!(
                "prompt {prompt} already has a response group"
            )));
        }
        if pruned {
            return Err(Error::State(format!("prompt {prompt} is pruned")));
        }
        let budget = self.schedule[turn - 1];
        if records.len() > budget {
            return Err(Error::Config(format!(
                "{} generations exceed the turn-{turn} group size {budget}",
                records.len()
            )));
        }
        for r in &records {
            if !(0.0..=MAX_REWARD).contains(&r.reward) {
                return Err(Error::Domain(format!(
                    "reward {} outside [0, 1]",
                    r.reward
                )));
            }
            if r.feedback.validate().is_err() || r.reward != r.feedback.reward() {
                return Err(Error::Domain(format!(
                    "reward {} does not equal passed/total = {}/{}",
                    r.reward, r.feedback.passed, r.feedback.total
                )));
            }
            if r.tokens.len() != r.logprobs.len() {
                return Err(Error::Domain(format!(
                    "{} tokens but {} log-probabilities",
                    r.tokens.len(),
                    r.logprobs.len()
                )));
            }
        }
        let mut ids = Vec::with_capacity(records.len());
        for r in records {
            let id = NodeId(self.nodes.len());
            self.nodes.push(Node::Generation(GenerationNode {
                id,
                parent_prompt: prompt,
                turn,
                tokens: r.tokens,
                behavior_logprobs: r.logprobs,
                raw_reward: r.reward,
                propagated_reward: None,
                feedback: r.feedback,
                child_prompt: None,
                pruned: false,
            }));
            ids.push(id);
        }
        if let Node::Prompt(p) = &mut self.nodes[prompt.0] {
            p.child_generations.extend_from_slice(&ids);
        }
        Ok(ids)
    }

    /// Creates the feedback-conditioned prompt below a failing generation.
    pub fn expand(&mut self, generation: NodeId) -> Result<NodeId> {
        let g = self.generation(generation)?;
        if g.pruned {
            return Err(Error::State(format!("{generation} is pruned")));
        }
        if g.raw_reward >= MAX_REWARD {
            return Err(Error::State(format!(
                "{generation} already has the maximum reward"
            )));
        }
        if g.turn >= self.max_turns {
            return Err(Error::State(format!(
                "{generation} is at the last turn ({})",
                self.max_turns
            )));
        }
        if g.child_prompt.is_some() {
            return Err(Error::State(format!("{generation} is already expanded")));
        }
        let turn = g.turn + 1;
        let parent_context = &self.prompt(g.parent_prompt)?.context;
        let context = parent_context.extended(g.tokens.clone(), g.feedback.clone());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node::Prompt(PromptNode {
            id,
            turn,
            parent_generation: Some(generation),
            context,
            child_generations: Vec::new(),
            pruned: false,
        }));
        self.generation_mut(generation)?.child_prompt = Some(id);
        Ok(id)
    }

    /// Current rewards of the unpruned generations one turn below `generation`.
    pub fn children_rewards(&self, generation: NodeId) -> Result<Vec<f64>> {
        let g = self.generation(generation)?;
        let Some(child) = g.child_prompt else {
            return Ok(Vec::new());
        };
        if self.nodes[child.0].is_pruned() {
            return Ok(Vec::new());
        }
        Ok(self
            .live_children(child)?
            .into_iter()
            .map(|id| self.generation(id).map(GenerationNode::current_reward))
            .collect::<Result<_>>()?)
    }

    /// Flags `id` and everything below it as pruned.
    pub fn prune_subtree(&mut self, id: NodeId) -> Result<()> {
        self.node(id)?;
        let mut stack = vec![id];
        while let Some(next) = stack.pop() {
            match &mut self.nodes[next.0] {
                Node::Prompt(p) => {
                    p.pruned = true;
                    stack.extend(p.child_generations.iter().copied());
                }
                Node::Generation(g) => {
                    g.pruned = true;
                    g.propagated_reward = None;
                    stack.extend(g.child_prompt);
                }
            }
        }
        Ok(())
    }

    pub fn generation_count(&self) -> usize {
        self.generations().count()
    }

    pub fn live_generation_count(&self) -> usize {
        self.generations().filter(|g| !g.pruned).count()
    }

    /// Highest raw reward over every generation, pruned or not.
    pub fn best_raw_reward(&self) -> f64 {
        self.generations()
            .map(|g| g.raw_reward)
            .fold(0.0, f64::max)
    }

    /// Checks the structural invariants; returns the first violation.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::State(format!("tree {}: {msg}", self.task_id)));
        match self.nodes.first() {
            Some(Node::Prompt(p)) if p.turn == 1 && p.parent_generation.is_none() => {}
            _ => return bad("root must be a turn-1 prompt without parent".into()),
        }
        let mut seen = vec![0usize; self.nodes.len()];
        let mut stack = vec![NodeId(0)];
        while let Some(id) = stack.pop() {
            seen[id.0] += 1;
            if seen[id.0] > 1 {
                return bad(format!("{id} reachable along two paths"));
            }
            match &self.nodes[id.0] {
                Node::Prompt(p) => {
                    if p.context.turn() != p.turn {
                        return bad(format!("{id} context length disagrees with turn"));
                    }
                    if p.child_generations.len() > self.schedule[p.turn - 1] {
                        return bad(format!("{id} has more children than its group size"));
                    }
                    for &c in &p.child_generations {
                        let g = self.generation(c)?;
                        if g.parent_prompt != id || g.turn != p.turn {
                            return bad(format!("{c} does not link back to {id}"));
                        }
                        if p.pruned && !g.pruned {
                            return bad(format!("{c} is live under pruned {id}"));
                        }
                        stack.push(c);
                    }
                }
                Node::Generation(g) => {
                    if let Some(c) = g.child_prompt {
                        if g.raw_reward >= MAX_REWARD || g.turn >= self.max_turns {
                            return bad(format!("{id} expanded against the expansion rule"));
                        }
                        let p = self.prompt(c)?;
                        if p.parent_generation != Some(id) || p.turn != g.turn + 1 {
                            return bad(format!("{c} does not link back to {id}"));
                        }
                        if g.pruned && !p.pruned {
                            return bad(format!("{c} is live under pruned {id}"));
                        }
                        stack.push(c);
                    }
                }
            }
        }
        if let Some(orphan) = seen.iter().position(|&n| n == 0) {
            return bad(format!("#{orphan} unreachable from the root"));
        }
        Ok(())
    }
}

/// Total generations when every generation fails until the last turn.
pub fn worst_case_rollouts(schedule: &[usize]) -> usize {
    schedule
        .iter()
        .scan(1usize, |width, &g| {
            *width *= g;
            Some(*width)
        })
        .sum()
}

// ---------------------------------------------------------------------------
// JSON-lines dump
// ---------------------------------------------------------------------------

fn nullable<'de, D, T>(d: D) -> std::result::Result<Option<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    Option::<T>::deserialize(d)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    kind: String,
    task_id: String,
    prompt_id: String,
    max_turns: usize,
    schedule: Vec<usize>,
    credit_applied: bool,
    #[serde(deserialize_with = "nullable")]
    policy_version: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeLine {
    node: usize,
    kind: String,
    turn: usize,
    #[serde(deserialize_with = "nullable")]
    parent: Option<usize>,
    #[serde(deserialize_with = "nullable")]
    tokens: Option<Vec<Token>>,
    #[serde(deserialize_with = "nullable")]
    raw_reward: Option<f64>,
    #[serde(deserialize_with = "nullable")]
    propagated_reward: Option<f64>,
    #[serde(deserialize_with = "nullable")]
    feedback: Option<FeedbackRecord>,
    pruned: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logprobs: Option<Vec<f64>>,
}

impl RolloutTree {
    /// Writes a header line followed by one line per node.
    pub fn dump<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let header = HeaderLine {
            kind: "tree".into(),
            task_id: self.task_id.clone(),
            prompt_id: self.prompt_id().to_owned(),
            max_turns: self.max_turns,
            schedule: self.schedule.clone(),
            credit_applied: self.credit_applied,
            policy_version: self.policy_version,
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for node in &self.nodes {
            let line = match node {
                Node::Prompt(p) => NodeLine {
                    node: p.id.0,
                    kind: "prompt".into(),
                    turn: p.turn,
                    parent: p.parent_generation.map(|n| n.0),
                    tokens: None,
                    raw_reward: None,
                    propagated_reward: None,
                    feedback: None,
                    pruned: p.pruned,
                    logprobs: None,
                },
                Node::Generation(g) => NodeLine {
                    node: g.id.0,
                    kind: "gen".into(),
                    turn: g.turn,
                    parent: Some(g.parent_prompt.0),
                    tokens: Some(g.tokens.clone()),
                    raw_reward: Some(g.raw_reward),
                    propagated_reward: g.propagated_reward,
                    feedback: Some(g.feedback.clone()),
                    pruned: g.pruned,
                    logprobs: Some(g.behavior_logprobs.clone()),
                },
            };
            writeln!(out, "{}", serde_json::to_string(&line).expect("node serializes"))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.dump(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Parses exactly one tree.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut forest = load_forest(text)?;
        if forest.len() != 1 {
            return Err(Error::parse(
                0,
                format!("expected one tree, found {}", forest.len()),
            ));
        }
        Ok(forest.remove(0))
    }
}

/// Writes several trees back to back.
pub fn dump_forest<W: Write>(forest: &[RolloutTree], out: &mut W) -> std::io::Result<()> {
    for tree in forest {
        tree.dump(out)?;
    }
    Ok(())
}

/// Parses a sequence of dumped trees.
pub fn load_forest(text: &str) -> Result<Vec<RolloutTree>> {
    let mut forest: Vec<RolloutTree> = Vec::new();
    let mut current: Option<RolloutTree> = None;
    let mut pending_prompt: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| Error::parse(line_no, e.to_string()))?;
        let kind = value
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| Error::parse(line_no, "missing field `kind`"))?
            .to_owned();
        if kind == "tree" {
            let header: HeaderLine = serde_json::from_value(value)
                .map_err(|e| Error::parse(line_no, e.to_string()))?;
            if let Some(tree) = current.take() {
                finish_tree(tree, line_no, &mut forest)?;
            }
            let mut tree = RolloutTree::with_prompt(
                header.task_id,
                header.prompt_id.clone(),
                header.schedule,
                header.max_turns,
            )
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
            tree.nodes.clear();
            pending_prompt = Some(header.prompt_id);
            tree.credit_applied = header.credit_applied;
            tree.policy_version = header.policy_version;
            current = Some(tree);
            continue;
        }
        let line: NodeLine =
            serde_json::from_value(value).map_err(|e| Error::parse(line_no, e.to_string()))?;
        let tree = current
            .as_mut()
            .ok_or_else(|| Error::parse(line_no, "node line before any tree header"))?;
        let root_prompt = pending_prompt.take();
        push_node(tree, line, root_prompt).map_err(|msg| Error::parse(line_no, msg))?;
    }
    match current {
        Some(tree) => finish_tree(tree, text.lines().count(), &mut forest)?,
        None => return Err(Error::parse(1, "input holds no tree")),
    }
    Ok(forest)
}

fn finish_tree(tree: RolloutTree, line_no: usize, forest: &mut Vec<RolloutTree>) -> Result<()> {
    if tree.nodes.is_empty() {
        return Err(Error::parse(line_no, "tree header without nodes"));
    }
    tree.validate()
        .map_err(|e| Error::parse(line_no, e.to_string()))?;
    forest.push(tree);
    Ok(())
}

fn push_node(
    tree: &mut RolloutTree,
    line: NodeLine,
    root_prompt: Option<String>,
) -> std::result::Result<(), String> {
    if line.node != tree.nodes.len() {
        return Err(format!(
            "field `node`: expected id {}, found {}",
            tree.nodes.len(),
            line.node
        ));
    }
    let id = NodeId(line.node);
    if line.turn == 0 || line.turn > tree.max_turns {
        return Err(format!("field `turn`: {} outside 1..={}", line.turn, tree.max_turns));
    }
    match line.kind.as_str() {
        "prompt" => {
            let context = match line.parent {
                None if id.0 == 0 && line.turn == 1 => {
                    ContextChain::new(root_prompt.unwrap_or_else(|| tree.task_id.clone()))
                }
                None => return Err("field `parent`: only the root prompt may omit it".into()),
                Some(parent) => {
                    let g = match tree.nodes.get(parent) {
                        Some(Node::Generation(g)) => g,
                        _ => return Err(format!("field `parent`: #{parent} is not an earlier generation")),
                    };
                    if g.child_prompt.is_some() {
                        return Err(format!("field `parent`: #{parent} already expanded"));
                    }
                    let parent_context = match &tree.nodes[g.parent_prompt.0] {
                        Node::Prompt(p) => &p.context,
                        Node::Generation(_) => unreachable!(),
                    };
                    parent_context.extended(g.tokens.clone(), g.feedback.clone())
                }
            };
            if let Some(parent) = line.parent {
                if let Node::Generation(g) = &mut tree.nodes[parent] {
                    g.child_prompt = Some(id);
                }
            }
            tree.nodes.push(Node::Prompt(PromptNode {
                id,
                turn: line.turn,
                parent_generation: line.parent.map(NodeId),
                context,
                child_generations: Vec::new(),
                pruned: line.pruned,
            }));
        }
        "gen" => {
            let parent = line.parent.ok_or("field `parent`: generation needs a parent prompt")?;
            let tokens = line.tokens.ok_or("field `tokens`: required for generations")?;
            let raw_reward = line.raw_reward.ok_or("field `raw_reward`: required for generations")?;
            let feedback = line.feedback.ok_or("field `feedback`: required for generations")?;
            let behavior_logprobs = line.logprobs.ok_or("field `logprobs`: required for generations")?;
            if !(0.0..=MAX_REWARD).contains(&raw_reward) {
                return Err(format!("field `raw_reward`: {raw_reward} outside [0, 1]"));
            }
            if let Some(p) = line.propagated_reward {
                if !(0.0..=MAX_REWARD).contains(&p) {
                    return Err(format!("field `propagated_reward`: {p} outside [0, 1]"));
                }
            }
            match tree.nodes.get_mut(parent) {
                Some(Node::Prompt(p)) => p.child_generations.push(id),
                _ => return Err(format!("field `parent`: #{parent} is not an earlier prompt")),
            }
            tree.nodes.push(Node::Generation(GenerationNode {
                id,
                parent_prompt: NodeId(parent),
                turn: line.turn,
                tokens,
                behavior_logprobs,
                raw_reward,
                propagated_reward: line.propagated_reward,
                feedback,
                child_prompt: None,
                pruned: line.pruned,
            }));
        }
        other => return Err(format!("field `kind`: unknown node kind {other:?}")),
    }
    Ok(())
}
