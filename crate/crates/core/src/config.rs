//! Flat key-value training configuration, presets and validation.
//!
//! Algorithm-critical keys have no defaults: a config must state them, either
//! directly or through a preset.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::credit::{CreditConfig, CreditStrategy};
use crate::error::{Error, Result};
use crate::objective::ObjectiveConfig;
use crate::optim::OptimizerKind;
use crate::policy::DEFAULT_BUCKETS;
use crate::pruning::{PruneConfig, PruneStrategy};
use crate::toy_env::Family;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Grpo,
    Murphy,
    MurphySimple,
}

/// Starting point of the policy, which also serves as the KL reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// All-zero logits.
    Uniform,
    /// Grammar-aware base policy, see [`PolicyParams::syntax_prior`](crate::policy::PolicyParams::syntax_prior).
    Syntax,
}

impl Init {
    pub fn as_str(self) -> &'static str {
        match self {
            Init::Uniform => "uniform",
            Init::Syntax => "syntax",
        }
    }
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Grpo => "grpo",
            Mode::Murphy => "murphy",
            Mode::MurphySimple => "murphy_simple",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub max_turns: usize,
    pub generations: Vec<usize>,
    pub credit: CreditConfig,
    pub prune: PruneConfig,
    pub objective: ObjectiveConfig,
    pub init: Init,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub tasks_per_step: usize,
    pub family: Family,
    pub env_seed: u64,
    pub sample_seed: u64,
    pub buckets: usize,
    /// Checkpoint period in steps; 0 writes only the initial and final ones.
    pub checkpoint_every: u64,
    /// Fixed-epoch mode: cycle through this task file instead of sampling.
    pub task_file: Option<PathBuf>,
}

const REQUIRED: &[&str] = &["mode", "max_turns", "generations", "credit", "prune", "beta", "clip_eps"];

const KNOWN: &[&str] = &[
    "mode",
    "max_turns",
    "generations",
    "credit",
    "gamma",
    "prune",
    "prune_budget",
    "alpha1",
    "alpha2",
    "beta",
    "clip_eps",
    "adv_eps",
    "init",
    "optimizer",
    "learning_rate",
    "weight_decay",
    "steps",
    "tasks_per_step",
    "family",
    "env_seed",
    "sample_seed",
    "buckets",
    "checkpoint_every",
    "task_file",
];

pub const PRESETS: &[&str] = &[
    "paper-2turn",
    "paper-3turn",
    "toy-grpo",
    "toy-grpo-matched",
    "toy-murphy",
    "toy-murphy-mers",
    "toy-murphy-interp",
    "toy-murphy-intrap",
    "toy-simple",
];

/// Shared toy-scale settings.
const TOY_COMMON: &str = r#"
beta = 0.04
clip_eps = 0.2
weight_decay = 0.0
steps = 200
tasks_per_step = 40
family = "hidden_offset"
"#;

/// Multi-turn runs start from the syntax prior and use AdamW.
const TOY_MULTI_TURN: &str = r#"
init = "syntax"
optimizer = "adamw"
learning_rate = 0.03
"#;

/// Best single-turn GRPO setting found for the toy task.
const TOY_SINGLE_TURN: &str = r#"
init = "uniform"
optimizer = "sgd"
learning_rate = 2.0
"#;

/// Key-value table of a named preset.
pub fn preset(name: &str) -> Result<Table> {
    let body = match name {
        "paper-2turn" => r#"
mode = "murphy"
max_turns = 2
generations = [8, 8]
credit = "mars"
prune = "none"
beta = 0.04
clip_eps = 0.2
init = "syntax"
optimizer = "adamw"
learning_rate = 1e-6
weight_decay = 0.1
"#
        .to_string(),
        "paper-3turn" => r#"
mode = "murphy"
max_turns = 3
generations = [8, 8, 8]
credit = "mars"
prune = "interp"
prune_budget = 4
beta = 0.04
clip_eps = 0.2
init = "syntax"
optimizer = "adamw"
learning_rate = 1e-6
weight_decay = 0.1
"#
        .to_string(),
        "toy-grpo" => format!(
            "mode = \"grpo\"\nmax_turns = 1\ngenerations = [72]\ncredit = \"mars\"\nprune = \"none\"\n{TOY_COMMON}{TOY_SINGLE_TURN}"
        ),
        "toy-grpo-matched" => format!(
            "mode = \"grpo\"\nmax_turns = 1\ngenerations = [72]\ncredit = \"mars\"\nprune = \"none\"\n{TOY_COMMON}{TOY_MULTI_TURN}"
        ),
        "toy-murphy" => format!(
            "mode = \"murphy\"\nmax_turns = 2\ngenerations = [8, 8]\ncredit = \"mars\"\nprune = \"none\"\n{TOY_COMMON}{TOY_MULTI_TURN}"
        ),
        "toy-murphy-mers" => format!(
            "mode = \"murphy\"\nmax_turns = 2\ngenerations = [8, 8]\ncredit = \"mers\"\ngamma = 0.9\nprune = \"none\"\n{TOY_COMMON}{TOY_MULTI_TURN}"
        ),
        "toy-murphy-interp" => format!(
            "mode = \"murphy\"\nmax_turns = 2\ngenerations = [8, 8]\ncredit = \"mars\"\nprune = \"interp\"\nprune_budget = 4\n{TOY_COMMON}{TOY_MULTI_TURN}"
        ),
        "toy-murphy-intrap" => format!(
            "mode = \"murphy\"\nmax_turns = 2\ngenerations = [8, 8]\ncredit = \"mars\"\nprune = \"intrap\"\nprune_budget = 4\n{TOY_COMMON}{TOY_MULTI_TURN}"
        ),
        "toy-simple" => format!(
            "mode = \"murphy_simple\"\nmax_turns = 2\ngenerations = [8, 1]\ncredit = \"mars\"\nprune = \"none\"\n{TOY_COMMON}{TOY_MULTI_TURN}"
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (available: {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(body.parse::<Table>().expect("preset tables parse"))
}

/// Parses TOML text into a table, reporting the line of a syntax error.
pub fn parse_table(text: &str) -> Result<Table> {
    text.parse::<Table>().map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
            .unwrap_or(0);
        Error::parse(line, e.message().to_string())
    })
}

/// Parses `key=value` pairs, each value in TOML syntax, into an override table.
pub fn parse_overrides<S: AsRef<str>>(pairs: &[S]) -> Result<Table> {
    let mut text = String::new();
    for (i, pair) in pairs.iter().enumerate() {
        let pair = pair.as_ref();
        let Some((key, value)) = pair.split_once('=') else {
            return Err(Error::Config(format!("override #{} `{pair}` is not key=value", i + 1)));
        };
        text.push_str(&format!("{} = {}\n", key.trim(), value.trim()));
    }
    parse_table(&text)
}

/// Overlays `top` onto `base`.
pub fn merge(mut base: Table, top: Table) -> Table {
    for (k, v) in top {
        base.insert(k, v);
    }
    base
}

fn invalid(key: &str, value: impl std::fmt::Display, constraint: &str) -> Error {
    Error::Config(format!("{key} = {value} is invalid: must be {constraint}"))
}

struct Reader<'a> {
    table: &'a Table,
}

impl Reader<'_> {
    fn get(&self, key: &str) -> Option<&Value> {
        self.table.get(key)
    }

    fn required(&self, key: &str) -> Result<&Value> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn string(&self, key: &str) -> Result<Option<&str>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(invalid(key, v, "a string")),
        }
    }

    fn float(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Float(f)) => Ok(Some(*f)),
            Some(Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(v) => Err(invalid(key, v, "a number")),
        }
    }

    fn int(&self, key: &str, min: i64) -> Result<Option<i64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= min => Ok(Some(*i)),
            Some(v) => Err(invalid(key, v, &format!("an integer >= {min}"))),
        }
    }
}

impl TrainConfig {
    pub fn from_table(table: &Table) -> Result<Self> {
        for key in table.keys() {
            if !KNOWN.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        let r = Reader { table };
        for key in REQUIRED {
            r.required(key)?;
        }
        let mode = match r.string("mode")?.expect("required") {
            "grpo" => Mode::Grpo,
            "murphy" => Mode::Murphy,
            "murphy_simple" => Mode::MurphySimple,
            other => return Err(invalid("mode", format!("{other:?}"), "one of grpo, murphy, murphy_simple")),
        };
        let max_turns = r.int("max_turns", 1)?.expect("required") as usize;
        if mode == Mode::Grpo && max_turns != 1 {
            return Err(invalid("max_turns", max_turns, "1 when mode = grpo"));
        }
        let generations = match r.required("generations")? {
            Value::Integer(g) if *g >= 1 => vec![*g as usize; max_turns],
            Value::Array(items) => {
                let mut out = Vec::with_capacity(items.len());
                for item in items {
                    match item {
                        Value::Integer(g) if *g >= 1 => out.push(*g as usize),
                        v => return Err(invalid("generations", v, "a list of integers >= 1")),
                    }
                }
                if out.len() != max_turns {
                    return Err(invalid(
                        "generations",
                        items.len(),
                        &format!("a list with max_turns = {max_turns} entries"),
                    ));
                }
                out
            }
            v => return Err(invalid("generations", v, "an integer >= 1 or a list of them")),
        };
        let strategy = match r.string("credit")?.expect("required") {
            "mars" => CreditStrategy::Mars,
            "mers" => CreditStrategy::Mers,
            other => return Err(invalid("credit", format!("{other:?}"), "one of mars, mers")),
        };
        let gamma = match (strategy, r.float("gamma")?) {
            (CreditStrategy::Mers, None) => {
                return Err(Error::Config("missing required key `gamma` (credit = mers)".into()))
            }
            (_, Some(g)) if !(0.0..=1.0).contains(&g) => {
                return Err(Error::Config(format!("gamma = {g} is outside [0, 1]")))
            }
            (_, g) => g.unwrap_or(0.0),
        };
        let prune_strategy = match r.string("prune")?.expect("required") {
            "none" => PruneStrategy::None,
            "intrap" => PruneStrategy::IntraP,
            "interp" => PruneStrategy::InterP,
            other => return Err(invalid("prune", format!("{other:?}"), "one of none, intrap, interp")),
        };
        let budget = match (prune_strategy, r.int("prune_budget", 1)?) {
            (PruneStrategy::None, b) => b.map_or(usize::MAX, |b| b as usize),
            (_, Some(b)) => b as usize,
            (_, None) => {
                return Err(Error::Config(
                    "missing required key `prune_budget` (prune is enabled)".into(),
                ))
            }
        };
        let finite = |key: &str, v: Option<f64>, default: f64| -> Result<f64> {
            let v = v.unwrap_or(default);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(invalid(key, v, "finite"))
            }
        };
        let alpha1 = finite("alpha1", r.float("alpha1")?, 0.0)?;
        let alpha2 = finite("alpha2", r.float("alpha2")?, 1.0)?;
        let beta = r.float("beta")?.expect("required");
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(invalid("beta", beta, ">= 0"));
        }
        let clip_eps = r.float("clip_eps")?.expect("required");
        if !(clip_eps > 0.0 && clip_eps.is_finite()) {
            return Err(invalid("clip_eps", clip_eps, "> 0"));
        }
        let adv_eps = r.float("adv_eps")?.unwrap_or(1e-8);
        if !(adv_eps >= 0.0 && adv_eps.is_finite()) {
            return Err(invalid("adv_eps", adv_eps, ">= 0"));
        }
        let init = match r.string("init")? {
            None | Some("uniform") => Init::Uniform,
            Some("syntax") => Init::Syntax,
            Some(other) => return Err(invalid("init", format!("{other:?}"), "one of uniform, syntax")),
        };
        let optimizer = match r.string("optimizer")? {
            None | Some("sgd") => OptimizerKind::Sgd,
            Some("adamw") => OptimizerKind::AdamW,
            Some(other) => return Err(invalid("optimizer", format!("{other:?}"), "one of sgd, adamw")),
        };
        let learning_rate = r.float("learning_rate")?.unwrap_or(0.05);
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(invalid("learning_rate", learning_rate, ">= 0"));
        }
        let weight_decay = r.float("weight_decay")?.unwrap_or(0.0);
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(invalid("weight_decay", weight_decay, ">= 0"));
        }
        let family = match r.string("family")? {
            None => Family::HiddenOffset,
            Some(s) => s
                .parse()
                .map_err(|_| invalid("family", format!("{s:?}"), "one of linear, quadratic, hidden_offset"))?,
        };
        let cfg = TrainConfig {
            mode,
            max_turns,
            generations,
            credit: CreditConfig { strategy, gamma },
            prune: PruneConfig {
                strategy: prune_strategy,
                budget,
                alpha1,
                alpha2,
            },
            objective: ObjectiveConfig {
                clip_eps,
                beta,
                adv_eps,
            },
            init,
            optimizer,
            learning_rate,
            weight_decay,
            steps: r.int("steps", 0)?.unwrap_or(200) as u64,
            tasks_per_step: r.int("tasks_per_step", 1)?.unwrap_or(40) as usize,
            family,
            env_seed: r.int("env_seed", 0)?.unwrap_or(0) as u64,
            sample_seed: r.int("sample_seed", 0)?.unwrap_or(1) as u64,
            buckets: r.int("buckets", 1)?.unwrap_or(DEFAULT_BUCKETS as i64) as usize,
            checkpoint_every: r.int("checkpoint_every", 0)?.unwrap_or(50) as u64,
            task_file: r.string("task_file")?.map(PathBuf::from),
        };
        Ok(cfg)
    }

    /// Builds a config from an optional preset, a config file body and
    /// explicit overrides, in increasing precedence.
    pub fn resolve(preset_name: Option<&str>, file: Option<&str>, overrides: Table) -> Result<Self> {
        let mut table = match preset_name {
            Some(name) => preset(name)?,
            None => Table::new(),
        };
        if let Some(text) = file {
            table = merge(table, parse_table(text)?);
        }
        Self::from_table(&merge(table, overrides))
    }

    /// Canonical table: every key explicit, sorted.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new();
        let mut put = |k: &str, v: Value| {
            t.insert(k.to_string(), v);
        };
        put("mode", Value::String(self.mode.as_str().into()));
        put("max_turns", Value::Integer(self.max_turns as i64));
        put(
            "generations",
            Value::Array(self.generations.iter().map(|&g| Value::Integer(g as i64)).collect()),
        );
        put(
            "credit",
            Value::String(
                match self.credit.strategy {
                    CreditStrategy::Mars => "mars",
                    CreditStrategy::Mers => "mers",
                }
                .into(),
            ),
        );
        put("gamma", Value::Float(self.credit.gamma));
        put(
            "prune",
            Value::String(
                match self.prune.strategy {
                    PruneStrategy::None => "none",
                    PruneStrategy::IntraP => "intrap",
                    PruneStrategy::InterP => "interp",
                }
                .into(),
            ),
        );
        if self.prune.strategy != PruneStrategy::None {
            put("prune_budget", Value::Integer(self.prune.budget as i64));
        }
        put("alpha1", Value::Float(self.prune.alpha1));
        put("alpha2", Value::Float(self.prune.alpha2));
        put("beta", Value::Float(self.objective.beta));
        put("clip_eps", Value::Float(self.objective.clip_eps));
        put("adv_eps", Value::Float(self.objective.adv_eps));
        put("init", Value::String(self.init.as_str().into()));
        put(
            "optimizer",
            Value::String(
                match self.optimizer {
                    OptimizerKind::Sgd => "sgd",
                    OptimizerKind::AdamW => "adamw",
                }
                .into(),
            ),
        );
        put("learning_rate", Value::Float(self.learning_rate));
        put("weight_decay", Value::Float(self.weight_decay));
        put("steps", Value::Integer(self.steps as i64));
        put("tasks_per_step", Value::Integer(self.tasks_per_step as i64));
        put("family", Value::String(self.family.as_str().into()));
        put("env_seed", Value::Integer(self.env_seed as i64));
        put("sample_seed", Value::Integer(self.sample_seed as i64));
        put("buckets", Value::Integer(self.buckets as i64));
        put("checkpoint_every", Value::Integer(self.checkpoint_every as i64));
        if let Some(p) = &self.task_file {
            put("task_file", Value::String(p.display().to_string()));
        }
        t
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_table()).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn worst_case_rollouts(&self) -> usize {
        crate::rollout_tree::worst_case_rollouts(&self.generations)
    }
}
