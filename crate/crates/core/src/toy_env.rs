//! Deterministic program-synthesis environment.
//!
//! A task is a hidden integer function on a small domain. A candidate solution
//! is a fixed-length postfix program over a ten-token vocabulary. Rewards are
//! the exact fraction of unit tests passed and feedback lists every failing
//! test together with what the program produced.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default program length.
pub const PROGRAM_LEN: usize = 7;
/// Default input domain, inclusive.
pub const DEFAULT_DOMAIN: (i64, i64) = (-4, 4);
/// Number of visible tests drawn per task.
pub const VISIBLE_TESTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    X,
    Digit(u8),
    Add,
    Sub,
    Mul,
    Pad,
}

impl Token {
    pub const VOCAB_SIZE: usize = 10;

    pub const ALL: [Token; Token::VOCAB_SIZE] = [
        Token::X,
        Token::Digit(0),
        Token::Digit(1),
        Token::Digit(2),
        Token::Digit(3),
        Token::Digit(4),
        Token::Add,
        Token::Sub,
        Token::Mul,
        Token::Pad,
    ];

    pub fn index(self) -> usize {
        match self {
            Token::X => 0,
            Token::Digit(d) => 1 + d as usize,
            Token::Add => 6,
            Token::Sub => 7,
            Token::Mul => 8,
            Token::Pad => 9,
        }
    }

    pub fn from_index(index: usize) -> Option<Token> {
        Token::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Token::X => "x",
            Token::Digit(0) => "0",
            Token::Digit(1) => "1",
            Token::Digit(2) => "2",
            Token::Digit(3) => "3",
            Token::Digit(_) => "4",
            Token::Add => "+",
            Token::Sub => "-",
            Token::Mul => "*",
            Token::Pad => "PAD",
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Token {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "x" => Token::X,
            "0" => Token::Digit(0),
            "1" => Token::Digit(1),
            "2" => Token::Digit(2),
            "3" => Token::Digit(3),
            "4" => Token::Digit(4),
            "+" => Token::Add,
            "-" | "−" => Token::Sub,
            "*" | "×" => Token::Mul,
            "PAD" => Token::Pad,
            other => return Err(Error::Domain(format!("unknown token {other:?}"))),
        })
    }
}

impl Serialize for Token {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses whitespace-separated tokens, e.g. `"x 1 +"`.
pub fn parse_tokens(text: &str) -> Result<Vec<Token>> {
    text.split_whitespace().map(str::parse).collect()
}

/// Renders tokens separated by spaces.
pub fn render_tokens(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| t.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Interpreter error codes. These are feedback, not faults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DslError {
    StackUnderflow,
    LeftoverOperands,
    EmptyProgram,
    /// `PAD` followed by a non-`PAD` token.
    MisplacedPad,
    Overflow,
}

impl fmt::Display for DslError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A well-formed program: `PAD` only appears as a suffix.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Program {
    tokens: Vec<Token>,
}

impl Program {
    pub fn new(tokens: Vec<Token>) -> std::result::Result<Program, DslError> {
        if let Some(first_pad) = tokens.iter().position(|&t| t == Token::Pad) {
            if tokens[first_pad..].iter().any(|&t| t != Token::Pad) {
                return Err(DslError::MisplacedPad);
            }
        }
        Ok(Program { tokens })
    }

    /// Parses `text` and right-pads it with `PAD` to `len` tokens.
    pub fn padded(text: &str, len: usize) -> Result<Program> {
        let mut tokens = parse_tokens(text)?;
        if tokens.len() > len {
            return Err(Error::Domain(format!(
                "program {text:?} longer than {len} tokens"
            )));
        }
        tokens.resize(len, Token::Pad);
        Program::new(tokens).map_err(|e| Error::Domain(format!("program {text:?}: {e}")))
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Tokens before the `PAD` suffix.
    pub fn body(&self) -> &[Token] {
        let end = self
            .tokens
            .iter()
            .position(|&t| t == Token::Pad)
            .unwrap_or(self.tokens.len());
        &self.tokens[..end]
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_tokens(self.body()))
    }
}

/// Postfix evaluation of `program` at `input`.
pub fn eval_program(program: &Program, input: i64) -> std::result::Result<i64, DslError> {
    let body = program.body();
    if body.is_empty() {
        return Err(DslError::EmptyProgram);
    }
    let mut stack: Vec<i64> = Vec::with_capacity(body.len());
    for &token in body {
        match token {
            Token::X => stack.push(input),
            Token::Digit(d) => stack.push(i64::from(d)),
            Token::Add | Token::Sub | Token::Mul => {
                let rhs = stack.pop().ok_or(DslError::StackUnderflow)?;
                let lhs = stack.pop().ok_or(DslError::StackUnderflow)?;
                let value = match token {
                    Token::Add => lhs.checked_add(rhs),
                    Token::Sub => lhs.checked_sub(rhs),
                    _ => lhs.checked_mul(rhs),
                };
                stack.push(value.ok_or(DslError::Overflow)?);
            }
            Token::Pad => unreachable!("body excludes PAD"),
        }
    }
    match stack.as_slice() {
        [value] => Ok(*value),
        _ => Err(DslError::LeftoverOperands),
    }
}

/// Evaluates a raw token sequence; malformed sequences fail with their error code.
pub fn run_tokens(tokens: &[Token], input: i64) -> std::result::Result<i64, DslError> {
    let program = Program::new(tokens.to_vec())?;
    eval_program(&program, input)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `a*x + b`, coefficients visible in the prompt.
    Linear,
    /// `x*x + b*x + c`, coefficients visible in the prompt.
    Quadratic,
    /// `x + c`; the prompt reveals nothing about `c`.
    HiddenOffset,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Linear => "linear",
            Family::Quadratic => "quadratic",
            Family::HiddenOffset => "hidden_offset",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Family::Linear),
            "quadratic" => Ok(Family::Quadratic),
            "hidden_offset" | "hidden-offset" => Ok(Family::HiddenOffset),
            other => Err(Error::Config(format!(
                "unknown task family {other:?} (expected linear, quadratic or hidden_offset)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TestCase {
    pub input: i64,
    pub expected: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    Train,
    Visible,
    Hidden,
}

/// What a failing test produced: a value or an interpreter error code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Outcome {
    Value(i64),
    Error(DslError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Failure {
    pub input: i64,
    pub expected: i64,
    pub got: Outcome,
}

/// Quantitative and qualitative execution feedback for one program.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub passed: u32,
    pub total: u32,
    /// Failing tests in suite order.
    pub failures: Vec<Failure>,
}

impl FeedbackRecord {
    pub fn reward(&self) -> f64 {
        f64::from(self.passed) / f64::from(self.total)
    }

    pub fn is_success(&self) -> bool {
        self.failures.is_empty()
    }

    pub(crate) fn validate(&self) -> std::result::Result<(), String> {
        if self.total == 0 {
            return Err("feedback total must be positive".into());
        }
        if self.passed as usize + self.failures.len() != self.total as usize {
            return Err(format!(
                "feedback passed ({}) + failures ({}) != total ({})",
                self.passed,
                self.failures.len(),
                self.total
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSuites {
    pub train: Vec<TestCase>,
    pub visible: Vec<TestCase>,
    pub hidden: Vec<TestCase>,
}

/// One program-synthesis problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub family: Family,
    /// `[a, b]` for linear, `[b, c]` for quadratic, `[c]` for hidden offset.
    pub coeffs: Vec<i64>,
    pub domain: (i64, i64),
    pub tests: TestSuites,
}

impl Task {
    pub fn target(&self, x: i64) -> i64 {
        match self.family {
            Family::Linear => self.coeffs[0] * x + self.coeffs[1],
            Family::Quadratic => x * x + self.coeffs[0] * x + self.coeffs[1],
            Family::HiddenOffset => x + self.coeffs[0],
        }
    }

    /// The part of the task visible to the policy before any feedback.
    pub fn prompt_id(&self) -> String {
        match self.family {
            Family::HiddenOffset => self.family.to_string(),
            _ => {
                let coeffs: Vec<String> = self.coeffs.iter().map(i64::to_string).collect();
                format!("{}:{}", self.family, coeffs.join(","))
            }
        }
    }

    pub fn suite(&self, suite: Suite) -> &[TestCase] {
        match suite {
            Suite::Train => &self.tests.train,
            Suite::Visible => &self.tests.visible,
            Suite::Hidden => &self.tests.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected_len = match self.family {
            Family::Linear | Family::Quadratic => 2,
            Family::HiddenOffset => 1,
        };
        if self.coeffs.len() != expected_len {
            return Err(Error::Config(format!(
                "task {}: {} expects {expected_len} coefficients, got {}",
                self.id,
                self.family,
                self.coeffs.len()
            )));
        }
        if self.tests.train.is_empty() {
            return Err(Error::Config(format!("task {}: empty train suite", self.id)));
        }
        let (lo, hi) = self.domain;
        let all = self
            .tests
            .train
            .iter()
            .chain(&self.tests.visible)
            .chain(&self.tests.hidden);
        for case in all {
            if case.input < lo || case.input > hi {
                return Err(Error::Config(format!(
                    "task {}: input {} outside domain {lo}..={hi}",
                    self.id, case.input
                )));
            }
            if case.expected != self.target(case.input) {
                return Err(Error::Config(format!(
                    "task {}: test ({}, {}) disagrees with target",
                    self.id, case.input, case.expected
                )));
            }
        }
        if self
            .tests
            .visible
            .iter()
            .any(|v| self.tests.hidden.iter().any(|h| h.input == v.input))
        {
            return Err(Error::Config(format!(
                "task {}: visible and hidden inputs overlap",
                self.id
            )));
        }
        Ok(())
    }
}

/// `count` tasks from `family`, the i-th seeded by `derive_seed([seed, i])`.
pub fn sample_tasks(seed: u64, family: Family, count: usize) -> Vec<Task> {
    (0..count as u64)
        .map(|i| sample_task(crate::seed::derive_seed(&[seed, i]), family))
        .collect()
}

/// Deterministically samples a task from `family`.
pub fn sample_task(seed: u64, family: Family) -> Task {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs = match family {
        Family::Linear => {
            let mut a = 0;
            while a == 0 {
                a = rng.random_range(-4..=4);
            }
            vec![a, rng.random_range(-4..=4)]
        }
        Family::Quadratic => vec![rng.random_range(-4..=4), rng.random_range(-4..=4)],
        Family::HiddenOffset => vec![rng.random_range(0..=4)],
    };
    let domain = DEFAULT_DOMAIN;
    let mut task = Task {
        id: format!("{family}-{seed}"),
        family,
        coeffs,
        domain,
        tests: TestSuites {
            train: Vec::new(),
            visible: Vec::new(),
            hidden: Vec::new(),
        },
    };
    let mut inputs: Vec<i64> = (domain.0..=domain.1).collect();
    task.tests.train = inputs
        .iter()
        .map(|&x| TestCase {
            input: x,
            expected: task.target(x),
        })
        .collect();
    inputs.shuffle(&mut rng);
    let (visible, hidden) = inputs.split_at(VISIBLE_TESTS);
    let mut visible = visible.to_vec();
    let mut hidden = hidden.to_vec();
    visible.sort_unstable();
    hidden.sort_unstable();
    let cases = |inputs: Vec<i64>| -> Vec<TestCase> {
        inputs
            .into_iter()
            .map(|x| TestCase {
                input: x,
                expected: task.target(x),
            })
            .collect()
    };
    let (visible, hidden) = (cases(visible), cases(hidden));
    task.tests.visible = visible;
    task.tests.hidden = hidden;
    task
}

/// Runs `tokens` against one suite of `task`.
pub fn evaluate(task: &Task, tokens: &[Token], suite: Suite) -> Result<(f64, FeedbackRecord)> {
    let cases = task.suite(suite);
    if cases.is_empty() {
        return Err(Error::Config(format!(
            "task {}: {suite:?} suite is empty",
            task.id
        )));
    }
    let program = Program::new(tokens.to_vec());
    let mut passed = 0u32;
    let mut failures = Vec::new();
    for case in cases {
        let got = match &program {
            Ok(p) => eval_program(p, case.input),
            Err(e) => Err(*e),
        };
        match got {
            Ok(v) if v == case.expected => passed += 1,
            Ok(v) => failures.push(Failure {
                input: case.input,
                expected: case.expected,
                got: Outcome::Value(v),
            }),
            Err(e) => failures.push(Failure {
                input: case.input,
                expected: case.expected,
                got: Outcome::Error(e),
            }),
        }
    }
    let feedback = FeedbackRecord {
        passed,
        total: cases.len() as u32,
        failures,
    };
    Ok((feedback.reward(), feedback))
}

/// Writes one task per line.
pub fn write_tasks(path: &Path, tasks: &[Task]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for task in tasks {
        let line = serde_json::to_string(task).expect("task serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tasks(path: &Path) -> Result<Vec<Task>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tasks = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let task: Task =
            serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        task.validate()?;
        tasks.push(task);
    }
    if tasks.is_empty() {
        return Err(Error::parse(0, format!("{} holds no tasks", path.display())));
    }
    Ok(tasks)
}
