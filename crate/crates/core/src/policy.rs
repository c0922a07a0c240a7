//! Tiny autoregressive softmax policy.
//!
//! `π(o_t | ctx, o_<t) = softmax(W_ctx[b, t, ·] + W_big[o_{t-1}, ·])` where `b`
//! is a hashed bucket of the prompt identity, the turn and the feedback seen so
//! far. Position 0 uses a dedicated begin-of-sequence row of `W_big`.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::io::Write;
use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::Moments;
use crate::rollout_tree::ContextChain;
use crate::toy_env::{run_tokens, DslError, FeedbackRecord, Outcome, Token, PROGRAM_LEN};

pub const VOCAB: usize = Token::VOCAB_SIZE;
/// Row of `W_big` used as the previous token at position 0.
pub const BOS: usize = VOCAB;
pub const DEFAULT_BUCKETS: usize = 4096;

/// What one failing test says about the program, independent of its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Signature {
    /// `expected - got`.
    Residual(i64),
    Error(DslError),
}

/// Histogram of failure signatures with counts divided by their gcd, so the
/// same mistake reads identically on suites of different sizes.
pub fn feedback_digest(feedback: &FeedbackRecord) -> Vec<(Signature, u32)> {
    let mut counts: BTreeMap<Signature, u32> = BTreeMap::new();
    for f in &feedback.failures {
        let sig = match f.got {
            Outcome::Value(g) => Signature::Residual(f.expected.wrapping_sub(g)),
            Outcome::Error(e) => Signature::Error(e),
        };
        *counts.entry(sig).or_default() += 1;
    }
    let g = counts.values().fold(0, |acc, &c| gcd(acc, c)).max(1);
    counts.into_iter().map(|(s, c)| (s, c / g)).collect()
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextEncoding {
    pub bucket: usize,
}

/// Hashes prompt identity, turn and per-segment feedback digests into a bucket.
pub fn encode_context(chain: &ContextChain, buckets: usize) -> ContextEncoding {
    let mut h = FnvHasher::default();
    h.write(chain.task_id.as_bytes());
    h.write_u8(0xff);
    h.write_u64(chain.turn() as u64);
    for seg in &chain.segments {
        h.write_u8(b'|');
        for (sig, count) in feedback_digest(&seg.feedback) {
            match sig {
                Signature::Residual(r) => {
                    h.write_u8(0);
                    h.write_i64(r);
                }
                Signature::Error(e) => {
                    h.write_u8(1);
                    h.write_u8(e as u8);
                }
            }
            h.write_u32(count);
        }
    }
    ContextEncoding {
        bucket: (h.finish() % buckets as u64) as usize,
    }
}

/// Numerically stable `log softmax(logits / temperature)`.
pub fn log_softmax(logits: &[f64; VOCAB], temperature: f64) -> [f64; VOCAB] {
    let z = logits.map(|l| l / temperature);
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.map(|v| v - lse)
}

/// Nucleus truncation: keeps the smallest high-probability prefix whose mass
/// reaches `top_p` and renormalizes. Dropped tokens get `-inf`.
pub fn truncate_top_p(logprobs: &[f64; VOCAB], top_p: f64) -> [f64; VOCAB] {
    let mut order: Vec<usize> = (0..VOCAB).collect();
    order.sort_by(|&a, &b| logprobs[b].total_cmp(&logprobs[a]).then(a.cmp(&b)));
    let mut kept = [false; VOCAB];
    let mut mass = 0.0;
    for &v in &order {
        kept[v] = true;
        mass += logprobs[v].exp();
        if mass >= top_p {
            break;
        }
    }
    let log_mass = mass.ln();
    let mut out = [f64::NEG_INFINITY; VOCAB];
    for v in 0..VOCAB {
        if kept[v] {
            out[v] = logprobs[v] - log_mass;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingOptions {
    pub temperature: f64,
    pub top_p: Option<f64>,
}

impl SamplingOptions {
    /// Temperature 1, no truncation: behavior log-probs equal policy log-probs.
    pub fn training() -> Self {
        SamplingOptions {
            temperature: 1.0,
            top_p: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Domain(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Domain(format!("top_p must lie in (0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSample {
    pub tokens: Vec<Token>,
    /// Log-probabilities under the distribution actually sampled from.
    pub logprobs: Vec<f64>,
}

/// Sparse gradient over the two weight tables, keyed for deterministic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    pub ctx: BTreeMap<(usize, usize), [f64; VOCAB]>,
    pub big: BTreeMap<usize, [f64; VOCAB]>,
}

impl Gradient {
    pub fn is_empty(&self) -> bool {
        self.ctx.is_empty() && self.big.is_empty()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (k, row) in &other.ctx {
            let dst = self.ctx.entry(*k).or_insert([0.0; VOCAB]);
            for v in 0..VOCAB {
                dst[v] += scale * row[v];
            }
        }
        for (k, row) in &other.big {
            let dst = self.big.entry(*k).or_insert([0.0; VOCAB]);
            for v in 0..VOCAB {
                dst[v] += scale * row[v];
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.ctx.values_mut().chain(self.big.values_mut()) {
            for x in row.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.ctx
            .values()
            .chain(self.big.values())
            .flat_map(|r| r.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Reads one entry; absent rows are zero.
    pub fn ctx_entry(&self, bucket: usize, position: usize, token: usize) -> f64 {
        self.ctx.get(&(bucket, position)).map_or(0.0, |r| r[token])
    }

    pub fn big_entry(&self, prev: usize, token: usize) -> f64 {
        self.big.get(&prev).map_or(0.0, |r| r[token])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    buckets: usize,
    length: usize,
    w_ctx: Vec<f64>,
    w_big: Vec<f64>,
    version: u64,
}

impl PolicyParams {
    /// All-zero weights: the uniform policy.
    pub fn zeros(buckets: usize, length: usize) -> Result<Self> {
        if buckets == 0 || length == 0 {
            return Err(Error::Config(format!(
                "policy shape needs buckets >= 1 and length >= 1, got ({buckets}, {length})"
            )));
        }
        Ok(PolicyParams {
            buckets,
            length,
            w_ctx: vec![0.0; buckets * length * VOCAB],
            w_big: vec![0.0; (VOCAB + 1) * VOCAB],
            version: 0,
        })
    }

    pub fn default_shape() -> Self {
        Self::zeros(DEFAULT_BUCKETS, PROGRAM_LEN).expect("default shape is valid")
    }

    /// Weights drawn uniformly from `[-scale, scale]`.
    pub fn random(buckets: usize, length: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(buckets, length)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in p.w_ctx.iter_mut().chain(p.w_big.iter_mut()) {
            *w = rng.random_range(-scale..=scale);
        }
        Ok(p)
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn length(&self) -> usize {
        self.length
    }

    /// Number of updates applied to these weights.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn w_ctx(&self) -> &[f64] {
        &self.w_ctx
    }

    pub fn w_big(&self) -> &[f64] {
        &self.w_big
    }

    pub fn encode(&self, chain: &ContextChain) -> ContextEncoding {
        encode_context(chain, self.buckets)
    }

    pub(crate) fn ctx_offset(&self, bucket: usize, position: usize) -> Result<usize> {
        if bucket >= self.buckets || position >= self.length {
            return Err(Error::Domain(format!(
                "context index (bucket {bucket}, position {position}) outside ({}, {})",
                self.buckets, self.length
            )));
        }
        Ok((bucket * self.length + position) * VOCAB)
    }

    pub(crate) fn big_offset(prev: usize) -> Result<usize> {
        if prev > BOS {
            return Err(Error::Domain(format!("previous-token index {prev} > {BOS}")));
        }
        Ok(prev * VOCAB)
    }

    pub fn ctx_row_mut(&mut self, bucket: usize, position: usize) -> Result<&mut [f64]> {
        let o = self.ctx_offset(bucket, position)?;
        Ok(&mut self.w_ctx[o..o + VOCAB])
    }

    pub fn big_row_mut(&mut self, prev: usize) -> Result<&mut [f64]> {
        let o = Self::big_offset(prev)?;
        Ok(&mut self.w_big[o..o + VOCAB])
    }

    pub fn logits(&self, ctx: ContextEncoding, position: usize, prev: usize) -> Result<[f64; VOCAB]> {
        let c = self.ctx_offset(ctx.bucket, position)?;
        let b = Self::big_offset(prev)?;
        let mut out = [0.0; VOCAB];
        for v in 0..VOCAB {
            out[v] = self.w_ctx[c + v] + self.w_big[b + v];
        }
        Ok(out)
    }

    /// Log-probabilities of every next token at temperature 1.
    pub fn next_logprobs(&self, ctx: ContextEncoding, position: usize, prev: usize) -> Result<[f64; VOCAB]> {
        Ok(log_softmax(&self.logits(ctx, position, prev)?, 1.0))
    }

    pub fn sample(
        &self,
        ctx: ContextEncoding,
        count: usize,
        opts: SamplingOptions,
        seed: u64,
    ) -> Result<Vec<GenerationSample>> {
        opts.validate()?;
        if count == 0 {
            return Err(Error::Domain("sample count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| self.sample_one(ctx, opts, &mut rng))
            .collect()
    }

    fn sample_one(
        &self,
        ctx: ContextEncoding,
        opts: SamplingOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<GenerationSample> {
        let mut tokens = Vec::with_capacity(self.length);
        let mut logprobs = Vec::with_capacity(self.length);
        let mut prev = BOS;
        for t in 0..self.length {
            let mut lp = log_softmax(&self.logits(ctx, t, prev)?, opts.temperature);
            if let Some(p) = opts.top_p {
                lp = truncate_top_p(&lp, p);
            }
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut choice = None;
            for v in 0..VOCAB {
                let p = lp[v].exp();
                if p > 0.0 {
                    choice = Some(v);
                }
                acc += p;
                if u < acc && p > 0.0 {
                    break;
                }
            }
            let v = choice.expect("some token has positive probability");
            tokens.push(Token::ALL[v]);
            logprobs.push(lp[v]);
            prev = v;
        }
        Ok(GenerationSample { tokens, logprobs })
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.len() != self.length {
            return Err(Error::Domain(format!(
                "sequence has {} tokens, policy length is {}",
                tokens.len(),
                self.length
            )));
        }
        Ok(())
    }

    /// Per-token log-probabilities at temperature 1.
    pub fn logprob(&self, ctx: ContextEncoding, tokens: &[Token]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let mut prev = BOS;
        let mut out = Vec::with_capacity(tokens.len());
        for (t, tok) in tokens.iter().enumerate() {
            let v = tok.index();
            out.push(self.next_logprobs(ctx, t, prev)?[v]);
            prev = v;
        }
        Ok(out)
    }

    /// Adds `Σ_t weights[t] · ∇ log π(tokens[t])` into `out` and returns the
    /// per-token log-probabilities.
    pub fn accumulate_logprob_grad(
        &self,
        ctx: ContextEncoding,
        tokens: &[Token],
        weights: &[f64],
        out: &mut Gradient,
    ) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        if weights.len() != tokens.len() {
            return Err(Error::Domain(format!(
                "{} weights for {} tokens",
                weights.len(),
                tokens.len()
            )));
        }
        let mut prev = BOS;
        let mut lps = Vec::with_capacity(tokens.len());
        for (t, tok) in tokens.iter().enumerate() {
            let v = tok.index();
            let lp = self.next_logprobs(ctx, t, prev)?;
            lps.push(lp[v]);
            let w = weights[t];
            let ctx_row = out.ctx.entry((ctx.bucket, t)).or_insert([0.0; VOCAB]);
            for u in 0..VOCAB {
                let d = f64::from(u8::from(u == v)) - lp[u].exp();
                ctx_row[u] += w * d;
            }
            let big_row = out.big.entry(prev).or_insert([0.0; VOCAB]);
            for u in 0..VOCAB {
                let d = f64::from(u8::from(u == v)) - lp[u].exp();
                big_row[u] += w * d;
            }
            prev = v;
        }
        Ok(lps)
    }

    /// Per-token log-probabilities and their individual gradients.
    pub fn logprob_grad(&self, ctx: ContextEncoding, tokens: &[Token]) -> Result<(Vec<f64>, Vec<Gradient>)> {
        self.check_tokens(tokens)?;
        let mut grads = Vec::with_capacity(tokens.len());
        let mut lps = Vec::with_capacity(tokens.len());
        for t in 0..tokens.len() {
            let mut weights = vec![0.0; tokens.len()];
            weights[t] = 1.0;
            let mut g = Gradient::default();
            let lp = self.accumulate_logprob_grad(ctx, tokens, &weights, &mut g)?;
            g.ctx.retain(|&(_, p), _| p == t);
            let prev = if t == 0 { BOS } else { tokens[t - 1].index() };
            g.big.retain(|&k, _| k == prev);
            lps.push(lp[t]);
            grads.push(g);
        }
        Ok((lps, grads))
    }

    /// Ascent step with decoupled weight decay: `θ ← θ + lr·(g − wd·θ)`.
    pub fn apply_update(&mut self, grad: &Gradient, learning_rate: f64, weight_decay: f64) -> Result<()> {
        let decay = 1.0 - learning_rate * weight_decay;
        if decay != 1.0 {
            for w in self.w_ctx.iter_mut().chain(self.w_big.iter_mut()) {
                *w *= decay;
            }
        }
        for (&(b, p), row) in &grad.ctx {
            let o = self.ctx_offset(b, p)?;
            for v in 0..VOCAB {
                self.w_ctx[o + v] += learning_rate * row[v];
            }
        }
        for (&prev, row) in &grad.big {
            let o = Self::big_offset(prev)?;
            for v in 0..VOCAB {
                self.w_big[o + v] += learning_rate * row[v];
            }
        }
        self.finish_update()
    }

    /// Both weight tables, for optimizers that keep per-weight state.
    pub(crate) fn weights_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.w_ctx, &mut self.w_big)
    }

    pub(crate) fn finish_update(&mut self) -> Result<()> {
        if let Some(bad) = self.w_ctx.iter().chain(&self.w_big).find(|w| !w.is_finite()) {
            return Err(Error::Domain(format!("update produced non-finite weight {bad}")));
        }
        self.version += 1;
        Ok(())
    }

    /// Immutable copy carrying the current version.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot(Arc::new(self.clone()))
    }
}

/// Longest program body in the syntax prior's corpus.
const PRIOR_MAX_BODY: usize = 3;
const PRIOR_FIT_STEPS: usize = 400;
const PRIOR_FIT_LR: f64 = 5.0;

/// Programs of at most `max_body` tokens that run without a structural error,
/// grouped by body length and padded to `length`.
fn well_formed_programs(length: usize, max_body: usize) -> Vec<Vec<Vec<Token>>> {
    let alphabet: Vec<Token> = Token::ALL.into_iter().filter(|t| *t != Token::Pad).collect();
    let mut classes = Vec::new();
    let mut frontier: Vec<Vec<Token>> = vec![Vec::new()];
    for _ in 0..max_body.min(length) {
        frontier = frontier
            .iter()
            .flat_map(|body| {
                alphabet.iter().map(move |&t| {
                    let mut b = body.clone();
                    b.push(t);
                    b
                })
            })
            .collect();
        let class: Vec<Vec<Token>> = frontier
            .iter()
            .map(|b| {
                let mut full = b.clone();
                full.resize(length, Token::Pad);
                full
            })
            .filter(|full| run_tokens(full, 1).is_ok())
            .collect();
        if !class.is_empty() {
            classes.push(class);
        }
    }
    classes
}

impl PolicyParams {
    /// A base policy that already knows the program grammar: the maximum
    /// likelihood fit of the position and bigram tables to short well-formed
    /// programs, each body length weighted equally. Every bucket starts from
    /// the same rows, so the prior carries no task information.
    pub fn syntax_prior(buckets: usize, length: usize) -> Result<Self> {
        let classes = well_formed_programs(length, PRIOR_MAX_BODY);
        let mut corpus = Vec::new();
        for class in &classes {
            let w = 1.0 / (classes.len() * class.len()) as f64;
            corpus.extend(class.iter().map(|p| (p, vec![w; length])));
        }
        let mut fit = PolicyParams::zeros(1, length)?;
        let ctx = ContextEncoding { bucket: 0 };
        for _ in 0..PRIOR_FIT_STEPS {
            let mut grad = Gradient::default();
            for (p, w) in &corpus {
                fit.accumulate_logprob_grad(ctx, p, w, &mut grad)?;
            }
            fit.apply_update(&grad, PRIOR_FIT_LR, 0.0)?;
        }
        let mut out = PolicyParams::zeros(buckets, length)?;
        let row = length * VOCAB;
        for chunk in out.w_ctx.chunks_mut(row) {
            chunk.copy_from_slice(&fit.w_ctx[..row]);
        }
        out.w_big.copy_from_slice(&fit.w_big);
        Ok(out)
    }
}

/// Frozen policy shared between workers.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot(Arc<PolicyParams>);

impl Deref for Snapshot {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"MURPHYCK";
const FORMAT: u32 = 1;

/// Position of the trainer's deterministic seed stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub env_seed: u64,
    pub sample_seed: u64,
    pub next_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub rng: RngState,
    pub config_hash: String,
    /// AdamW moments, stored after the weights when present.
    pub moments: Option<Moments>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    buckets: usize,
    length: usize,
    vocab: usize,
    version: u64,
    rng: RngState,
    config_hash: String,
    objective: String,
    optimizer_steps: Option<u64>,
}

impl Checkpoint {
    /// Magic, header JSON, little-endian weights, then a SHA-256 of all of it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            buckets: self.params.buckets,
            length: self.params.length,
            vocab: VOCAB,
            version: self.params.version,
            rng: self.rng,
            config_hash: self.config_hash.clone(),
            objective: "maximize".into(),
            optimizer_steps: self.moments.as_ref().map(|m| m.steps),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let n = self.params.w_ctx.len() + self.params.w_big.len();
        let slots = if self.moments.is_some() { 3 } else { 1 };
        let mut out = Vec::with_capacity(24 + header.len() + 8 * slots * n + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for w in self.params.w_ctx.iter().chain(&self.params.w_big) {
            out.extend_from_slice(&w.to_le_bytes());
        }
        if let Some(m) = &self.moments {
            for x in m.m.iter().chain(&m.v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::Integrity(format!("checkpoint {msg}"));
        if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("has no valid header"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let format = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if format != FORMAT {
            return Err(corrupt(&format!("format {format} is not supported")));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header length out of range"))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| corrupt(&format!("header: {e}")))?;
        if header.vocab != VOCAB {
            return Err(corrupt(&format!("vocabulary {} != {VOCAB}", header.vocab)));
        }
        let mut params = PolicyParams::zeros(header.buckets, header.length)
            .map_err(|e| corrupt(&e.to_string()))?;
        let payload = &body[header_end..];
        let n = params.w_ctx.len() + params.w_big.len();
        let slots = if header.optimizer_steps.is_some() { 3 } else { 1 };
        if payload.len() != 8 * slots * n {
            return Err(corrupt(&format!(
                "holds {} payload bytes, shape needs {}",
                payload.len(),
                8 * slots * n
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(corrupt("contains a non-finite value"));
        }
        let (weights, rest) = values.split_at(n);
        let n_ctx = params.w_ctx.len();
        params.w_ctx.copy_from_slice(&weights[..n_ctx]);
        params.w_big.copy_from_slice(&weights[n_ctx..]);
        params.version = header.version;
        let moments = header.optimizer_steps.map(|steps| Moments {
            steps,
            m: rest[..n].to_vec(),
            v: rest[n..].to_vec(),
        });
        Ok(Checkpoint {
            params,
            rng: header.rng,
            config_hash: header.config_hash,
            moments,
        })
    }

    /// Writes via a temporary file and rename so an interrupted write never
    /// replaces a good checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
            .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
    }
}
