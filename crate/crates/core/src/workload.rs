//! Conversation traces, arrival processes and think times.
//!
//! Trace files hold one conversation per line:
//!
//! ```text
//! conv_id n_turns p1 o1 p2 o2 ...
//! ```
//!
//! where `pK`/`oK` are the prompt and output token counts of turn K. Blank
//! lines and lines starting with `#` are skipped.
//!
//! Public chat datasets can be converted by tokenizing each turn and writing
//! the counts in this layout; no converter ships here.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::ConvId;

pub const DEFAULT_MAX_CONTEXT_TOKENS: u64 = 16384;
pub const DEFAULT_THINK_TIME_MEAN: f64 = 60.0;

// separates the think-time streams from the arrival stream
const THINK_SEED_SALT: u64 = 0x7468_696e_6b5f_7474;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trace contains no conversations")]
    EmptyTrace,
    #[error("request rate must be positive, got {0}")]
    BadRate(f64),
    #[error("think-time mean must be positive, got {0}")]
    BadMean(f64),
    #[error("bad synthetic parameter: {0}")]
    BadParam(String),
    #[error("cannot read trace: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTrace {
    pub conv_id: ConvId,
    pub turns: Vec<Turn>,
}

impl ConversationTrace {
    /// Context length after the last turn.
    pub fn total_tokens(&self) -> u64 {
        self.turns
            .iter()
            .map(|t| t.prompt_tokens + t.output_tokens)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTrace {
    pub traces: Vec<ConversationTrace>,
    /// Conversations over the context limit.
    pub dropped: usize,
}

fn parse_line(line: usize, text: &str) -> Result<ConversationTrace, WorkloadError> {
    let err = |msg: String| WorkloadError::Parse { line, msg };
    let nums: Vec<u64> = text
        .split_whitespace()
        .map(|f| f.parse::<u64>().map_err(|e| err(format!("`{f}`: {e}"))))
        .collect::<Result<_, _>>()?;
    if nums.len() < 2 {
        return Err(err("expected `conv_id n_turns p1 o1 ...`".into()));
    }
    let n_turns = nums[1] as usize;
    if n_turns == 0 {
        return Err(err("conversation has no turns".into()));
    }
    if nums.len() != 2 + 2 * n_turns {
        return Err(err(format!(
            "{n_turns} turns need {} counts, found {}",
            2 * n_turns,
            nums.len() - 2
        )));
    }
    let turns: Vec<Turn> = nums[2..]
        .chunks(2)
        .map(|p| Turn {
            prompt_tokens: p[0],
            output_tokens: p[1],
        })
        .collect();
    if turns.iter().any(|t| t.prompt_tokens == 0 || t.output_tokens == 0) {
        return Err(err("token counts must be at least 1".into()));
    }
    Ok(ConversationTrace {
        conv_id: ConvId(nums[0]),
        turns,
    })
}

pub fn parse_trace(text: &str, max_context_tokens: u64) -> Result<LoadedTrace, WorkloadError> {
    let mut traces = Vec::new();
    let mut dropped = 0;
    for (i, raw) in text.lines().enumerate() {
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let t = parse_line(i + 1, l)?;
        if t.total_tokens() > max_context_tokens {
            dropped += 1;
        } else {
            traces.push(t);
        }
    }
    if traces.is_empty() && dropped == 0 {
        return Err(WorkloadError::EmptyTrace);
    }
    Ok(LoadedTrace { traces, dropped })
}

pub fn load_trace(path: &Path, max_context_tokens: u64) -> Result<LoadedTrace, WorkloadError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| WorkloadError::Io(format!("{}: {e}", path.display())))?;
    parse_trace(&text, max_context_tokens)
}

pub fn write_trace(traces: &[ConversationTrace]) -> String {
    let mut out = String::new();
    for t in traces {
        write!(out, "{} {}", t.conv_id, t.turns.len()).unwrap();
        for turn in &t.turns {
            write!(out, " {} {}", turn.prompt_tokens, turn.output_tokens).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Poisson arrival times of `n` conversations' first turns.
pub fn gen_first_arrivals(n: usize, rate: f64, seed: u64) -> Result<Vec<f64>, WorkloadError> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(WorkloadError::BadRate(rate));
    }
    let exp = Exp::new(rate).map_err(|_| WorkloadError::BadRate(rate))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    Ok((0..n)
        .map(|_| {
            t += exp.sample(&mut rng);
            t
        })
        .collect())
}

/// Exponential think time; each `draw_index` has its own random stream.
pub fn gen_think_time(mean: f64, seed: u64, draw_index: u64) -> Result<f64, WorkloadError> {
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(WorkloadError::BadMean(mean));
    }
    let exp = Exp::new(1.0 / mean).map_err(|_| WorkloadError::BadMean(mean))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ THINK_SEED_SALT);
    rng.set_stream(draw_index);
    Ok(exp.sample(&mut rng))
}

/// Draw index for the think time preceding `turn` of `conv`.
pub fn think_draw_index(conv: ConvId, turn: usize) -> u64 {
    (conv.0 << 20) | turn as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub n_conversations: usize,
    pub mean_turns: f64,
    pub mean_prompt_len: f64,
    pub mean_output_len: f64,
}

pub fn trace_stats(traces: &[ConversationTrace]) -> TraceStats {
    let n = traces.len();
    let turns: usize = traces.iter().map(|t| t.turns.len()).sum();
    let prompt: u64 = traces
        .iter()
        .flat_map(|t| &t.turns)
        .map(|t| t.prompt_tokens)
        .sum();
    let output: u64 = traces
        .iter()
        .flat_map(|t| &t.turns)
        .map(|t| t.output_tokens)
        .sum();
    let per_turn = |x: u64| if turns == 0 { 0.0 } else { x as f64 / turns as f64 };
    TraceStats {
        n_conversations: n,
        mean_turns: if n == 0 { 0.0 } else { turns as f64 / n as f64 },
        mean_prompt_len: per_turn(prompt),
        mean_output_len: per_turn(output),
    }
}

/// Parameters of the ShareGPT-like synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub n_conversations: usize,
    /// Turn counts are geometric on 1, 2, ... with this mean.
    pub mean_turns: f64,
    pub mean_prompt_len: f64,
    pub mean_output_len: f64,
    /// Shape of the lognormal length distributions.
    pub sigma: f64,
    pub max_context_tokens: u64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            n_conversations: 200,
            mean_turns: 5.5,
            mean_prompt_len: 37.77,
            mean_output_len: 204.58,
            sigma: 0.8,
            max_context_tokens: DEFAULT_MAX_CONTEXT_TOKENS,
            seed: 0,
        }
    }
}

/// Generates conversations `0..n`. Lengths are capped so that no
/// conversation exceeds the context limit.
pub fn synthetic_traces(p: &SyntheticParams) -> Result<Vec<ConversationTrace>, WorkloadError> {
    let bad = |m: &str| WorkloadError::BadParam(m.to_string());
    if p.mean_turns.is_nan() || p.mean_turns < 1.0 {
        return Err(bad("mean_turns must be at least 1"));
    }
    if !(p.mean_prompt_len >= 1.0 && p.mean_output_len >= 1.0) {
        return Err(bad("mean lengths must be at least 1"));
    }
    let geo = Geometric::new(1.0 / p.mean_turns).map_err(|e| bad(&e.to_string()))?;
    let lognormal = |mean: f64| {
        LogNormal::new(mean.ln() - p.sigma * p.sigma / 2.0, p.sigma).map_err(|e| bad(&e.to_string()))
    };
    let prompt = lognormal(p.mean_prompt_len)?;
    let output = lognormal(p.mean_output_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut traces = Vec::with_capacity(p.n_conversations);
    for c in 0..p.n_conversations {
        let n_turns = 1 + geo.sample(&mut rng) as usize;
        let mut turns = Vec::with_capacity(n_turns);
        let mut total = 0;
        for _ in 0..n_turns {
            let t = Turn {
                prompt_tokens: (prompt.sample(&mut rng).round() as u64).max(1),
                output_tokens: (output.sample(&mut rng).round() as u64).max(1),
            };
            if total + t.prompt_tokens + t.output_tokens > p.max_context_tokens {
                break;
            }
            total += t.prompt_tokens + t.output_tokens;
            turns.push(t);
        }
        if turns.is_empty() {
            turns.push(Turn {
                prompt_tokens: 1,
                output_tokens: 1,
            });
        }
        traces.push(ConversationTrace {
            conv_id: ConvId(c as u64),
            turns,
        });
    }
    Ok(traces)
}

/// Total KV chunks needed to hold every conversation's final context.
pub fn working_set_chunks(traces: &[ConversationTrace], chunk_size: u64) -> u64 {
    traces
        .iter()
        .map(|t| t.total_tokens().div_ceil(chunk_size))
        .sum()
}

/// Peak KV chunks held by unfinished conversations when turns are replayed
/// with zero service time: turn `k` of conversation `c` arrives at its
/// first-arrival time plus the think times before it, and its whole turn is
/// cached on arrival. A conversation stops counting at its last turn.
pub fn live_working_set_chunks(
    traces: &[ConversationTrace],
    rate: f64,
    think_mean: f64,
    seed: u64,
    chunk_size: u64,
) -> Result<u64, WorkloadError> {
    let firsts = gen_first_arrivals(traces.len(), rate, seed)?;
    // (time, signed chunk delta)
    let mut deltas: Vec<(f64, i64)> = Vec::new();
    for (t, &start) in traces.iter().zip(&firsts) {
        let mut at = start;
        let mut tokens = 0;
        let mut held = 0i64;
        for (k, turn) in t.turns.iter().enumerate() {
            if k > 0 {
                at += gen_think_time(think_mean, seed, think_draw_index(t.conv_id, k))?;
            }
            tokens += turn.prompt_tokens + turn.output_tokens;
            let chunks = tokens.div_ceil(chunk_size) as i64;
            if k + 1 == t.turns.len() {
                deltas.push((at, chunks - held));
                deltas.push((at, -chunks));
            } else {
                deltas.push((at, chunks - held));
            }
            held = chunks;
        }
    }
    // growth before release at equal times, so a last turn counts once
    deltas.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    let mut live = 0i64;
    let mut peak = 0i64;
    for (_, d) in deltas {
        live += d;
        peak = peak.max(live);
    }
    Ok(peak as u64)
}
