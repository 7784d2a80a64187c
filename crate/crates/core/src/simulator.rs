//! Trace-driven discrete-event simulation of the serving loop.
//!
//! Simulated time advances by batch steps. Each iteration admits arrived
//! turns, asks the scheduler for batch plans, times them with the cost
//! model and swap engine, and feeds the emitted tokens back. A finished turn
//! schedules the conversation's next turn after an exponential think time.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{PagedKvCache, DEFAULT_CHUNK_SIZE};
use crate::cost_model::{synthetic_profile, CostError, CostProfile};
use crate::eviction::{EvictionError, PolicyKind};
use crate::model_config::{chunk_bytes, ModelConfig, ModelConfigError};
use crate::scheduler::{
    BatchMode, Request, SchedError, Scheduler, SchedulerConfig, TraceStore,
    DEFAULT_RESERVE_FRACTION, DEFAULT_SWAP_THRESHOLD, DEFAULT_TOKEN_BUDGET,
};
use crate::swap_engine::{
    count_dependency_violations, schedule_swap_in, schedule_swap_out, transfer_time, Event,
    EventKind, LinkConfig, SwapError, DEFAULT_BANDWIDTH, DEFAULT_DUPLEX_PENALTY,
};
use crate::types::{ConvId, ReqId};
use crate::workload::{
    gen_first_arrivals, gen_think_time, load_trace, synthetic_traces, think_draw_index,
    live_working_set_chunks, ConversationTrace, SyntheticParams, WorkloadError,
    DEFAULT_MAX_CONTEXT_TOKENS, DEFAULT_THINK_TIME_MEAN,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no progress possible at t={now}: {waiting} requests waiting, none admissible")]
    Deadlock { now: f64, waiting: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown sweep axis `{0}`")]
    UnknownAxis(String),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Model(#[from] ModelConfigError),
    #[error(transparent)]
    Swap(#[from] SwapError),
    #[error(transparent)]
    Eviction(#[from] EvictionError),
}

/// Everything that determines one run. Loaded from TOML; every key is
/// optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: BatchMode,
    pub policy: PolicyKind,
    pub stateful: bool,
    pub token_budget: u64,
    pub swap_threshold: f64,
    pub reserve_fraction: f64,
    pub chunk_size: u64,
    /// Model preset name.
    pub model: String,

    /// Tier sizes: explicit slot counts win over byte sizes, which win
    /// over sizing relative to the workload.
    pub device_slots: Option<usize>,
    pub host_slots: Option<usize>,
    pub device_bytes: Option<u64>,
    pub host_bytes: Option<u64>,
    /// Device slots as a fraction of the peak live working set, see
    /// [`RunConfig::working_set_chunks`].
    pub device_working_set_fraction: Option<f64>,
    /// Host slots as a multiple of device slots.
    pub host_device_ratio: Option<f64>,

    /// First turns per second.
    pub request_rate: f64,
    pub think_time_mean: f64,
    pub seed: u64,
    pub max_context_tokens: u64,
    pub trace: Option<PathBuf>,
    /// Synthetic workload used when no trace file is given.
    pub synthetic: SyntheticParams,

    pub bandwidth: f64,
    pub duplex_penalty: f64,
    pub allow_duplex: bool,

    pub cost_profile: Option<PathBuf>,
    /// Synthetic cost profile: attention seconds per context token for one
    /// 32-token chunk.
    pub k_attn: f64,
    pub c_other: f64,
    pub per_token_other: f64,

    pub record_events: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: BatchMode::Unified,
            policy: PolicyKind::Pensieve,
            stateful: true,
            token_budget: DEFAULT_TOKEN_BUDGET,
            swap_threshold: DEFAULT_SWAP_THRESHOLD,
            reserve_fraction: DEFAULT_RESERVE_FRACTION,
            chunk_size: DEFAULT_CHUNK_SIZE,
            model: "opt-13b".into(),
            device_slots: None,
            host_slots: None,
            device_bytes: Some(40_000_000_000),
            host_bytes: Some(100_000_000_000),
            device_working_set_fraction: None,
            host_device_ratio: None,
            request_rate: 1.0,
            think_time_mean: DEFAULT_THINK_TIME_MEAN,
            seed: 0,
            max_context_tokens: DEFAULT_MAX_CONTEXT_TOKENS,
            trace: None,
            synthetic: SyntheticParams::default(),
            bandwidth: DEFAULT_BANDWIDTH,
            duplex_penalty: DEFAULT_DUPLEX_PENALTY,
            allow_duplex: false,
            cost_profile: None,
            k_attn: 2e-6,
            c_other: 3.2e-3,
            per_token_other: 1e-4,
            record_events: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // relative trace and profile paths resolve against the config file
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.trace, &mut cfg.cost_profile].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn profile(&self) -> Result<CostProfile, SimError> {
        Ok(match &self.cost_profile {
            Some(p) => CostProfile::load(p)?,
            None => synthetic_profile(self.k_attn, self.c_other, self.per_token_other),
        })
    }

    /// Conversations to replay and how many were over the context limit.
    pub fn traces(&self) -> Result<(Vec<ConversationTrace>, usize), SimError> {
        match &self.trace {
            Some(p) => {
                let t = load_trace(p, self.max_context_tokens)?;
                Ok((t.traces, t.dropped))
            }
            None => {
                let params = SyntheticParams {
                    max_context_tokens: self.max_context_tokens,
                    ..self.synthetic
                };
                Ok((synthetic_traces(&params)?, 0))
            }
        }
    }

    /// Peak chunks held by unfinished conversations under this config's
    /// arrivals and think times, ignoring service time.
    pub fn working_set_chunks(&self, traces: &[ConversationTrace]) -> Result<u64, SimError> {
        Ok(live_working_set_chunks(
            traces,
            self.request_rate,
            self.think_time_mean,
            self.seed,
            self.chunk_size,
        )?)
    }

    fn tier_slots(
        &self,
        model: &ModelConfig,
        traces: &[ConversationTrace],
    ) -> Result<(usize, usize), SimError> {
        let per_chunk = chunk_bytes(model, self.chunk_size)?;
        let device = match (self.device_slots, self.device_working_set_fraction, self.device_bytes) {
            (Some(n), _, _) => n,
            (None, Some(f), _) => (self.working_set_chunks(traces)? as f64 * f).round() as usize,
            (None, None, Some(b)) => (b / per_chunk) as usize,
            (None, None, None) => {
                return Err(SimError::Config("device tier size is not set".into()))
            }
        };
        let host = match (self.host_slots, self.host_device_ratio, self.host_bytes) {
            (Some(n), _, _) => n,
            (None, Some(r), _) => (device as f64 * r).round() as usize,
            (None, None, Some(b)) => (b / per_chunk) as usize,
            (None, None, None) => 0,
        };
        Ok((device, host))
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.chunk_size == 0 {
            return bad("chunk_size must be positive");
        }
        if self.token_budget == 0 {
            return bad("token_budget must be positive");
        }
        if !(0.0..=1.0).contains(&self.swap_threshold) {
            return bad("swap_threshold must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.reserve_fraction) {
            return bad("reserve_fraction must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.duplex_penalty) {
            return bad("duplex_penalty must be in [0, 1)");
        }
        Ok(())
    }
}

/// One completed turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub req_id: ReqId,
    pub conv_id: ConvId,
    pub turn: usize,
    /// Think time drawn before this turn; zero for first turns.
    pub think_time: f64,
    pub arrival: f64,
    pub first_token: f64,
    pub completion: f64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    pub steps: u64,
    pub suspensions: u64,
}

impl RequestRecord {
    pub fn normalized_latency(&self) -> f64 {
        (self.completion - self.arrival) / self.output_tokens as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub completed: usize,
    pub dropped_at_load: usize,
    pub device_slots: usize,
    pub host_slots: usize,
    /// Completed requests per second, first arrival to last completion.
    pub throughput: f64,
    pub p90_normalized_latency: f64,
    /// Returning-context tokens of later turns, by where they were found.
    pub returning_context_tokens: u64,
    pub device_hit_rate: f64,
    pub host_hit_rate: f64,
    pub dropped_rate: f64,
    /// Dropped KV-tokens rebuilt from raw tokens.
    pub recomputed_kv_tokens: u64,
    /// History tokens run through the model again, recomputation included.
    pub history_tokens_reprocessed: u64,
    pub total_input_tokens: u64,
    pub suspended_count: u64,
    pub steps: u64,
    pub swapped_in_chunks: u64,
    pub swapped_out_chunks: u64,
    pub swap_in_stall: f64,
    /// Stall added by swap-outs sharing the link with swap-ins.
    pub swap_out_induced_stall: f64,
    pub makespan: f64,
    pub records: Vec<RequestRecord>,
}

impl MetricsReport {
    pub fn avg_steps_per_request(&self) -> f64 {
        if self.completed == 0 {
            0.0
        } else {
            self.steps as f64 / self.completed as f64
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Nearest-rank 90th percentile of per-request normalized latency.
pub fn normalized_latency(records: &[RequestRecord]) -> f64 {
    let values: Vec<f64> = records.iter().map(RequestRecord::normalized_latency).collect();
    percentile_nearest_rank(&values, 0.9)
}

pub fn percentile_nearest_rank(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// A run's metrics plus its event log when requested.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub events: Vec<Event>,
}

impl RunOutput {
    pub fn event_log(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            writeln!(s, "{e}").unwrap();
        }
        s
    }

    pub fn dependency_violations(&self) -> usize {
        count_dependency_violations(&self.events)
    }
}

pub fn run(cfg: &RunConfig) -> Result<MetricsReport, SimError> {
    Ok(run_with_events(cfg)?.report)
}

fn req_id(conv: ConvId, turn: usize) -> ReqId {
    ReqId(think_draw_index(conv, turn))
}

struct Arrival {
    turn: usize,
    think: f64,
}

pub fn run_with_events(cfg: &RunConfig) -> Result<RunOutput, SimError> {
    let (traces, dropped_at_load) = cfg.traces()?;
    run_traces(cfg, &traces, dropped_at_load)
}

/// Runs the simulation over already-loaded conversations.
pub fn run_traces(
    cfg: &RunConfig,
    traces: &[ConversationTrace],
    dropped_at_load: usize,
) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    let model = ModelConfig::by_name(&cfg.model)?;
    let profile = cfg.profile()?;
    let (device_slots, host_slots) = cfg.tier_slots(&model, traces)?;
    let per_chunk = chunk_bytes(&model, cfg.chunk_size)?;
    let link = LinkConfig {
        bandwidth: cfg.bandwidth,
        duplex_penalty: cfg.duplex_penalty,
        allow_duplex: cfg.allow_duplex,
    };
    transfer_time(0, link.bandwidth, 0.0, false)?;

    let mut cache = PagedKvCache::new(cfg.chunk_size, device_slots, host_slots);
    let mut store = TraceStore::default();
    let mut sched = Scheduler::new(
        SchedulerConfig {
            mode: cfg.mode,
            policy: cfg.policy,
            token_budget: cfg.token_budget,
            swap_threshold: cfg.swap_threshold,
            reserve_fraction: cfg.reserve_fraction,
            stateful: cfg.stateful,
        },
        profile.clone(),
    );

    let by_conv: std::collections::BTreeMap<ConvId, &ConversationTrace> =
        traces.iter().map(|t| (t.conv_id, t)).collect();
    if by_conv.len() != traces.len() {
        return Err(SimError::Config("duplicate conversation ids in trace".into()));
    }
    // pending turn arrivals keyed by (time bits, conversation); times are
    // non-negative so their bit patterns order like the values
    let mut pending: BTreeSet<(u64, ConvId)> = BTreeSet::new();
    let mut pending_info: std::collections::BTreeMap<ConvId, Arrival> = Default::default();
    let firsts = gen_first_arrivals(traces.len(), cfg.request_rate, cfg.seed)?;
    for (t, at) in traces.iter().zip(&firsts) {
        pending.insert((at.to_bits(), t.conv_id));
        pending_info.insert(t.conv_id, Arrival { turn: 0, think: 0.0 });
    }
    let total_turns: usize = traces.iter().map(|t| t.turns.len()).sum();

    let mut events = Vec::new();
    let record = cfg.record_events;
    let mut think_of: std::collections::BTreeMap<ReqId, f64> = Default::default();
    let mut records: Vec<RequestRecord> = Vec::with_capacity(total_turns);
    let mut m = MetricsReport {
        completed: 0,
        dropped_at_load,
        device_slots,
        host_slots,
        throughput: 0.0,
        p90_normalized_latency: 0.0,
        returning_context_tokens: 0,
        device_hit_rate: 0.0,
        host_hit_rate: 0.0,
        dropped_rate: 0.0,
        recomputed_kv_tokens: 0,
        history_tokens_reprocessed: 0,
        total_input_tokens: 0,
        suspended_count: 0,
        steps: 0,
        swapped_in_chunks: 0,
        swapped_out_chunks: 0,
        swap_in_stall: 0.0,
        swap_out_induced_stall: 0.0,
        makespan: 0.0,
        records: Vec::new(),
    };
    let mut device_hits = 0u64;
    let mut host_hits = 0u64;
    let mut swap_out_busy_until = 0.0f64;
    let mut swap_in_busy_until = 0.0f64;
    let mut now = firsts.first().copied().unwrap_or(0.0);
    let first_arrival = now;

    loop {
        // move arrived turns into the wait queue
        while let Some(&(bits, conv)) = pending.first() {
            let at = f64::from_bits(bits);
            if at > now {
                break;
            }
            pending.pop_first();
            let a = pending_info.remove(&conv).expect("pending arrival has info");
            let turn = by_conv[&conv].turns[a.turn];
            let id = req_id(conv, a.turn);
            think_of.insert(id, a.think);
            let req = Request::new(id, conv, a.turn, at, turn.prompt_tokens, turn.output_tokens);
            if record {
                events.push(Event {
                    t: at,
                    kind: EventKind::Arrive,
                    req: Some(id.0),
                    layer: None,
                });
            }
            sched.enqueue(req, &mut store);
        }
        if sched.is_idle() {
            match pending.first() {
                Some(&(bits, _)) => {
                    now = f64::from_bits(bits);
                    continue;
                }
                None => break,
            }
        }

        let step = sched.schedule(&mut cache, &store, now)?;
        m.suspended_count += step.suspended.len() as u64;
        for a in &step.admissions {
            m.recomputed_kv_tokens += a.plan.recompute_tokens;
            m.history_tokens_reprocessed += a.plan.history_reprocessed;
            if a.returning {
                let r = a.history_tokens.saturating_sub(1);
                let dev = a.plan.resident_tokens.min(r);
                let host = a.plan.swap_in_tokens.min(r - dev);
                m.returning_context_tokens += r;
                device_hits += dev;
                host_hits += host;
            }
        }
        if step.is_empty() {
            match pending.first() {
                Some(&(bits, _)) => {
                    now = now.max(f64::from_bits(bits));
                    continue;
                }
                None => {
                    return Err(SimError::Deadlock {
                        now,
                        waiting: sched.wait_queue().len(),
                    })
                }
            }
        }

        for (i, (batch, ids)) in step.batches.iter().zip(&step.batch_requests).enumerate() {
            let compute = profile.step_time(batch);
            m.total_input_tokens += batch.total_input_tokens;
            m.steps += 1;
            let start = now;
            let mut end = start + compute;
            if !batch.swap_out.is_empty() {
                let n = batch.swap_out.len() as u64;
                let out_start = schedule_swap_out(start, swap_in_busy_until, link.allow_duplex);
                let contended = link.allow_duplex && swap_in_busy_until > out_start;
                let dur =
                    transfer_time(n * per_chunk, link.bandwidth, link.duplex_penalty, contended)?;
                swap_out_busy_until = swap_out_busy_until.max(out_start) + dur;
                m.swapped_out_chunks += n;
                if record {
                    events.push(Event {
                        t: out_start,
                        kind: EventKind::SwapOut,
                        req: None,
                        layer: None,
                    });
                }
            }
            if !batch.swap_in.is_empty() {
                let n = batch.swap_in.len() as u64;
                let n_layer = model.n_layer as usize;
                let contended = link.allow_duplex && swap_out_busy_until > start;
                let (task, tl) =
                    schedule_swap_in(start, n * per_chunk, n_layer, compute, &link, contended)?;
                if contended {
                    let (_, free) =
                        schedule_swap_in(start, n * per_chunk, n_layer, compute, &link, false)?;
                    m.swap_out_induced_stall += tl.stall - free.stall;
                }
                m.swapped_in_chunks += n;
                m.swap_in_stall += tl.stall;
                swap_in_busy_until = task.done_at;
                end = tl.end;
                if record && i == 0 {
                    for a in step.admissions.iter().filter(|a| !a.swap_in.is_empty()) {
                        for l in 0..n_layer {
                            events.push(Event {
                                t: tl.layer_ready[l],
                                kind: EventKind::SwapInLayer,
                                req: Some(a.plan.req_id.0),
                                layer: Some(l),
                            });
                            events.push(Event {
                                t: tl.attn_start[l],
                                kind: EventKind::AttnStart,
                                req: Some(a.plan.req_id.0),
                                layer: Some(l),
                            });
                        }
                    }
                }
            }
            now = end;
            if record {
                events.push(Event {
                    t: now,
                    kind: EventKind::StepEnd,
                    req: None,
                    layer: None,
                });
            }
            for c in sched.complete_batch(ids, &mut cache, &mut store, now) {
                let r = c.request;
                if record {
                    events.push(Event {
                        t: c.finish_time,
                        kind: EventKind::Finish,
                        req: Some(r.req_id.0),
                        layer: None,
                    });
                }
                let trace = by_conv[&r.conv_id];
                let next = r.turn + 1;
                if next < trace.turns.len() {
                    let think = gen_think_time(
                        cfg.think_time_mean,
                        cfg.seed,
                        think_draw_index(r.conv_id, next),
                    )?;
                    let at = c.finish_time + think;
                    pending.insert((at.to_bits(), r.conv_id));
                    pending_info.insert(r.conv_id, Arrival { turn: next, think });
                }
                records.push(RequestRecord {
                    req_id: r.req_id,
                    conv_id: r.conv_id,
                    turn: r.turn,
                    think_time: think_of.remove(&r.req_id).unwrap_or(0.0),
                    arrival: r.arrival_time,
                    first_token: r.first_token_time.unwrap_or(c.finish_time),
                    completion: c.finish_time,
                    prompt_tokens: r.prompt_tokens,
                    output_tokens: r.output_tokens,
                    steps: r.steps,
                    suspensions: r.suspensions,
                });
            }
        }
    }

    records.sort_by_key(|r| r.req_id);
    m.completed = records.len();
    let last = records.iter().map(|r| r.completion).fold(first_arrival, f64::max);
    m.makespan = last - first_arrival;
    m.throughput = if m.makespan > 0.0 {
        m.completed as f64 / m.makespan
    } else {
        0.0
    };
    m.p90_normalized_latency = normalized_latency(&records);
    if m.returning_context_tokens > 0 {
        let r = m.returning_context_tokens as f64;
        m.device_hit_rate = device_hits as f64 / r;
        m.host_hit_rate = host_hits as f64 / r;
        m.dropped_rate = (m.returning_context_tokens - device_hits - host_hits) as f64 / r;
    }
    m.records = records;
    Ok(RunOutput { report: m, events })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    RequestRate,
    ThinkTimeMean,
    Policy,
    Mode,
    Stateful,
}

impl std::str::FromStr for SweepAxis {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "request_rate" | "rate" => SweepAxis::RequestRate,
            "think_time_mean" | "think" => SweepAxis::ThinkTimeMean,
            "policy" => SweepAxis::Policy,
            "mode" => SweepAxis::Mode,
            "stateful" | "statefulness" => SweepAxis::Stateful,
            other => return Err(SimError::UnknownAxis(other.to_string())),
        })
    }
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::RequestRate => "request_rate",
            SweepAxis::ThinkTimeMean => "think_time_mean",
            SweepAxis::Policy => "policy",
            SweepAxis::Mode => "mode",
            SweepAxis::Stateful => "stateful",
        }
    }

    /// Copy of `cfg` with this axis set to `value`.
    pub fn apply(&self, cfg: &RunConfig, value: &str) -> Result<RunConfig, SimError> {
        let mut c = cfg.clone();
        let num = || {
            value
                .parse::<f64>()
                .map_err(|_| SimError::Config(format!("`{value}` is not a number")))
        };
        match self {
            SweepAxis::RequestRate => c.request_rate = num()?,
            SweepAxis::ThinkTimeMean => c.think_time_mean = num()?,
            SweepAxis::Policy => c.policy = value.parse()?,
            SweepAxis::Mode => c.mode = value.parse()?,
            SweepAxis::Stateful => {
                c.stateful = match value {
                    "true" | "stateful" | "1" => true,
                    "false" | "stateless" | "0" => false,
                    _ => return Err(SimError::Config(format!("`{value}` is not a boolean"))),
                }
            }
        }
        Ok(c)
    }
}

pub const CSV_HEADER: &str = "axis,value,completed,throughput,p90_normalized_latency,\
device_hit_rate,host_hit_rate,recomputed_kv_tokens,history_tokens_reprocessed,\
total_input_tokens,suspended_count,steps";

pub fn csv_row(axis: &str, value: &str, r: &MetricsReport) -> String {
    format!(
        "{axis},{value},{},{},{},{},{},{},{},{},{},{}",
        r.completed,
        r.throughput,
        r.p90_normalized_latency,
        r.device_hit_rate,
        r.host_hit_rate,
        r.recomputed_kv_tokens,
        r.history_tokens_reprocessed,
        r.total_input_tokens,
        r.suspended_count,
        r.steps
    )
}

/// One run per value, in parallel; rows come back in input order.
pub fn sweep(
    cfg: &RunConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<Vec<(String, MetricsReport)>, SimError> {
    let cfgs: Vec<RunConfig> = values
        .iter()
        .map(|v| axis.apply(cfg, v))
        .collect::<Result<_, _>>()?;
    let (traces, dropped) = cfg.traces()?;
    let reports: Vec<MetricsReport> = cfgs
        .par_iter()
        .map(|c| run_traces(c, &traces, dropped).map(|o| o.report))
        .collect::<Result<_, _>>()?;
    Ok(values.iter().cloned().zip(reports).collect())
}

pub fn sweep_csv(axis: SweepAxis, rows: &[(String, MetricsReport)]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for (v, r) in rows {
        s.push_str(&csv_row(axis.name(), v, r));
        s.push('\n');
    }
    s
}
