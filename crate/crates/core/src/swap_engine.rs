//! Simulated device/host transfer timelines.
//!
//! Swap-ins are issued layer by layer so that a layer's attention can start
//! as soon as that layer's KV data has arrived, overlapping the remaining
//! transfer with compute. Swap-outs wait for in-flight swap-ins unless the
//! duplex ablation flag is set, in which case both directions share the link
//! at a reduced rate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BANDWIDTH: f64 = 25e9;
pub const DEFAULT_DUPLEX_PENALTY: f64 = 0.20;

#[derive(Debug, Error, PartialEq)]
pub enum SwapError {
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("model must have at least one layer")]
    NoLayers,
    #[error("event log line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    /// Bytes per second in each direction.
    pub bandwidth: f64,
    pub duplex_penalty: f64,
    /// Lets swap-outs run concurrently with swap-ins (ablation only).
    pub allow_duplex: bool,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            bandwidth: DEFAULT_BANDWIDTH,
            duplex_penalty: DEFAULT_DUPLEX_PENALTY,
            allow_duplex: false,
        }
    }
}

pub fn transfer_time(
    bytes: u64,
    bandwidth: f64,
    duplex_penalty: f64,
    contended: bool,
) -> Result<f64, SwapError> {
    if bandwidth.is_nan() || bandwidth <= 0.0 {
        return Err(SwapError::BadBandwidth(bandwidth));
    }
    let effective = if contended {
        bandwidth * (1.0 - duplex_penalty)
    } else {
        bandwidth
    };
    Ok(bytes as f64 / effective)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferTask {
    pub n_chunks: usize,
    pub direction: Direction,
    pub bytes: u64,
    pub issued_at: f64,
    /// Per-layer arrival times (swap-in only).
    pub per_layer_done: Vec<f64>,
    pub done_at: f64,
}

/// Result of overlapping a layer-by-layer swap-in with layer compute.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineTimeline {
    /// When each layer's KV data is on the device.
    pub layer_ready: Vec<f64>,
    /// When each layer's compute (attention included) starts.
    pub attn_start: Vec<f64>,
    pub end: f64,
    /// Total time compute waited on transfers.
    pub stall: f64,
}

/// Runs layer compute behind a layer-by-layer transfer.
///
/// Layer `l` data is ready at `issued_at + (l + 1) * per_layer_transfer`.
/// Layer `l` compute starts at the later of the previous layer's end and
/// its data's arrival, and lasts `layer_compute[l]`.
pub fn pipeline(
    issued_at: f64,
    compute_ready: f64,
    per_layer_transfer: f64,
    layer_compute: &[f64],
) -> PipelineTimeline {
    let n = layer_compute.len();
    let mut layer_ready = Vec::with_capacity(n);
    let mut attn_start = Vec::with_capacity(n);
    let mut t = compute_ready;
    let mut stall = 0.0;
    for (l, dur) in layer_compute.iter().enumerate() {
        let ready = issued_at + (l + 1) as f64 * per_layer_transfer;
        layer_ready.push(ready);
        if ready > t {
            stall += ready - t;
            t = ready;
        }
        attn_start.push(t);
        t += dur;
    }
    PipelineTimeline {
        layer_ready,
        attn_start,
        end: t,
        stall,
    }
}

/// Swap-in of `bytes` (split evenly over `n_layer` layers) overlapped with a
/// step whose compute is spread evenly across layers.
pub fn schedule_swap_in(
    issued_at: f64,
    bytes: u64,
    n_layer: usize,
    step_compute: f64,
    link: &LinkConfig,
    contended: bool,
) -> Result<(TransferTask, PipelineTimeline), SwapError> {
    if n_layer == 0 {
        return Err(SwapError::NoLayers);
    }
    let total = transfer_time(bytes, link.bandwidth, link.duplex_penalty, contended)?;
    let per_layer = total / n_layer as f64;
    let compute = vec![step_compute / n_layer as f64; n_layer];
    let timeline = pipeline(issued_at, issued_at, per_layer, &compute);
    let task = TransferTask {
        n_chunks: 0,
        direction: Direction::In,
        bytes,
        issued_at,
        per_layer_done: timeline.layer_ready.clone(),
        done_at: *timeline.layer_ready.last().expect("n_layer >= 1"),
    };
    Ok((task, timeline))
}

/// Start time of a swap-out issued at `now`. Without duplex it waits for
/// every in-flight swap-in; with duplex it starts immediately.
pub fn schedule_swap_out(now: f64, swap_in_busy_until: f64, allow_duplex: bool) -> f64 {
    if allow_duplex {
        now
    } else {
        now.max(swap_in_busy_until)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    SwapInLayer,
    SwapOut,
    AttnStart,
    StepEnd,
    Arrive,
    Finish,
}

impl EventKind {
    fn as_str(&self) -> &'static str {
        match self {
            EventKind::SwapInLayer => "swap_in_layer",
            EventKind::SwapOut => "swap_out",
            EventKind::AttnStart => "attn_start",
            EventKind::StepEnd => "step_end",
            EventKind::Arrive => "arrive",
            EventKind::Finish => "finish",
        }
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "swap_in_layer" => EventKind::SwapInLayer,
            "swap_out" => EventKind::SwapOut,
            "attn_start" => EventKind::AttnStart,
            "step_end" => EventKind::StepEnd,
            "arrive" => EventKind::Arrive,
            "finish" => EventKind::Finish,
            other => return Err(format!("unknown event kind `{other}`")),
        })
    }
}

/// One timeline event; `req` and `layer` are absent where they don't apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
    pub req: Option<u64>,
    pub layer: Option<usize>,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={:.9} kind={} req=", self.t, self.kind.as_str())?;
        match self.req {
            Some(r) => write!(f, "{r}")?,
            None => f.write_str("-")?,
        }
        f.write_str(" layer=")?;
        match self.layer {
            Some(l) => write!(f, "{l}"),
            None => f.write_str("-"),
        }
    }
}

impl Event {
    pub fn parse(line: &str) -> Result<Self, String> {
        let mut t = None;
        let mut kind = None;
        let mut req = None;
        let mut layer = None;
        for field in line.split_whitespace() {
            let (key, val) = field
                .split_once('=')
                .ok_or_else(|| format!("field `{field}` has no `=`"))?;
            match key {
                "t" => t = Some(val.parse::<f64>().map_err(|e| e.to_string())?),
                "kind" => kind = Some(val.parse::<EventKind>()?),
                "req" => {
                    req = Some(if val == "-" {
                        None
                    } else {
                        Some(val.parse::<u64>().map_err(|e| e.to_string())?)
                    })
                }
                "layer" => {
                    layer = Some(if val == "-" {
                        None
                    } else {
                        Some(val.parse::<usize>().map_err(|e| e.to_string())?)
                    })
                }
                other => return Err(format!("unknown field `{other}`")),
            }
        }
        Ok(Event {
            t: t.ok_or("missing t")?,
            kind: kind.ok_or("missing kind")?,
            req: req.ok_or("missing req")?,
            layer: layer.ok_or("missing layer")?,
        })
    }
}

pub fn parse_event_log(text: &str) -> Result<Vec<Event>, SwapError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| Event::parse(l).map_err(|msg| SwapError::Parse { line: i + 1, msg }))
        .collect()
}

/// Counts attention starts that precede the same request's layer arrival
/// within one step. Steps are delimited by `step_end` events.
pub fn count_dependency_violations(events: &[Event]) -> usize {
    use std::collections::HashMap;
    let mut violations = 0;
    let mut ready: HashMap<(u64, usize), f64> = HashMap::new();
    let mut starts: Vec<(u64, usize, f64)> = Vec::new();
    let mut flush = |ready: &mut HashMap<(u64, usize), f64>, starts: &mut Vec<(u64, usize, f64)>| {
        for (r, l, t) in starts.drain(..) {
            if let Some(&ready_at) = ready.get(&(r, l)) {
                if t < ready_at {
                    violations += 1;
                }
            }
        }
        ready.clear();
    };
    for e in events {
        match (e.kind, e.req, e.layer) {
            (EventKind::SwapInLayer, Some(r), Some(l)) => {
                ready.insert((r, l), e.t);
            }
            (EventKind::AttnStart, Some(r), Some(l)) => starts.push((r, l, e.t)),
            (EventKind::StepEnd, _, _) => flush(&mut ready, &mut starts),
            _ => {}
        }
    }
    flush(&mut ready, &mut starts);
    violations
}
