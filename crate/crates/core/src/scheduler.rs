//! Iteration-level batch scheduling over the two-tier cache.
//!
//! Each step the scheduler (1) makes room for every generating request's
//! next token, suspending the youngest requests if idle chunks cannot be
//! evicted, (2) admits waiting requests first-come-first-serve while the
//! token budget and the free-slot reserve allow, restoring their swapped-out
//! chunks and re-materialising dropped ones, (3) swaps idle chunks out ahead
//! of time when free device slots fall below the swap threshold, and
//! (4) emits the batch plan(s) for execution.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{BatchPlan, SubRequest};
use crate::cache::{
    CacheError, ChunkRecord, ContextLayout, EvictTarget, Location, PagedKvCache, SegmentKind,
};
use crate::cost_model::CostProfile;
use crate::eviction::{self, PolicyKind};
use crate::types::{ChunkId, ConvId, ReqId, Slot};

pub const DEFAULT_TOKEN_BUDGET: u64 = 4096;
pub const DEFAULT_SWAP_THRESHOLD: f64 = 0.25;
pub const DEFAULT_RESERVE_FRACTION: f64 = 0.10;

#[derive(Debug, Error, PartialEq)]
pub enum SchedError {
    #[error("raw tokens {start}..{end} of conversation {conv} are not in the trace store")]
    TraceMissing { conv: ConvId, start: u64, end: u64 },
    #[error("cannot cover a deficit of {deficit} slots even by suspending every request")]
    CannotSuspendAll { deficit: usize },
    #[error("unknown batch mode `{0}` (expected unified or split)")]
    UnknownMode(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    /// Prefill and generation share one step.
    Unified,
    /// Prefill step, then a separate generation step.
    Split,
}

impl FromStr for BatchMode {
    type Err = SchedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "unified" => Ok(BatchMode::Unified),
            "split" => Ok(BatchMode::Split),
            _ => Err(SchedError::UnknownMode(s.to_string())),
        }
    }
}

impl fmt::Display for BatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BatchMode::Unified => "unified",
            BatchMode::Split => "split",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestState {
    Waiting,
    Prefill,
    Generating,
    Suspended,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub req_id: ReqId,
    pub conv_id: ConvId,
    pub turn: usize,
    pub arrival_time: f64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    pub state: RequestState,
    pub tokens_generated: u64,
    pub first_token_time: Option<f64>,
    /// Batch steps this request took part in.
    pub steps: u64,
    pub suspensions: u64,
}

impl Request {
    pub fn new(
        req_id: ReqId,
        conv_id: ConvId,
        turn: usize,
        arrival_time: f64,
        prompt_tokens: u64,
        output_tokens: u64,
    ) -> Self {
        Self {
            req_id,
            conv_id,
            turn,
            arrival_time,
            prompt_tokens,
            output_tokens,
            state: RequestState::Waiting,
            tokens_generated: 0,
            first_token_time: None,
            steps: 0,
            suspensions: 0,
        }
    }

    /// Tokens the request contributes beyond its cached and uncached
    /// history: the prompt for a fresh turn, nothing for a resumed one.
    fn fresh_tokens(&self) -> u64 {
        if self.state == RequestState::Suspended {
            0
        } else {
            self.prompt_tokens
        }
    }
}

/// Persistent raw-token store; the simulator needs token counts only.
#[derive(Debug, Clone, Default)]
pub struct TraceStore {
    tokens: std::collections::BTreeMap<ConvId, u64>,
}

impl TraceStore {
    pub fn append(&mut self, conv: ConvId, n: u64) {
        *self.tokens.entry(conv).or_default() += n;
    }

    pub fn tokens(&self, conv: ConvId) -> u64 {
        self.tokens.get(&conv).copied().unwrap_or(0)
    }

    /// Checks that raw tokens `start..end` can be fetched for recomputation.
    pub fn refetch(&self, conv: ConvId, start: u64, end: u64) -> Result<(), SchedError> {
        if end <= self.tokens(conv) {
            Ok(())
        } else {
            Err(SchedError::TraceMissing { conv, start, end })
        }
    }
}

/// Sub-request shape before block tables are known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubRequestTemplate {
    pub query_len: u64,
    pub context_len: u64,
    pub causal_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestPlan {
    pub req_id: ReqId,
    pub conv_id: ConvId,
    pub recompute_chunks: Vec<ChunkId>,
    pub recompute_tokens: u64,
    pub swap_in_chunks: Vec<ChunkId>,
    pub swap_in_tokens: u64,
    pub resident_tokens: u64,
    /// Tokens appended to the cache: uncached history tail plus prompt.
    pub new_tokens: u64,
    /// History tokens run through the model again (dropped or never cached).
    pub history_reprocessed: u64,
    pub sub_requests: Vec<SubRequestTemplate>,
}

impl RequestPlan {
    pub fn input_tokens(&self) -> u64 {
        self.recompute_tokens + self.new_tokens
    }
}

/// Plans one request against its conversation's current layout.
///
/// Dropped spans are refetched as raw tokens and become their own
/// sub-requests attending to the context up to themselves; the new tokens
/// attend to the whole context. Adjacent spans are merged.
pub fn plan_request(
    req: &Request,
    layout: &ContextLayout,
    store: &TraceStore,
) -> Result<RequestPlan, SchedError> {
    let conv = req.conv_id;
    let cached = layout.total_context_tokens;
    let stored = store.tokens(conv);
    let new_tokens = stored.saturating_sub(cached);
    let mut subs: Vec<SubRequestTemplate> = Vec::new();
    let mut push = |start: u64, end: u64| {
        if let Some(last) = subs.last_mut() {
            if last.context_len == start {
                last.query_len += end - start;
                last.context_len = end;
                return;
            }
        }
        subs.push(SubRequestTemplate {
            query_len: end - start,
            context_len: end,
            causal_offset: start,
        });
    };
    let mut recompute_tokens = 0;
    for seg in layout
        .segments
        .iter()
        .filter(|s| s.kind == SegmentKind::Recompute)
    {
        store.refetch(conv, seg.start, seg.end)?;
        recompute_tokens += seg.tokens();
        push(seg.start, seg.end);
    }
    if new_tokens > 0 {
        push(cached, cached + new_tokens);
    }
    Ok(RequestPlan {
        req_id: req.req_id,
        conv_id: conv,
        recompute_chunks: layout.chunks_of(SegmentKind::Recompute),
        recompute_tokens,
        swap_in_chunks: layout.chunks_of(SegmentKind::SwapIn),
        swap_in_tokens: layout.tokens_of(SegmentKind::SwapIn),
        resident_tokens: layout.tokens_of(SegmentKind::Resident),
        new_tokens,
        history_reprocessed: recompute_tokens + new_tokens.saturating_sub(req.fresh_tokens()),
        sub_requests: subs,
    })
}

/// Chunks moved off the device by one eviction pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvictionOutcome {
    pub swapped_out: Vec<ChunkId>,
    /// Host and device chunks dropped.
    pub dropped: Vec<ChunkId>,
    /// How many of `dropped` came straight from the device.
    pub dropped_from_device: usize,
}

impl EvictionOutcome {
    fn extend(&mut self, other: EvictionOutcome) {
        self.swapped_out.extend(other.swapped_out);
        self.dropped.extend(other.dropped);
        self.dropped_from_device += other.dropped_from_device;
    }

    /// Device slots released by this pass.
    pub fn device_slots_released(&self) -> usize {
        self.swapped_out.len() + self.dropped_from_device
    }
}

fn chunks_in<'a>(
    cache: &'a PagedKvCache,
    pinned: &'a BTreeSet<ConvId>,
    on_device: bool,
) -> impl Iterator<Item = &'a ChunkRecord> + 'a {
    cache.chunks().filter(move |c| {
        !pinned.contains(&c.conv_id)
            && match c.location {
                Location::Device(_) => on_device,
                Location::Host(_) => !on_device,
                Location::Dropped => false,
            }
    })
}

/// Frees up to `needed` device slots by moving idle chunks to the host,
/// dropping host chunks (same policy) to make room there. With no host tier
/// the victims are dropped directly.
pub fn evict_device(
    cache: &mut PagedKvCache,
    policy: PolicyKind,
    profile: &CostProfile,
    now: f64,
    needed: usize,
    pinned: &BTreeSet<ConvId>,
) -> Result<EvictionOutcome, SchedError> {
    let mut out = EvictionOutcome::default();
    if needed == 0 {
        return Ok(out);
    }
    let candidates = chunks_in(cache, pinned, true).count();
    let take = needed.min(candidates);
    if take == 0 {
        return Ok(out);
    }
    let mut victims = eviction::select(policy, chunks_in(cache, pinned, true), profile, now, take)
        .expect("take <= candidate count");
    if cache.host().capacity() == 0 {
        cache.apply_evictions(&victims, EvictTarget::Dropped)?;
        out.dropped_from_device += victims.len();
        out.dropped = victims;
        return Ok(out);
    }
    let host_short = victims.len().saturating_sub(cache.host().free_slots());
    if host_short > 0 {
        let host_candidates = chunks_in(cache, pinned, false).count();
        let k = host_short.min(host_candidates);
        if k > 0 {
            let drops = eviction::select(policy, chunks_in(cache, pinned, false), profile, now, k)
                .expect("k <= candidate count");
            cache.apply_evictions(&drops, EvictTarget::Dropped)?;
            out.dropped = drops;
        }
    }
    // ascending order keeps leading chunks first within each conversation
    victims.truncate(cache.host().free_slots());
    cache.apply_evictions(&victims, EvictTarget::Host)?;
    out.swapped_out = victims;
    Ok(out)
}

/// Ahead-of-time swap-out: when the available fraction of device slots is
/// below `threshold`, evicts idle chunks until it is restored.
pub fn maybe_swap_out(
    cache: &mut PagedKvCache,
    policy: PolicyKind,
    profile: &CostProfile,
    now: f64,
    threshold: f64,
    pinned: &BTreeSet<ConvId>,
) -> Result<EvictionOutcome, SchedError> {
    let cap = cache.device().capacity();
    if cap == 0 {
        return Ok(EvictionOutcome::default());
    }
    let available = cache.device().available();
    if (available as f64) >= threshold * cap as f64 {
        return Ok(EvictionOutcome::default());
    }
    let target = (threshold * cap as f64).ceil() as usize;
    evict_device(cache, policy, profile, now, target - available, pinned)
}

/// Moves a whole conversation off the device. If the host cannot take
/// every chunk even after policy drops, the conversation's own leading
/// chunks are dropped so the Dropped/Host/Device order is preserved.
fn evict_conversation(
    cache: &mut PagedKvCache,
    conv: ConvId,
    policy: PolicyKind,
    profile: &CostProfile,
    now: f64,
    pinned: &BTreeSet<ConvId>,
) -> Result<EvictionOutcome, SchedError> {
    let mut out = EvictionOutcome::default();
    let ids = cache.conversation_chunks(conv)?.to_vec();
    let on_device: Vec<ChunkId> = ids
        .iter()
        .copied()
        .filter(|id| matches!(cache.chunk(*id).unwrap().location, Location::Device(_)))
        .collect();
    if on_device.is_empty() {
        return Ok(out);
    }
    let short = on_device.len().saturating_sub(cache.host().free_slots());
    if short > 0 && cache.host().capacity() > 0 {
        let k = short.min(chunks_in(cache, pinned, false).count());
        if k > 0 {
            let drops = eviction::select(policy, chunks_in(cache, pinned, false), profile, now, k)
                .expect("k <= candidate count");
            cache.apply_evictions(&drops, EvictTarget::Dropped)?;
            out.dropped.extend(drops);
        }
    }
    let short = on_device.len().saturating_sub(cache.host().free_slots());
    if short > 0 {
        // drop own host chunks (they lead), then leading device chunks
        let own_host: Vec<ChunkId> = ids
            .iter()
            .copied()
            .filter(|id| matches!(cache.chunk(*id).unwrap().location, Location::Host(_)))
            .collect();
        let n = own_host.len().min(short);
        cache.apply_evictions(&own_host[..n], EvictTarget::Dropped)?;
        out.dropped.extend_from_slice(&own_host[..n]);
    }
    let short = on_device.len().saturating_sub(cache.host().free_slots());
    let (drop_dev, to_host) = on_device.split_at(short);
    cache.apply_evictions(drop_dev, EvictTarget::Dropped)?;
    out.dropped_from_device += drop_dev.len();
    out.dropped.extend_from_slice(drop_dev);
    cache.apply_evictions(to_host, EvictTarget::Host)?;
    out.swapped_out.extend_from_slice(to_host);
    Ok(out)
}

/// Picks requests to suspend, youngest arrival first, until the slots they
/// release plus the slots they no longer need cover `deficit`.
pub fn suspend_for_memory(
    running: &mut Vec<Request>,
    cache: &PagedKvCache,
    deficit: usize,
) -> Result<Vec<Request>, SchedError> {
    if deficit == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..running.len()).collect();
    order.sort_by(|&a, &b| {
        running[b]
            .arrival_time
            .total_cmp(&running[a].arrival_time)
            .then_with(|| running[b].req_id.cmp(&running[a].req_id))
    });
    let mut covered = 0;
    let mut chosen = Vec::new();
    for idx in order {
        if covered >= deficit {
            break;
        }
        let r = &running[idx];
        let on_device = cache
            .conversation_chunks(r.conv_id)
            .map(|ids| {
                ids.iter()
                    .filter(|id| matches!(cache.chunk(**id).unwrap().location, Location::Device(_)))
                    .count()
            })
            .unwrap_or(0);
        covered += on_device + cache.slots_for_append(r.conv_id, 1);
        chosen.push(idx);
    }
    if covered < deficit {
        return Err(SchedError::CannotSuspendAll { deficit });
    }
    chosen.sort_unstable_by(|a, b| b.cmp(a));
    let mut out: Vec<Request> = chosen.into_iter().map(|i| running.remove(i)).collect();
    for r in &mut out {
        r.state = RequestState::Suspended;
        r.suspensions += 1;
    }
    out.sort_by(|a, b| {
        a.arrival_time
            .total_cmp(&b.arrival_time)
            .then_with(|| a.req_id.cmp(&b.req_id))
    });
    Ok(out)
}

/// Generation-phase entry for batch construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenEntry {
    pub req_id: ReqId,
    pub conv_id: ConvId,
}

/// Turns planned admissions and generating requests into batch plans.
/// Allocation must already have happened: every context chunk is on device.
pub fn build_batch(
    admitted: &[RequestPlan],
    generating: &[GenEntry],
    cache: &PagedKvCache,
    mode: BatchMode,
) -> Result<Vec<BatchPlan>, SchedError> {
    let cs = cache.chunk_size();
    let mut prefill = BatchPlan::default();
    for plan in admitted {
        let table = cache.block_table(plan.conv_id)?;
        for t in &plan.sub_requests {
            prefill.push(SubRequest {
                req_id: plan.req_id,
                query_start: 0,
                query_len: t.query_len,
                context_len: t.context_len,
                causal_offset: t.causal_offset,
                block_table: table[..t.context_len.div_ceil(cs) as usize].to_vec(),
            });
        }
        prefill.recompute_token_count += plan.recompute_tokens;
    }
    let mut gen = BatchPlan::default();
    for g in generating {
        let table = cache.block_table(g.conv_id)?;
        let ctx = cache.total_tokens(g.conv_id);
        gen.push(SubRequest {
            req_id: g.req_id,
            query_start: 0,
            query_len: 1,
            context_len: ctx,
            causal_offset: ctx - 1,
            block_table: table,
        });
    }
    Ok(match mode {
        BatchMode::Split => [prefill, gen].into_iter().filter(|b| !b.is_empty()).collect(),
        BatchMode::Unified => {
            let mut unified = BatchPlan {
                recompute_token_count: prefill.recompute_token_count,
                ..Default::default()
            };
            for s in gen.sub_requests.into_iter().chain(prefill.sub_requests) {
                unified.push(s);
            }
            if unified.is_empty() {
                Vec::new()
            } else {
                vec![unified]
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub mode: BatchMode,
    pub policy: PolicyKind,
    pub token_budget: u64,
    pub swap_threshold: f64,
    pub reserve_fraction: f64,
    /// Keep KV state across turns; `false` is the stateless baseline.
    pub stateful: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            mode: BatchMode::Unified,
            policy: PolicyKind::Pensieve,
            token_budget: DEFAULT_TOKEN_BUDGET,
            swap_threshold: DEFAULT_SWAP_THRESHOLD,
            reserve_fraction: DEFAULT_RESERVE_FRACTION,
            stateful: true,
        }
    }
}

/// What one admission brought into the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Admission {
    pub plan: RequestPlan,
    pub swap_in: Vec<(ChunkId, Slot)>,
    pub resumed: bool,
    /// Returning turn (not turn 0 and not a resume).
    pub returning: bool,
    /// Context the conversation had cached or could have cached.
    pub history_tokens: u64,
}

/// Everything the executor needs for one scheduling iteration.
#[derive(Debug, Clone, Default)]
pub struct StepPlan {
    /// One plan (unified) or prefill-then-generation (split).
    pub batches: Vec<BatchPlan>,
    /// Requests advanced by each batch, parallel to `batches`.
    pub batch_requests: Vec<Vec<ReqId>>,
    pub admissions: Vec<Admission>,
    pub suspended: Vec<ReqId>,
    pub evictions: EvictionOutcome,
}

impl StepPlan {
    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// A finished request, reported once.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub request: Request,
    pub finish_time: f64,
}

pub struct Scheduler {
    pub cfg: SchedulerConfig,
    pub profile: CostProfile,
    wait_queue: VecDeque<Request>,
    running: Vec<Request>,
    /// Requests admitted this iteration, awaiting their prefill batch.
    prefilling: Vec<Request>,
}

impl Scheduler {
    pub fn new(cfg: SchedulerConfig, profile: CostProfile) -> Self {
        Self {
            cfg,
            profile,
            wait_queue: VecDeque::new(),
            running: Vec::new(),
            prefilling: Vec::new(),
        }
    }

    pub fn wait_queue(&self) -> &VecDeque<Request> {
        &self.wait_queue
    }

    pub fn running(&self) -> &[Request] {
        &self.running
    }

    pub fn is_idle(&self) -> bool {
        self.wait_queue.is_empty() && self.running.is_empty() && self.prefilling.is_empty()
    }

    /// Queues a newly arrived turn and persists its prompt tokens.
    pub fn enqueue(&mut self, req: Request, store: &mut TraceStore) {
        store.append(req.conv_id, req.prompt_tokens);
        self.wait_queue.push_back(req);
    }

    fn pinned_strict(&self) -> BTreeSet<ConvId> {
        self.running
            .iter()
            .chain(self.prefilling.iter())
            .chain(self.wait_queue.iter())
            .map(|r| r.conv_id)
            .collect()
    }

    fn pinned_active(&self) -> BTreeSet<ConvId> {
        self.running
            .iter()
            .chain(self.prefilling.iter())
            .map(|r| r.conv_id)
            .collect()
    }

    /// Evicts for `needed` slots, first sparing queued conversations, then
    /// sparing only active ones plus `extra`.
    fn make_room(
        &self,
        cache: &mut PagedKvCache,
        now: f64,
        needed: usize,
        extra: Option<ConvId>,
    ) -> Result<EvictionOutcome, SchedError> {
        let mut out = evict_device(
            cache,
            self.cfg.policy,
            &self.profile,
            now,
            needed,
            &self.pinned_strict(),
        )?;
        let got = out.device_slots_released();
        if got < needed {
            let mut pins = self.pinned_active();
            pins.extend(extra);
            out.extend(evict_device(
                cache,
                self.cfg.policy,
                &self.profile,
                now,
                needed - got,
                &pins,
            )?);
        }
        Ok(out)
    }

    /// Runs the scheduling part of one iteration.
    pub fn schedule(
        &mut self,
        cache: &mut PagedKvCache,
        store: &TraceStore,
        now: f64,
    ) -> Result<StepPlan, SchedError> {
        let mut step = StepPlan::default();

        // Room for each generating request's next token.
        let need: usize = self
            .running
            .iter()
            .map(|r| cache.slots_for_append(r.conv_id, 1))
            .sum();
        let available = cache.device().available();
        if need > available {
            let ev = self.make_room(cache, now, need - available, None)?;
            step.evictions.extend(ev);
            let available = cache.device().available();
            if need > available {
                let suspended = suspend_for_memory(&mut self.running, cache, need - available)?;
                let pins = self.pinned_strict();
                for r in &suspended {
                    let ev = evict_conversation(
                        cache,
                        r.conv_id,
                        self.cfg.policy,
                        &self.profile,
                        now,
                        &pins,
                    )?;
                    step.evictions.extend(ev);
                    step.suspended.push(r.req_id);
                }
                for r in suspended.into_iter().rev() {
                    self.wait_queue.push_front(r);
                }
            }
        }
        let mut generating = Vec::with_capacity(self.running.len());
        for r in &self.running {
            cache.allocate(r.conv_id, 1, now)?;
            generating.push(GenEntry {
                req_id: r.req_id,
                conv_id: r.conv_id,
            });
        }

        // FCFS admission.
        let capacity = cache.device().capacity();
        let reserve = self.cfg.reserve_fraction * capacity as f64;
        let mut batch_tokens = self.running.len() as u64;
        while let Some(head) = self.wait_queue.front() {
            cache.ensure_conversation(head.conv_id);
            let layout = cache.layout(head.conv_id)?;
            let plan = plan_request(head, &layout, store)?;
            let tokens = plan.input_tokens();
            let batch_empty = batch_tokens == 0;
            if !batch_empty && batch_tokens + tokens > self.cfg.token_budget {
                break;
            }
            let need = plan.recompute_chunks.len()
                + plan.swap_in_chunks.len()
                + cache.slots_for_append(head.conv_id, plan.new_tokens);
            let fits = |cache: &PagedKvCache| {
                let avail = cache.device().available();
                avail >= need && (avail - need) as f64 > reserve
            };
            if !fits(cache) {
                let wanted = need + reserve.floor() as usize + 1;
                let short = wanted.saturating_sub(cache.device().available());
                let conv = head.conv_id;
                let ev = self.make_room(cache, now, short, Some(conv))?;
                step.evictions.extend(ev);
                if !fits(cache) {
                    break;
                }
            }
            let mut req = self.wait_queue.pop_front().expect("head exists");
            // a plan made before evictions may be stale
            let layout = cache.layout(req.conv_id)?;
            let plan = plan_request(&req, &layout, store)?;
            cache.recompute_into_device(&plan.recompute_chunks)?;
            let swap_in = cache.restore(&plan.swap_in_chunks)?;
            cache.allocate(req.conv_id, plan.new_tokens, now)?;
            cache.touch(req.conv_id, now);
            let resumed = req.state == RequestState::Suspended;
            let history_tokens = store.tokens(req.conv_id) - req.fresh_tokens();
            batch_tokens += plan.input_tokens();
            step.admissions.push(Admission {
                returning: !resumed && req.turn > 0,
                resumed,
                history_tokens,
                swap_in,
                plan,
            });
            req.state = RequestState::Prefill;
            self.prefilling.push(req);
        }

        // Ahead-of-time swap-out.
        let ev = maybe_swap_out(
            cache,
            self.cfg.policy,
            &self.profile,
            now,
            self.cfg.swap_threshold,
            &self.pinned_strict(),
        )?;
        step.evictions.extend(ev);

        let plans: Vec<RequestPlan> = step.admissions.iter().map(|a| a.plan.clone()).collect();
        let mut batches = build_batch(&plans, &generating, cache, self.cfg.mode)?;
        let prefill_ids: Vec<ReqId> = plans.iter().map(|p| p.req_id).collect();
        let gen_ids: Vec<ReqId> = generating.iter().map(|g| g.req_id).collect();
        step.batch_requests = match self.cfg.mode {
            BatchMode::Unified => {
                if batches.is_empty() {
                    vec![]
                } else {
                    vec![gen_ids.iter().chain(&prefill_ids).copied().collect()]
                }
            }
            BatchMode::Split => [prefill_ids, gen_ids]
                .into_iter()
                .filter(|v| !v.is_empty())
                .collect(),
        };
        if let Some(first) = batches.first_mut() {
            first.swap_in = step
                .admissions
                .iter()
                .flat_map(|a| a.swap_in.iter().copied())
                .collect();
            first.swap_out = step.evictions.swapped_out.clone();
        }
        step.batches = batches;
        Ok(step)
    }

    /// Applies the outcome of a batch that finished at `now`: every listed
    /// request emits one token. Finished requests leave the scheduler.
    pub fn complete_batch(
        &mut self,
        req_ids: &[ReqId],
        cache: &mut PagedKvCache,
        store: &mut TraceStore,
        now: f64,
    ) -> Vec<Completion> {
        let ids: BTreeSet<ReqId> = req_ids.iter().copied().collect();
        let mut done = Vec::new();
        let mut advance = |r: &mut Request| {
            r.steps += 1;
            r.tokens_generated += 1;
            store.append(r.conv_id, 1);
            if r.first_token_time.is_none() {
                r.first_token_time = Some(now);
            }
            r.state = if r.tokens_generated >= r.output_tokens {
                RequestState::Finished
            } else {
                RequestState::Generating
            };
        };
        for r in self.running.iter_mut().filter(|r| ids.contains(&r.req_id)) {
            advance(r);
        }
        let mut still_prefilling = Vec::new();
        for mut r in std::mem::take(&mut self.prefilling) {
            if ids.contains(&r.req_id) {
                advance(&mut r);
                self.running.push(r);
            } else {
                still_prefilling.push(r);
            }
        }
        self.prefilling = still_prefilling;
        let (finished, running): (Vec<_>, Vec<_>) = std::mem::take(&mut self.running)
            .into_iter()
            .partition(|r| r.state == RequestState::Finished);
        self.running = running;
        for r in finished {
            if self.cfg.stateful {
                cache.retain_on_finish(r.conv_id, now);
            } else {
                cache.release_conversation(r.conv_id);
            }
            done.push(Completion {
                request: r,
                finish_time: now,
            });
        }
        done
    }
}
