//! Reference semantics for multi-token attention over paged KV storage.
//!
//! Queries arrive as one ragged batch: each sub-request owns a contiguous
//! span of query rows, a block table mapping its logical context positions
//! to physical slots, and a causal offset. Query row `i` of a span attends to
//! context positions `0..=causal_offset + i`.
//!
//! Tensors are flat row-major `f32` buffers; scores and softmax accumulate in
//! `f64`.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::batch::SubRequest;
use crate::types::Slot;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("block table references slot {slot}, store has {n_slots}")]
    SlotOutOfRange { slot: Slot, n_slots: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("sub-request for request {0} is inconsistent")]
    BadSubRequest(u64),
    #[error("single-token path requires spans of length 1")]
    NotSingleToken,
    #[error("fixture: {0}")]
    Fixture(String),
}

/// Attention shape shared by queries and the KV store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub n_head: usize,
    pub n_kv_head: usize,
    pub head_size: usize,
}

impl HeadConfig {
    pub fn group_size(&self) -> usize {
        self.n_head / self.n_kv_head
    }

    pub fn q_width(&self) -> usize {
        self.n_head * self.head_size
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_head * self.head_size
    }

    /// Standard normalizer `sqrt(head_size)`.
    pub fn default_scale(&self) -> f64 {
        (self.head_size as f64).sqrt()
    }

    fn validate(&self) -> Result<(), AttentionError> {
        if self.n_kv_head == 0 || self.head_size == 0 || !self.n_head.is_multiple_of(self.n_kv_head) {
            return Err(AttentionError::DimensionMismatch(format!(
                "n_head {} n_kv_head {} head_size {}",
                self.n_head, self.n_kv_head, self.head_size
            )));
        }
        Ok(())
    }
}

/// Fixed-size key and value blocks indexed by slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PagedKvStore {
    pub chunk_size: usize,
    pub n_kv_head: usize,
    pub head_size: usize,
    n_slots: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl PagedKvStore {
    pub fn new(n_slots: usize, chunk_size: usize, n_kv_head: usize, head_size: usize) -> Self {
        let len = n_slots * chunk_size * n_kv_head * head_size;
        Self {
            chunk_size,
            n_kv_head,
            head_size,
            n_slots,
            keys: vec![0.0; len],
            values: vec![0.0; len],
        }
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    fn row_width(&self) -> usize {
        self.n_kv_head * self.head_size
    }

    fn offset(&self, slot: Slot, row: usize) -> Result<usize, AttentionError> {
        if slot >= self.n_slots {
            return Err(AttentionError::SlotOutOfRange {
                slot,
                n_slots: self.n_slots,
            });
        }
        Ok((slot * self.chunk_size + row) * self.row_width())
    }

    /// Key row (all KV heads) at `(slot, row)`.
    pub fn key(&self, slot: Slot, row: usize) -> Result<&[f32], AttentionError> {
        let o = self.offset(slot, row)?;
        Ok(&self.keys[o..o + self.row_width()])
    }

    pub fn value(&self, slot: Slot, row: usize) -> Result<&[f32], AttentionError> {
        let o = self.offset(slot, row)?;
        Ok(&self.values[o..o + self.row_width()])
    }

    pub fn write(
        &mut self,
        slot: Slot,
        row: usize,
        key: &[f32],
        value: &[f32],
    ) -> Result<(), AttentionError> {
        let w = self.row_width();
        if key.len() != w || value.len() != w || row >= self.chunk_size {
            return Err(AttentionError::DimensionMismatch(format!(
                "kv row of width {} / {} at row {row}",
                key.len(),
                value.len()
            )));
        }
        let o = self.offset(slot, row)?;
        self.keys[o..o + w].copy_from_slice(key);
        self.values[o..o + w].copy_from_slice(value);
        Ok(())
    }

    /// Key and value rows for logical position `pos` under `block_table`.
    pub fn gather(
        &self,
        block_table: &[Slot],
        pos: usize,
    ) -> Result<(&[f32], &[f32]), AttentionError> {
        let slot = *block_table.get(pos / self.chunk_size).ok_or_else(|| {
            AttentionError::DimensionMismatch(format!("position {pos} beyond block table"))
        })?;
        let row = pos % self.chunk_size;
        Ok((self.key(slot, row)?, self.value(slot, row)?))
    }

    /// Copies the store, moving slot `s` to `perm[s]`.
    pub fn permuted(&self, perm: &[Slot]) -> Self {
        let block = self.chunk_size * self.row_width();
        let mut out = Self::new(self.n_slots, self.chunk_size, self.n_kv_head, self.head_size);
        for (s, &dst) in perm.iter().enumerate() {
            out.keys[dst * block..(dst + 1) * block]
                .copy_from_slice(&self.keys[s * block..(s + 1) * block]);
            out.values[dst * block..(dst + 1) * block]
                .copy_from_slice(&self.values[s * block..(s + 1) * block]);
        }
        out
    }
}

/// Concatenated queries for every sub-request in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RaggedQueryBatch {
    pub heads: HeadConfig,
    /// `total_tokens x n_head x head_size`, row-major.
    pub q: Vec<f32>,
    pub sub_requests: Vec<SubRequest>,
    pub scale: f64,
}

impl RaggedQueryBatch {
    pub fn total_tokens(&self) -> usize {
        self.q.len() / self.heads.q_width()
    }

    fn validate(&self, store: &PagedKvStore) -> Result<(), AttentionError> {
        self.heads.validate()?;
        if store.n_kv_head != self.heads.n_kv_head || store.head_size != self.heads.head_size {
            return Err(AttentionError::DimensionMismatch(
                "store and query heads disagree".into(),
            ));
        }
        if !self.q.len().is_multiple_of(self.heads.q_width()) {
            return Err(AttentionError::DimensionMismatch("ragged q buffer".into()));
        }
        if self.q.iter().any(|x| !x.is_finite()) {
            return Err(AttentionError::NonFinite("queries"));
        }
        let total = self.total_tokens() as u64;
        let mut covered = 0;
        for s in &self.sub_requests {
            let blocks = s.context_len.div_ceil(store.chunk_size as u64) as usize;
            if s.causal_offset + s.query_len != s.context_len
                || s.query_start != covered
                || s.block_table.len() < blocks
            {
                return Err(AttentionError::BadSubRequest(s.req_id.0));
            }
            for &slot in &s.block_table[..blocks] {
                if slot >= store.n_slots {
                    return Err(AttentionError::SlotOutOfRange {
                        slot,
                        n_slots: store.n_slots,
                    });
                }
            }
            covered += s.query_len;
        }
        if covered != total {
            return Err(AttentionError::DimensionMismatch(format!(
                "spans cover {covered} of {total} query rows"
            )));
        }
        Ok(())
    }

    fn query(&self, token: usize, head: usize) -> &[f32] {
        let hs = self.heads.head_size;
        let o = token * self.heads.q_width() + head * hs;
        &self.q[o..o + hs]
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn check_finite(store: &PagedKvStore, s: &SubRequest) -> Result<(), AttentionError> {
    for pos in 0..s.context_len as usize {
        let (k, v) = store.gather(&s.block_table, pos)?;
        if k.iter().chain(v).any(|x| !x.is_finite()) {
            return Err(AttentionError::NonFinite("kv store"));
        }
    }
    Ok(())
}

/// Softmax-weighted sum over `n` positions given their scores.
fn softmax_combine<'a>(
    scores: &[f64],
    values: impl Iterator<Item = &'a [f32]>,
    out: &mut [f32],
) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let denom: f64 = weights.iter().sum();
    let mut acc = vec![0.0f64; out.len()];
    for (w, v) in weights.iter().zip(values) {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += w * *x as f64;
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = (a / denom) as f32;
    }
}

/// Multi-token attention gathering K/V through each sub-request's block table.
pub fn paged_multi_token_attention(
    batch: &RaggedQueryBatch,
    store: &PagedKvStore,
) -> Result<Vec<f32>, AttentionError> {
    batch.validate(store)?;
    let h = batch.heads;
    let hs = h.head_size;
    let group = h.group_size();
    let mut out = vec![0.0f32; batch.q.len()];
    let mut scores = Vec::new();
    for s in &batch.sub_requests {
        check_finite(store, s)?;
        for i in 0..s.query_len as usize {
            let token = s.query_start as usize + i;
            let visible = s.causal_offset as usize + i + 1;
            for head in 0..h.n_head {
                let kvh = head / group;
                let q = batch.query(token, head);
                scores.clear();
                for pos in 0..visible {
                    let (k, _) = store.gather(&s.block_table, pos)?;
                    scores.push(dot(q, &k[kvh * hs..(kvh + 1) * hs]) / batch.scale);
                }
                let values = (0..visible).map(|pos| {
                    let (_, v) = store.gather(&s.block_table, pos).expect("validated");
                    &v[kvh * hs..(kvh + 1) * hs]
                });
                let o = token * h.q_width() + head * hs;
                softmax_combine(&scores, values, &mut out[o..o + hs]);
            }
        }
    }
    Ok(out)
}

/// Generation-phase path: one query row per sub-request, walking the block
/// table block by block.
pub fn single_token_attention(
    batch: &RaggedQueryBatch,
    store: &PagedKvStore,
) -> Result<Vec<f32>, AttentionError> {
    if batch.sub_requests.iter().any(|s| s.query_len != 1) {
        return Err(AttentionError::NotSingleToken);
    }
    batch.validate(store)?;
    let h = batch.heads;
    let hs = h.head_size;
    let group = h.group_size();
    let cs = store.chunk_size;
    let mut out = vec![0.0f32; batch.q.len()];
    for s in &batch.sub_requests {
        check_finite(store, s)?;
        let ctx = s.context_len as usize;
        let token = s.query_start as usize;
        // all heads at once: scores[head][pos]
        let mut scores = vec![vec![0.0f64; ctx]; h.n_head];
        for (b, &slot) in s.block_table.iter().enumerate().take(ctx.div_ceil(cs)) {
            let rows = cs.min(ctx - b * cs);
            for row in 0..rows {
                let k = store.key(slot, row)?;
                for (head, sc) in scores.iter_mut().enumerate() {
                    let kvh = head / group;
                    sc[b * cs + row] =
                        dot(batch.query(token, head), &k[kvh * hs..(kvh + 1) * hs]) / batch.scale;
                }
            }
        }
        for (head, sc) in scores.iter().enumerate() {
            let kvh = head / group;
            let values = (0..ctx).map(|pos| {
                let v = store
                    .value(s.block_table[pos / cs], pos % cs)
                    .expect("validated");
                &v[kvh * hs..(kvh + 1) * hs]
            });
            let o = token * h.q_width() + head * hs;
            softmax_combine(sc, values, &mut out[o..o + hs]);
        }
    }
    Ok(out)
}

/// Straightforward masked attention over contiguous per-request tensors.
///
/// `q` is `query_len x n_head x head_size`; `k` and `v` are
/// `context_len x n_kv_head x head_size` with `context_len =
/// causal_offset + query_len`.
pub fn dense_oracle(
    heads: HeadConfig,
    q: &[f32],
    k: &[f32],
    v: &[f32],
    causal_offset: usize,
    scale: f64,
) -> Result<Vec<f32>, AttentionError> {
    heads.validate()?;
    let hs = heads.head_size;
    let qn = q.len() / heads.q_width();
    let ctx = k.len() / heads.kv_width();
    if !q.len().is_multiple_of(heads.q_width())
        || k.len() != v.len()
        || !k.len().is_multiple_of(heads.kv_width())
        || ctx != causal_offset + qn
    {
        return Err(AttentionError::DimensionMismatch(format!(
            "q rows {qn}, context {ctx}, offset {causal_offset}"
        )));
    }
    let group = heads.n_head / heads.n_kv_head;
    let mut out = vec![0.0f32; q.len()];
    for i in 0..qn {
        for head in 0..heads.n_head {
            let kvh = head / group;
            let qrow = &q[(i * heads.n_head + head) * hs..][..hs];
            let mut scores = vec![f64::NEG_INFINITY; ctx];
            let mut max = f64::NEG_INFINITY;
            for (p, score) in scores.iter_mut().enumerate() {
                if p > causal_offset + i {
                    continue;
                }
                let krow = &k[(p * heads.n_kv_head + kvh) * hs..][..hs];
                let mut acc = 0.0f64;
                for d in 0..hs {
                    acc += qrow[d] as f64 * krow[d] as f64;
                }
                *score = acc / scale;
                max = max.max(*score);
            }
            let mut denom = 0.0;
            let mut acc = vec![0.0f64; hs];
            for (p, score) in scores.iter().enumerate() {
                if p > causal_offset + i {
                    continue;
                }
                let w = (score - max).exp();
                denom += w;
                let vrow = &v[(p * heads.n_kv_head + kvh) * hs..][..hs];
                for d in 0..hs {
                    acc[d] += w * vrow[d] as f64;
                }
            }
            for d in 0..hs {
                out[(i * heads.n_head + head) * hs + d] = (acc[d] / denom) as f32;
            }
        }
    }
    Ok(out)
}

/// Softmax weights of query row `i` of sub-request `sub`, head `head`.
pub fn attention_weights(
    batch: &RaggedQueryBatch,
    store: &PagedKvStore,
    sub: usize,
    i: usize,
    head: usize,
) -> Result<Vec<f64>, AttentionError> {
    let s = &batch.sub_requests[sub];
    let hs = batch.heads.head_size;
    let kvh = head / batch.heads.group_size();
    let q = batch.query(s.query_start as usize + i, head);
    let scores: Vec<f64> = (0..=s.causal_offset as usize + i)
        .map(|pos| {
            store
                .gather(&s.block_table, pos)
                .map(|(k, _)| dot(q, &k[kvh * hs..(kvh + 1) * hs]) / batch.scale)
        })
        .collect::<Result<_, _>>()?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let denom: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / denom).collect())
}

/// Output of the copy-out variant.
#[derive(Debug, Clone, PartialEq)]
pub struct CopyOutResult {
    pub output: Vec<f32>,
    /// Bytes copied into contiguous buffers, per layer.
    pub gathered_bytes: u64,
}

/// Gathers each sub-request's context into fresh contiguous buffers and
/// runs the dense path. Sub-requests with no cached prefix need no gather.
pub fn copyout_then_dense(
    batch: &RaggedQueryBatch,
    store: &PagedKvStore,
    bytes_per_scalar: u64,
) -> Result<CopyOutResult, AttentionError> {
    batch.validate(store)?;
    let h = batch.heads;
    let mut output = vec![0.0f32; batch.q.len()];
    let mut gathered_bytes = 0;
    for s in &batch.sub_requests {
        check_finite(store, s)?;
        let ctx = s.context_len as usize;
        let mut k = Vec::with_capacity(ctx * h.kv_width());
        let mut v = Vec::with_capacity(ctx * h.kv_width());
        for pos in 0..ctx {
            let (kr, vr) = store.gather(&s.block_table, pos)?;
            k.extend_from_slice(kr);
            v.extend_from_slice(vr);
        }
        if s.causal_offset > 0 {
            gathered_bytes += s.context_len * 2 * h.kv_width() as u64 * bytes_per_scalar;
        }
        let start = s.query_start as usize * h.q_width();
        let end = start + s.query_len as usize * h.q_width();
        let o = dense_oracle(h, &batch.q[start..end], &k, &v, s.causal_offset as usize, batch.scale)?;
        output[start..end].copy_from_slice(&o);
    }
    Ok(CopyOutResult {
        output,
        gathered_bytes,
    })
}

/// Projection weights, `d_model x (heads * head_size)` each.
#[derive(Debug, Clone)]
pub struct QkvWeights {
    pub w_q: Array2<f32>,
    pub w_k: Array2<f32>,
    pub w_v: Array2<f32>,
}

/// Computes `Q = X W_q`, `K = X W_k`, `V = X W_v`, writes each token's K/V
/// row to `(slot, row)` from `placement`, and returns Q.
pub fn qkv_project(
    x: ArrayView2<f32>,
    weights: &QkvWeights,
    store: &mut PagedKvStore,
    placement: &[(Slot, usize)],
) -> Result<Array2<f32>, AttentionError> {
    let d = x.ncols();
    for (name, w) in [("w_q", &weights.w_q), ("w_k", &weights.w_k), ("w_v", &weights.w_v)] {
        if w.nrows() != d {
            return Err(AttentionError::DimensionMismatch(format!(
                "{name} has {} rows, x has {d} columns",
                w.nrows()
            )));
        }
    }
    if placement.len() != x.nrows() {
        return Err(AttentionError::DimensionMismatch(format!(
            "{} placements for {} tokens",
            placement.len(),
            x.nrows()
        )));
    }
    let q = x.dot(&weights.w_q);
    let k = x.dot(&weights.w_k);
    let v = x.dot(&weights.w_v);
    for (t, &(slot, row)) in placement.iter().enumerate() {
        let kr = k.row(t).to_vec();
        let vr = v.row(t).to_vec();
        store.write(slot, row, &kr, &vr)?;
    }
    Ok(q)
}

/// Writes a flat array with a `shape d0 d1 ...` header line.
pub fn write_fixture(shape: &[usize], data: &[f32]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let vals: Vec<String> = data.iter().map(|x| format!("{x:e}")).collect();
    format!("shape {}\n{}\n", dims.join(" "), vals.join(" "))
}

pub fn read_fixture(text: &str) -> Result<(Vec<usize>, Vec<f32>), AttentionError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| AttentionError::Fixture("empty".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("shape") {
        return Err(AttentionError::Fixture("missing shape header".into()));
    }
    let shape: Vec<usize> = parts
        .map(|p| p.parse().map_err(|e| AttentionError::Fixture(format!("{e}"))))
        .collect::<Result<_, _>>()?;
    let data: Vec<f32> = lines
        .flat_map(str::split_whitespace)
        .map(|p| p.parse().map_err(|e| AttentionError::Fixture(format!("{e}"))))
        .collect::<Result<_, _>>()?;
    if data.len() != shape.iter().product::<usize>() {
        return Err(AttentionError::Fixture(format!(
            "{} values for shape {shape:?}",
            data.len()
        )));
    }
    Ok((shape, data))
}
