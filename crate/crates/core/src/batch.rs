//! Ragged batch description handed from the scheduler to the executor.

use serde::{Deserialize, Serialize};

use crate::types::{ChunkId, ReqId, Slot};

/// A contiguous span of one request's query tokens together with the context
/// it attends to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubRequest {
    pub req_id: ReqId,
    /// Offset of the span in the batch's concatenated input tokens.
    pub query_start: u64,
    pub query_len: u64,
    /// Context positions attended to, including the span itself.
    pub context_len: u64,
    /// Context positions strictly before the first query token.
    pub causal_offset: u64,
    /// Device slots realising context positions `0..context_len`.
    pub block_table: Vec<Slot>,
}

impl SubRequest {
    pub fn is_well_formed(&self, chunk_size: u64) -> bool {
        self.causal_offset + self.query_len == self.context_len
            && self.block_table.len() as u64 == self.context_len.div_ceil(chunk_size)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub sub_requests: Vec<SubRequest>,
    pub swap_in: Vec<(ChunkId, Slot)>,
    pub swap_out: Vec<ChunkId>,
    pub recompute_token_count: u64,
    pub total_input_tokens: u64,
}

impl BatchPlan {
    pub fn is_empty(&self) -> bool {
        self.sub_requests.is_empty()
    }

    /// Appends a sub-request, placing its span after the current tokens.
    pub fn push(&mut self, mut sub: SubRequest) {
        sub.query_start = self.total_input_tokens;
        self.total_input_tokens += sub.query_len;
        self.sub_requests.push(sub);
    }
}
