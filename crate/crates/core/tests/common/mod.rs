//! Generators and oracles shared by the property and acceptance targets.
#![allow(dead_code)]

use std::cmp::Ordering;

use kvtier::attention::{HeadConfig, PagedKvStore, RaggedQueryBatch};
use kvtier::cache::{ChunkRecord, EvictTarget, Location, PagedKvCache};
use kvtier::{ChunkId, ConvId, ReqId, SubRequest};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense per-sub-request tensors alongside the paged layout built from them.
pub struct AttnInstance {
    pub batch: RaggedQueryBatch,
    pub store: PagedKvStore,
    /// `(q, k, v)` per sub-request, contiguous, in oracle layout.
    pub dense: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)>,
}

fn randn(r: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()
}

/// Up to 4 sub-requests over contexts of at most `max_ctx` tokens, GQA group
/// sizes 1, 2 or 4, at most 8 query heads, slots shuffled across requests.
/// `max_query` bounds each span; contexts below it are fully prefilled.
pub fn attention_instance(seed: u64, max_ctx: usize, max_query: usize) -> AttnInstance {
    let mut r = rng(seed);
    let group = [1usize, 2, 4][r.random_range(0..3)];
    let n_kv_head = r.random_range(1..=8 / group);
    let heads = HeadConfig {
        n_head: n_kv_head * group,
        n_kv_head,
        head_size: [4usize, 8, 16][r.random_range(0..3)],
    };
    let chunk_size = [4usize, 16, 32][r.random_range(0..3)];
    let n_sub = r.random_range(1..=4);
    let shapes: Vec<(usize, usize)> = (0..n_sub)
        .map(|_| {
            let ctx = r.random_range(1..=max_ctx);
            (ctx, r.random_range(1..=ctx.min(max_query)))
        })
        .collect();
    let n_chunks: usize = shapes.iter().map(|(c, _)| c.div_ceil(chunk_size)).sum();
    let n_slots = n_chunks + r.random_range(0..4);
    let mut slots: Vec<usize> = (0..n_slots).collect();
    slots.shuffle(&mut r);
    let mut store = PagedKvStore::new(n_slots, chunk_size, heads.n_kv_head, heads.head_size);
    let kvw = heads.kv_width();
    let mut q_all = Vec::new();
    let mut subs = Vec::new();
    let mut dense = Vec::new();
    let mut next_slot = slots.into_iter();
    let mut query_start = 0u64;
    for (i, &(ctx, ql)) in shapes.iter().enumerate() {
        let table: Vec<usize> = (0..ctx.div_ceil(chunk_size))
            .map(|_| next_slot.next().unwrap())
            .collect();
        let k = randn(&mut r, ctx * kvw);
        let v = randn(&mut r, ctx * kvw);
        for pos in 0..ctx {
            store
                .write(
                    table[pos / chunk_size],
                    pos % chunk_size,
                    &k[pos * kvw..(pos + 1) * kvw],
                    &v[pos * kvw..(pos + 1) * kvw],
                )
                .unwrap();
        }
        let q = randn(&mut r, ql * heads.q_width());
        q_all.extend_from_slice(&q);
        subs.push(SubRequest {
            req_id: ReqId(i as u64),
            query_start,
            query_len: ql as u64,
            context_len: ctx as u64,
            causal_offset: (ctx - ql) as u64,
            block_table: table,
        });
        query_start += ql as u64;
        dense.push((q, k, v));
    }
    AttnInstance {
        batch: RaggedQueryBatch {
            heads,
            q: q_all,
            sub_requests: subs,
            scale: heads.default_scale(),
        },
        store,
        dense,
    }
}

/// The same contexts, reduced to one query row (the last position) each.
pub fn decode_view(inst: &AttnInstance) -> AttnInstance {
    let h = inst.batch.heads;
    let qw = h.q_width();
    let mut q_all = Vec::new();
    let mut subs = Vec::new();
    let mut dense = Vec::new();
    for (i, (s, (q, k, v))) in inst.batch.sub_requests.iter().zip(&inst.dense).enumerate() {
        let last = &q[(s.query_len as usize - 1) * qw..s.query_len as usize * qw];
        q_all.extend_from_slice(last);
        subs.push(SubRequest {
            query_start: i as u64,
            query_len: 1,
            causal_offset: s.context_len - 1,
            ..s.clone()
        });
        dense.push((last.to_vec(), k.clone(), v.clone()));
    }
    AttnInstance {
        batch: RaggedQueryBatch {
            q: q_all,
            sub_requests: subs,
            ..inst.batch.clone()
        },
        store: inst.store.clone(),
        dense,
    }
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

/// Synthetic-profile retention value written out from its definition:
/// `(k * l + c_other) / max(now - T, 1e-3)` with `l = offset + n_tokens`.
pub fn closed_form_value(c: &ChunkRecord, k_attn: f64, c_other: f64, now: f64) -> f64 {
    let l = (c.start_offset + c.n_tokens) as f64;
    (k_attn * l + c_other) / (now - c.last_active).max(1e-3)
}

/// Brute force: sort everything, take the first `needed`.
pub fn brute_force_victims(
    chunks: &[ChunkRecord],
    k_attn: f64,
    c_other: f64,
    now: f64,
    needed: usize,
) -> Vec<ChunkId> {
    let mut keyed: Vec<(f64, &ChunkRecord)> = chunks
        .iter()
        .map(|c| (closed_form_value(c, k_attn, c_other, now), c))
        .collect();
    keyed.sort_by(|(va, a), (vb, b)| {
        va.partial_cmp(vb)
            .unwrap_or(Ordering::Equal)
            .then(a.last_active.partial_cmp(&b.last_active).unwrap())
            .then(a.conv_id.cmp(&b.conv_id))
            .then(a.start_offset.cmp(&b.start_offset))
            .then(a.chunk_id.cmp(&b.chunk_id))
    });
    keyed.into_iter().take(needed).map(|(_, c)| c.chunk_id).collect()
}

/// Brute-force LRU: oldest activity, then conversation, then offset.
pub fn brute_force_lru(chunks: &[ChunkRecord], needed: usize) -> Vec<ChunkId> {
    let mut v: Vec<&ChunkRecord> = chunks.iter().collect();
    v.sort_by(|a, b| {
        a.last_active
            .partial_cmp(&b.last_active)
            .unwrap()
            .then(a.conv_id.cmp(&b.conv_id))
            .then(a.start_offset.cmp(&b.start_offset))
    });
    v.into_iter().take(needed).map(|c| c.chunk_id).collect()
}

/// Whole conversations of full chunks (last one partial), each conversation
/// sharing one activity time, some conversations sharing times with others.
pub fn random_chunk_set(seed: u64, chunk_size: u64) -> Vec<ChunkRecord> {
    let mut r = rng(seed);
    let n_conv = r.random_range(1..=12);
    let times: Vec<f64> = (0..4).map(|_| r.random_range(0.0..100.0)).collect();
    let mut out = Vec::new();
    let mut id = 0;
    for conv in 0..n_conv {
        let t = if r.random_bool(0.5) {
            times[r.random_range(0..times.len())]
        } else {
            r.random_range(0.0..100.0)
        };
        let tokens = r.random_range(1..=20 * chunk_size);
        let mut off = 0;
        while off < tokens {
            let n = chunk_size.min(tokens - off);
            out.push(ChunkRecord {
                chunk_id: ChunkId(id),
                conv_id: ConvId(conv),
                start_offset: off,
                n_tokens: n,
                location: Location::Device(id as usize),
                last_active: t,
            });
            id += 1;
            off += n;
        }
    }
    out.shuffle(&mut r);
    out
}

/// Within each conversation, selected chunks form a prefix by offset and are
/// listed in offset order.
pub fn leading_first(chunks: &[ChunkRecord], victims: &[ChunkId]) -> bool {
    let by_id = |id: ChunkId| chunks.iter().find(|c| c.chunk_id == id).unwrap();
    let mut convs: Vec<ConvId> = chunks.iter().map(|c| c.conv_id).collect();
    convs.sort();
    convs.dedup();
    convs.iter().all(|&conv| {
        let picked: Vec<u64> = victims
            .iter()
            .map(|&id| by_id(id))
            .filter(|c| c.conv_id == conv)
            .map(|c| c.start_offset)
            .collect();
        let mut offsets: Vec<u64> = chunks
            .iter()
            .filter(|c| c.conv_id == conv)
            .map(|c| c.start_offset)
            .collect();
        offsets.sort();
        picked.as_slice() == &offsets[..picked.len()]
    })
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FuzzStats {
    pub ops: usize,
    pub applied: usize,
    pub rejected: usize,
    pub violations: usize,
}

/// Random allocate / evict / restore / recompute / finish / release
/// operations. A rejected operation must leave the cache unchanged; every
/// operation is followed by a full invariant check.
pub fn fuzz_cache(seed: u64, ops: usize) -> FuzzStats {
    let mut r = rng(seed);
    let mut cache = PagedKvCache::new(8, 48, 64);
    let mut stats = FuzzStats {
        ops,
        ..Default::default()
    };
    let mut now = 0.0;
    for _ in 0..ops {
        now += r.random_range(0.0..1.0);
        let conv = ConvId(r.random_range(0..10));
        let before = cache.snapshot();
        let ids_at = |cache: &PagedKvCache, want: fn(&Location) -> bool| -> Vec<ChunkId> {
            cache
                .chunks()
                .filter(|c| want(&c.location))
                .map(|c| c.chunk_id)
                .collect()
        };
        let pick = |mut ids: Vec<ChunkId>, r: &mut ChaCha8Rng| {
            ids.shuffle(r);
            let k = r.random_range(0..=ids.len().min(6));
            ids.truncate(k);
            ids
        };
        let result: Result<(), String> = match r.random_range(0..8) {
            0 | 1 => cache
                .allocate(conv, r.random_range(1..40), now)
                .map(|_| ())
                .map_err(|e| e.to_string()),
            2 => {
                let v = pick(ids_at(&cache, |l| matches!(l, Location::Device(_))), &mut r);
                cache
                    .apply_evictions(&v, EvictTarget::Host)
                    .map_err(|e| e.to_string())
            }
            3 => {
                let v = pick(ids_at(&cache, |l| !matches!(l, Location::Dropped)), &mut r);
                cache
                    .apply_evictions(&v, EvictTarget::Dropped)
                    .map_err(|e| e.to_string())
            }
            4 => {
                let v = pick(ids_at(&cache, |l| matches!(l, Location::Host(_))), &mut r);
                cache.restore(&v).map(|_| ()).map_err(|e| e.to_string())
            }
            5 => {
                let v = pick(ids_at(&cache, |l| matches!(l, Location::Dropped)), &mut r);
                cache
                    .recompute_into_device(&v)
                    .map(|_| ())
                    .map_err(|e| e.to_string())
            }
            6 => {
                cache.retain_on_finish(conv, now);
                Ok(())
            }
            _ => {
                // a malformed request: duplicated or wrong-tier ids
                if r.random_bool(0.5) {
                    cache.release_conversation(conv);
                    Ok(())
                } else {
                    let mut v = pick(ids_at(&cache, |l| matches!(l, Location::Host(_))), &mut r);
                    if let Some(&first) = v.first() {
                        v.push(first);
                    }
                    cache
                        .apply_evictions(&v, EvictTarget::Host)
                        .map_err(|e| e.to_string())
                }
            }
        };
        match result {
            Ok(()) => stats.applied += 1,
            Err(_) => {
                stats.rejected += 1;
                if cache.snapshot() != before {
                    stats.violations += 1;
                }
            }
        }
        if cache.check_invariants().is_err() {
            stats.violations += 1;
        }
        let resident: usize = cache
            .chunks()
            .filter(|c| !matches!(c.location, Location::Dropped))
            .count();
        if resident != cache.device().allocated_slots() + cache.host().allocated_slots() {
            stats.violations += 1;
        }
    }
    stats
}
