//! Acceptance checks, one test per criterion. Each prints a single
//! `criterion N PASS|FAIL ...` line; run with `--nocapture` to see them.
//!
//! The simulation criteria share one scenario (configs/acceptance.toml):
//! 200 synthetic conversations, device tier at ~30% of the live working
//! set, host tier twice the device.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;

use common::*;
use kvtier::attention::{
    attention_weights, copyout_then_dense, dense_oracle, paged_multi_token_attention,
    single_token_attention,
};
use kvtier::eviction::select_victims;
use kvtier::model_config::{kv_token_bytes, ModelConfig};
use kvtier::simulator::{run_with_events, sweep, sweep_csv, SweepAxis};
use kvtier::swap_engine::pipeline;
use kvtier::workload::{synthetic_traces, SyntheticParams};
use kvtier::{synthetic_profile, BatchMode, MetricsReport, PolicyKind, RunConfig};
use rayon::prelude::*;

const ATTN_MAX_ABS: f64 = 1e-5;
const SOFTMAX_SUM_TOL: f64 = 1e-6;
const ATTN_INSTANCES: u64 = 100;
const EVICTION_SETS: u64 = 1_000;
const MIN_RECOMPUTE_REDUCTION: f64 = 0.05;
const MIN_STATEFUL_SPEEDUP: f64 = 1.1;
const THINK_MEANS: [f64; 4] = [60.0, 120.0, 300.0, 600.0];
const PIPELINE_TOL: f64 = 0.01;
const FUZZ_OPS: usize = 10_000;

fn verdict(n: u32, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} {tag} {detail}");
    assert!(pass, "criterion {n} failed: {detail}");
}

fn scenario_config() -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance.toml");
    RunConfig {
        record_events: true,
        ..RunConfig::load(&path).expect("bundled acceptance config")
    }
}

struct Run {
    report: MetricsReport,
    violations: usize,
    json: String,
    log: String,
}

struct Scenario {
    base: Run,
    repeat: Run,
    lru: Run,
    split: Run,
    stateless: Run,
    stateless_600: Run,
    /// Stateful runs at each of `THINK_MEANS`; the first is `base`.
    think: Vec<MetricsReport>,
    violations: Vec<(String, usize)>,
    induced_stall: Vec<(String, f64)>,
}

fn scenario() -> &'static Scenario {
    static S: OnceLock<Scenario> = OnceLock::new();
    S.get_or_init(|| {
        let base = scenario_config();
        let mut cfgs: Vec<(String, RunConfig)> = vec![
            ("base".into(), base.clone()),
            ("repeat".into(), base.clone()),
            (
                "lru".into(),
                RunConfig {
                    policy: PolicyKind::Lru,
                    ..base.clone()
                },
            ),
            (
                "split".into(),
                RunConfig {
                    mode: BatchMode::Split,
                    ..base.clone()
                },
            ),
            (
                "stateless".into(),
                RunConfig {
                    stateful: false,
                    ..base.clone()
                },
            ),
            (
                "stateless_600".into(),
                RunConfig {
                    stateful: false,
                    think_time_mean: 600.0,
                    ..base.clone()
                },
            ),
        ];
        for &m in &THINK_MEANS[1..] {
            cfgs.push((
                format!("think_{m}"),
                RunConfig {
                    think_time_mean: m,
                    ..base.clone()
                },
            ));
        }
        let mut runs: BTreeMap<String, (RunConfig, Run)> = cfgs
            .into_par_iter()
            .map(|(name, cfg)| {
                let out = run_with_events(&cfg).expect("acceptance run");
                let run = Run {
                    violations: out.dependency_violations(),
                    json: out.report.to_json(),
                    log: out.event_log(),
                    report: out.report,
                };
                (name, (cfg, run))
            })
            .collect();
        let violations = runs.iter().map(|(k, (_, r))| (k.clone(), r.violations)).collect();
        let induced_stall = runs
            .iter()
            .filter(|(_, (c, _))| c.policy == PolicyKind::Pensieve && !c.allow_duplex)
            .map(|(k, (_, r))| (k.clone(), r.report.swap_out_induced_stall))
            .collect();
        let mut take = |k: &str| runs.remove(k).expect("run present").1;
        let base = take("base");
        let mut think = vec![base.report.clone()];
        for &m in &THINK_MEANS[1..] {
            think.push(take(&format!("think_{m}")).report);
        }
        Scenario {
            repeat: take("repeat"),
            lru: take("lru"),
            split: take("split"),
            stateless: take("stateless"),
            stateless_600: take("stateless_600"),
            base,
            think,
            violations,
            induced_stall,
        }
    })
}

#[test]
fn criterion_01_memory_arithmetic() {
    let opt13 = kv_token_bytes(&ModelConfig::opt_13b());
    let opt66 = kv_token_bytes(&ModelConfig::opt_66b());
    let l13 = kv_token_bytes(&ModelConfig::llama2_13b());
    let l70 = ModelConfig::llama2_70b();
    let ok = opt13 == 819_200
        && l13 * 4 == opt13
        && opt66 * 100 == opt13 * 288
        && l70.n_kv_head * 8 == l70.n_head;
    verdict(
        1,
        ok,
        format!(
            "opt-13b {opt13} B/token, llama2-13b/opt-13b {}, opt-66b/opt-13b {}, \
             llama2-70b kv/q heads {}/{}",
            l13 as f64 / opt13 as f64,
            opt66 as f64 / opt13 as f64,
            l70.n_kv_head,
            l70.n_head
        ),
    );
}

fn dense_outputs(i: &AttnInstance) -> Vec<f32> {
    i.batch
        .sub_requests
        .iter()
        .zip(&i.dense)
        .flat_map(|(s, (q, k, v))| {
            dense_oracle(i.batch.heads, q, k, v, s.causal_offset as usize, i.batch.scale).unwrap()
        })
        .collect()
}

#[test]
fn criterion_02_attention_oracle() {
    let mut worst: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    let mut causal_bad = 0;
    let mut perm_bad = 0;
    for seed in 0..ATTN_INSTANCES {
        let inst = attention_instance(seed, 4096, 16);
        let b = &inst.batch;
        let oracle = dense_outputs(&inst);
        let paged = paged_multi_token_attention(b, &inst.store).unwrap();
        worst = worst.max(max_abs_diff(&paged, &oracle));
        let copy = copyout_then_dense(b, &inst.store, 2).unwrap();
        worst = worst.max(max_abs_diff(&copy.output, &oracle));

        let dec = decode_view(&inst);
        let want = dense_outputs(&dec);
        let single = single_token_attention(&dec.batch, &dec.store).unwrap();
        worst = worst.max(max_abs_diff(&single, &want));

        for (si, s) in b.sub_requests.iter().enumerate() {
            for i in 0..s.query_len as usize {
                for head in 0..b.heads.n_head {
                    let w = attention_weights(b, &inst.store, si, i, head).unwrap();
                    worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }

        // positions after the first query row of sub-request 0 must not
        // affect that row
        let s = &b.sub_requests[0];
        let mut store = inst.store.clone();
        let cs = store.chunk_size;
        let w = b.heads.kv_width();
        for pos in s.causal_offset as usize + 1..s.context_len as usize {
            store
                .write(s.block_table[pos / cs], pos % cs, &vec![7.0; w], &vec![-7.0; w])
                .unwrap();
        }
        let after = paged_multi_token_attention(b, &store).unwrap();
        let row = s.query_start as usize * b.heads.q_width();
        if paged[row..row + b.heads.q_width()] != after[row..row + b.heads.q_width()] {
            causal_bad += 1;
        }

        let n = inst.store.n_slots();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut moved = b.clone();
        for sub in &mut moved.sub_requests {
            for slot in &mut sub.block_table {
                *slot = perm[*slot];
            }
        }
        if paged_multi_token_attention(&moved, &inst.store.permuted(&perm)).unwrap() != paged {
            perm_bad += 1;
        }
    }
    verdict(
        2,
        worst < ATTN_MAX_ABS && worst_sum < SOFTMAX_SUM_TOL && causal_bad == 0 && perm_bad == 0,
        format!(
            "{ATTN_INSTANCES} instances: max-abs {worst:.2e} (tol {ATTN_MAX_ABS:e}), \
             softmax sum err {worst_sum:.2e} (tol {SOFTMAX_SUM_TOL:e}), \
             causal mismatches {causal_bad}, permutation mismatches {perm_bad}"
        ),
    );
}

#[test]
fn criterion_03_eviction_oracle() {
    let (k, c) = (2e-6, 3.2e-3);
    let profile = synthetic_profile(k, c, 1e-4);
    let mut mismatches = 0;
    let mut leading_bad = 0;
    let mut scale_bad = 0;
    for seed in 0..EVICTION_SETS {
        let chunks = random_chunk_set(seed, 32);
        let now = 100.0 + (seed % 7) as f64;
        let needed = (seed as usize * 7919) % (chunks.len() + 1);
        let got = select_victims(&chunks, &profile, now, needed).unwrap();
        if got != brute_force_victims(&chunks, k, c, now, needed) {
            mismatches += 1;
        }
        if !leading_first(&chunks, &got) {
            leading_bad += 1;
        }
        for factor in [1e-3, 0.5, 3.0, 1e4] {
            if select_victims(&chunks, &profile.scaled(factor), now, needed).unwrap() != got {
                scale_bad += 1;
            }
        }
    }
    verdict(
        3,
        mismatches == 0 && leading_bad == 0 && scale_bad == 0,
        format!(
            "{EVICTION_SETS} sets: brute-force mismatches {mismatches}, \
             leading-first violations {leading_bad}, scaling order changes {scale_bad}"
        ),
    );
}

#[test]
fn criterion_04_eviction_ablation() {
    let s = scenario();
    let (p, l) = (&s.base.report, &s.lru.report);
    let reduction = 1.0 - p.recomputed_kv_tokens as f64 / l.recomputed_kv_tokens as f64;
    verdict(
        4,
        reduction >= MIN_RECOMPUTE_REDUCTION && p.host_hit_rate >= l.host_hit_rate,
        format!(
            "recomputed pensieve {} vs lru {} ({:.1}% fewer, need {:.0}%), \
             host hit {:.4} vs {:.4}",
            p.recomputed_kv_tokens,
            l.recomputed_kv_tokens,
            reduction * 100.0,
            MIN_RECOMPUTE_REDUCTION * 100.0,
            p.host_hit_rate,
            l.host_hit_rate
        ),
    );
}

#[test]
fn criterion_05_statefulness() {
    // every seed, multi-turn, cache large enough for everything
    let mut seeds_bad = 0;
    for seed in 0..10 {
        let traces: Vec<_> = synthetic_traces(&SyntheticParams {
            n_conversations: 20,
            seed,
            ..Default::default()
        })
        .unwrap()
        .into_iter()
        .filter(|t| t.turns.len() >= 2)
        .collect();
        let cfg = RunConfig {
            seed,
            ..Default::default()
        };
        let sf = kvtier::simulator::run_traces(&cfg, &traces, 0).unwrap().report;
        let sl = kvtier::simulator::run_traces(
            &RunConfig {
                stateful: false,
                ..cfg
            },
            &traces,
            0,
        )
        .unwrap()
        .report;
        if sf.total_input_tokens >= sl.total_input_tokens {
            seeds_bad += 1;
        }
    }
    let s = scenario();
    let (sf, sl) = (&s.base.report, &s.stateless.report);
    let speedup = sf.throughput / sl.throughput;
    verdict(
        5,
        seeds_bad == 0
            && sf.total_input_tokens < sl.total_input_tokens
            && speedup >= MIN_STATEFUL_SPEEDUP,
        format!(
            "seeds with stateful >= stateless input tokens: {seeds_bad}/10; scenario input \
             tokens {} vs {}, throughput {:.4} vs {:.4} req/s ({speedup:.2}x, need {MIN_STATEFUL_SPEEDUP}x)",
            sf.total_input_tokens, sl.total_input_tokens, sf.throughput, sl.throughput
        ),
    );
}

#[test]
fn criterion_06_think_time_sweep() {
    let s = scenario();
    let rec: Vec<u64> = s.think.iter().map(|r| r.recomputed_kv_tokens).collect();
    let thr: Vec<f64> = s.think.iter().map(|r| r.throughput).collect();
    let sl = s.stateless_600.report.throughput;
    let ok = rec.windows(2).all(|w| w[0] <= w[1])
        && thr.windows(2).all(|w| w[0] >= w[1])
        && thr[3] >= sl;
    verdict(
        6,
        ok,
        format!(
            "means {THINK_MEANS:?}: recomputed {rec:?}, throughput [{}], stateless@600 {sl:.4}",
            thr.iter().map(|t| format!("{t:.4}")).collect::<Vec<_>>().join(", ")
        ),
    );
}

#[test]
fn criterion_07_unified_vs_split() {
    let s = scenario();
    let (u, sp) = (&s.base.report, &s.split.report);
    let outputs = |r: &MetricsReport| {
        r.records
            .iter()
            .map(|x| (x.req_id, x.output_tokens))
            .collect::<BTreeMap<_, _>>()
    };
    let same = u.completed == sp.completed && outputs(u) == outputs(sp);
    verdict(
        7,
        same && u.avg_steps_per_request() <= sp.avg_steps_per_request(),
        format!(
            "steps/request unified {:.3} vs split {:.3}; outputs identical: {same}",
            u.avg_steps_per_request(),
            sp.avg_steps_per_request()
        ),
    );
}

#[test]
fn criterion_08_pipelining() {
    // 40 layers, each transfer and each compute stage 0.1 ms
    let n = 40;
    let stage = 1e-4;
    let t = pipeline(0.0, 0.0, stage, &vec![stage; n]);
    let serial = 2.0 * n as f64 * stage;
    let want = (n + 1) as f64 / (2 * n) as f64;
    let ratio = t.end / serial;
    let timing_ok = (t.end - 4.1e-3).abs() <= PIPELINE_TOL * 4.1e-3
        && (serial - 8.0e-3).abs() <= PIPELINE_TOL * 8.0e-3
        && (ratio - want).abs() <= PIPELINE_TOL * want;

    let s = scenario();
    let violations: usize = s.violations.iter().map(|(_, v)| v).sum();
    let stall: f64 = s.induced_stall.iter().map(|(_, x)| x).sum();
    verdict(
        8,
        timing_ok && violations == 0 && stall == 0.0,
        format!(
            "pipelined {:.2} ms vs serial {:.2} ms (ratio {ratio:.4}, expect {want:.4}); \
             dependency violations {violations} over {} runs; swap-out induced stall {stall} s \
             over {} default-policy runs",
            t.end * 1e3,
            serial * 1e3,
            s.violations.len(),
            s.induced_stall.len()
        ),
    );
}

#[test]
fn criterion_09_determinism() {
    let s = scenario();
    let run_same = s.base.json == s.repeat.json && s.base.log == s.repeat.log;
    let cfg = RunConfig {
        device_slots: Some(300),
        host_slots: Some(300),
        request_rate: 4.0,
        synthetic: SyntheticParams {
            n_conversations: 40,
            ..Default::default()
        },
        ..scenario_config()
    };
    let values: Vec<String> = ["30", "90"].map(String::from).to_vec();
    let a = sweep(&cfg, SweepAxis::ThinkTimeMean, &values).unwrap();
    let b = sweep(&cfg, SweepAxis::ThinkTimeMean, &values).unwrap();
    let json = |rows: &[(String, MetricsReport)]| {
        rows.iter().map(|(_, r)| r.to_json()).collect::<Vec<_>>()
    };
    let sweep_same = sweep_csv(SweepAxis::ThinkTimeMean, &a)
        == sweep_csv(SweepAxis::ThinkTimeMean, &b)
        && json(&a) == json(&b);
    verdict(
        9,
        run_same && sweep_same,
        format!(
            "run report+event log identical: {run_same} ({} bytes); sweep CSV+reports identical: {sweep_same}",
            s.base.json.len() + s.base.log.len()
        ),
    );
}

#[test]
fn criterion_10_cache_fuzz() {
    let st = fuzz_cache(2024, FUZZ_OPS);
    verdict(
        10,
        st.violations == 0 && st.ops == FUZZ_OPS,
        format!(
            "{} ops ({} applied, {} rejected): {} violations",
            st.ops, st.applied, st.rejected, st.violations
        ),
    );
}
