//! Recomputation and execution cost estimates.
//!
//! A [`CostProfile`] holds measured attention times for one 32-token chunk at
//! power-of-two context lengths plus a constant for everything that is not
//! attention. Costs at other context lengths are linearly interpolated.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::BatchPlan;

/// Query tokens covered by one profiled attention measurement.
pub const PROFILE_CHUNK_TOKENS: u64 = 32;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("cost profile has no anchors")]
    EmptyProfile,
    #[error("anchor context lengths must be strictly increasing")]
    UnsortedAnchors,
    #[error("anchor attention times must be finite, non-negative and non-decreasing")]
    BadAnchorTime,
    #[error("profile line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cannot read profile: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    /// `(context_len, attention_time)` sorted by context length.
    anchors: Vec<(u64, f64)>,
    /// Non-attention cost of one 32-token chunk.
    pub c_other: f64,
    /// Non-attention cost per input token, used for step times.
    pub per_token_other: f64,
}

impl CostProfile {
    pub fn new(
        anchors: Vec<(u64, f64)>,
        c_other: f64,
        per_token_other: f64,
    ) -> Result<Self, CostError> {
        if anchors.is_empty() {
            return Err(CostError::EmptyProfile);
        }
        let mut prev: Option<(u64, f64)> = None;
        for &(len, time) in &anchors {
            if !time.is_finite() || time < 0.0 {
                return Err(CostError::BadAnchorTime);
            }
            if let Some((plen, ptime)) = prev {
                if len <= plen {
                    return Err(CostError::UnsortedAnchors);
                }
                if time < ptime {
                    return Err(CostError::BadAnchorTime);
                }
            }
            prev = Some((len, time));
        }
        if anchors[0].0 == 0 && anchors.len() == 1 {
            // a single anchor at zero carries no slope
            return Err(CostError::UnsortedAnchors);
        }
        Ok(Self {
            anchors,
            c_other,
            per_token_other,
        })
    }

    pub fn anchors(&self) -> &[(u64, f64)] {
        &self.anchors
    }

    /// Profile file: header `c_other per_token_other`, then one
    /// `context_len attention_time` pair per line.
    pub fn parse(text: &str) -> Result<Self, CostError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or(CostError::EmptyProfile)?;
        let head = parse_floats(hline, header, 2)?;
        let mut anchors = Vec::new();
        for (n, line) in lines {
            let vals = parse_floats(n, line, 2)?;
            if vals[0] < 0.0 || vals[0].fract() != 0.0 {
                return Err(CostError::Parse {
                    line: n,
                    msg: "context length must be a non-negative integer".into(),
                });
            }
            anchors.push((vals[0] as u64, vals[1]));
        }
        Self::new(anchors, head[0], head[1])
    }

    pub fn load(path: &Path) -> Result<Self, CostError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CostError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.c_other, self.per_token_other);
        for (l, t) in &self.anchors {
            out.push_str(&format!("{l} {t}\n"));
        }
        out
    }

    /// Attention time of one 32-token chunk attending to `l` context tokens.
    pub fn attention_cost(&self, l: u64) -> f64 {
        let anchors = &self.anchors;
        let idx = anchors.partition_point(|&(len, _)| len < l);
        if idx < anchors.len() && anchors[idx].0 == l {
            return anchors[idx].1;
        }
        let (lo, hi) = if idx == 0 {
            ((0u64, 0.0), anchors[0])
        } else if idx == anchors.len() {
            if anchors.len() == 1 {
                ((0u64, 0.0), anchors[0])
            } else {
                (anchors[idx - 2], anchors[idx - 1])
            }
        } else {
            (anchors[idx - 1], anchors[idx])
        };
        let slope = (hi.1 - lo.1) / (hi.0 - lo.0) as f64;
        lo.1 + slope * (l as f64 - lo.0 as f64)
    }

    /// Recomputation cost of a chunk whose context (including itself) is `l`.
    pub fn chunk_cost(&self, l: u64) -> f64 {
        self.attention_cost(l) + self.c_other
    }

    /// Execution time of one batch step.
    pub fn step_time(&self, batch: &BatchPlan) -> f64 {
        let attention: f64 = batch
            .sub_requests
            .iter()
            .map(|s| {
                self.attention_cost(s.context_len)
                    * (s.query_len as f64 / PROFILE_CHUNK_TOKENS as f64)
            })
            .sum();
        self.per_token_other * batch.total_input_tokens as f64 + attention
    }

    /// Multiplies every time in the profile by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            anchors: self.anchors.iter().map(|&(l, t)| (l, t * factor)).collect(),
            c_other: self.c_other * factor,
            per_token_other: self.per_token_other * factor,
        }
    }
}

fn parse_floats(line: usize, text: &str, n: usize) -> Result<Vec<f64>, CostError> {
    let vals: Result<Vec<f64>, _> = text.split_whitespace().map(str::parse::<f64>).collect();
    let vals = vals.map_err(|e| CostError::Parse {
        line,
        msg: e.to_string(),
    })?;
    if vals.len() != n {
        return Err(CostError::Parse {
            line,
            msg: format!("expected {n} fields, found {}", vals.len()),
        });
    }
    Ok(vals)
}

/// Linear attention profile with anchors at 32, 64, ..., 65536.
pub fn synthetic_profile(k_attn: f64, c_other: f64, per_token_other: f64) -> CostProfile {
    let anchors = (5..=16)
        .map(|p| {
            let l = 1u64 << p;
            (l, k_attn * l as f64)
        })
        .collect();
    CostProfile::new(anchors, c_other, per_token_other).expect("synthetic anchors are valid")
}
