//! Time-based Average Lagging.
//!
//! For target unit `t` with onset `tau_t`, `g(t)` counts the source words
//! whose end time is at or before `tau_t`. The lag of step `t` is the gap
//! between the time of the `g(t)`-th source word and the time of the ideal
//! diagonal index `(t - 1) / gamma`, both read off the source timeline by
//! interpolation. AL averages those lags up to the first step that covers the
//! whole source.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeline::{Seconds, SourceTimeline, TargetEmissions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyResult {
    pub al_seconds: Seconds,
    /// 1-based step at which the source is fully covered (or `|Y|`).
    pub tau_star: usize,
    /// `|Y| / |X|`.
    pub gamma: f64,
    /// `g(t)` for `t` in `1..=tau_star`, unclamped.
    pub coverage_steps: Vec<usize>,
}

/// Number of source words finished by `onset` (ties count as finished).
pub fn coverage(ends: &[Seconds], onset: Seconds) -> usize {
    // ends are non-decreasing
    ends.partition_point(|&t| t <= onset)
}

pub fn average_lagging_sec(
    timeline: &SourceTimeline,
    emissions: &TargetEmissions,
) -> Result<LatencyResult> {
    if timeline.is_empty() {
        return Err(Error::EmptyTimeline);
    }
    if emissions.is_empty() {
        return Err(Error::EmptyEmissions);
    }
    let ends = timeline.end_times();
    let src_len = ends.len();
    let tgt_len = emissions.len();
    let gamma = tgt_len as f64 / src_len as f64;

    let g: Vec<usize> = emissions.onsets.iter().map(|&tau| coverage(&ends, tau)).collect();
    let tau_star = g
        .iter()
        .position(|&c| c == src_len)
        .map(|i| i + 1)
        .unwrap_or(tgt_len);

    let clamp = |x: f64| x.min(src_len as f64).max(1.0);
    let mut sum = 0.0;
    for t in 1..=tau_star {
        let policy = timeline.time_at_index(clamp(g[t - 1] as f64))?;
        let diagonal = timeline.time_at_index(clamp((t - 1) as f64 / gamma))?;
        sum += policy - diagonal;
    }

    Ok(LatencyResult {
        al_seconds: sum / tau_star as f64,
        tau_star,
        gamma,
        coverage_steps: g[..tau_star].to_vec(),
    })
}

/// Unweighted mean of per-sentence AL values.
pub fn corpus_mean(results: &[LatencyResult]) -> Option<Seconds> {
    if results.is_empty() {
        return None;
    }
    Some(results.iter().map(|r| r.al_seconds).sum::<f64>() / results.len() as f64)
}

/// One JSONL report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub id: String,
    pub al_sec: f64,
    pub tau_star: usize,
    pub gamma: f64,
}

impl LatencyRow {
    pub fn new(id: &str, r: &LatencyResult) -> Self {
        LatencyRow {
            id: id.to_owned(),
            al_sec: r.al_seconds,
            tau_star: r.tau_star,
            gamma: r.gamma,
        }
    }
}
