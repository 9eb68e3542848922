//! Keyframe selection driven by per-frame detected class sets.
//!
//! Three strategies are provided: plain top-K by class count, per-segment
//! argmax ("temporal top-K") and Balanced-TopK. Balanced-TopK seeds with the
//! globally richest frame and then, in each of K-1 contiguous segments,
//! picks the frame that adds the least overlap with the classes gathered so
//! far, preferring more classes and then earlier frames.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detections::ClassSet;

#[derive(thiserror::Error, Debug, PartialEq, Eq)]
pub enum SamplingError {
    #[error("no frames to select from")]
    NoFrames,
    #[error("keyframe count must be >= 1")]
    InvalidK,
    #[error("interval [{0}, {1}] is not within the timeline")]
    BadInterval(usize, usize),
    #[error("unknown strategy {0:?} (expected topk, temporal_topk or balanced_topk)")]
    UnknownStrategy(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Topk,
    TemporalTopk,
    #[default]
    BalancedTopk,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Topk => "topk",
            Strategy::TemporalTopk => "temporal_topk",
            Strategy::BalancedTopk => "balanced_topk",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = SamplingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "topk" => Ok(Strategy::Topk),
            "temporal_topk" => Ok(Strategy::TemporalTopk),
            "balanced_topk" => Ok(Strategy::BalancedTopk),
            other => Err(SamplingError::UnknownStrategy(other.to_string())),
        }
    }
}

/// Inclusive timestep range `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValidInterval {
    pub start: usize,
    pub end: usize,
}

impl ValidInterval {
    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t <= self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyframeSelection {
    pub timesteps: Vec<usize>,
    pub accumulated_classes: BTreeSet<String>,
    pub strategy: Strategy,
}

/// `(timestep, class set)` pairs in strictly increasing timestep order.
pub type ClassTimeline = [(usize, ClassSet)];

/// First and last timesteps with a non-empty class set; the full range when
/// nothing was detected anywhere.
pub fn trim_span(timeline: &ClassTimeline) -> Result<ValidInterval, SamplingError> {
    let (first, last) = match (timeline.first(), timeline.last()) {
        (Some(f), Some(l)) => (f.0, l.0),
        _ => return Err(SamplingError::NoFrames),
    };
    let mut non_empty = timeline.iter().filter(|(_, c)| !c.is_empty()).map(|(t, _)| *t);
    match non_empty.next() {
        Some(start) => {
            let end = non_empty.next_back().unwrap_or(start);
            Ok(ValidInterval { start, end })
        }
        None => Ok(ValidInterval { start: first, end: last }),
    }
}

/// Splits `len` items into `parts` contiguous runs whose sizes differ by at
/// most one, earlier runs taking the extra item. Returns index ranges.
pub fn partition(len: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    if parts == 0 {
        return Vec::new();
    }
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let size = base + usize::from(i < extra);
        out.push(start..start + size);
        start += size;
    }
    out
}

fn entries_in(
    timeline: &ClassTimeline,
    interval: ValidInterval,
    k: usize,
) -> Result<Vec<&(usize, ClassSet)>, SamplingError> {
    if k < 1 {
        return Err(SamplingError::InvalidK);
    }
    if interval.start > interval.end {
        return Err(SamplingError::BadInterval(interval.start, interval.end));
    }
    let entries: Vec<_> = timeline.iter().filter(|(t, _)| interval.contains(*t)).collect();
    if entries.is_empty() {
        return Err(SamplingError::NoFrames);
    }
    Ok(entries)
}

fn union_of(entries: &[&(usize, ClassSet)], picked: &[usize]) -> BTreeSet<String> {
    entries
        .iter()
        .filter(|(t, _)| picked.contains(t))
        .flat_map(|(_, c)| c.labels().iter().cloned())
        .collect()
}

/// Index of the richest entry, earliest on ties.
fn argmax_count(entries: &[&(usize, ClassSet)]) -> Option<usize> {
    entries
        .iter()
        .enumerate()
        .min_by_key(|(_, (t, c))| (std::cmp::Reverse(c.count()), *t))
        .map(|(i, _)| i)
}

fn finish(mut timesteps: Vec<usize>, entries: &[&(usize, ClassSet)], strategy: Strategy) -> KeyframeSelection {
    timesteps.sort_unstable();
    let accumulated_classes = union_of(entries, &timesteps);
    KeyframeSelection {
        timesteps,
        accumulated_classes,
        strategy,
    }
}

pub fn select_topk(
    timeline: &ClassTimeline,
    interval: ValidInterval,
    k: usize,
) -> Result<KeyframeSelection, SamplingError> {
    let entries = entries_in(timeline, interval, k)?;
    let mut ranked: Vec<_> = entries.iter().map(|(t, c)| (std::cmp::Reverse(c.count()), *t)).collect();
    ranked.sort_unstable();
    let picked = ranked.into_iter().take(k).map(|(_, t)| t).collect();
    Ok(finish(picked, &entries, Strategy::Topk))
}

pub fn select_temporal_topk(
    timeline: &ClassTimeline,
    interval: ValidInterval,
    k: usize,
) -> Result<KeyframeSelection, SamplingError> {
    let entries = entries_in(timeline, interval, k)?;
    let picked = partition(entries.len(), k.min(entries.len()))
        .into_iter()
        .filter_map(|range| {
            let seg = &entries[range];
            argmax_count(seg).map(|i| seg[i].0)
        })
        .collect();
    Ok(finish(picked, &entries, Strategy::TemporalTopk))
}

pub fn select_balanced_topk(
    timeline: &ClassTimeline,
    interval: ValidInterval,
    k: usize,
) -> Result<KeyframeSelection, SamplingError> {
    let entries = entries_in(timeline, interval, k)?;
    if k >= entries.len() {
        let all = entries.iter().map(|(t, _)| *t).collect();
        return Ok(finish(all, &entries, Strategy::BalancedTopk));
    }

    let global = argmax_count(&entries).expect("non-empty");
    let mut selected = vec![false; entries.len()];
    selected[global] = true;
    let mut picked = vec![entries[global].0];
    let mut pool: BTreeSet<String> = entries[global].1.labels().clone();

    for range in partition(entries.len(), k - 1) {
        let candidate = range
            .clone()
            .filter(|&i| !selected[i])
            .min_by_key(|&i| {
                let (t, c) = entries[i];
                (c.overlap(&pool), std::cmp::Reverse(c.count()), *t)
            })
            .or_else(|| nearest_unselected(&entries, &selected, range));
        let Some(i) = candidate else { break };
        selected[i] = true;
        picked.push(entries[i].0);
        pool.extend(entries[i].1.labels().iter().cloned());
    }

    Ok(finish(picked, &entries, Strategy::BalancedTopk))
}

/// Fallback for a segment whose only candidates were already chosen: the
/// unselected entry closest in time to the segment, earlier on ties.
fn nearest_unselected(
    entries: &[&(usize, ClassSet)],
    selected: &[bool],
    segment: std::ops::Range<usize>,
) -> Option<usize> {
    let seg_lo = entries[segment.start].0;
    let seg_hi = entries[segment.end - 1].0;
    (0..entries.len()).filter(|&i| !selected[i]).min_by_key(|&i| {
        let t = entries[i].0;
        let dist = if t < seg_lo {
            seg_lo - t
        } else {
            t.saturating_sub(seg_hi)
        };
        (dist, t)
    })
}

pub fn select(
    strategy: Strategy,
    timeline: &ClassTimeline,
    interval: ValidInterval,
    k: usize,
) -> Result<KeyframeSelection, SamplingError> {
    match strategy {
        Strategy::Topk => select_topk(timeline, interval, k),
        Strategy::TemporalTopk => select_temporal_topk(timeline, interval, k),
        Strategy::BalancedTopk => select_balanced_topk(timeline, interval, k),
    }
}
