//! Warm-up launch counts for 1F1B-style schedules and the per-stage operation
//! order they induce.
//!
//! Every schedule here is described by `N_i`, the number of forward
//! microbatches stage `i` runs before its first backward. The last stage always
//! launches one; stage `i` launches `delta_i` more than stage `i + 1`:
//!
//! * classic 1F1B: `delta_i = 1`
//! * eager 1F1B: `delta_i = 2`
//! * heterogeneity-aware: `delta_i` in `{1, 2, 3}` picked from the ratio of
//!   the boundary transfer time `c_i` to the slowest stage time `t_max`.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Default width of the "negligible communication" band, as a fraction of `t_max`.
pub const DEFAULT_EPSILON: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error("pipeline must have at least one stage")]
    NoStages,
    #[error("expected {expected} boundary costs, got {got}")]
    BoundaryCount { expected: usize, got: usize },
    #[error("stage {stage} has non-positive compute time {time}")]
    StageTime { stage: usize, time: f64 },
    #[error("boundary {boundary} costs {cost}s, more than t_max = {t_max}s; it cannot be overlapped")]
    CommExceedsTmax { boundary: usize, cost: f64, t_max: f64 },
    #[error("invalid boundary cost {cost} at boundary {boundary}")]
    BadComm { boundary: usize, cost: f64 },
    #[error("{microbatches} microbatches cannot fill a warm-up of {warmup} forwards")]
    TooFewMicrobatches { microbatches: usize, warmup: usize },
    #[error("launch counts must be positive and end with 1: {0:?}")]
    BadCounts(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Classic,
    Eager,
    H1f1b,
    /// Hand-picked counts (sweeps, ablations).
    Custom,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Classic => "classic",
            ScheduleKind::Eager => "eager",
            ScheduleKind::H1f1b => "h1f1b",
            ScheduleKind::Custom => "custom",
        })
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "classic" | "1f1b" => Ok(ScheduleKind::Classic),
            "eager" | "eager-1f1b" => Ok(ScheduleKind::Eager),
            "h1f1b" | "h-1f1b" => Ok(ScheduleKind::H1f1b),
            other => Err(format!("unknown scheduler `{other}` (classic, eager, h1f1b)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchCounts {
    /// `N_i` per stage, first stage first.
    pub counts: Vec<usize>,
    /// `delta_i = N_i - N_{i+1}`, one per boundary.
    pub delta: Vec<usize>,
    pub kind: ScheduleKind,
}

impl LaunchCounts {
    fn from_delta(delta: Vec<usize>, kind: ScheduleKind) -> Self {
        let mut counts = vec![1; delta.len() + 1];
        for i in (0..delta.len()).rev() {
            counts[i] = counts[i + 1] + delta[i];
        }
        Self { counts, delta, kind }
    }

    /// Arbitrary non-increasing counts ending in 1.
    pub fn custom(counts: Vec<usize>) -> Result<Self, ScheduleError> {
        let valid = counts.last() == Some(&1)
            && counts.iter().all(|&n| n >= 1)
            && counts.windows(2).all(|w| w[0] >= w[1]);
        if !valid {
            return Err(ScheduleError::BadCounts(counts));
        }
        let delta = counts.windows(2).map(|w| w[0] - w[1]).collect();
        Ok(Self {
            counts,
            delta,
            kind: ScheduleKind::Custom,
        })
    }

    pub fn stages(&self) -> usize {
        self.counts.len()
    }

    /// Stages where `self` launches more warm-up forwards than `other`.
    pub fn stages_exceeding(&self, other: &LaunchCounts) -> Vec<usize> {
        self.counts
            .iter()
            .zip(&other.counts)
            .enumerate()
            .filter(|(_, (a, b))| a > b)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Classic 1F1B: stage `i` (1-based) launches `S - i + 1` forwards.
pub fn classic_counts(stages: usize) -> LaunchCounts {
    LaunchCounts::from_delta(vec![1; stages.saturating_sub(1)], ScheduleKind::Classic)
}

/// Eager 1F1B: stage `i` (1-based) launches `2 (S - i) + 1` forwards.
pub fn eager_counts(stages: usize) -> LaunchCounts {
    LaunchCounts::from_delta(vec![2; stages.saturating_sub(1)], ScheduleKind::Eager)
}

/// Heterogeneity-aware counts from per-stage compute times `t` (forward plus
/// backward) and per-boundary transfer times `c` (`c.len() == t.len() - 1`).
pub fn h1f1b_counts(t: &[f64], c: &[f64], epsilon: f64) -> Result<LaunchCounts, ScheduleError> {
    if t.is_empty() {
        return Err(ScheduleError::NoStages);
    }
    for (stage, &time) in t.iter().enumerate() {
        if !(time.is_finite() && time > 0.0) {
            return Err(ScheduleError::StageTime { stage, time });
        }
    }
    let t_max = t.iter().copied().fold(0.0, f64::max);
    h1f1b_counts_bounded(t.len(), t_max, c, epsilon)
}

/// Same rule with an explicit `t_max`, e.g. the latency bound a plan was
/// searched under when its stages run faster than that bound.
pub fn h1f1b_counts_bounded(
    stages: usize,
    t_max: f64,
    c: &[f64],
    epsilon: f64,
) -> Result<LaunchCounts, ScheduleError> {
    if stages == 0 {
        return Err(ScheduleError::NoStages);
    }
    if c.len() != stages - 1 {
        return Err(ScheduleError::BoundaryCount {
            expected: stages - 1,
            got: c.len(),
        });
    }
    let delta = c
        .iter()
        .enumerate()
        .map(|(boundary, &cost)| {
            if !(cost.is_finite() && cost >= 0.0) {
                return Err(ScheduleError::BadComm { boundary, cost });
            }
            if cost > t_max {
                return Err(ScheduleError::CommExceedsTmax {
                    boundary,
                    cost,
                    t_max,
                });
            }
            Ok(delta_for(cost, t_max, epsilon))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LaunchCounts::from_delta(delta, ScheduleKind::H1f1b))
}

/// Bucketed extra-launch rule. A zero-cost boundary behaves like classic 1F1B.
pub fn delta_for(c: f64, t_max: f64, epsilon: f64) -> usize {
    if c <= epsilon * t_max {
        1
    } else if c <= t_max / 2.0 {
        2
    } else {
        3
    }
}

/// Smallest `delta` that keeps a homogeneous two-stage steady phase
/// bubble-free: `ceil(1 + 2c / (f + b))`. Diagnostic only; it disagrees with
/// [`delta_for`] inside the epsilon band.
pub fn analytic_delta(c: f64, stage_time: f64) -> usize {
    (1.0 + 2.0 * c / stage_time).ceil() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageOp {
    /// Forward of a 0-based microbatch.
    Forward(usize),
    Backward(usize),
}

impl StageOp {
    pub fn microbatch(&self) -> usize {
        match *self {
            StageOp::Forward(i) | StageOp::Backward(i) => i,
        }
    }

    pub fn is_forward(&self) -> bool {
        matches!(self, StageOp::Forward(_))
    }
}

impl fmt::Display for StageOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageOp::Forward(i) => write!(f, "F{}", i + 1),
            StageOp::Backward(i) => write!(f, "B{}", i + 1),
        }
    }
}

impl Serialize for StageOp {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StageOp {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        let (head, num) = text.split_at(1.min(text.len()));
        let idx: usize = num
            .parse()
            .ok()
            .filter(|&i| i >= 1)
            .ok_or_else(|| serde::de::Error::custom(format!("bad stage op `{text}`")))?;
        match head {
            "F" => Ok(StageOp::Forward(idx - 1)),
            "B" => Ok(StageOp::Backward(idx - 1)),
            _ => Err(serde::de::Error::custom(format!("bad stage op `{text}`"))),
        }
    }
}

/// Execution order of every stage over one batch of microbatches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageProgram {
    pub microbatches: usize,
    pub counts: Vec<usize>,
    pub stages: Vec<Vec<StageOp>>,
}

impl StageProgram {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serializes")
    }

    /// Max over the program of forwards issued minus backwards issued.
    pub fn peak_in_flight(&self, stage: usize) -> usize {
        let mut live = 0usize;
        let mut peak = 0;
        for op in &self.stages[stage] {
            match op {
                StageOp::Forward(_) => {
                    live += 1;
                    peak = peak.max(live);
                }
                StageOp::Backward(_) => live -= 1,
            }
        }
        peak
    }
}

/// Warm-up forwards, then strict backward/forward alternation, then the
/// remaining backwards in microbatch order.
pub fn build_program(counts: &LaunchCounts, microbatches: usize) -> Result<StageProgram, ScheduleError> {
    if counts.counts.is_empty() {
        return Err(ScheduleError::NoStages);
    }
    if counts.counts.contains(&0) {
        return Err(ScheduleError::BadCounts(counts.counts.clone()));
    }
    let warmup = counts.counts.iter().copied().max().unwrap_or(0);
    if microbatches < warmup {
        return Err(ScheduleError::TooFewMicrobatches {
            microbatches,
            warmup,
        });
    }
    let stages = counts
        .counts
        .iter()
        .map(|&n| {
            let mut ops = Vec::with_capacity(2 * microbatches);
            ops.extend((0..n).map(StageOp::Forward));
            for j in 0..microbatches - n {
                ops.push(StageOp::Backward(j));
                ops.push(StageOp::Forward(n + j));
            }
            ops.extend((microbatches - n..microbatches).map(StageOp::Backward));
            ops
        })
        .collect();
    Ok(StageProgram {
        microbatches,
        counts: counts.counts.clone(),
        stages,
    })
}
