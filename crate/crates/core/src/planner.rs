//! Inter-operator plan search over a heterogeneous cluster.
//!
//! For a fixed latency bound `t_max`, a suffix DP assigns contiguous layer
//! spans to submeshes, consuming meshes in cluster order and every device
//! exactly once. It minimizes `F = sum(t_i + 2 c_i)` subject to
//!
//! * `t_i <= t_max` for every stage,
//! * `c_i <= t_max` for every boundary,
//! * `mem_p + K_i mem_a <= mem_device`, where `K_i = ceil(2 c_i / t_max) + 1 + K_{i+1}`
//!   and `K` of the (virtual) stage after the last is 0.
//!
//! The plan's latency is `F + (B - 1) t_max`; the outer search minimizes it
//! over candidate bounds drawn from the profiled stage times.

use std::cmp::Ordering;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterSpec, MeshShape, Submesh};
use crate::metrics::load_balance_eta;
use crate::pipeline_sim::PipelineTimes;
use crate::profiler::{BoundaryCost, LayerSpan, ProfileStore};
use crate::scheduler::{h1f1b_counts_bounded, ScheduleError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("no feasible candidates")]
    NoCandidates,
    #[error("no plan satisfies the constraints at any t_max; binding constraint: {0}")]
    Infeasible(String),
    #[error("feasibility is not monotone in t_max: infeasible at {t_max} above smallest feasible {t_s}")]
    NonMonotone { t_max: f64, t_s: f64 },
    #[error("boundary {boundary} costs {cost}s, more than the slowest stage ({t_max}s)")]
    CommExceedsTmax { boundary: usize, cost: f64, t_max: f64 },
    #[error("plan has no stages")]
    Empty,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Everything a DP evaluation reads; immutable and shared across threads.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a> {
    pub store: &'a ProfileStore,
    pub costs: &'a BoundaryCost,
    pub cluster: &'a ClusterSpec,
    pub microbatches: usize,
    /// Width of the negligible-communication band for the emitted schedule.
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Cursor {
    /// `remaining` devices left on `mesh`, later meshes untouched.
    At { mesh: usize, remaining: u32 },
    Done,
}

/// DP state: layers `first..L` still to place on the devices described by `cursor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DpKey {
    pub first: usize,
    pub cursor: Cursor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Back {
    end: usize,
    shape_idx: usize,
    next_cursor: usize,
    next_entry: usize,
    profile: u32,
    c: f64,
}

/// One non-dominated suffix solution of a DP state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpEntry {
    /// Minimum suffix latency `sum(t_i + 2 c_i)`.
    pub f: f64,
    /// Warm-up launch count `K` of the suffix's first stage.
    pub n: usize,
    pub stages: usize,
    back: Option<Back>,
}

impl DpEntry {
    fn covers(&self, other: &DpEntry) -> bool {
        self.f <= other.f && self.n <= other.n && self.stages <= other.stages
    }

    fn tie_key(&self) -> (usize, usize, usize) {
        self.back.map_or((0, 0, 0), |b| (b.end, b.shape_idx, b.next_entry))
    }
}

/// Pareto frontier over `(f, n, stages)`; equal triples keep the earliest split.
fn insert(frontier: &mut Vec<DpEntry>, e: DpEntry) {
    for old in frontier.iter_mut() {
        if old.f == e.f && old.n == e.n && old.stages == e.stages {
            if e.tie_key() < old.tie_key() {
                *old = e;
            }
            return;
        }
        if old.covers(&e) {
            return;
        }
    }
    frontier.retain(|old| !e.covers(old));
    frontier.push(e);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStage {
    /// 1-based inclusive layer range.
    pub first_layer: usize,
    pub last_layer: usize,
    pub mesh: String,
    pub mesh_index: usize,
    pub shape: MeshShape,
    pub t: f64,
    pub t_f: f64,
    pub t_b: f64,
    pub mem_p: f64,
    pub mem_a: f64,
    pub mem_device: f64,
    pub peak_flops: f64,
}

impl PlanStage {
    pub fn span(&self) -> LayerSpan {
        LayerSpan::new(self.first_layer - 1, self.last_layer)
    }

    pub fn submesh(&self) -> Submesh {
        Submesh {
            mesh: self.mesh_index,
            shape: self.shape,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub candidates_total: usize,
    pub candidates_evaluated: usize,
    pub pruned_below_t_s: usize,
    pub pruned_above_t_e: usize,
    pub batches: usize,
    pub dp_states: usize,
    pub dp_transitions: usize,
    pub t_s: f64,
    pub t_e: Option<f64>,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelPlan {
    pub stages: Vec<PlanStage>,
    /// Transfer time of each stage boundary.
    pub c: Vec<f64>,
    pub microbatches: usize,
    /// Latency bound the plan was found under.
    pub t_max: f64,
    /// `sum(t_i + 2 c_i)`.
    pub suffix_latency: f64,
    /// `suffix_latency + (B - 1) t_max`.
    pub predicted_latency: f64,
    /// Per-stage `K` bounding in-flight microbatches in the memory check.
    pub launch_bounds: Vec<usize>,
    /// Warm-up counts of the heterogeneity-aware schedule under `t_max`.
    pub launch_counts: Vec<usize>,
    pub epsilon: f64,
    /// Load balance in `(0, 1]`.
    pub eta: f64,
    #[serde(default)]
    pub search: Option<SearchStats>,
}

impl ParallelPlan {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn times(&self) -> PipelineTimes {
        PipelineTimes {
            t_f: self.stages.iter().map(|s| s.t_f).collect(),
            t_b: self.stages.iter().map(|s| s.t_b).collect(),
            c: self.c.clone(),
            mem_a: self.stages.iter().map(|s| s.mem_a).collect(),
            mem_p: self.stages.iter().map(|s| s.mem_p).collect(),
        }
    }

    pub fn stage_times(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.t).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Same plan with search statistics stripped, for comparisons.
    pub fn without_search(&self) -> Self {
        Self {
            search: None,
            ..self.clone()
        }
    }
}

/// `sum(t_i + 2 c_i) + (B - 1) max_j t_j`.
pub fn end_to_end_latency(t: &[f64], c: &[f64], microbatches: usize) -> Result<f64, PlanError> {
    if t.is_empty() {
        return Err(PlanError::Empty);
    }
    let t_max = t.iter().copied().fold(0.0, f64::max);
    if let Some((boundary, &cost)) = c.iter().enumerate().find(|(_, &x)| x > t_max) {
        return Err(PlanError::CommExceedsTmax {
            boundary,
            cost,
            t_max,
        });
    }
    let single: f64 = t.iter().sum::<f64>() + 2.0 * c.iter().sum::<f64>();
    Ok(single + (microbatches as f64 - 1.0) * t_max)
}

pub fn plan_latency(plan: &ParallelPlan) -> Result<f64, PlanError> {
    end_to_end_latency(&plan.stage_times(), &plan.c, plan.microbatches)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rejections {
    pub time: usize,
    pub comm: usize,
    pub memory: usize,
}

impl Rejections {
    fn binding(&self) -> String {
        let worst = [
            (self.memory, "memory (mem_p + K mem_a > device memory)"),
            (self.comm, "communication (boundary transfer > t_max)"),
            (self.time, "stage time > t_max"),
        ]
        .into_iter()
        .max_by_key(|(n, _)| *n)
        .filter(|(n, _)| *n > 0);
        match worst {
            Some((n, what)) => format!("{what}, rejected {n} transitions"),
            None => "no chain of unpruned stage candidates covers every layer and device (see profiler OOM/imbalance pruning)".into(),
        }
    }
}

/// One DP evaluation.
#[derive(Debug, Clone)]
pub struct DpOutcome {
    pub t_max: f64,
    pub plan: Option<ParallelPlan>,
    pub states: usize,
    pub transitions: usize,
    pub rejections: Rejections,
}

struct CursorSpace {
    offsets: Vec<usize>,
    devices: Vec<u32>,
    done: usize,
}

impl CursorSpace {
    fn new(cluster: &ClusterSpec) -> Self {
        let devices: Vec<u32> = cluster.meshes.iter().map(|m| m.device_count()).collect();
        let mut offsets = Vec::with_capacity(devices.len());
        let mut total = 0;
        for &d in &devices {
            offsets.push(total);
            total += d as usize;
        }
        Self {
            offsets,
            devices,
            done: total,
        }
    }

    fn len(&self) -> usize {
        self.done + 1
    }

    fn index(&self, c: Cursor) -> usize {
        match c {
            Cursor::At { mesh, remaining } => self.offsets[mesh] + remaining as usize - 1,
            Cursor::Done => self.done,
        }
    }

    fn cursor(&self, idx: usize) -> Cursor {
        if idx == self.done {
            return Cursor::Done;
        }
        let mesh = self.offsets.partition_point(|&o| o <= idx) - 1;
        Cursor::At {
            mesh,
            remaining: (idx - self.offsets[mesh] + 1) as u32,
        }
    }

    fn after(&self, mesh: usize, remaining: u32) -> Cursor {
        if remaining > 0 {
            Cursor::At { mesh, remaining }
        } else if mesh + 1 < self.devices.len() {
            Cursor::At {
                mesh: mesh + 1,
                remaining: self.devices[mesh + 1],
            }
        } else {
            Cursor::Done
        }
    }

    fn root(&self) -> Cursor {
        Cursor::At {
            mesh: 0,
            remaining: self.devices[0],
        }
    }
}

pub fn launch_bound(c: f64, t_max: f64, next: usize) -> usize {
    (2.0 * c / t_max).ceil() as usize + 1 + next
}

/// Minimum-`F` plan under `t_max`. `sparse` walks only indexed feasible
/// spans; otherwise every span is looked up densely (same result).
pub fn dp_search(ctx: &PlanContext<'_>, t_max: f64, sparse: bool) -> DpOutcome {
    let store = ctx.store;
    let l = store.num_layers();
    let space = CursorSpace::new(ctx.cluster);
    let mut frontier: Vec<Vec<Vec<DpEntry>>> = vec![vec![Vec::new(); space.len()]; l + 1];
    frontier[l][space.done].push(DpEntry {
        f: 0.0,
        n: 0,
        stages: 0,
        back: None,
    });
    let mut states = 0;
    let mut transitions = 0;
    let mut rejections = Rejections::default();
    let mut ends: Vec<(usize, u32)> = Vec::new();

    for k in (0..l).rev() {
        for ci in 0..space.done {
            let Cursor::At { mesh, remaining } = space.cursor(ci) else { unreachable!() };
            states += 1;
            let mem_device = ctx.cluster.meshes[mesh].mem_device;
            let mut out: Vec<DpEntry> = Vec::new();
            for (si, shape) in store.shapes(mesh).iter().enumerate() {
                let n_dev = shape.device_count();
                if n_dev > remaining {
                    break;
                }
                let next = space.after(mesh, remaining - n_dev);
                let nci = space.index(next);
                ends.clear();
                if sparse {
                    ends.extend_from_slice(store.feasible_from(mesh, si, k));
                } else {
                    ends.extend(
                        (k + 1..=l).filter_map(|p| store.lookup(LayerSpan::new(k, p), mesh, si).map(|(id, _)| (p, id))),
                    );
                }
                for &(p, id) in &ends {
                    if (p == l) != (next == Cursor::Done) {
                        continue;
                    }
                    let succ = &frontier[p][nci];
                    if succ.is_empty() {
                        continue;
                    }
                    transitions += 1;
                    let prof = store.profile_by_id(id);
                    if prof.t > t_max {
                        rejections.time += 1;
                        continue;
                    }
                    let c = match next {
                        Cursor::Done => 0.0,
                        Cursor::At { mesh: nm, .. } => ctx.costs.get(p - 1, mesh, nm),
                    };
                    if c > t_max {
                        rejections.comm += 1;
                        continue;
                    }
                    for (j, e) in succ.iter().enumerate() {
                        let kk = launch_bound(c, t_max, e.n);
                        if prof.mem_p + kk as f64 * prof.mem_a > mem_device {
                            rejections.memory += 1;
                            continue;
                        }
                        insert(
                            &mut out,
                            DpEntry {
                                f: e.f + 2.0 * c + prof.t,
                                n: kk,
                                stages: e.stages + 1,
                                back: Some(Back {
                                    end: p,
                                    shape_idx: si,
                                    next_cursor: nci,
                                    next_entry: j,
                                    profile: id,
                                    c,
                                }),
                            },
                        );
                    }
                }
            }
            frontier[k][ci] = out;
        }
    }

    let root = space.index(space.root());
    let best = frontier[0][root]
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            a.f.total_cmp(&b.f)
                .then(a.stages.cmp(&b.stages))
                .then(a.tie_key().cmp(&b.tie_key()))
        })
        .map(|(i, _)| i);
    let plan = best.map(|i| reconstruct(ctx, &frontier, &space, root, i, t_max));
    DpOutcome {
        t_max,
        plan,
        states,
        transitions,
        rejections,
    }
}

fn reconstruct(
    ctx: &PlanContext<'_>,
    frontier: &[Vec<Vec<DpEntry>>],
    space: &CursorSpace,
    root: usize,
    entry: usize,
    t_max: f64,
) -> ParallelPlan {
    let (mut k, mut ci, mut ei) = (0, root, entry);
    let mut stages = Vec::new();
    let mut c = Vec::new();
    let mut bounds = Vec::new();
    let top = frontier[0][root][entry];
    while let Some(back) = frontier[k][ci][ei].back {
        let Cursor::At { mesh, .. } = space.cursor(ci) else { unreachable!() };
        let m = &ctx.cluster.meshes[mesh];
        let prof = ctx.store.profile_by_id(back.profile);
        bounds.push(frontier[k][ci][ei].n);
        stages.push(PlanStage {
            first_layer: k + 1,
            last_layer: back.end,
            mesh: m.id.clone(),
            mesh_index: mesh,
            shape: ctx.store.shapes(mesh)[back.shape_idx],
            t: prof.t,
            t_f: prof.t_f,
            t_b: prof.t_b,
            mem_p: prof.mem_p,
            mem_a: prof.mem_a,
            mem_device: m.mem_device,
            peak_flops: m.peak_flops,
        });
        if back.end < ctx.store.num_layers() {
            c.push(back.c);
        }
        k = back.end;
        ci = back.next_cursor;
        ei = back.next_entry;
    }
    finish_plan(stages, c, bounds, ctx.microbatches, t_max, top.f, ctx.epsilon)
}

fn finish_plan(
    stages: Vec<PlanStage>,
    c: Vec<f64>,
    launch_bounds: Vec<usize>,
    microbatches: usize,
    t_max: f64,
    suffix_latency: f64,
    epsilon: f64,
) -> ParallelPlan {
    let launch_counts = h1f1b_counts_bounded(stages.len(), t_max, &c, epsilon)
        .expect("DP enforces c <= t_max")
        .counts;
    let (td, peak): (Vec<f64>, Vec<f64>) = stages
        .iter()
        .flat_map(|s| std::iter::repeat_n((s.t, s.peak_flops), s.shape.device_count() as usize))
        .unzip();
    let eta = load_balance_eta(&td, &peak).expect("stage times are positive");
    ParallelPlan {
        stages,
        c,
        microbatches,
        t_max,
        suffix_latency,
        predicted_latency: suffix_latency + (microbatches as f64 - 1.0) * t_max,
        launch_bounds,
        launch_counts,
        epsilon,
        eta,
        search: None,
    }
}

/// Ascending distinct stage times of the feasible profiles.
pub fn candidate_tmax(store: &ProfileStore) -> Result<Vec<f64>, PlanError> {
    let ts = store.t_values();
    if ts.is_empty() {
        Err(PlanError::NoCandidates)
    } else {
        Ok(ts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    pub t_s: f64,
    pub t_e: Option<f64>,
    pub surviving: Vec<f64>,
    pub below: usize,
    pub above: usize,
}

/// Binary search for the smallest feasible bound `t_S`, then drop every
/// candidate above `t_E = T(t_S) / (B - 1)`: such a bound already pays more
/// than `T(t_S)` in its `(B - 1) t_max` term alone.
///
/// `eval(t)` returns the plan latency at `t`, `None` when infeasible.
pub fn bidirectional_prune(
    candidates: &[f64],
    microbatches: usize,
    mut eval: impl FnMut(f64) -> Option<f64>,
) -> Result<PruneResult, PlanError> {
    if candidates.is_empty() {
        return Err(PlanError::NoCandidates);
    }
    let (mut lo, mut hi) = (0, candidates.len());
    let mut at_hi: Option<f64> = None;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        match eval(candidates[mid]) {
            Some(t) => {
                hi = mid;
                at_hi = Some(t);
            }
            None => lo = mid + 1,
        }
    }
    if lo == candidates.len() {
        return Err(PlanError::Infeasible(String::new()));
    }
    let t_s = candidates[lo];
    let latency = at_hi.expect("a feasible probe fixed hi");
    let t_e = (microbatches > 1).then(|| latency / (microbatches as f64 - 1.0));
    let upper = t_e.map_or(candidates.len(), |e| candidates.partition_point(|&t| t <= e));
    let upper = upper.max(lo + 1);
    Ok(PruneResult {
        t_s,
        t_e,
        surviving: candidates[lo..upper].to_vec(),
        below: lo,
        above: candidates.len() - upper,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub prune: bool,
    pub sparse: bool,
    pub parallel: bool,
    /// Candidates per batch; 0 means one batch per activation level.
    pub batch_size: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            prune: true,
            sparse: true,
            parallel: true,
            batch_size: 0,
        }
    }
}

impl SearchOptions {
    /// Exhaustive sequential sweep with dense lookups, the reference setting.
    pub fn exhaustive() -> Self {
        Self {
            prune: false,
            sparse: false,
            parallel: false,
            batch_size: 1,
        }
    }
}

/// Deterministic preference: lower latency, then smaller bound, then fewer stages.
fn better(a: &ParallelPlan, b: &ParallelPlan) -> bool {
    a.predicted_latency
        .total_cmp(&b.predicted_latency)
        .then(a.t_max.total_cmp(&b.t_max))
        .then(a.num_stages().cmp(&b.num_stages()))
        == Ordering::Less
}

/// Number of feasible stage-submesh pairs whose time fits under each bound.
pub fn activated_pairs(store: &ProfileStore, bounds: &[f64]) -> Vec<usize> {
    let mut ts: Vec<f64> = Vec::new();
    for mesh in 0..store.num_meshes() {
        for si in 0..store.shapes(mesh).len() {
            for k in 0..store.num_layers() {
                ts.extend(store.feasible_from(mesh, si, k).iter().map(|&(_, id)| store.profile_by_id(id).t));
            }
        }
    }
    ts.sort_by(f64::total_cmp);
    bounds.iter().map(|&b| ts.partition_point(|&t| t <= b)).collect()
}

/// Groups candidates into batches, evaluates each batch (in parallel when
/// asked) and keeps the best plan. Returns the outcomes in candidate order.
pub fn batched_search(
    ctx: &PlanContext<'_>,
    surviving: &[f64],
    opts: &SearchOptions,
) -> (Option<ParallelPlan>, Vec<DpOutcome>, usize) {
    let activation = activated_pairs(ctx.store, surviving);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for (i, &act) in activation.iter().enumerate() {
        let start_new = match batches.last() {
            None => true,
            Some(batch) if opts.batch_size == 0 => activation[batch[0]] != act,
            Some(batch) => batch.len() >= opts.batch_size,
        };
        if start_new {
            batches.push(Vec::new());
        }
        batches.last_mut().expect("just pushed").push(i);
    }
    let mut outcomes: Vec<Option<DpOutcome>> = vec![None; surviving.len()];
    for batch in &batches {
        let run = |&i: &usize| (i, dp_search(ctx, surviving[i], opts.sparse));
        let results: Vec<(usize, DpOutcome)> = if opts.parallel {
            batch.par_iter().map(run).collect()
        } else {
            batch.iter().map(run).collect()
        };
        for (i, o) in results {
            outcomes[i] = Some(o);
        }
    }
    let outcomes: Vec<DpOutcome> = outcomes.into_iter().map(|o| o.expect("every candidate evaluated")).collect();
    let mut best: Option<&ParallelPlan> = None;
    for plan in outcomes.iter().filter_map(|o| o.plan.as_ref()) {
        if best.is_none_or(|b| better(plan, b)) {
            best = Some(plan);
        }
    }
    (best.cloned(), outcomes, batches.len())
}

/// Full search: candidate pool, optional pruning, batched evaluation.
pub fn search(ctx: &PlanContext<'_>, opts: &SearchOptions) -> Result<ParallelPlan, PlanError> {
    let started = Instant::now();
    let candidates = candidate_tmax(ctx.store)?;
    let mut stats = SearchStats {
        candidates_total: candidates.len(),
        ..SearchStats::default()
    };
    let mut probes: Vec<DpOutcome> = Vec::new();
    let surviving = if opts.prune {
        let pruned = bidirectional_prune(&candidates, ctx.microbatches, |t| {
            let o = dp_search(ctx, t, opts.sparse);
            let latency = o.plan.as_ref().map(|p| p.predicted_latency);
            probes.push(o);
            latency
        });
        let pruned = match pruned {
            Ok(p) => p,
            Err(PlanError::Infeasible(_)) => {
                let top = probes.last().map(|o| o.rejections.binding()).unwrap_or_default();
                return Err(PlanError::Infeasible(top));
            }
            Err(e) => return Err(e),
        };
        stats.t_s = pruned.t_s;
        stats.t_e = pruned.t_e;
        stats.pruned_below_t_s = pruned.below;
        stats.pruned_above_t_e = pruned.above;
        pruned.surviving
    } else {
        candidates.clone()
    };

    // Probes already evaluated inside the surviving range are not repeated.
    let todo: Vec<f64> = surviving
        .iter()
        .copied()
        .filter(|t| !probes.iter().any(|o| o.t_max == *t))
        .collect();
    let (_, outcomes, batches) = batched_search(ctx, &todo, opts);
    stats.batches = batches;

    let mut best: Option<&ParallelPlan> = None;
    for o in probes.iter().chain(&outcomes) {
        stats.candidates_evaluated += 1;
        stats.dp_states += o.states;
        stats.dp_transitions += o.transitions;
        if opts.prune && o.plan.is_none() && o.t_max > stats.t_s {
            return Err(PlanError::NonMonotone {
                t_max: o.t_max,
                t_s: stats.t_s,
            });
        }
        if let Some(plan) = &o.plan {
            let in_range = surviving.first().is_some_and(|&lo| plan.t_max >= lo)
                && surviving.last().is_some_and(|&hi| plan.t_max <= hi);
            if in_range && best.is_none_or(|b| better(plan, b)) {
                best = Some(plan);
            }
        }
    }
    let Some(best) = best else {
        let binding = outcomes
            .last()
            .or(probes.last())
            .map(|o| o.rejections.binding())
            .unwrap_or_default();
        return Err(PlanError::Infeasible(binding));
    };
    if !opts.prune {
        stats.t_s = outcomes.iter().find(|o| o.plan.is_some()).map_or(0.0, |o| o.t_max);
    }
    let mut plan = best.clone();
    stats.wall_time_secs = started.elapsed().as_secs_f64();
    plan.search = Some(stats);
    Ok(plan)
}

/// Checks a plan against the cluster and its own constraints without the DP.
pub fn verify_plan(plan: &ParallelPlan, cluster: &ClusterSpec, num_layers: usize) -> Result<(), Vec<String>> {
    let mut errs = Vec::new();
    let s = plan.stages.len();
    if s == 0 {
        return Err(vec!["no stages".into()]);
    }
    let mut next_layer = 1;
    for st in &plan.stages {
        if st.first_layer != next_layer || st.last_layer < st.first_layer {
            errs.push(format!("stage {}-{} breaks the layer partition", st.first_layer, st.last_layer));
        }
        next_layer = st.last_layer + 1;
    }
    if next_layer != num_layers + 1 {
        errs.push(format!("stages cover layers 1-{} of {num_layers}", next_layer - 1));
    }
    if plan.stages.windows(2).any(|w| w[1].mesh_index < w[0].mesh_index) {
        errs.push("stages do not follow mesh order".into());
    }
    let mut used = vec![0u32; cluster.meshes.len()];
    for st in &plan.stages {
        match used.get_mut(st.mesh_index) {
            Some(u) => *u += st.shape.hosts * st.shape.devices_per_host,
            None => errs.push(format!("unknown mesh index {}", st.mesh_index)),
        }
    }
    for (m, u) in used.iter().enumerate() {
        if *u != cluster.meshes[m].device_count() {
            errs.push(format!("mesh {} uses {u} of {} devices", cluster.meshes[m].id, cluster.meshes[m].device_count()));
        }
    }
    if plan.c.len() != s - 1 {
        errs.push(format!("{} boundary costs for {s} stages", plan.c.len()));
        return Err(errs);
    }
    let mut k_next = 0usize;
    let mut bounds = vec![0usize; s];
    for i in (0..s).rev() {
        let st = &plan.stages[i];
        let c = if i + 1 < s { plan.c[i] } else { 0.0 };
        if st.t > plan.t_max {
            errs.push(format!("stage {} time {} exceeds t_max {}", i + 1, st.t, plan.t_max));
        }
        if c > plan.t_max {
            errs.push(format!("boundary {} cost {} exceeds t_max {}", i + 1, c, plan.t_max));
        }
        let k = (2.0 * c / plan.t_max).ceil() as usize + 1 + k_next;
        if st.mem_p + k as f64 * st.mem_a > st.mem_device {
            errs.push(format!("stage {} needs {} bytes with K = {k}", i + 1, st.mem_p + k as f64 * st.mem_a));
        }
        bounds[i] = k;
        k_next = k;
    }
    if bounds != plan.launch_bounds {
        errs.push(format!("launch bounds {:?} differ from recomputed {bounds:?}", plan.launch_bounds));
    }
    if plan.launch_counts.iter().zip(&bounds).any(|(n, k)| n > k) {
        errs.push(format!("schedule counts {:?} exceed bounds {bounds:?}", plan.launch_counts));
    }
    let sum: f64 = plan
        .stages
        .iter()
        .rev()
        .zip(std::iter::once(0.0).chain(plan.c.iter().rev().copied()))
        .fold(0.0, |f, (st, c)| f + 2.0 * c + st.t);
    if sum != plan.suffix_latency {
        errs.push(format!("suffix latency {} differs from recomputed {sum}", plan.suffix_latency));
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}
