//! Execution DAG of a pipelined iteration and its as-soon-as-possible schedule.
//!
//! Nodes are forward/backward computations per (microbatch, stage), the
//! forward/backward transfers across each stage boundary, and a sink. Every
//! edge carries the duration of its source, so a node's ASAP start is the
//! longest path reaching it and the sink's start is the makespan.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::scheduler::{StageOp, StageProgram};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("malformed program: {0}")]
    MalformedProgram(String),
    #[error("timing arrays do not match a {stages}-stage pipeline: {detail}")]
    Shape { stages: usize, detail: String },
    #[error("invalid duration {value} for {what}")]
    Duration { what: String, value: f64 },
    #[error("dependency cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("steady window too short: {points} K-block boundaries, need at least 4")]
    SteadyWindow { points: usize },
}

/// Per-stage compute and per-boundary transfer durations of one microbatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTimes {
    pub t_f: Vec<f64>,
    pub t_b: Vec<f64>,
    /// One per boundary; applies to both directions.
    pub c: Vec<f64>,
    /// Activation bytes per device per in-flight microbatch, per stage.
    #[serde(default)]
    pub mem_a: Vec<f64>,
    /// Resident bytes per device, per stage.
    #[serde(default)]
    pub mem_p: Vec<f64>,
}

impl PipelineTimes {
    /// Equal stages with forward `f`, backward `b` and uniform boundary cost `c`.
    pub fn uniform(stages: usize, f: f64, b: f64, c: f64) -> Self {
        Self {
            t_f: vec![f; stages],
            t_b: vec![b; stages],
            c: vec![c; stages.saturating_sub(1)],
            mem_a: Vec::new(),
            mem_p: Vec::new(),
        }
    }

    pub fn stages(&self) -> usize {
        self.t_f.len()
    }

    /// `t_f + t_b` per stage.
    pub fn stage_times(&self) -> Vec<f64> {
        self.t_f.iter().zip(&self.t_b).map(|(f, b)| f + b).collect()
    }

    fn validate(&self) -> Result<(), SimError> {
        let s = self.stages();
        let shape = |detail: String| SimError::Shape { stages: s, detail };
        if s == 0 {
            return Err(shape("no stages".into()));
        }
        if self.t_b.len() != s || self.c.len() != s - 1 {
            return Err(shape(format!(
                "{} backward times, {} boundary costs",
                self.t_b.len(),
                self.c.len()
            )));
        }
        for (name, v) in [("mem_a", &self.mem_a), ("mem_p", &self.mem_p)] {
            if !v.is_empty() && v.len() != s {
                return Err(shape(format!("{} {name} entries", v.len())));
            }
        }
        let all = [("t_f", &self.t_f), ("t_b", &self.t_b), ("c", &self.c)];
        for (name, v) in all {
            for (i, &x) in v.iter().enumerate() {
                if !(x.is_finite() && x >= 0.0) {
                    return Err(SimError::Duration {
                        what: format!("{name}[{i}]"),
                        value: x,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    F,
    B,
    /// Forward transfer from stage `s` to `s + 1`.
    CF,
    /// Backward transfer from stage `s + 1` to `s`.
    CB,
    Sink,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DagNode {
    pub kind: NodeKind,
    /// 0-based microbatch.
    pub microbatch: usize,
    /// 0-based stage; for transfers, the upstream stage of the boundary.
    pub stage: usize,
    pub duration: f64,
}

impl DagNode {
    pub fn label(&self) -> String {
        let (i, s) = (self.microbatch + 1, self.stage + 1);
        match self.kind {
            NodeKind::F => format!("F{i},{s}"),
            NodeKind::B => format!("B{i},{s}"),
            NodeKind::CF => format!("CF{i},{s}"),
            NodeKind::CB => format!("CB{i},{s}"),
            NodeKind::Sink => "sink".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeClass {
    Comp,
    Comm,
    Dep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DagEdge {
    pub from: usize,
    pub to: usize,
    pub class: EdgeClass,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct Dag {
    pub nodes: Vec<DagNode>,
    pub edges: Vec<DagEdge>,
    pub stages: usize,
    pub microbatches: usize,
    /// Warm-up launch counts of the program the DAG was built from.
    pub counts: Vec<usize>,
    pub programs: Vec<Vec<StageOp>>,
    times: PipelineTimes,
}

impl Dag {
    pub fn node_id(&self, kind: NodeKind, microbatch: usize, stage: usize) -> usize {
        node_id(self.stages, self.microbatches, kind, microbatch, stage)
    }

    pub fn times(&self) -> &PipelineTimes {
        &self.times
    }

    pub fn sink(&self) -> usize {
        self.nodes.len() - 1
    }
}

fn node_id(stages: usize, b: usize, kind: NodeKind, i: usize, s: usize) -> usize {
    let comp = b * stages;
    let comm = b * (stages - 1);
    match kind {
        NodeKind::F => i * stages + s,
        NodeKind::B => comp + i * stages + s,
        NodeKind::CF => 2 * comp + i * (stages - 1) + s,
        NodeKind::CB => 2 * comp + comm + i * (stages - 1) + s,
        NodeKind::Sink => 2 * comp + 2 * comm,
    }
}

fn check_program(program: &StageProgram, stages: usize) -> Result<(), SimError> {
    let bad = |msg: String| Err(SimError::MalformedProgram(msg));
    if program.stages.len() != stages {
        return bad(format!("{} stage programs for {stages} stages", program.stages.len()));
    }
    let b = program.microbatches;
    if b == 0 {
        return bad("no microbatches".into());
    }
    for (s, ops) in program.stages.iter().enumerate() {
        let mut seen = HashSet::new();
        for op in ops {
            if op.microbatch() >= b || !seen.insert(*op) {
                return bad(format!("stage {} repeats or overruns {op}", s + 1));
            }
        }
        if seen.len() != 2 * b {
            return bad(format!("stage {} runs {} of {} operations", s + 1, seen.len(), 2 * b));
        }
    }
    Ok(())
}

pub fn build_dag(times: &PipelineTimes, program: &StageProgram) -> Result<Dag, SimError> {
    times.validate()?;
    let s_count = times.stages();
    check_program(program, s_count)?;
    let b = program.microbatches;
    let id = |kind, i, s| node_id(s_count, b, kind, i, s);

    let total = b * (2 * s_count + 2 * (s_count - 1)) + 1;
    let mut nodes = vec![
        DagNode {
            kind: NodeKind::Sink,
            microbatch: 0,
            stage: 0,
            duration: 0.0,
        };
        total
    ];
    for i in 0..b {
        for s in 0..s_count {
            nodes[id(NodeKind::F, i, s)] = DagNode {
                kind: NodeKind::F,
                microbatch: i,
                stage: s,
                duration: times.t_f[s],
            };
            nodes[id(NodeKind::B, i, s)] = DagNode {
                kind: NodeKind::B,
                microbatch: i,
                stage: s,
                duration: times.t_b[s],
            };
        }
        for s in 0..s_count - 1 {
            for kind in [NodeKind::CF, NodeKind::CB] {
                nodes[id(kind, i, s)] = DagNode {
                    kind,
                    microbatch: i,
                    stage: s,
                    duration: times.c[s],
                };
            }
        }
    }

    let mut edges = Vec::new();
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    let mut has_out = vec![false; total];
    let mut add = |from: usize, to: usize, class: EdgeClass| {
        if seen.insert((from, to)) {
            has_out[from] = true;
            edges.push(DagEdge {
                from,
                to,
                class,
                weight: nodes[from].duration,
            });
        }
    };
    let op_id = |op: &StageOp, s: usize| match *op {
        StageOp::Forward(i) => id(NodeKind::F, i, s),
        StageOp::Backward(i) => id(NodeKind::B, i, s),
    };
    for (s, ops) in program.stages.iter().enumerate() {
        for w in ops.windows(2) {
            add(op_id(&w[0], s), op_id(&w[1], s), EdgeClass::Comp);
        }
    }
    for s in 0..s_count - 1 {
        for i in 1..b {
            add(id(NodeKind::CF, i - 1, s), id(NodeKind::CF, i, s), EdgeClass::Comm);
            add(id(NodeKind::CB, i - 1, s), id(NodeKind::CB, i, s), EdgeClass::Comm);
        }
    }
    for i in 0..b {
        for s in 0..s_count - 1 {
            add(id(NodeKind::F, i, s), id(NodeKind::CF, i, s), EdgeClass::Dep);
            add(id(NodeKind::CF, i, s), id(NodeKind::F, i, s + 1), EdgeClass::Dep);
            add(id(NodeKind::B, i, s + 1), id(NodeKind::CB, i, s), EdgeClass::Dep);
            add(id(NodeKind::CB, i, s), id(NodeKind::B, i, s), EdgeClass::Dep);
        }
        add(id(NodeKind::F, i, s_count - 1), id(NodeKind::B, i, s_count - 1), EdgeClass::Dep);
    }
    // Only the last backward of each stage lacks a successor.
    let sink = total - 1;
    for (s, ops) in program.stages.iter().enumerate() {
        if let Some(last) = ops.last() {
            add(op_id(last, s), sink, EdgeClass::Dep);
        }
    }
    debug_assert!(has_out[..sink].iter().all(|&o| o));

    Ok(Dag {
        nodes,
        edges,
        stages: s_count,
        microbatches: b,
        counts: program.counts.clone(),
        programs: program.stages.clone(),
        times: times.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    /// Incoming edge source attaining each node's start; `None` for sources.
    pub tight_pred: Vec<Option<usize>>,
    pub makespan: f64,
}

/// ASAP start times by a longest-path sweep in topological order.
pub fn simulate(dag: &Dag) -> Result<ScheduleTrace, SimError> {
    let n = dag.nodes.len();
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut indegree = vec![0usize; n];
    for (k, e) in dag.edges.iter().enumerate() {
        out[e.from].push(k);
        indegree[e.to] += 1;
    }
    let mut start = vec![0.0f64; n];
    let mut tight_pred = vec![None; n];
    let mut queue: Vec<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
    let mut head = 0;
    while head < queue.len() {
        let u = queue[head];
        head += 1;
        for &k in &out[u] {
            let e = &dag.edges[k];
            let candidate = start[u] + e.weight;
            if tight_pred[e.to].is_none() || candidate > start[e.to] {
                start[e.to] = candidate;
                tight_pred[e.to] = Some(u);
            }
            indegree[e.to] -= 1;
            if indegree[e.to] == 0 {
                queue.push(e.to);
            }
        }
    }
    if queue.len() < n {
        return Err(SimError::Cycle(find_cycle(dag, &indegree)));
    }
    let end: Vec<f64> = start
        .iter()
        .zip(&dag.nodes)
        .map(|(s, node)| s + node.duration)
        .collect();
    let makespan = start[dag.sink()];
    Ok(ScheduleTrace {
        start,
        end,
        tight_pred,
        makespan,
    })
}

/// Walks predecessors among unprocessed nodes until one repeats.
fn find_cycle(dag: &Dag, indegree: &[usize]) -> Vec<String> {
    let mut pred: HashMap<usize, usize> = HashMap::new();
    for e in &dag.edges {
        if indegree[e.from] > 0 && indegree[e.to] > 0 {
            pred.entry(e.to).or_insert(e.from);
        }
    }
    let Some(mut v) = (0..indegree.len()).find(|&v| indegree[v] > 0 && pred.contains_key(&v)) else {
        return Vec::new();
    };
    let mut order = Vec::new();
    let mut pos: HashMap<usize, usize> = HashMap::new();
    while let std::collections::hash_map::Entry::Vacant(slot) = pos.entry(v) {
        slot.insert(order.len());
        order.push(v);
        v = pred[&v];
    }
    let mut cycle = vec![dag.nodes[v].label()];
    cycle.extend(order[pos[&v]..].iter().rev().map(|&u| dag.nodes[u].label()));
    cycle
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub busy: f64,
    /// Idle time between the stage's first start and last end.
    pub bubble: f64,
    pub bubble_fraction: f64,
    /// Idle time between consecutive steady-phase operations.
    pub steady_bubble: f64,
    pub peak_in_flight: usize,
    pub peak_activation_bytes: f64,
    pub peak_memory_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub forward_comm: f64,
    pub backward_comm: f64,
    /// Share of transfer time during which both endpoint stages compute.
    pub overlap_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub makespan: f64,
    pub stages: Vec<StageReport>,
    pub links: Vec<LinkReport>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn stage_intervals(dag: &Dag, trace: &ScheduleTrace, s: usize) -> Vec<(f64, f64)> {
    dag.programs[s]
        .iter()
        .map(|op| {
            let v = match *op {
                StageOp::Forward(i) => dag.node_id(NodeKind::F, i, s),
                StageOp::Backward(i) => dag.node_id(NodeKind::B, i, s),
            };
            (trace.start[v], trace.end[v])
        })
        .collect()
}

/// Total length of `(a, b)` covered by the sorted disjoint `intervals`.
fn covered(intervals: &[(f64, f64)], a: f64, b: f64) -> f64 {
    let from = intervals.partition_point(|iv| iv.1 <= a);
    intervals[from..]
        .iter()
        .take_while(|iv| iv.0 < b)
        .map(|&(x, y)| (y.min(b) - x.max(a)).max(0.0))
        .sum()
}

fn intersect(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if lo < hi {
            out.push((lo, hi));
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

pub fn analyze(dag: &Dag, trace: &ScheduleTrace) -> SimReport {
    let times = dag.times();
    let b = dag.microbatches;
    let intervals: Vec<Vec<(f64, f64)>> = (0..dag.stages).map(|s| stage_intervals(dag, trace, s)).collect();

    let stages = (0..dag.stages)
        .map(|s| {
            let iv = &intervals[s];
            let busy: f64 = iv.iter().map(|(x, y)| y - x).sum();
            let first = iv.iter().map(|iv| iv.0).fold(f64::INFINITY, f64::min);
            let last = iv.iter().map(|iv| iv.1).fold(0.0, f64::max);
            let bubble = ((last - first) - busy).max(0.0);
            let n = dag.counts.get(s).copied().unwrap_or(1).min(b);
            let steady_bubble = (n + 1..2 * b - n)
                .map(|k| (iv[k].0 - iv[k - 1].1).max(0.0))
                .sum();
            let peak = peak_in_flight(dag, trace, s);
            let mem_a = times.mem_a.get(s).copied().unwrap_or(0.0);
            let mem_p = times.mem_p.get(s).copied().unwrap_or(0.0);
            StageReport {
                busy,
                bubble,
                bubble_fraction: if last > first { bubble / (last - first) } else { 0.0 },
                steady_bubble,
                peak_in_flight: peak,
                peak_activation_bytes: peak as f64 * mem_a,
                peak_memory_bytes: mem_p + peak as f64 * mem_a,
            }
        })
        .collect();

    let links = (0..dag.stages.saturating_sub(1))
        .map(|s| {
            let both = intersect(&intervals[s], &intervals[s + 1]);
            let mut totals = [0.0; 2];
            let mut overlapped = 0.0;
            for (k, kind) in [NodeKind::CF, NodeKind::CB].into_iter().enumerate() {
                for i in 0..b {
                    let v = dag.node_id(kind, i, s);
                    totals[k] += dag.nodes[v].duration;
                    overlapped += covered(&both, trace.start[v], trace.end[v]);
                }
            }
            let total = totals[0] + totals[1];
            LinkReport {
                forward_comm: totals[0],
                backward_comm: totals[1],
                overlap_ratio: if total > 0.0 { overlapped / total } else { 1.0 },
            }
        })
        .collect();

    SimReport {
        makespan: trace.makespan,
        stages,
        links,
    }
}

/// Max over time of forwards completed minus backwards completed on stage `s`.
pub fn peak_in_flight(dag: &Dag, trace: &ScheduleTrace, s: usize) -> usize {
    let mut events: Vec<(f64, bool)> = (0..dag.microbatches)
        .flat_map(|i| {
            [
                (trace.end[dag.node_id(NodeKind::F, i, s)], true),
                (trace.end[dag.node_id(NodeKind::B, i, s)], false),
            ]
        })
        .collect();
    // Backward completions first at equal times.
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut live = 0i64;
    let mut peak = 0i64;
    for (_, forward) in events {
        live += if forward { 1 } else { -1 };
        peak = peak.max(live);
    }
    peak as usize
}

/// Seconds per microbatch on `stage`, from a least-squares fit of forward
/// start times at K-block boundaries of the steady window, `K = N_stage`.
pub fn steady_state_rate(dag: &Dag, trace: &ScheduleTrace, stage: usize) -> Result<f64, SimError> {
    let k = dag.counts[stage].max(1);
    let b = dag.microbatches;
    let points: Vec<(f64, f64)> = (k..b.saturating_sub(k))
        .step_by(k)
        .map(|i| (i as f64, trace.start[dag.node_id(NodeKind::F, i, stage)]))
        .collect();
    if points.len() < 4 {
        return Err(SimError::SteadyWindow { points: points.len() });
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Ok(sxy / sxx)
}

/// Browser-viewable trace-event records: one row per stage, one per link direction.
pub fn chrome_trace(dag: &Dag, trace: &ScheduleTrace) -> serde_json::Value {
    let s_count = dag.stages;
    let mut events = Vec::new();
    let mut row_name = |tid: usize, name: String| {
        events.push(json!({"name": "thread_name", "ph": "M", "pid": 0, "tid": tid, "args": {"name": name}}));
    };
    for s in 0..s_count {
        row_name(s, format!("stage {}", s + 1));
    }
    for s in 0..s_count.saturating_sub(1) {
        row_name(s_count + 2 * s, format!("link {}->{}", s + 1, s + 2));
        row_name(s_count + 2 * s + 1, format!("link {}->{}", s + 2, s + 1));
    }
    for (v, node) in dag.nodes.iter().enumerate() {
        let (tid, cat) = match node.kind {
            NodeKind::F => (node.stage, "forward"),
            NodeKind::B => (node.stage, "backward"),
            NodeKind::CF => (s_count + 2 * node.stage, "comm"),
            NodeKind::CB => (s_count + 2 * node.stage + 1, "comm"),
            NodeKind::Sink => continue,
        };
        if node.duration == 0.0 && node.kind != NodeKind::F && node.kind != NodeKind::B {
            continue;
        }
        events.push(json!({
            "name": node.label(),
            "cat": cat,
            "ph": "X",
            "pid": 0,
            "tid": tid,
            "ts": trace.start[v] * 1e6,
            "dur": node.duration * 1e6,
        }));
    }
    json!({"traceEvents": events, "displayTimeUnit": "ms"})
}

/// Start and end of every non-sink node, in seconds.
pub fn trace_records(dag: &Dag, trace: &ScheduleTrace) -> serde_json::Value {
    let rows: Vec<_> = dag
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.kind != NodeKind::Sink)
        .map(|(v, n)| json!({"name": n.label(), "start": trace.start[v], "duration": n.duration}))
        .collect();
    json!({"makespan": trace.makespan, "nodes": rows})
}
