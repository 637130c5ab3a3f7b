//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;

use hetpipe::cluster::{enumerate_submeshes, ClusterSpec, DeviceMesh, MeshShape, Submesh};
use hetpipe::metrics::load_balance_eta;
use hetpipe::model_graph::{build_layers, generate_gpt_sequence, GptConfig, Layer, LayerSequence, ModelSpec};
use hetpipe::pipeline_sim::{
    analyze, build_dag, simulate, steady_state_rate, Dag, NodeKind, PipelineTimes, ScheduleTrace, SimReport,
};
use hetpipe::planner::{end_to_end_latency, search, verify_plan, ParallelPlan, PlanContext, PlanError, SearchOptions};
use hetpipe::profiler::{
    analytic_profile, boundary_costs, build_store, LayerSpan, ProfileStore, ProfilerConfig, StageCandidate,
    StageMeshProfile,
};
use hetpipe::scheduler::{
    analytic_delta, build_program, classic_counts, eager_counts, h1f1b_counts, LaunchCounts, DEFAULT_EPSILON,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct Run {
    dag: Dag,
    trace: ScheduleTrace,
    report: SimReport,
}

fn run(times: &PipelineTimes, counts: &LaunchCounts, b: usize) -> Run {
    let program = build_program(counts, b).expect("enough microbatches");
    let dag = build_dag(times, &program).expect("well-formed DAG");
    let trace = simulate(&dag).expect("acyclic DAG");
    let report = analyze(&dag, &trace);
    Run { dag, trace, report }
}

impl Run {
    fn start(&self, kind: NodeKind, i: usize, s: usize) -> f64 {
        self.trace.start[self.dag.node_id(kind, i, s)]
    }

    /// Largest steady-phase idle gap summed over one stage, over all stages.
    fn worst_steady_bubble(&self) -> f64 {
        self.report.stages.iter().map(|s| s.steady_bubble).fold(0.0, f64::max)
    }

    fn bubble_free(&self) -> bool {
        self.worst_steady_bubble() <= 1e-9 * self.report.makespan
    }
}

fn lemma_sweep() -> Vec<(f64, f64, f64, usize)> {
    let vals = [0.5, 1.0, 2.0];
    let mut out = Vec::new();
    for f in vals {
        for b in vals {
            for c in [0.0, 0.3, 0.5, 1.0, f + b] {
                for k in 1..=5 {
                    out.push((f, b, c, k));
                }
            }
        }
    }
    out
}

const SWEEP_B: usize = 32;

fn criterion_1() -> Outcome {
    let mut checked = 0;
    for (f, b, c, k) in lemma_sweep() {
        let r = run(&PipelineTimes::uniform(2, f, b, c), &LaunchCounts::custom(vec![k, 1]).unwrap(), SWEEP_B);
        let kf = k as f64;
        let expect = (kf * f + (kf - 1.0) * b).max(2.0 * f + b + 2.0 * c);
        for i in k..SWEEP_B - k {
            let (sf, sb) = (r.start(NodeKind::F, i, 0), r.start(NodeKind::B, i, 0));
            let gap = sb - sf;
            ensure!(
                (gap - expect).abs() <= 64.0 * f64::EPSILON * sb,
                "f={f} b={b} c={c} K={k} microbatch {}: gap {gap} != {expect}",
                i + 1
            );
            checked += 1;
        }
    }
    Ok(format!("{checked} steady gaps over {} configurations", lemma_sweep().len()))
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for (f, b, c, k) in lemma_sweep() {
        let r = run(&PipelineTimes::uniform(2, f, b, c), &LaunchCounts::custom(vec![k, 1]).unwrap(), SWEEP_B);
        let rate = steady_state_rate(&r.dag, &r.trace, 0).map_err(|e| e.to_string())?;
        let expect = (f + b).max(2.0 * (f + b + c) / k as f64);
        let rel = (rate - expect).abs() / expect;
        worst = worst.max(rel);
        ensure!(rel <= 0.01, "f={f} b={b} c={c} K={k}: rate {rate} vs {expect}");
    }
    Ok(format!("worst relative error {:.2e}", worst))
}

/// Balanced instance with boundary costs drawn from `{0} U (eps t, t]`.
fn balanced_instance(rng: &mut ChaCha8Rng, stages: usize) -> PipelineTimes {
    let f = rng.gen_range(0.5..2.0);
    let b = f * rng.gen_range(1.0..2.5);
    let t = f + b;
    let mut times = PipelineTimes::uniform(stages, f, b, 0.0);
    for c in &mut times.c {
        *c = if rng.gen_bool(0.2) {
            0.0
        } else {
            t * rng.gen_range(DEFAULT_EPSILON..1.0).max(DEFAULT_EPSILON * 1.01)
        };
    }
    times
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut instances, mut ablations) = (0, 0);
    let mut unchanged: Vec<String> = Vec::new();
    for stages in [2, 3, 4, 8] {
        for _ in 0..12 {
            let times = balanced_instance(&mut rng, stages);
            let t = times.stage_times();
            let t_max = t[0];
            let b = 16 * stages;
            let counts = h1f1b_counts(&t, &times.c, DEFAULT_EPSILON).unwrap();
            let base = run(&times, &counts, b);
            ensure!(
                base.bubble_free(),
                "S={stages} c={:?}: steady bubble {} under counts {:?}",
                times.c,
                base.worst_steady_bubble(),
                counts.counts
            );
            for (i, &c) in times.c.iter().enumerate() {
                if c <= DEFAULT_EPSILON * t_max || analytic_delta(c, t_max) < counts.delta[i] {
                    continue;
                }
                let mut reduced = counts.counts.clone();
                for n in &mut reduced[..=i] {
                    *n -= 1;
                }
                let ablated = run(&times, &LaunchCounts::custom(reduced.clone()).unwrap(), b);
                let slower = ablated.report.makespan > base.report.makespan * (1.0 + 1e-12);
                ensure!(
                    !ablated.bubble_free(),
                    "S={stages} boundary {} c/t={:.3}: counts {reduced:?} stay bubble-free",
                    i + 1,
                    c / t_max
                );
                ablations += 1;
                if !slower {
                    unchanged.push(format!(
                        "S={stages} boundary {} c/t={:.3} counts {:?} -> {reduced:?}, all c/t {:?}, makespan {}",
                        i + 1,
                        c / t_max,
                        counts.counts,
                        times.c.iter().map(|x| (x / t_max * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                        base.report.makespan
                    ));
                }
            }
            instances += 1;
        }
    }
    // Inside the epsilon band delta stays 1; residual bubbles are bounded, not zero.
    let mut worst_band = 0.0f64;
    for stages in [2, 4] {
        for _ in 0..8 {
            let mut times = balanced_instance(&mut rng, stages);
            let t_max = times.stage_times()[0];
            for c in &mut times.c {
                *c = rng.gen_range(0.0..=DEFAULT_EPSILON * t_max);
            }
            let b = 16 * stages;
            let counts = h1f1b_counts(&times.stage_times(), &times.c, DEFAULT_EPSILON).unwrap();
            let r = run(&times, &counts, b);
            let bound = 2.0 * b as f64 * times.c.iter().sum::<f64>();
            ensure!(
                r.worst_steady_bubble() <= bound + 1e-9,
                "epsilon band S={stages}: bubble {} above {bound}",
                r.worst_steady_bubble()
            );
            worst_band = worst_band.max(r.worst_steady_bubble() / (b as f64 * t_max));
        }
    }
    let summary = format!(
        "{instances} instances bubble-free; every one of {ablations} decrements adds steady bubbles, \
         {} of them lengthen the makespan; epsilon-band residual <= {:.3}% of B t_max",
        ablations - unchanged.len(),
        100.0 * worst_band
    );
    ensure!(unchanged.is_empty(), "{summary}; makespan unchanged for {}", unchanged.join("; "));
    Ok(summary)
}

fn criterion_4() -> Outcome {
    let eager = eager_counts(2);
    let below = run(&PipelineTimes::uniform(2, 1.0, 1.0, 0.99), &eager, 32);
    ensure!(below.bubble_free(), "eager at c=0.99 has steady bubble {}", below.worst_steady_bubble());
    let above = run(&PipelineTimes::uniform(2, 1.0, 1.0, 1.01), &eager, 32);
    ensure!(above.worst_steady_bubble() > 0.0, "eager at c=1.01 is bubble-free");
    for c in [1.01, 1.25, 1.5, 1.75, 2.0] {
        let times = PipelineTimes::uniform(2, 1.0, 1.0, c);
        let counts = h1f1b_counts(&times.stage_times(), &times.c, DEFAULT_EPSILON).unwrap();
        ensure!(counts.delta == [3], "c={c}: delta {:?}", counts.delta);
        let r = run(&times, &counts, 32);
        ensure!(r.bubble_free(), "h1f1b at c={c} has steady bubble {}", r.worst_steady_bubble());
    }
    Ok(format!(
        "eager bubble {:.3} at c=1.01; h1f1b bubble-free through c=2.0",
        above.worst_steady_bubble()
    ))
}

fn criterion_5() -> Outcome {
    let t = [1.65, 1.0, 1.0];
    let c = [0.8 * 1.65, 1e-4];
    let h = h1f1b_counts(&t, &c, DEFAULT_EPSILON).unwrap().counts;
    let e = eager_counts(3).counts;
    let k = classic_counts(3).counts;
    ensure!(h == [5, 2, 1], "h1f1b {h:?}");
    ensure!(e == [5, 3, 1], "eager {e:?}");
    ensure!(k == [3, 2, 1], "classic {k:?}");
    Ok(format!("h1f1b {h:?}, eager {e:?}, classic {k:?}"))
}

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/data").join(name)
}

struct CaseStudy {
    layers: LayerSequence,
    cluster: ClusterSpec,
    cfg: ProfilerConfig,
}

impl CaseStudy {
    fn load() -> Self {
        let ops = ModelSpec::load(data("case_study_model.toml")).unwrap().operators().unwrap();
        Self {
            layers: build_layers(&ops, 1, 1).unwrap(),
            cluster: ClusterSpec::load(data("case_study_cluster.toml")).unwrap(),
            cfg: ProfilerConfig::default(),
        }
    }

    fn sub(&self, mesh: &str, n: u32, m: u32) -> Submesh {
        Submesh {
            mesh: self.cluster.mesh_index(mesh).unwrap(),
            shape: MeshShape::new(n, m),
        }
    }

    fn profile(&self, first: usize, last: usize, sub: &Submesh) -> StageMeshProfile {
        let cand = StageCandidate::from_layers(&self.layers, LayerSpan::new(first - 1, last));
        analytic_profile(&cand, sub, &self.cluster, &self.cfg)
    }

    /// Three coarse layers (48 of 128) on one A100 host.
    fn reference_t(&self) -> f64 {
        self.profile(1, 48, &self.sub("a100", 1, 2)).t
    }
}

fn plan_for(layers: &LayerSequence, cluster: &ClusterSpec, cfg: &ProfilerConfig, b: usize, opts: &SearchOptions) -> Result<ParallelPlan, PlanError> {
    let store = build_store(layers, cluster, cfg, &[]).map_err(|e| PlanError::Infeasible(e.to_string()))?;
    let costs = boundary_costs(layers, cluster);
    let ctx = PlanContext {
        store: &store,
        costs: &costs,
        cluster,
        microbatches: b,
        epsilon: DEFAULT_EPSILON,
    };
    search(&ctx, opts)
}

fn describe(plan: &ParallelPlan, cluster: &ClusterSpec, t_ref: f64) -> String {
    plan.stages
        .iter()
        .map(|s| {
            format!(
                "{}-{} {} {:.3}t",
                s.first_layer,
                s.last_layer,
                cluster.submesh_label(&s.submesh()),
                s.t / t_ref
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn criterion_6() -> Outcome {
    let cs = CaseStudy::load();
    let v100 = &cs.cluster.meshes[cs.cluster.mesh_index("v100").unwrap()];
    let balance = cs.layers.len() as f64 * v100.total_peak() / cs.cluster.total_peak();
    ensure!((balance - 32000.0 / 1498.0).abs() < 1e-9, "balance point {balance}");
    let plan = plan_for(&cs.layers, &cs.cluster, &cs.cfg, 128, &SearchOptions::default()).map_err(|e| e.to_string())?;
    let t_ref = cs.reference_t();
    let got = describe(&plan, &cs.cluster, t_ref);
    ensure!(plan.num_stages() == 3, "{} stages [{got}]; balance point x = {balance:.2}", plan.num_stages());
    let want_subs = [cs.sub("v100", 1, 2), cs.sub("a100", 1, 2), cs.sub("a100", 1, 2)];
    let want_ends = [22, 75];
    let want_ratio = [1.13, 1.10, 1.10];
    for (i, st) in plan.stages.iter().enumerate() {
        ensure!(st.submesh() == want_subs[i], "stage {} submesh [{got}]", i + 1);
        if i < 2 {
            ensure!(st.last_layer.abs_diff(want_ends[i]) <= 1, "stage {} ends at {} [{got}]", i + 1, st.last_layer);
        }
        let ratio = st.t / t_ref;
        ensure!(
            (ratio / want_ratio[i] - 1.0).abs() <= 0.02,
            "stage {} cost {ratio:.3}t vs {}t [{got}]",
            i + 1,
            want_ratio[i]
        );
    }
    Ok(got)
}

fn criterion_7() -> Outcome {
    let cs = CaseStudy::load();
    let (v, a) = (cs.sub("v100", 1, 2), cs.sub("a100", 1, 2));
    let latency = |spans: [(usize, usize); 3]| {
        let subs = [v, a, a];
        let t: Vec<f64> = spans.iter().zip(&subs).map(|(&(x, y), s)| cs.profile(x, y, s).t).collect();
        end_to_end_latency(&t, &[0.0, 0.0], 128).unwrap()
    };
    let coarse = latency([(1, 32), (33, 80), (81, 128)]);
    let fine = latency([(1, 22), (23, 75), (76, 128)]);
    let speedup = coarse / fine;
    ensure!((1.35..=1.50).contains(&speedup), "speedup {speedup:.4}");
    Ok(format!("T coarse {coarse:.2}s / fine {fine:.2}s = {speedup:.4}"))
}

struct Instance {
    layers: LayerSequence,
    cluster: ClusterSpec,
    cfg: ProfilerConfig,
    b: usize,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let l = rng.gen_range(2..=6);
    let layers = LayerSequence::from_layers(
        (0..l)
            .map(|i| Layer {
                op_start: i,
                op_end: i + 1,
                flops: rng.gen_range(1.0..4.0) * 1e12,
                param_bytes: rng.gen_range(0.5..2.0) * 1e9,
                boundary_bytes: if rng.gen_bool(0.15) { 0.0 } else { rng.gen_range(0.1..4.0) * 1e9 },
                signature: format!("u{i}"),
            })
            .collect(),
    )
    .unwrap();
    let shapes = [(1, 1), (1, 2), (2, 1), (1, 4), (2, 2)];
    let meshes = (0..2)
        .map(|m| {
            let (h, d) = shapes[rng.gen_range(0..shapes.len())];
            DeviceMesh {
                id: format!("m{m}"),
                hosts: h,
                devices_per_host: d,
                peak_flops: rng.gen_range(1.0..3.0) * 1e12,
                mem_device: rng.gen_range(8.0..40.0) * 1e9,
                intra_host_bw: 1e11,
                inter_host_bw: rng.gen_range(2.0..10.0) * 1e9,
            }
        })
        .collect();
    Instance {
        layers,
        cluster: ClusterSpec::new(meshes, rng.gen_range(0.5..4.0) * 1e9).unwrap(),
        cfg: ProfilerConfig {
            efficiency: 1.0,
            rho: f64::INFINITY,
            ..ProfilerConfig::default()
        },
        b: rng.gen_range(1..=12),
    }
}

fn instances() -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    (0..50).map(|_| random_instance(&mut rng)).collect()
}

/// Transfer time after layer `boundary`, from first principles.
fn comm(inst: &Instance, boundary: usize, from: usize, to: usize) -> f64 {
    let bytes = inst.layers.layers[boundary].boundary_bytes;
    if bytes == 0.0 {
        return 0.0;
    }
    if from == to {
        bytes / inst.cluster.meshes[from].inter_host_bw
    } else {
        bytes / inst.cluster.cross_bw + inst.cluster.cross_latency
    }
}

type Stage = (usize, usize, Submesh);

/// Every partition into contiguous spans with submeshes taken in mesh order,
/// consuming every device exactly once.
fn all_partitions(inst: &Instance) -> Vec<Vec<Stage>> {
    fn rec(inst: &Instance, first: usize, mesh: usize, left: u32, acc: &mut Vec<Stage>, out: &mut Vec<Vec<Stage>>) {
        let l = inst.layers.len();
        let meshes = &inst.cluster.meshes;
        if first == l || mesh == meshes.len() {
            if first == l && mesh == meshes.len() {
                out.push(acc.clone());
            }
            return;
        }
        for shape in enumerate_submeshes(&meshes[mesh]) {
            let n = shape.device_count();
            if n > left {
                continue;
            }
            let (next_mesh, next_left) = if n == left {
                (mesh + 1, meshes.get(mesh + 1).map_or(0, |m| m.device_count()))
            } else {
                (mesh, left - n)
            };
            for end in first + 1..=l {
                acc.push((first, end, Submesh { mesh, shape }));
                rec(inst, end, next_mesh, next_left, acc, out);
                acc.pop();
            }
        }
    }
    let mut out = Vec::new();
    let first_mesh = inst.cluster.meshes[0].device_count();
    rec(inst, 0, 0, first_mesh, &mut Vec::new(), &mut out);
    out
}

fn stage_profile(inst: &Instance, st: &Stage) -> StageMeshProfile {
    let cand = StageCandidate::from_layers(&inst.layers, LayerSpan::new(st.0, st.1));
    analytic_profile(&cand, &st.2, &inst.cluster, &inst.cfg)
}

/// Suffix latency under `t_max`, or `None` when a constraint fails.
fn evaluate(inst: &Instance, stages: &[Stage], t_max: f64) -> Option<f64> {
    let mut f = 0.0;
    let mut k_next = 0usize;
    for i in (0..stages.len()).rev() {
        let p = stage_profile(inst, &stages[i]);
        let c = match stages.get(i + 1) {
            Some(next) => comm(inst, stages[i].1 - 1, stages[i].2.mesh, next.2.mesh),
            None => 0.0,
        };
        let k = (2.0 * c / t_max).ceil() as usize + 1 + k_next;
        let mem = inst.cluster.meshes[stages[i].2.mesh].mem_device;
        if p.t > t_max || c > t_max || p.mem_p + k as f64 * p.mem_a > mem {
            return None;
        }
        f = f + 2.0 * c + p.t;
        k_next = k;
    }
    Some(f)
}

/// Exhaustive minimum of `F + (B - 1) t_max` over partitions and the bound pool.
fn brute_force(inst: &Instance) -> Option<f64> {
    let parts = all_partitions(inst);
    let mut pool: Vec<f64> = Vec::new();
    let l = inst.layers.len();
    for (m, mesh) in inst.cluster.meshes.iter().enumerate() {
        for shape in enumerate_submeshes(mesh) {
            for a in 0..l {
                for z in a + 1..=l {
                    let p = stage_profile(inst, &(a, z, Submesh { mesh: m, shape }));
                    if p.mem_p + p.mem_a <= mesh.mem_device {
                        pool.push(p.t);
                    }
                }
            }
        }
    }
    let mut best: Option<f64> = None;
    for &t_max in &pool {
        for stages in &parts {
            if let Some(f) = evaluate(inst, stages, t_max) {
                let total = f + (inst.b as f64 - 1.0) * t_max;
                best = Some(best.map_or(total, |x: f64| x.min(total)));
            }
        }
    }
    best
}

/// Recomputes every constraint of a plan without the planner's bookkeeping.
fn check_plan(inst: &Instance, plan: &ParallelPlan) -> Result<(), String> {
    let stages: Vec<Stage> = plan
        .stages
        .iter()
        .map(|s| (s.first_layer - 1, s.last_layer, s.submesh()))
        .collect();
    ensure!(all_partitions(inst).contains(&stages), "not a legal partition: {stages:?}");
    let f = evaluate(inst, &stages, plan.t_max).ok_or("violates a constraint at its own t_max")?;
    let total = f + (inst.b as f64 - 1.0) * plan.t_max;
    ensure!(total == plan.predicted_latency, "latency {} recomputes to {total}", plan.predicted_latency);
    verify_plan(plan, &inst.cluster, inst.layers.len()).map_err(|e| e.join("; "))
}

fn criterion_8() -> Outcome {
    let mut feasible = 0;
    for (n, inst) in instances().iter().enumerate() {
        let oracle = brute_force(inst);
        let got = plan_for(&inst.layers, &inst.cluster, &inst.cfg, inst.b, &SearchOptions::exhaustive());
        match (&got, oracle) {
            (Ok(plan), Some(best)) => {
                ensure!(plan.predicted_latency == best, "instance {n}: DP {} vs brute force {best}", plan.predicted_latency);
                check_plan(inst, plan).map_err(|e| format!("instance {n}: {e}"))?;
                feasible += 1;
            }
            (Err(_), None) => {}
            (got, oracle) => return Err(format!("instance {n}: DP {got:?} vs brute force {oracle:?}")),
        }
    }
    Ok(format!("50 instances, {feasible} feasible, all exact"))
}

fn criterion_9() -> Outcome {
    let variants = [
        SearchOptions::default(),
        SearchOptions { parallel: false, ..SearchOptions::default() },
        SearchOptions { sparse: false, ..SearchOptions::default() },
        SearchOptions { batch_size: 1, ..SearchOptions::default() },
        SearchOptions { batch_size: 3, ..SearchOptions::default() },
    ];
    let (mut evaluated, mut total) = (0, 0);
    for (n, inst) in instances().iter().enumerate() {
        let reference = plan_for(&inst.layers, &inst.cluster, &inst.cfg, inst.b, &SearchOptions::exhaustive())
            .map(|p| p.without_search());
        for opts in &variants {
            let got = plan_for(&inst.layers, &inst.cluster, &inst.cfg, inst.b, opts);
            if let Ok(p) = &got {
                let stats = p.search.as_ref().expect("search stats");
                evaluated += stats.candidates_evaluated;
                total += stats.candidates_total;
            }
            let got = got.map(|p| p.without_search());
            match (&reference, &got) {
                (Ok(a), Ok(b)) => ensure!(a == b, "instance {n} {opts:?}: plans differ"),
                (Err(_), Err(_)) => {}
                _ => return Err(format!("instance {n} {opts:?}: {reference:?} vs {got:?}")),
            }
        }
    }
    Ok(format!("identical plans; optimized runs evaluated {evaluated} of {total} candidates"))
}

fn gpt_layers(blocks: usize, layers_per_module: usize) -> LayerSequence {
    let ops = generate_gpt_sequence(&GptConfig {
        num_blocks: blocks,
        hidden_dim: 1024,
        seq_len: 512,
        mb_size: 2,
        vocab: 8000,
    })
    .unwrap();
    build_layers(&ops, 2, layers_per_module).unwrap()
}

fn dedup_cluster() -> ClusterSpec {
    let mesh = |id: &str, d: u32, peak: f64| DeviceMesh {
        id: id.into(),
        hosts: 1,
        devices_per_host: d,
        peak_flops: peak,
        mem_device: 80e9,
        intra_host_bw: 3e11,
        inter_host_bw: 2.5e10,
    };
    ClusterSpec::new(vec![mesh("a", 4, 3e14), mesh("b", 2, 1.2e14)], 1e10).unwrap()
}

/// Canonical profiles referenced by spans inside the repeated region that
/// are at most one module plus one layer long (present for every r >= 2).
fn interior_canonical(store: &ProfileStore, layers: &LayerSequence, lpm: usize) -> usize {
    let repeated: Vec<bool> = layers.layers.iter().map(|l| l.signature.starts_with('g')).collect();
    let mut ids = HashSet::new();
    for a in 0..layers.len() {
        for z in a + 1..=(a + lpm + 1).min(layers.len()) {
            if !repeated[a..z].iter().all(|r| *r) {
                continue;
            }
            for mesh in 0..store.num_meshes() {
                for si in 0..store.shapes(mesh).len() {
                    if let Some((id, _)) = store.lookup(LayerSpan::new(a, z), mesh, si) {
                        ids.insert(id);
                    }
                }
            }
        }
    }
    ids.len()
}

fn criterion_10() -> Outcome {
    let lpm = 2;
    let cluster = dedup_cluster();
    let on = ProfilerConfig {
        rho: f64::INFINITY,
        ..ProfilerConfig::default()
    };
    let off = ProfilerConfig { dedup: false, ..on.clone() };
    let mut interior = Vec::new();
    let mut computed = Vec::new();
    for r in [2, 4, 8, 16] {
        let layers = gpt_layers(r, lpm);
        let store = build_store(&layers, &cluster, &on, &[]).map_err(|e| e.to_string())?;
        interior.push(interior_canonical(&store, &layers, lpm));
        let plain = build_store(&layers, &cluster, &off, &[]).map_err(|e| e.to_string())?;
        computed.push((store.stats.canonical, plain.stats.canonical));
        let with = plan_for(&layers, &cluster, &on, 16, &SearchOptions::default()).map_err(|e| e.to_string())?;
        let without = plan_for(&layers, &cluster, &off, 16, &SearchOptions::default()).map_err(|e| e.to_string())?;
        ensure!(with.without_search() == without.without_search(), "r={r}: plan changes without dedup");
    }
    ensure!(interior.iter().all(|&n| n == interior[0]) && interior[0] > 0, "interior canonical counts {interior:?}");
    Ok(format!(
        "interior canonical profiles {interior:?} for r=[2,4,8,16]; total computed (dedup, plain) {computed:?}"
    ))
}

fn criterion_11() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut schedules = 0;
    for _ in 0..120 {
        let stages = rng.gen_range(1..=5);
        let mut times = PipelineTimes::uniform(stages, 1.0, 2.0, 0.0);
        for s in 0..stages {
            times.t_f[s] = rng.gen_range(0.2..2.0);
            times.t_b[s] = times.t_f[s] * rng.gen_range(1.0..3.0);
        }
        let t_max = times.stage_times().into_iter().fold(0.0, f64::max);
        for c in &mut times.c {
            *c = rng.gen_range(0.0..=t_max);
        }
        let mut custom = vec![1usize; stages];
        for s in (0..stages.saturating_sub(1)).rev() {
            custom[s] = custom[s + 1] + rng.gen_range(0..=3);
        }
        let candidates = [
            classic_counts(stages),
            eager_counts(stages),
            h1f1b_counts(&times.stage_times(), &times.c, DEFAULT_EPSILON).unwrap(),
            LaunchCounts::custom(custom).unwrap(),
        ];
        for counts in candidates {
            let b = counts.counts[0] + rng.gen_range(0..=3 * stages);
            let r = run(&times, &counts, b);
            let peaks: Vec<usize> = r.report.stages.iter().map(|s| s.peak_in_flight).collect();
            ensure!(peaks == counts.counts, "counts {:?} peaks {peaks:?} B={b}", counts.counts);
            schedules += 1;
        }
    }
    let mut plans = 0;
    for inst in instances() {
        let Ok(plan) = plan_for(&inst.layers, &inst.cluster, &inst.cfg, inst.b, &SearchOptions::default()) else {
            continue;
        };
        for (st, &k) in plan.stages.iter().zip(&plan.launch_bounds) {
            ensure!(st.mem_p + k as f64 * st.mem_a <= st.mem_device, "plan stage {}-{} over memory", st.first_layer, st.last_layer);
        }
        if plan.microbatches >= plan.launch_counts[0] {
            let r = run(&plan.times(), &LaunchCounts::custom(plan.launch_counts.clone()).unwrap(), plan.microbatches);
            for (s, st) in r.report.stages.iter().zip(&plan.stages) {
                ensure!(st.mem_device >= s.peak_memory_bytes, "simulated peak {} over {}", s.peak_memory_bytes, st.mem_device);
            }
        }
        plans += 1;
    }
    Ok(format!("{schedules} schedules peak at N_i; {plans} plans within memory under their K"))
}

fn criterion_12() -> Outcome {
    ensure!(load_balance_eta(&[3.0, 3.0, 3.0], &[1.0, 2.0, 5.0]).unwrap() == 1.0, "equal loads");
    ensure!(load_balance_eta(&[2.0, 1.0], &[1.0, 1.0]).unwrap() == 0.75, "[2,1] example");
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..500 {
        let n = rng.gen_range(2..8);
        let td: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..5.0)).collect();
        let peak: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..4.0)).collect();
        let eta = load_balance_eta(&td, &peak).unwrap();
        let max = td.iter().copied().fold(0.0, f64::max);
        let Some(i) = (0..n).find(|&i| td[i] < max) else { continue };
        let mut shrunk = td.clone();
        shrunk[i] *= rng.gen_range(0.0..1.0);
        let after = load_balance_eta(&shrunk, &peak).unwrap();
        ensure!(after < eta, "eta {eta} -> {after} after shrinking device {i}");
    }
    Ok("100% / 75% / strictly decreasing over 500 draws".into())
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 12] = [
        ("steady gap within a microbatch", criterion_1),
        ("K-block steady rate", criterion_2),
        ("h1f1b bubble-free and minimal", criterion_3),
        ("eager 50% communication cap", criterion_4),
        ("case-study launch counts", criterion_5),
        ("case-study plan reproduction", criterion_6),
        ("case-study speedup", criterion_7),
        ("DP equals brute force", criterion_8),
        ("pruning soundness", criterion_9),
        ("zero-redundant profiling", criterion_10),
        ("peak memory accounting", criterion_11),
        ("load balance metric", criterion_12),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
