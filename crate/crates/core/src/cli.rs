//! Workflows behind the command-line front end: plan, simulate, compare and
//! profile dump. Each returns structured results plus a human report; writing
//! files is opt-in through an output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterError, ClusterSpec};
use crate::model_graph::{build_layers, GptConfig, LayerSequence, ModelError, ModelSpec};
use crate::pipeline_sim::{analyze, build_dag, chrome_trace, simulate, steady_state_rate, trace_records, SimError, SimReport};
use crate::planner::{search, verify_plan, ParallelPlan, PlanContext, PlanError, SearchOptions};
use crate::profiler::{boundary_costs, build_store, import_profiles, ProfileError, ProfileRow, ProfilerConfig, StoreStats};
use crate::scheduler::{
    build_program, classic_counts, eager_counts, h1f1b_counts_bounded, LaunchCounts, ScheduleError, ScheduleKind,
    DEFAULT_EPSILON,
};

/// Name of the environment variable that overrides the search worker count.
pub const WORKERS_ENV: &str = "HETPIPE_WORKERS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("plan file {path}: {reason}")]
    BadPlan { path: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    /// 2 when no plan satisfies the constraints, 1 for every other failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Plan(PlanError::Infeasible(_))
            | CliError::Plan(PlanError::NoCandidates)
            | CliError::Profile(ProfileError::NoFeasible(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelSource {
    File(PathBuf),
    Gpt(GptConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSource,
    pub cluster: PathBuf,
    pub microbatches: usize,
    pub scheduler: ScheduleKind,
    pub epsilon: f64,
    pub profiler: ProfilerConfig,
    /// Minimum heavy operators for a repeated module.
    pub z: usize,
    pub layers_per_module: usize,
    pub profile_overrides: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Search threads; `None` uses the global pool.
    pub workers: Option<usize>,
    pub search: SearchOptions,
}

impl RunConfig {
    pub fn new(model: ModelSource, cluster: impl Into<PathBuf>, microbatches: usize) -> Self {
        Self {
            model,
            cluster: cluster.into(),
            microbatches,
            scheduler: ScheduleKind::H1f1b,
            epsilon: DEFAULT_EPSILON,
            profiler: ProfilerConfig::default(),
            z: 1,
            layers_per_module: 1,
            profile_overrides: None,
            out_dir: None,
            workers: None,
            search: SearchOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.microbatches == 0 {
            return bad("microbatches must be >= 1".into());
        }
        if !(self.epsilon >= 0.0 && self.epsilon < 0.5) {
            return bad(format!("epsilon must lie in [0, 0.5), got {}", self.epsilon));
        }
        if self.z == 0 || self.layers_per_module == 0 {
            return bad("z and layers_per_module must be >= 1".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be >= 1".into());
        }
        for path in std::iter::once(&self.cluster)
            .chain(self.profile_overrides.iter())
            .chain(match &self.model {
                ModelSource::File(p) => Some(p),
                ModelSource::Gpt(_) => None,
            })
        {
            if !path.exists() {
                return bad(format!("{} does not exist", path.display()));
            }
        }
        self.profiler.validate()?;
        Ok(())
    }
}

/// Inputs shared by `plan` and `profile-dump`.
pub struct Inputs {
    pub layers: LayerSequence,
    pub cluster: ClusterSpec,
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs, CliError> {
    cfg.validate()?;
    let ops = match &cfg.model {
        ModelSource::File(path) => ModelSpec::load(path)?.operators()?,
        ModelSource::Gpt(gpt) => ModelSpec::Gpt(*gpt).operators()?,
    };
    let layers = build_layers(&ops, cfg.z, cfg.layers_per_module)?;
    let cluster = ClusterSpec::load(&cfg.cluster)?;
    Ok(Inputs { layers, cluster })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let io = |source| CliError::Io {
        path: dir.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path)
}

pub struct PlanOutput {
    pub plan: ParallelPlan,
    pub report: String,
    pub written: Vec<PathBuf>,
}

pub fn cmd_plan(cfg: &RunConfig) -> Result<PlanOutput, CliError> {
    let inputs = load_inputs(cfg)?;
    let overrides = match &cfg.profile_overrides {
        Some(path) => import_profiles(path)?,
        None => Vec::new(),
    };
    let store = build_store(&inputs.layers, &inputs.cluster, &cfg.profiler, &overrides)?;
    let costs = boundary_costs(&inputs.layers, &inputs.cluster);
    let ctx = PlanContext {
        store: &store,
        costs: &costs,
        cluster: &inputs.cluster,
        microbatches: cfg.microbatches,
        epsilon: cfg.epsilon,
    };
    let plan = match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?
            .install(|| search(&ctx, &cfg.search))?,
        None => search(&ctx, &cfg.search)?,
    };
    if let Err(errs) = verify_plan(&plan, &inputs.cluster, inputs.layers.len()) {
        return Err(CliError::BadPlan {
            path: "<search result>".into(),
            reason: errs.join("; "),
        });
    }
    let report = plan_report(&plan, &store.stats);
    let mut written = Vec::new();
    if let Some(dir) = &cfg.out_dir {
        written.push(write_file(dir, "plan.json", &plan.to_json())?);
        written.push(write_file(dir, "plan_report.txt", &report)?);
    }
    Ok(PlanOutput { plan, report, written })
}

pub fn plan_report(plan: &ParallelPlan, store: &StoreStats) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "stages: {}   microbatches: {}", plan.num_stages(), plan.microbatches);
    let _ = writeln!(out, "{:<10} {:<16} {:>12} {:>12} {:>4} {:>4}", "layers", "submesh", "t (s)", "c (s)", "K", "N");
    for (i, st) in plan.stages.iter().enumerate() {
        let c = plan.c.get(i).copied().unwrap_or(0.0);
        let _ = writeln!(
            out,
            "{:<10} {:<16} {:>12.6} {:>12.6} {:>4} {:>4}",
            format!("{}-{}", st.first_layer, st.last_layer),
            format!("{}{}", st.mesh, st.shape),
            st.t,
            c,
            plan.launch_bounds[i],
            plan.launch_counts[i]
        );
    }
    let _ = writeln!(out, "t_max: {:.6} s", plan.t_max);
    let _ = writeln!(out, "predicted latency T*: {:.6} s", plan.predicted_latency);
    let _ = writeln!(out, "load balance eta: {:.2}%", 100.0 * plan.eta);
    let _ = writeln!(
        out,
        "profiles: {} candidates, {} computed, {} aliased, {} pruned (OOM), {} pruned (imbalance)",
        store.candidates, store.canonical, store.aliased, store.pruned_oom, store.pruned_imbalance
    );
    if let Some(s) = &plan.search {
        let _ = writeln!(
            out,
            "search: {} of {} t_max candidates evaluated, {} pruned below t_S, {} above t_E, {} batches, {} DP states, {} transitions, {:.3} s",
            s.candidates_evaluated,
            s.candidates_total,
            s.pruned_below_t_s,
            s.pruned_above_t_e,
            s.batches,
            s.dp_states,
            s.dp_transitions,
            s.wall_time_secs
        );
    }
    out
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<ParallelPlan, CliError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let plan = ParallelPlan::from_json(&text).map_err(|e| CliError::BadPlan {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if plan.stages.is_empty() || plan.c.len() + 1 != plan.stages.len() {
        return Err(CliError::BadPlan {
            path: path.display().to_string(),
            reason: format!("{} stages with {} boundary costs", plan.stages.len(), plan.c.len()),
        });
    }
    Ok(plan)
}

/// Warm-up counts of `kind` for a plan; the heterogeneity-aware rule is
/// evaluated against the plan's own latency bound.
pub fn schedule_counts(plan: &ParallelPlan, kind: ScheduleKind, epsilon: f64) -> Result<LaunchCounts, CliError> {
    let s = plan.num_stages();
    Ok(match kind {
        ScheduleKind::Classic => classic_counts(s),
        ScheduleKind::Eager => eager_counts(s),
        ScheduleKind::H1f1b => h1f1b_counts_bounded(s, plan.t_max, &plan.c, epsilon)?,
        ScheduleKind::Custom => LaunchCounts::custom(plan.launch_counts.clone())?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateOutput {
    pub kind: ScheduleKind,
    pub counts: Vec<usize>,
    pub report: SimReport,
    /// Stage-1 seconds per microbatch in the steady window, when long enough.
    pub steady_rate: Option<f64>,
    pub predicted_latency: f64,
}

pub fn simulate_plan(
    plan: &ParallelPlan,
    microbatches: usize,
    kind: ScheduleKind,
    epsilon: f64,
    out_dir: Option<&Path>,
) -> Result<(SimulateOutput, Vec<PathBuf>), CliError> {
    let counts = schedule_counts(plan, kind, epsilon)?;
    let program = build_program(&counts, microbatches)?;
    let dag = build_dag(&plan.times(), &program)?;
    let trace = simulate(&dag)?;
    let report = analyze(&dag, &trace);
    let out = SimulateOutput {
        kind,
        counts: counts.counts,
        steady_rate: steady_state_rate(&dag, &trace, 0).ok(),
        predicted_latency: plan.suffix_latency + (microbatches as f64 - 1.0) * plan.t_max,
        report,
    };
    let mut written = Vec::new();
    if let Some(dir) = out_dir {
        let chrome = serde_json::to_string(&chrome_trace(&dag, &trace)).expect("trace serializes");
        written.push(write_file(dir, &format!("trace_{kind}.json"), &chrome)?);
        let records = serde_json::to_string_pretty(&trace_records(&dag, &trace)).expect("records serialize");
        written.push(write_file(dir, &format!("trace_{kind}_nodes.json"), &records)?);
        let report = serde_json::to_string_pretty(&out).expect("report serializes");
        written.push(write_file(dir, &format!("sim_{kind}.json"), &report)?);
    }
    Ok((out, written))
}

pub fn cmd_simulate(
    plan_path: impl AsRef<Path>,
    microbatches: Option<usize>,
    kind: ScheduleKind,
    epsilon: f64,
    out_dir: Option<&Path>,
) -> Result<(SimulateOutput, String, Vec<PathBuf>), CliError> {
    let plan = load_plan(plan_path)?;
    let b = microbatches.unwrap_or(plan.microbatches);
    let (out, written) = simulate_plan(&plan, b, kind, epsilon, out_dir)?;
    let text = simulate_report(&out);
    Ok((out, text, written))
}

pub fn simulate_report(out: &SimulateOutput) -> String {
    let mut text = String::new();
    let _ = writeln!(text, "scheduler: {}   warm-up counts: {:?}", out.kind, out.counts);
    let _ = writeln!(text, "makespan: {:.6} s   (closed form {:.6} s)", out.report.makespan, out.predicted_latency);
    if let Some(rate) = out.steady_rate {
        let _ = writeln!(text, "steady rate (stage 1): {rate:.6} s/microbatch");
    }
    let _ = writeln!(
        text,
        "{:<6} {:>12} {:>12} {:>8} {:>12} {:>6} {:>14}",
        "stage", "busy (s)", "bubble (s)", "bubble%", "steady (s)", "peak", "peak mem (B)"
    );
    for (i, s) in out.report.stages.iter().enumerate() {
        let _ = writeln!(
            text,
            "{:<6} {:>12.6} {:>12.6} {:>7.2}% {:>12.6} {:>6} {:>14.4e}",
            i + 1,
            s.busy,
            s.bubble,
            100.0 * s.bubble_fraction,
            s.steady_bubble,
            s.peak_in_flight,
            s.peak_memory_bytes
        );
    }
    for (i, l) in out.report.links.iter().enumerate() {
        let _ = writeln!(
            text,
            "link {}-{}: comm {:.6} s each way, overlap {:.2}%",
            i + 1,
            i + 2,
            l.forward_comm,
            100.0 * l.overlap_ratio
        );
    }
    text
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub kind: ScheduleKind,
    pub counts: Vec<usize>,
    pub makespan: Option<f64>,
    pub steady_rate: Option<f64>,
    pub peak_memory: Vec<f64>,
    pub min_overlap: Option<f64>,
    pub error: Option<String>,
}

pub fn cmd_compare(
    plan: &ParallelPlan,
    kinds: &[ScheduleKind],
    microbatches: usize,
    epsilon: f64,
) -> Result<(Vec<CompareRow>, String), CliError> {
    if kinds.len() < 2 {
        return Err(CliError::Config("compare needs at least two schedulers".into()));
    }
    let rows: Vec<CompareRow> = kinds
        .iter()
        .map(|&kind| match simulate_plan(plan, microbatches, kind, epsilon, None) {
            Ok((out, _)) => CompareRow {
                kind,
                counts: out.counts,
                makespan: Some(out.report.makespan),
                steady_rate: out.steady_rate,
                peak_memory: out.report.stages.iter().map(|s| s.peak_memory_bytes).collect(),
                min_overlap: out.report.links.iter().map(|l| l.overlap_ratio).reduce(f64::min),
                error: None,
            },
            Err(e) => CompareRow {
                kind,
                counts: schedule_counts(plan, kind, epsilon).map(|c| c.counts).unwrap_or_default(),
                makespan: None,
                steady_rate: None,
                peak_memory: Vec::new(),
                min_overlap: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let mut text = String::new();
    let _ = writeln!(
        text,
        "{:<8} {:<18} {:>14} {:>14} {:>16} {:>9}",
        "kind", "counts", "makespan (s)", "rate (s/mb)", "max peak mem (B)", "overlap"
    );
    let opt = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |x| format!("{x:.digits$}"));
    for r in &rows {
        if let Some(err) = &r.error {
            let _ = writeln!(text, "{:<8} {}", r.kind.to_string(), err);
            continue;
        }
        let _ = writeln!(
            text,
            "{:<8} {:<18} {:>14} {:>14} {:>16.4e} {:>9}",
            r.kind.to_string(),
            format!("{:?}", r.counts),
            opt(r.makespan, 6),
            opt(r.steady_rate, 6),
            r.peak_memory.iter().copied().fold(0.0, f64::max),
            r.min_overlap.map_or("-".into(), |o| format!("{:.1}%", 100.0 * o)),
        );
    }
    Ok((rows, text))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StoreDump {
    pub layers: usize,
    pub stats: StoreStats,
    pub tmax_candidates: usize,
    pub profiles: Vec<ProfileRow>,
}

pub fn profile_dump(cfg: &RunConfig) -> Result<(StoreDump, String), CliError> {
    let inputs = load_inputs(cfg)?;
    let overrides = match &cfg.profile_overrides {
        Some(path) => import_profiles(path)?,
        None => Vec::new(),
    };
    let store = build_store(&inputs.layers, &inputs.cluster, &cfg.profiler, &overrides)?;
    let dump = StoreDump {
        layers: inputs.layers.len(),
        stats: store.stats.clone(),
        tmax_candidates: store.t_values().len(),
        profiles: store.dump(&inputs.cluster),
    };
    let s = &dump.stats;
    let text = format!(
        "layers: {}\ncandidates: {}\ncanonical: {}\naliased: {}\npruned-oom: {}\npruned-imbalance: {}\noverrides applied: {}\nt_max candidates: {}\n",
        dump.layers,
        s.candidates,
        s.canonical,
        s.aliased,
        s.pruned_oom,
        s.pruned_imbalance,
        s.overrides_applied,
        dump.tmax_candidates
    );
    if let Some(dir) = &cfg.out_dir {
        write_file(dir, "profiles.json", &serde_json::to_string_pretty(&dump).expect("dump serializes"))?;
    }
    Ok((dump, text))
}
