//! Plans 128 equal layers on a V100 host plus two A100 hosts joined by a
//! slow link, with and without a collective-communication cost.
//!
//! cargo run --release --example plan_case_study -- [microbatches]

use std::path::Path;

use hetpipe::cli::plan_report;
use hetpipe::cluster::{ClusterSpec, MeshShape, Submesh};
use hetpipe::model_graph::{build_layers, ModelSpec};
use hetpipe::planner::{end_to_end_latency, search, verify_plan, PlanContext, SearchOptions};
use hetpipe::profiler::{analytic_profile, boundary_costs, build_store, LayerSpan, ProfilerConfig, StageCandidate};
use hetpipe::scheduler::DEFAULT_EPSILON;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let b: usize = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(128);
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data");
    let ops = ModelSpec::load(data.join("case_study_model.toml"))?.operators()?;
    let layers = build_layers(&ops, 1, 1)?;
    let cluster = ClusterSpec::load(data.join("case_study_cluster.toml"))?;

    for alpha in [0.0, 0.5] {
        let cfg = ProfilerConfig {
            alpha,
            ..ProfilerConfig::default()
        };
        let store = build_store(&layers, &cluster, &cfg, &[])?;
        let costs = boundary_costs(&layers, &cluster);
        let ctx = PlanContext {
            store: &store,
            costs: &costs,
            cluster: &cluster,
            microbatches: b,
            epsilon: DEFAULT_EPSILON,
        };
        let plan = search(&ctx, &SearchOptions::default())?;
        verify_plan(&plan, &cluster, layers.len()).map_err(|e| e.join("; "))?;
        println!("== collective overhead alpha = {alpha}");
        print!("{}", plan_report(&plan, &store.stats));

        // A hand-written even split at coarse granularity, for reference.
        let v = Submesh { mesh: 0, shape: MeshShape::new(1, 2) };
        let a = Submesh { mesh: 1, shape: MeshShape::new(1, 2) };
        let t: Vec<f64> = [(0, 32, v), (32, 80, a), (80, 128, a)]
            .iter()
            .map(|&(x, y, s)| analytic_profile(&StageCandidate::from_layers(&layers, LayerSpan::new(x, y)), &s, &cluster, &cfg).t)
            .collect();
        let c = [costs.get(31, 0, 1), costs.get(79, 1, 1)];
        let coarse = end_to_end_latency(&t, &c, b)?;
        println!(
            "coarse split 1-32 | 33-80 | 81-128: {coarse:.2} s, planned plan is {:.2}x faster\n",
            coarse / plan.predicted_latency
        );
    }
    Ok(())
}
