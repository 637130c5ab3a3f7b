//! Zero-redundant profiling: repeated transformer blocks share profiles, so
//! timing work stays flat while the candidate count grows with depth.
//!
//! cargo run --release --example dedup_profiling

use hetpipe::cluster::{ClusterSpec, DeviceMesh, MeshShape, Submesh};
use hetpipe::model_graph::{build_layers, generate_gpt_sequence, GptConfig};
use hetpipe::planner::{search, PlanContext, SearchOptions};
use hetpipe::profiler::{boundary_costs, build_store, parse_profile_overrides, LayerSpan, ProfilerConfig};
use hetpipe::scheduler::DEFAULT_EPSILON;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mesh = |id: &str, per_host: u32, tflops: f64| DeviceMesh {
        id: id.into(),
        hosts: 1,
        devices_per_host: per_host,
        peak_flops: tflops * 1e12,
        mem_device: 80e9,
        intra_host_bw: 3e11,
        inter_host_bw: 2.5e10,
    };
    let cluster = ClusterSpec::new(vec![mesh("fast", 4, 312.0), mesh("slow", 2, 125.0)], 1.25e9)?;

    println!("blocks layers candidates  computed(dedup)  computed(plain)  aliased");
    for blocks in [2, 4, 8, 16, 32] {
        let ops = generate_gpt_sequence(&GptConfig {
            num_blocks: blocks,
            hidden_dim: 2048,
            seq_len: 1024,
            mb_size: 2,
            vocab: 32000,
        })?;
        let layers = build_layers(&ops, 2, 2)?;
        let on = ProfilerConfig::default();
        let off = ProfilerConfig { dedup: false, ..on.clone() };
        let dedup = build_store(&layers, &cluster, &on, &[])?;
        let plain = build_store(&layers, &cluster, &off, &[])?;
        println!(
            "{blocks:>6} {:>6} {:>10} {:>16} {:>16} {:>8}",
            layers.len(),
            dedup.stats.candidates,
            dedup.stats.canonical,
            plain.stats.canonical,
            dedup.stats.aliased
        );
    }

    // A measured override replaces one canonical profile, hence every alias.
    let ops = generate_gpt_sequence(&GptConfig {
        num_blocks: 8,
        hidden_dim: 2048,
        seq_len: 1024,
        mb_size: 2,
        vocab: 32000,
    })?;
    let layers = build_layers(&ops, 2, 2)?;
    let cfg = ProfilerConfig::default();
    let base = build_store(&layers, &cluster, &cfg, &[])?;

    // Two whole blocks on half of the fast host, measured 30% faster than modelled.
    let span = LayerSpan::new(2, 6);
    let sub = Submesh { mesh: 0, shape: MeshShape::new(1, 2) };
    let modelled = base.lookup_submesh(span, &sub).ok_or("span pruned")?.t;
    let sig = base.signature(span);
    let measured = parse_profile_overrides(&format!(
        "[[profile]]\nsignature = \"{sig}\"\nmesh = \"fast\"\nshape = [1, 2]\nt = {}\n",
        0.7 * modelled
    ))?;
    let store = build_store(&layers, &cluster, &cfg, &measured)?;
    println!("\noverride of `{sig}` on fast(1,2): {modelled:.5} s -> {:.5} s", 0.7 * modelled);
    for start in 0..=layers.len() - span.len() {
        let alias = LayerSpan::new(start, start + span.len());
        if store.signature(alias) == sig {
            let t = store.lookup_submesh(alias, &sub).map(|p| p.t).ok_or("alias pruned")?;
            println!("  layers {alias}: {t:.5} s");
        }
    }

    let costs = boundary_costs(&layers, &cluster);
    let ctx = PlanContext {
        store: &store,
        costs: &costs,
        cluster: &cluster,
        microbatches: 64,
        epsilon: DEFAULT_EPSILON,
    };
    let plan = search(&ctx, &SearchOptions::default())?;
    println!("plan: {} stages, T* = {:.3} s", plan.num_stages(), plan.predicted_latency);
    Ok(())
}
