//! Builds the dependency DAG of a 1F1B schedule, runs the ASAP sweep and
//! writes a browser-viewable trace (chrome://tracing or Perfetto).
//!
//! cargo run --example simulate_pipeline -- [out_dir]

use std::path::PathBuf;

use hetpipe::pipeline_sim::{analyze, build_dag, chrome_trace, simulate, steady_state_rate, PipelineTimes};
use hetpipe::scheduler::{build_program, classic_counts, h1f1b_counts, DEFAULT_EPSILON};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hetpipe-examples"));
    std::fs::create_dir_all(&out)?;

    // Three stages, the first link costs 70% of a stage.
    let mut times = PipelineTimes::uniform(3, 1.0, 2.0, 0.0);
    times.c = vec![2.1, 0.3];
    times.mem_a = vec![1.5e9; 3];
    times.mem_p = vec![20e9; 3];
    let b = 48;

    let h1f1b = h1f1b_counts(&times.stage_times(), &times.c, DEFAULT_EPSILON)?;
    for counts in [classic_counts(3), h1f1b] {
        let program = build_program(&counts, b)?;
        let dag = build_dag(&times, &program)?;
        let trace = simulate(&dag)?;
        let report = analyze(&dag, &trace);
        let rate = steady_state_rate(&dag, &trace, 0)?;

        println!("{} N = {:?}: makespan {:.2}, steady rate {:.3}/microbatch", counts.kind, counts.counts, report.makespan, rate);
        for (s, st) in report.stages.iter().enumerate() {
            println!(
                "  stage {}: busy {:>6.2}  bubble {:>5.1}%  steady bubble {:>5.2}  peak {} in flight, {:.1} GB",
                s + 1,
                st.busy,
                100.0 * st.bubble_fraction,
                st.steady_bubble,
                st.peak_in_flight,
                st.peak_memory_bytes / 1e9
            );
        }
        for (i, l) in report.links.iter().enumerate() {
            println!("  link {}: {:.0}% of transfers hidden behind compute", i + 1, 100.0 * l.overlap_ratio);
        }

        let critical: Vec<String> = {
            let mut path = Vec::new();
            let mut v = Some(dag.sink());
            while let Some(u) = v {
                path.push(dag.nodes[u].label());
                v = trace.tight_pred[u];
            }
            path.into_iter().rev().take(6).collect()
        };
        println!("  critical path starts {}", critical.join(" -> "));

        let path = out.join(format!("trace_{}.json", counts.kind));
        std::fs::write(&path, serde_json::to_string(&chrome_trace(&dag, &trace))?)?;
        println!("  wrote {}\n", path.display());
    }
    Ok(())
}
