//! Classic, eager and heterogeneity-aware 1F1B on one two-stage pipeline as
//! the link slows from free to a full stage time.
//!
//! cargo run --example compare_schedules

use hetpipe::pipeline_sim::{analyze, build_dag, simulate, PipelineTimes};
use hetpipe::scheduler::{build_program, classic_counts, eager_counts, h1f1b_counts, LaunchCounts, DEFAULT_EPSILON};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let b = 32;
    println!("c/t    classic        eager          h1f1b          (makespan, steady bubble)");
    for ratio in [0.0, 0.1, 0.3, 0.5, 0.6, 0.8, 1.0] {
        let times = PipelineTimes::uniform(2, 1.0, 1.0, 2.0 * ratio);
        let h = h1f1b_counts(&times.stage_times(), &times.c, DEFAULT_EPSILON)?;
        let mut row = format!("{ratio:<5}");
        for counts in [classic_counts(2), eager_counts(2), h] {
            row += &format!("  {}", cell(&times, &counts, b)?);
        }
        println!("{row}");
    }
    println!("\nEager runs out of slack once the transfer exceeds half a stage; h1f1b adds a third warm-up forward there.");
    Ok(())
}

fn cell(times: &PipelineTimes, counts: &LaunchCounts, b: usize) -> Result<String, Box<dyn std::error::Error>> {
    let dag = build_dag(times, &build_program(counts, b)?)?;
    let report = analyze(&dag, &simulate(&dag)?);
    let bubble = report.stages.iter().map(|s| s.steady_bubble).fold(0.0, f64::max);
    Ok(format!("{:>6.1} {:>5.1} N{}", report.makespan, bubble, counts.counts[0]))
}
