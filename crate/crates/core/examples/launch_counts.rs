//! Warm-up launch counts under classic, eager and heterogeneity-aware 1F1B,
//! and the per-stage operation order they produce.
//!
//! cargo run --example launch_counts

use hetpipe::scheduler::{
    analytic_delta, build_program, classic_counts, delta_for, eager_counts, h1f1b_counts, DEFAULT_EPSILON,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // A slow first stage behind a slow link, then two fast stages on one fabric.
    let t = [1.65, 1.0, 1.0];
    let c = [1.2, 0.004];
    let t_max = 1.65;

    println!("boundary  c/t_max  bucketed delta  closed-form delta");
    for (i, &ci) in c.iter().enumerate() {
        println!(
            "{:>8}  {:>7.3}  {:>14}  {:>17}",
            i + 1,
            ci / t_max,
            delta_for(ci, t_max, DEFAULT_EPSILON),
            analytic_delta(ci, t_max)
        );
    }

    let h = h1f1b_counts(&t, &c, DEFAULT_EPSILON)?;
    for counts in [classic_counts(3), eager_counts(3), h.clone()] {
        println!("{:<8} N = {:?}", counts.kind.to_string(), counts.counts);
    }
    println!("h1f1b launches more than classic on stages {:?}", h.stages_exceeding(&classic_counts(3)));

    let program = build_program(&h, 8)?;
    println!("\nh1f1b order for 8 microbatches:");
    for (s, ops) in program.stages.iter().enumerate() {
        let ops: Vec<String> = ops.iter().map(|op| op.to_string()).collect();
        println!("  stage {}: {}", s + 1, ops.join(" "));
    }
    Ok(())
}
