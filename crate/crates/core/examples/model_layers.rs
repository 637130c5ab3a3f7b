//! Operator sequence to planner layers: repeated-module detection and
//! grouping of a synthetic GPT.
//!
//! cargo run --example model_layers -- [blocks] [layers_per_module]

use hetpipe::model_graph::{build_layers, detect_modules, generate_gpt_sequence, GptConfig, ModuleKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let blocks = args.next().transpose()?.unwrap_or(4);
    let per_module = args.next().transpose()?.unwrap_or(2);

    let cfg = GptConfig {
        num_blocks: blocks,
        hidden_dim: 2048,
        seq_len: 1024,
        mb_size: 4,
        vocab: 32000,
    };
    let ops = generate_gpt_sequence(&cfg)?;
    println!(
        "{} operators, {:.3} TFLOP per microbatch forward, {:.2}B parameters",
        ops.len(),
        ops.total_flops() / 1e12,
        ops.total_param_bytes() / 2.0 / 1e9
    );

    let modules = detect_modules(&ops, 2);
    let repeated = modules.iter().filter(|m| matches!(m.kind, ModuleKind::Repeated { .. })).count();
    println!("{} modules, {repeated} repeated", modules.len());
    for m in &modules {
        let tags: Vec<&str> = ops.ops()[m.start..m.end].iter().map(|o| o.shape_tag.as_str()).collect();
        let kind = match m.kind {
            ModuleKind::Repeated { group, occurrence } => format!("group {group} #{occurrence}"),
            ModuleKind::NonRepeated => "unique".into(),
        };
        println!("  ops {:>3}..{:<3} {kind:<12} {}", m.start, m.end, tags.join(" "));
    }

    let layers = build_layers(&ops, 2, per_module)?;
    println!("\n{} layers at {per_module} per repeated module", layers.len());
    for (i, l) in layers.layers.iter().enumerate() {
        println!(
            "  layer {:>2}  ops {:>3}..{:<3} {:>8.3} TFLOP  out {:>6.1} MB  {}",
            i + 1,
            l.op_start,
            l.op_end,
            l.flops / 1e12,
            l.boundary_bytes / 1e6,
            l.signature
        );
    }
    Ok(())
}
