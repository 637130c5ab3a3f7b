//! Capacity-weighted load balance of device busy times.
//!
//! cargo run --example load_balance

use hetpipe::metrics::load_balance_eta;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Two V100s at 125 TFLOP/s and four A100s at 312 TFLOP/s.
    let peak = [125.0, 125.0, 312.0, 312.0, 312.0, 312.0];
    let cases: [(&str, [f64; 6]); 3] = [
        ("equal layers per device", [2.50, 2.50, 1.00, 1.00, 1.00, 1.00]),
        ("coarse 2/3/3 split", [1.66, 1.66, 1.00, 1.00, 1.00, 1.00]),
        ("fine 22/53/53 split", [1.14, 1.14, 1.10, 1.10, 1.10, 1.10]),
    ];
    for (name, td) in cases {
        println!("{name:<26} eta = {:>5.1}%", 100.0 * load_balance_eta(&td, &peak)?);
    }
    Ok(())
}
