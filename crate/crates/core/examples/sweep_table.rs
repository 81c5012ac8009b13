//! Stride sweep at a fixed 1% final keep fraction, mirroring the
//! stride/ratio trade-off table.
//!
//! cargo run --example sweep_table

use vistrim::cli::{sweep, SweepConfig};

fn main() -> vistrim::Result<()> {
    let cfg = SweepConfig::default();
    let out = sweep(&cfg)?;
    println!("{:>3} {:>8} {:>6} {:>9} {:>12} {:>8}", "S", "R", "C", "prefill", "peak_kv", "status");
    for r in &out.rows {
        println!(
            "{:>3} {:>8} {:>6} {:>8.2}T {:>12} {:>8}",
            r.stride,
            r.step_ratio.map_or("-".to_string(), |x| format!("{:.2}%", x.as_f64() * 100.0)),
            r.keep_fraction.map_or("-".to_string(), |x| format!("{:.0}%", x.as_f64() * 100.0)),
            r.prefill_flops.unwrap_or(0) as f64 / 1e12,
            r.peak_kv_bytes.map_or("-".to_string(), |b| format!("{b:.3e}")),
            r.status
        );
    }
    Ok(())
}
