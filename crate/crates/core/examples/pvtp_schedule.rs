//! Per-layer visual keep counts for progressive pruning, plus the two
//! baselines.
//!
//! cargo run --example pvtp_schedule

use vistrim::pruning::{final_keep_fraction, schedule_keep_counts, step_ratio_for_target, Fraction, PruneSchedule};

fn main() -> vistrim::Result<()> {
    let layers = 32;
    let n_visual = 576;
    let first: Fraction = "50%".parse()?;
    let target: Fraction = "1%".parse()?;

    println!("stride  step_ratio  final_keep  counts");
    for stride in [1, 2, 4, 7, 14, 28] {
        let ratio = step_ratio_for_target(layers, 3, stride, first, target)?;
        let schedule = PruneSchedule::pvtp(stride, ratio, first);
        let counts = schedule_keep_counts(layers, &schedule, n_visual)?;
        println!(
            "{stride:>6}  {:>10}  {:>10}  {counts:?}",
            ratio.to_string(),
            final_keep_fraction(layers, &schedule).to_string()
        );
    }

    let fastv = PruneSchedule::fastv_like(2, "50%".parse()?);
    let vtw = PruneSchedule::vtw_like(None);
    println!("fastv_like  {:?}", schedule_keep_counts(layers, &fastv, n_visual)?);
    println!("vtw_like    {:?}", schedule_keep_counts(layers, &vtw, n_visual)?);
    Ok(())
}
