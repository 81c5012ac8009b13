//! Analytic FLOPs and KV-cache bytes at 7B-class dimensions, with the
//! text-token count calibrated against a 9.38T baseline prefill.
//!
//! cargo run --example cost_model

use vistrim::annealing::AttenuationSpec;
use vistrim::cost::{calibrate_text_tokens, pipeline_flops, CostConfig};
use vistrim::heredity::HereditySpec;
use vistrim::pruning::PruneSchedule;

fn main() -> vistrim::Result<()> {
    let defaults = CostConfig::default();
    let n_text = calibrate_text_tokens(
        defaults.num_layers,
        defaults.model_dim,
        defaults.mlp_dim,
        defaults.n_visual,
        9.38e12,
    )?;
    let cfg = CostConfig {
        n_text: n_text.round() as usize,
        ..defaults
    };
    println!("calibrated n_text = {n_text:.2} -> {}", cfg.n_text);

    let headline = PruneSchedule::pvtp(7, "12.25%".parse()?, "50%".parse()?);
    let runs = [
        ("baseline", PruneSchedule::none(), AttenuationSpec::none(), HereditySpec::none()),
        ("pvtp", headline.clone(), AttenuationSpec::none(), HereditySpec::none()),
        ("pvtp+cosine", headline.clone(), AttenuationSpec::cosine(50.0), HereditySpec::none()),
        ("pvtp+cosine+lazy", headline, AttenuationSpec::cosine(50.0), "25,26,27".parse()?),
    ];
    println!("{:<18} {:>12} {:>14} {:>14}", "policy", "prefill", "total(64 tok)", "peak kv bytes");
    for (name, schedule, attenuation, heredity) in runs {
        let r = pipeline_flops(&cfg, &schedule, &heredity, &attenuation, 64)?;
        println!(
            "{name:<18} {:>11.3}T {:>13.3}T {:>14.4e}",
            r.prefill_flops as f64 / 1e12,
            r.total_flops as f64 / 1e12,
            r.peak_kv_bytes as f64
        );
    }
    Ok(())
}
