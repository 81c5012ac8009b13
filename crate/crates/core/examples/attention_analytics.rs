//! Layer similarity, visual attention share and top-50% overlap over a
//! recorded generation, written as CSV under `target/analytics`.
//!
//! cargo run --example attention_analytics

use std::path::Path;

use vistrim::annealing::AttenuationSpec;
use vistrim::cli::{analyze, write_artifacts, AnalyzeOptions, AttentionDump};
use vistrim::{GenerateOptions, Model, ModelConfig, Policies, Seed};

fn main() -> vistrim::Result<()> {
    let model = Model::new(ModelConfig::toy())?;
    let prompt = model.build_prompt(3, 20, 5, Seed(3))?;
    let policies = Policies {
        attenuation: AttenuationSpec::cosine(10.0),
        ..Policies::none()
    };
    let opts = GenerateOptions {
        max_new_tokens: 12,
        record_attention: true,
    };
    let trace = model.generate(&prompt, &policies, &opts)?;
    let dump = AttentionDump {
        num_layers: model.num_layers(),
        steps: trace.steps.len(),
        records: trace.records,
    };
    let (report, artifacts) = analyze(&dump, &AnalyzeOptions::default())?;

    println!("overlap at layer {} (k={}):", report.overlap_layer, report.overlap_k);
    for (s, o) in report.overlap.iter().enumerate() {
        let share: f64 = report.visual_share[s].iter().sum::<f64>() / dump.num_layers as f64;
        println!("  step {s:>2}  overlap {o:.3}  mean visual share {share:.4}");
    }
    println!("lazy candidates at {}: {:?}", report.threshold, report.lazy_candidates);

    let out = Path::new("target/analytics");
    for p in write_artifacts(out, &artifacts)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
