//! Greedy generation on the seeded toy model under each pruning policy,
//! with and without cache annealing.
//!
//! cargo run --example generate_with_pruning

use vistrim::annealing::AttenuationSpec;
use vistrim::pruning::{Fraction, PruneSchedule};
use vistrim::{GenerateOptions, Model, ModelConfig, Policies, Seed};

fn main() -> vistrim::Result<()> {
    let model = Model::new(ModelConfig::toy())?;
    let prompt = model.build_prompt(3, 20, 5, Seed(7))?;
    let opts = GenerateOptions {
        max_new_tokens: 12,
        record_attention: false,
    };

    let mut pvtp = PruneSchedule::pvtp(2, Fraction::from_micros(100_000), Fraction::from_micros(300_000));
    pvtp.start_layer = 3;
    let schedules = [
        PruneSchedule::none(),
        pvtp,
        PruneSchedule::fastv_like(2, Fraction::from_micros(500_000)),
        PruneSchedule::vtw_like(None),
    ];
    for schedule in schedules {
        for attenuation in [AttenuationSpec::none(), AttenuationSpec::cosine(8.0)] {
            let policies = Policies {
                schedule: schedule.clone(),
                attenuation,
                ..Policies::none()
            };
            let trace = model.generate(&prompt, &policies, &opts)?;
            let last = trace.steps.last().expect("at least one step");
            println!(
                "{:<18} ops={:>9} tokens={:?}",
                policies.label(),
                trace.total_ops(),
                trace.tokens
            );
            println!("{:<18} prefill visual {:?} -> final {:?}", "", trace.keep_counts, last.visual_cache);
        }
    }
    Ok(())
}
