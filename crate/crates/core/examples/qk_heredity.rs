//! Lazy layers reuse the previous attention matrix. Their recorded rows
//! match the source exactly and they skip the query/key work.
//!
//! cargo run --example qk_heredity

use vistrim::analytics::similarity_matrix;
use vistrim::heredity::HereditySpec;
use vistrim::{GenerateOptions, Model, ModelConfig, Policies, Seed};

fn main() -> vistrim::Result<()> {
    let model = Model::new(ModelConfig::toy())?;
    let prompt = model.build_prompt(3, 20, 5, Seed(11))?;
    let opts = GenerateOptions {
        max_new_tokens: 6,
        record_attention: true,
    };
    let base = model.generate(&prompt, &Policies::none(), &opts)?;
    let lazy_set: HereditySpec = "5,6".parse()?;
    let lazy = model.generate(
        &prompt,
        &Policies {
            heredity: lazy_set.clone(),
            ..Policies::none()
        },
        &opts,
    )?;

    println!("lazy layers: {lazy_set}");
    println!("ops baseline={} lazy={}", base.total_ops(), lazy.total_ops());
    println!("tokens baseline={:?}", base.tokens);
    println!("tokens lazy    ={:?}", lazy.tokens);

    let sim = similarity_matrix(&lazy.records_at(0));
    for l in 1..sim.size {
        let v = sim.get(l, l - 1).map_or("-".to_string(), |c| format!("{c:.6}"));
        println!("sim(l{l}, l{}) = {v}", l - 1);
    }
    Ok(())
}
