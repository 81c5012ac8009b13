//! Retention curves of the three attenuation laws and the cache sizes they
//! produce from a 288-entry prefill cache.
//!
//! cargo run --example annealing_curves

use vistrim::annealing::{beta, target_count, AttenuationSpec};

fn main() -> vistrim::Result<()> {
    let tau = 50.0;
    let laws = [
        ("cosine", AttenuationSpec::cosine(tau)),
        ("linear", AttenuationSpec::linear(tau)),
        ("exponential", AttenuationSpec::exponential(tau / 4.0)),
    ];
    println!("t,{}", laws.map(|(n, _)| format!("{n}_beta,{n}_kept")).join(","));
    for t in (0..=60).step_by(5) {
        let mut cells = vec![t.to_string()];
        for (_, spec) in &laws {
            let b = beta(spec, t)?;
            cells.push(format!("{b:.6}"));
            cells.push(target_count(288, b).to_string());
        }
        println!("{}", cells.join(","));
    }
    Ok(())
}
