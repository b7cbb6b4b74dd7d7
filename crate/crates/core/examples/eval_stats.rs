//! Metrics, confidence intervals and significance testing.
//!
//! `cargo run --example eval_stats`

use std::sync::Arc;

use logit_gate::calibration::{calibrate, select_verbalizer, PolicyAlpha, DEFAULT_CANDIDATES};
use logit_gate::eval::{
    alpha_sweep, format_table, mcnemar, mcnemar_exact, predict, wilson_ci, EvalConfig,
};
use logit_gate::suite;

fn main() -> anyhow::Result<()> {
    println!("Wilson 95% for 297/300: {:?}", wilson_ci(297, 300, 0.95)?);
    println!("exact McNemar b=9 c=1: p = {:.6}", mcnemar_exact(9, 1));

    let model = Arc::new(suite::fixture()?);
    let mut session = model.session();
    let pair = select_verbalizer(model.vocab(), &DEFAULT_CANDIDATES)?;
    let profile = calibrate(&mut session, &pair)?;
    let data = suite::dataset();
    let config = EvalConfig {
        resamples: 2_000,
        ..EvalConfig::default()
    };
    let alphas: Vec<PolicyAlpha> = [0.0, 0.5, 1.0]
        .map(PolicyAlpha::new)
        .into_iter()
        .collect::<Result<_, _>>()?;
    print!(
        "{}",
        format_table(&alpha_sweep(
            &mut session,
            &profile,
            &data,
            &alphas,
            &config
        )?)
    );

    let labels: Vec<bool> = data.iter().map(|d| d.label.is_positive()).collect();
    let at = |a: f64| EvalConfig {
        policy: config.policy.with_alpha(PolicyAlpha::new(a).unwrap()),
        ..config.clone()
    };
    let raw = predict(&mut session, &profile, &data, &at(0.0))?;
    let full = predict(&mut session, &profile, &data, &at(1.0))?;
    println!(
        "McNemar alpha 0 vs 1: p = {:.4}",
        mcnemar(&raw, &full, &labels)?
    );
    Ok(())
}
