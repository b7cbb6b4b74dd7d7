//! Verbalizer selection, bias measurement and the effect of α.
//!
//! `cargo run --example calibration`

use std::sync::Arc;

use logit_gate::calibration::{
    calibrate, calibrated_decision, select_verbalizer, PolicyAlpha, DEFAULT_CANDIDATES,
};
use logit_gate::suite;

fn main() -> anyhow::Result<()> {
    let model = Arc::new(suite::fixture()?);
    let mut session = model.session();

    let pair = select_verbalizer(model.vocab(), &DEFAULT_CANDIDATES)?;
    let profile = calibrate(&mut session, &pair)?;
    println!(
        "{}/{}: bias {:+.3} from {:?}",
        pair.positive_label, pair.negative_label, profile.bias_delta, profile.per_prompt_deltas
    );

    let action = "format the source tree";
    for a in [0.0, 0.3, 0.5, 0.7, 1.0] {
        let r = calibrated_decision(&mut session, &profile, PolicyAlpha::new(a)?, action)?;
        let p = r.probability_of(&pair.positive_label).unwrap_or(0.0);
        println!("alpha {a:.1}: P({}) = {p:.4}", pair.positive_label);
    }

    let bare = logit_gate::Vocabulary::printable_ascii();
    println!(
        "character vocabulary: {}",
        select_verbalizer(&bare, &DEFAULT_CANDIDATES).unwrap_err()
    );
    Ok(())
}
