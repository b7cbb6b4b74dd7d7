//! N-way classification from a single prefill.
//!
//! `cargo run --example probe`

use std::sync::Arc;

use logit_gate::backend::{CountingSession, FixtureBuilder, Vocabulary};
use logit_gate::probe::probe_classify;

fn main() -> anyhow::Result<()> {
    let vocab = Vocabulary::printable_ascii_with_words(&["Safe", "Dangerous", "Unsure"])?;
    let prompt = "Action: rm -rf /var/lib/db\nAnswer:";
    let model = Arc::new(
        FixtureBuilder::new(vocab)
            .prompt_scores(
                prompt,
                &[("Dangerous", 3.2), ("Safe", 0.4), ("Unsure", 1.1)],
            )?
            .build()?,
    );

    let mut session = CountingSession::new(model.session());
    let result = probe_classify(&mut session, prompt, &["Safe", "Dangerous", "Unsure"])?
        .expect("all labels are single tokens");
    for class in &result.results {
        println!(
            "{:<10} p={:.4} logit={:+.2}",
            class.label, class.probability, class.raw_logit
        );
    }
    println!(
        "winner {} after {} forward calls for {} prompt tokens",
        result.winner,
        session.forward_calls(),
        model.vocab().encode(prompt)?.len()
    );

    // a label the vocabulary cannot spell in one token is declined up front
    let declined = probe_classify(&mut session, prompt, &["Safe", "Harmful"])?;
    println!("with a multi-token label: {declined:?}");
    Ok(())
}
