//! Decoding restricted to a fixed set of answers.
//!
//! `cargo run --example constrained_decode`

use std::sync::Arc;

use logit_gate::backend::{LogitVector, ToyLm};
use logit_gate::grammar::{decode_choice, ChoiceGrammar};

fn main() -> anyhow::Result<()> {
    let lm = Arc::new(ToyLm::train(
        "verdict: deny. verdict: deny. verdict: allow. verdict: escalate.\n",
    ));
    let choices = ["allow", "deny", "escalate"];
    let answer = decode_choice(&mut lm.session(), "verdict: ", &choices)?;
    println!("decoded {answer:?}");

    let vocab = lm.vocab();
    let mut grammar = ChoiceGrammar::new(&choices)?;
    let flat = LogitVector::new(vec![0.0; vocab.len()])?;
    for step in ["e", "s"] {
        let allowed = grammar.mask_logits(&flat, vocab)?.allowed_ids();
        let texts: Vec<String> = allowed
            .iter()
            .map(|&t| String::from_utf8_lossy(vocab.text(t).unwrap()).into_owned())
            .collect();
        println!(
            "prefix {:?} allows {texts:?}",
            String::from_utf8_lossy(grammar.prefix())
        );
        grammar.advance(vocab.text_to_id(step).unwrap(), vocab)?;
    }
    Ok(())
}
