//! Next-token entropy as an uncertainty signal.
//!
//! `cargo run --example entropy`

use std::sync::Arc;

use logit_gate::backend::{prefill, LogitVector, ToyLm};
use logit_gate::probe::logit_entropy;

fn main() -> anyhow::Result<()> {
    let lm = Arc::new(ToyLm::train(
        "the agent reads the file. the agent lists the directory. the agent runs the tests.\n",
    ));
    let mut session = lm.session();
    for prompt in ["the agent r", "the ag", "xq"] {
        let reading = logit_entropy(&prefill(&mut session, prompt)?);
        println!(
            "{prompt:<12} H = {:.4} nats / {:.4} max",
            reading.nats, reading.max_nats
        );
    }

    let uniform = LogitVector::new(vec![0.0; 152_064])?;
    println!(
        "uniform over 152064 tokens: {:.6} nats",
        logit_entropy(&uniform).nats
    );
    Ok(())
}
