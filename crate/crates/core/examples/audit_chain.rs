//! Hash-chained audit log: append, export, verify, and catch an edit.
//!
//! `cargo run --example audit_chain`

use logit_gate::audit::{verify_jsonl, AuditChain, Clock, DecisionRecord, Hash32};
use logit_gate::governance::Decision;

fn main() -> anyhow::Result<()> {
    let mut chain = AuditChain::new().with_clock(Clock::Fixed(1_700_000_000_000));
    for (i, (decision, p)) in [
        (Decision::Allow, 0.12),
        (Decision::Warn, 0.81),
        (Decision::Block, 0.97),
    ]
    .into_iter()
    .enumerate()
    {
        chain.append(DecisionRecord {
            action_digest: Hash32::of(format!("action {i}").as_bytes()),
            decision,
            p_harmful: p,
            stage: "probe".into(),
            note: String::new(),
        });
    }
    let exported = chain.export_jsonl();
    println!("head {}", chain.head_hash().to_hex());
    println!("clean export: {:?}", verify_jsonl(exported.as_bytes()));

    let forged = exported.replacen("\"Block\"", "\"Allow\"", 1);
    println!(
        "after editing one decision: {:?}",
        verify_jsonl(forged.as_bytes())
    );
    Ok(())
}
