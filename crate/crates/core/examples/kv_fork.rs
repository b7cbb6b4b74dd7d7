//! Checkpoint a session, fork it, and continue both branches.
//!
//! `cargo run --example kv_fork`

use std::sync::Arc;

use logit_gate::backend::{prefill, Session, ToyLm};
use logit_gate::kvstate::{kv_checkpoint, kv_fork, kv_restore, KvCheckpoint};

fn main() -> anyhow::Result<()> {
    let lm = Arc::new(ToyLm::train(
        "open the file, read the file, close the file.\n",
    ));
    let mut main = lm.session();
    prefill(&mut main, "open the fi")?;
    let saved = kv_checkpoint(&main)?;
    println!(
        "checkpoint: {} positions, {} bytes",
        saved.position,
        saved.size()
    );

    let fork = kv_fork(&main)?;
    let mut branch = lm.session();
    kv_restore(&mut branch, &fork)?;

    let l = lm.vocab().text_to_id("l").unwrap();
    let a = main.forward_one(l)?;
    let b = branch.forward_one(l)?;
    println!("branches agree bitwise: {}", a == b);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("session.akvc");
    saved.write_file(&path)?;
    let back = KvCheckpoint::read_file(&path)?;
    println!("file round trip exact: {}", back == saved);

    let other = Arc::new(ToyLm::train("abc").with_name("other-lm"));
    let err = kv_restore(&mut other.session(), &saved).unwrap_err();
    println!("restore into another model: {err}");
    Ok(())
}
