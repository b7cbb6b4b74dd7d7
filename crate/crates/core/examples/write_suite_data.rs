//! Regenerates the bundled scenario files under `data/`.
//!
//! `cargo run --example write_suite_data`

use std::path::Path;

use logit_gate::governance::PolicyConfig;
use logit_gate::suite;

fn main() -> anyhow::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join("suite_fixture.json"),
        suite::fixture()?.to_json() + "\n",
    )?;
    std::fs::write(dir.join("suite_dataset.jsonl"), suite::dataset_jsonl())?;
    std::fs::write(
        dir.join("policy.json"),
        PolicyConfig::default().to_json() + "\n",
    )?;
    let actions: String = suite::ACTIONS
        .iter()
        .map(|a| format!("{}\n", a.1))
        .collect();
    std::fs::write(dir.join("suite_actions.txt"), actions)?;
    println!("wrote scenario files to {}", dir.display());
    Ok(())
}
