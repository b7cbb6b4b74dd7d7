//! Logit-level classification primitives for governing agent actions.
//!
//! A classification is read directly off next-token logits: the prompt is
//! prefilled once and the scores of single-token verbalizers ("Safe",
//! "Dangerous") are compared with a restricted softmax. Around that probe
//! the crate provides contextual calibration, logit entropy, choice-masked
//! decoding, KV checkpoints, a staged policy pipeline, a hash-chained audit
//! log and evaluation statistics.
//!
//! Every capability has a runnable program under `examples/`; start there.
//!
//! ```
//! use std::sync::Arc;
//! use logit_gate::{backend::FixtureBuilder, backend::Vocabulary, probe::probe_classify};
//!
//! let vocab = Vocabulary::printable_ascii_with_words(&["Safe", "Dangerous"]).unwrap();
//! let model = Arc::new(
//!     FixtureBuilder::new(vocab)
//!         .prompt_scores("rm -rf /", &[("Dangerous", 4.0), ("Safe", 1.0)])
//!         .unwrap()
//!         .build()
//!         .unwrap(),
//! );
//! let result = probe_classify(&mut model.session(), "rm -rf /", &["Safe", "Dangerous"])
//!     .unwrap()
//!     .expect("both labels are single tokens");
//! assert_eq!(result.winner, "Dangerous");
//! ```

pub mod audit;
pub mod backend;
pub mod calibration;
pub mod cli;
pub mod eval;
pub mod governance;
pub mod grammar;
pub mod kvstate;
pub mod probe;
pub mod suite;

pub use audit::{AuditChain, AuditEntry, VerifyOutcome};
pub use backend::{LogitVector, Session, TokenId, Vocabulary};
pub use calibration::{CalibrationProfile, PolicyAlpha, VerbalizerPair};
pub use governance::{govern, Decision, Policy, Verdict};
pub use probe::{probe_classify, ProbeResult};

/// Any error raised by the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Backend(#[from] backend::BackendError),
    #[error(transparent)]
    Probe(#[from] probe::ProbeError),
    #[error(transparent)]
    Calibration(#[from] calibration::CalibrationError),
    #[error(transparent)]
    Grammar(#[from] grammar::GrammarError),
    #[error(transparent)]
    Kv(#[from] kvstate::KvError),
    #[error(transparent)]
    Policy(#[from] governance::PolicyError),
    #[error(transparent)]
    Audit(#[from] audit::AuditError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

const WRAPPERS: [&str; 9] = [
    "Backend",
    "Probe",
    "Calibration",
    "Grammar",
    "Kv",
    "Policy",
    "Audit",
    "Eval",
    "Parse",
];

impl Error {
    /// Name of the innermost domain error variant, e.g. `"MultiTokenLabel"`.
    pub fn kind(&self) -> String {
        let debug = format!("{self:?}");
        let mut rest = debug.as_str();
        loop {
            let end = rest
                .find(|c: char| !c.is_ascii_alphanumeric() && c != '_')
                .unwrap_or(rest.len());
            let (name, tail) = rest.split_at(end);
            match tail.strip_prefix('(') {
                Some(inner) if WRAPPERS.contains(&name) => rest = inner,
                _ => return name.to_owned(),
            }
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
