#![allow(dead_code)]

use std::sync::Arc;

use logit_gate::backend::{
    BackendError, FixtureBuilder, FixtureModel, LogitVector, ModelIdentity, Session, TokenId,
    Vocabulary,
};
use logit_gate::calibration::{
    render_template, token_fertility_check, DEFAULT_NULL_PROMPTS, DEFAULT_TEMPLATE,
};
use logit_gate::eval::{Label, LabeledPrompt};

/// Delegates to `inner` but fails every forward call.
pub struct FaultySession<S>(pub S);

impl<S: Session> Session for FaultySession<S> {
    fn vocab(&self) -> &Vocabulary {
        self.0.vocab()
    }
    fn identity(&self) -> &ModelIdentity {
        self.0.identity()
    }
    fn position(&self) -> u64 {
        self.0.position()
    }
    fn forward_one(&mut self, _token: TokenId) -> Result<LogitVector, BackendError> {
        Err(BackendError::Fault("injected".into()))
    }
    fn reset_kv(&mut self) {
        self.0.reset_kv()
    }
    fn export_kv(&self) -> Vec<u8> {
        self.0.export_kv()
    }
    fn import_kv(&mut self, position: u64, payload: &[u8]) -> Result<(), BackendError> {
        self.0.import_kv(position, payload)
    }
}

pub fn safe_dangerous_vocab() -> Vocabulary {
    Vocabulary::printable_ascii_with_words(&["Safe", "Dangerous"]).unwrap()
}

/// Fixture whose null prompts all read `Dangerous − Safe = null_margin` and
/// whose items carry the given raw margins.
pub fn biased_fixture(
    null_margin: f32,
    items: &[(&str, f32, Label)],
) -> (Arc<FixtureModel>, Vec<LabeledPrompt>) {
    let vocab = safe_dangerous_vocab();
    let pair = token_fertility_check(&vocab, "Dangerous", "Safe").unwrap();
    let split = |m: f32| [("Dangerous", m / 2.0), ("Safe", -m / 2.0)];
    let mut b = FixtureBuilder::new(vocab).name("biased").seed(3);
    for null in DEFAULT_NULL_PROMPTS {
        b = b
            .prompt_scores(
                &render_template(DEFAULT_TEMPLATE, &pair, null),
                &split(null_margin),
            )
            .unwrap();
    }
    let mut data = Vec::new();
    for (i, &(prompt, margin, label)) in items.iter().enumerate() {
        b = b
            .prompt_scores(
                &render_template(DEFAULT_TEMPLATE, &pair, prompt),
                &split(margin),
            )
            .unwrap();
        data.push(LabeledPrompt {
            id: format!("i{i:02}"),
            prompt: prompt.to_owned(),
            label,
        });
    }
    (Arc::new(b.build().unwrap()), data)
}

/// Items whose calibrated positives grow with α when Δ < 0, adding benign
/// items faster than toxic ones.
pub const NEGATIVE_BIAS_ITEMS: [(&str, f32, Label); 13] = [
    ("t1", 2.0, Label::Toxic),
    ("t2", 1.0, Label::Toxic),
    ("t3", 0.5, Label::Toxic),
    ("t4", -0.5, Label::Toxic),
    ("t5", -1.2, Label::Toxic),
    ("t6", -2.5, Label::Toxic),
    ("b1", -4.0, Label::Benign),
    ("b2", -3.5, Label::Benign),
    ("b3", -2.7, Label::Benign),
    ("b4", -2.0, Label::Benign),
    ("b5", -1.0, Label::Benign),
    ("b6", -0.7, Label::Benign),
    ("b7", 0.3, Label::Benign),
];

pub const ALPHA_GRID: [f64; 5] = [0.0, 0.3, 0.5, 0.7, 1.0];
