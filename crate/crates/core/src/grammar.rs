//! Choice-constrained decoding by logit masking.
//!
//! A token is allowed when appending its text to the generated prefix keeps
//! the prefix a prefix of at least one remaining choice. Matching is over
//! bytes, so any tokenization that spells a choice is admitted. When the
//! prefix equals a choice exactly the grammar completes immediately, which
//! makes a choice that extends a shorter one (`"Safe"` / `"Safer"`)
//! reachable only through a token that crosses the shorter one's end.
//!
//! Masking costs O(|V| · max choice length) per step.

use crate::backend::{prefill, BackendError, LogitVector, Session, TokenId, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum GrammarError {
    #[error("no choices given")]
    EmptyChoices,
    #[error("choices must be nonempty strings")]
    EmptyChoice,
    #[error("no vocabulary token can extend the prefix {prefix:?}")]
    NoValidToken { prefix: String },
    #[error("token {0} is masked in the current state")]
    InvalidAdvance(TokenId),
    #[error("grammar is not in progress")]
    NotInProgress,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GrammarState {
    InProgress,
    Complete(String),
    Failed,
}

#[derive(Debug, Clone)]
pub struct ChoiceGrammar {
    choices: Vec<Vec<u8>>,
    prefix: Vec<u8>,
    remaining: Vec<usize>,
    state: GrammarState,
}

impl ChoiceGrammar {
    pub fn new<C: AsRef<str>>(choices: &[C]) -> Result<Self, GrammarError> {
        Self::with_prefix(choices, "")
    }

    /// Grammar resumed after `prefix` has already been generated.
    pub fn with_prefix<C: AsRef<str>>(choices: &[C], prefix: &str) -> Result<Self, GrammarError> {
        if choices.is_empty() {
            return Err(GrammarError::EmptyChoices);
        }
        let choices: Vec<Vec<u8>> = choices
            .iter()
            .map(|c| c.as_ref().as_bytes().to_vec())
            .collect();
        if choices.iter().any(Vec::is_empty) {
            return Err(GrammarError::EmptyChoice);
        }
        let mut g = Self {
            choices,
            prefix: Vec::new(),
            remaining: Vec::new(),
            state: GrammarState::InProgress,
        };
        g.set_prefix(prefix.as_bytes().to_vec());
        Ok(g)
    }

    fn set_prefix(&mut self, prefix: Vec<u8>) {
        self.remaining = (0..self.choices.len())
            .filter(|&i| self.choices[i].starts_with(&prefix))
            .collect();
        self.state = if let Some(&i) = self.remaining.iter().find(|&&i| self.choices[i] == prefix) {
            GrammarState::Complete(String::from_utf8_lossy(&self.choices[i]).into_owned())
        } else if self.remaining.is_empty() {
            GrammarState::Failed
        } else {
            GrammarState::InProgress
        };
        self.prefix = prefix;
    }

    pub fn state(&self) -> &GrammarState {
        &self.state
    }

    pub fn prefix(&self) -> &[u8] {
        &self.prefix
    }

    pub fn remaining(&self) -> impl Iterator<Item = &[u8]> {
        self.remaining.iter().map(|&i| self.choices[i].as_slice())
    }

    /// Whether `text` may be appended to the current prefix.
    pub fn accepts(&self, text: &[u8]) -> bool {
        if text.is_empty() || self.state != GrammarState::InProgress {
            return false;
        }
        let offset = self.prefix.len();
        self.remaining.iter().any(|&i| {
            let choice = &self.choices[i];
            choice.len() >= offset + text.len() && &choice[offset..offset + text.len()] == text
        })
    }

    pub fn mask_logits(
        &self,
        logits: &LogitVector,
        vocab: &Vocabulary,
    ) -> Result<MaskedLogits, GrammarError> {
        if self.state != GrammarState::InProgress {
            return Err(GrammarError::NotInProgress);
        }
        let allowed: Vec<bool> = (0..logits.len())
            .map(|i| {
                vocab
                    .text(TokenId(i as u32))
                    .is_some_and(|t| self.accepts(t))
            })
            .collect();
        if !allowed.iter().any(|&a| a) {
            return Err(GrammarError::NoValidToken {
                prefix: String::from_utf8_lossy(&self.prefix).into_owned(),
            });
        }
        Ok(MaskedLogits {
            logits: logits.clone(),
            allowed,
        })
    }

    pub fn advance(
        &mut self,
        token: TokenId,
        vocab: &Vocabulary,
    ) -> Result<&GrammarState, GrammarError> {
        if self.state != GrammarState::InProgress {
            return Err(GrammarError::NotInProgress);
        }
        let text = vocab.text(token).ok_or(BackendError::InvalidToken {
            id: token.0,
            vocab_size: vocab.len(),
        })?;
        if !self.accepts(text) {
            return Err(GrammarError::InvalidAdvance(token));
        }
        let mut next = self.prefix.clone();
        next.extend_from_slice(text);
        self.set_prefix(next);
        Ok(&self.state)
    }
}

/// Logits paired with an allow-bitmap. The original scores are untouched;
/// masked entries read as `-inf` through [`MaskedLogits::score`].
#[derive(Debug, Clone)]
pub struct MaskedLogits {
    logits: LogitVector,
    allowed: Vec<bool>,
}

impl MaskedLogits {
    pub fn is_allowed(&self, id: TokenId) -> bool {
        self.allowed.get(id.index()).copied().unwrap_or(false)
    }

    pub fn allowed_ids(&self) -> Vec<TokenId> {
        self.allowed
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(i, _)| TokenId(i as u32))
            .collect()
    }

    pub fn score(&self, id: TokenId) -> f32 {
        if self.is_allowed(id) {
            self.logits.get(id).unwrap_or(f32::NEG_INFINITY)
        } else {
            f32::NEG_INFINITY
        }
    }

    pub fn original(&self) -> &LogitVector {
        &self.logits
    }

    /// Highest-scoring allowed token; ties go to the lowest id.
    pub fn argmax(&self) -> Option<TokenId> {
        let mut best: Option<(TokenId, f32)> = None;
        for (i, (&v, &ok)) in self.logits.as_slice().iter().zip(&self.allowed).enumerate() {
            if ok && best.is_none_or(|(_, b)| v > b) {
                best = Some((TokenId(i as u32), v));
            }
        }
        best.map(|(t, _)| t)
    }
}

/// Greedy constrained decode. The returned string is always one of `choices`.
pub fn decode_choice<S, C>(
    session: &mut S,
    prompt: &str,
    choices: &[C],
) -> Result<String, GrammarError>
where
    S: Session + ?Sized,
    C: AsRef<str>,
{
    let mut grammar = ChoiceGrammar::new(choices)?;
    if let GrammarState::Complete(c) = grammar.state() {
        return Ok(c.clone());
    }
    let mut logits = prefill(session, prompt)?;
    loop {
        let token = {
            let masked = grammar.mask_logits(&logits, session.vocab())?;
            masked
                .argmax()
                .expect("mask_logits guarantees an allowed token")
        };
        match grammar.advance(token, session.vocab())? {
            GrammarState::Complete(choice) => return Ok(choice.clone()),
            GrammarState::InProgress => logits = session.forward_one(token)?,
            GrammarState::Failed => unreachable!("advance only accepts prefix-preserving tokens"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FixtureBuilder, ToyLm};
    use std::sync::Arc;

    fn ascii() -> Vocabulary {
        Vocabulary::printable_ascii()
    }

    fn allowed_texts(g: &ChoiceGrammar, vocab: &Vocabulary) -> Vec<String> {
        let logits = LogitVector::new(vec![0.0; vocab.len()]).unwrap();
        g.mask_logits(&logits, vocab)
            .unwrap()
            .allowed_ids()
            .into_iter()
            .map(|t| String::from_utf8_lossy(vocab.text(t).unwrap()).into_owned())
            .collect()
    }

    #[test]
    fn initial_mask_for_safe_dangerous() {
        let v = ascii();
        let g = ChoiceGrammar::new(&["Safe", "Dangerous"]).unwrap();
        assert_eq!(allowed_texts(&g, &v), ["D", "S"]);
    }

    #[test]
    fn mask_after_shared_prefix() {
        let v = ascii();
        let g = ChoiceGrammar::with_prefix(&["Safe", "Sane"], "Sa").unwrap();
        assert_eq!(allowed_texts(&g, &v), ["f", "n"]);
    }

    #[test]
    fn completion_state() {
        let g = ChoiceGrammar::with_prefix(&["A"], "A").unwrap();
        assert_eq!(g.state(), &GrammarState::Complete("A".into()));
        let v = ascii();
        let logits = LogitVector::new(vec![0.0; 96]).unwrap();
        assert!(matches!(
            g.mask_logits(&logits, &v),
            Err(GrammarError::NotInProgress)
        ));
        let g = ChoiceGrammar::with_prefix(&["A"], "B").unwrap();
        assert_eq!(g.state(), &GrammarState::Failed);
    }

    #[test]
    fn advance_spells_choice() {
        let v = ascii();
        let mut g = ChoiceGrammar::new(&["Yes", "No"]).unwrap();
        for c in ["Y", "e"] {
            assert_eq!(
                g.advance(v.text_to_id(c).unwrap(), &v).unwrap(),
                &GrammarState::InProgress
            );
        }
        assert_eq!(
            g.advance(v.text_to_id("s").unwrap(), &v).unwrap(),
            &GrammarState::Complete("Yes".into())
        );

        let mut g = ChoiceGrammar::new(&["ab", "ac"]).unwrap();
        g.advance(v.text_to_id("a").unwrap(), &v).unwrap();
        assert_eq!(g.remaining().collect::<Vec<_>>(), [b"ab".as_slice(), b"ac"]);

        let mut g = ChoiceGrammar::new(&["ab"]).unwrap();
        let z = v.text_to_id("z").unwrap();
        assert!(matches!(g.advance(z, &v), Err(GrammarError::InvalidAdvance(t)) if t == z));
        assert!(g.prefix().is_empty());
    }

    #[test]
    fn multi_char_tokens_cross_choice_boundaries() {
        let v = Vocabulary::new(["S", "a", "f", "e", "r", "fer"]).unwrap();
        let mut g = ChoiceGrammar::with_prefix(&["Safe", "Safer"], "Sa").unwrap();
        let fer = v.text_to_id("fer").unwrap();
        assert!(allowed_texts(&g, &v).contains(&"fer".to_string()));
        assert_eq!(
            g.advance(fer, &v).unwrap(),
            &GrammarState::Complete("Safer".into())
        );
    }

    #[test]
    fn no_valid_token_when_vocab_cannot_spell() {
        let v = Vocabulary::new(["a", "b"]).unwrap();
        let g = ChoiceGrammar::new(&["xyz"]).unwrap();
        let logits = LogitVector::new(vec![0.0; 2]).unwrap();
        assert!(matches!(
            g.mask_logits(&logits, &v),
            Err(GrammarError::NoValidToken { .. })
        ));
    }

    #[test]
    fn rejects_empty_inputs() {
        assert!(matches!(
            ChoiceGrammar::new::<&str>(&[]),
            Err(GrammarError::EmptyChoices)
        ));
        assert!(matches!(
            ChoiceGrammar::new(&["a", ""]),
            Err(GrammarError::EmptyChoice)
        ));
    }

    #[test]
    fn masked_scores_read_negative_infinity() {
        let v = ascii();
        let g = ChoiceGrammar::new(&["Q"]).unwrap();
        let logits = LogitVector::new((0..96).map(|i| i as f32).collect()).unwrap();
        let m = g.mask_logits(&logits, &v).unwrap();
        assert_eq!(m.argmax(), v.text_to_id("Q"));
        assert_eq!(m.score(TokenId(95)), f32::NEG_INFINITY);
        assert_eq!(m.original(), &logits);
    }

    #[test]
    fn decode_follows_steered_logits() {
        let v = ascii();
        let prompt = "Verdict:";
        let mut b = FixtureBuilder::new(v.clone());
        let mut history = v.encode(prompt).unwrap();
        for c in "Dangerous".bytes() {
            let id = v.text_to_id([c]).unwrap();
            let mut row = vec![0.0; 96];
            row[id.index()] = 5.0;
            b = b.row(history.clone(), row).unwrap();
            history.push(id);
        }
        let m = Arc::new(b.build().unwrap());
        let out = decode_choice(&mut m.session(), prompt, &["Safe", "Dangerous"]).unwrap();
        assert_eq!(out, "Dangerous");
    }

    #[test]
    fn single_choice_is_forced() {
        let lm = Arc::new(ToyLm::train("zzzzzzzz"));
        assert_eq!(
            decode_choice(&mut lm.session(), "zz", &["OK"]).unwrap(),
            "OK"
        );
    }

    #[test]
    fn nested_choice_completes_on_shorter() {
        // both paths share "Safe"; greedy shortest-match always stops there
        let lm = Arc::new(ToyLm::train("Safer Safer Safer"));
        assert_eq!(
            decode_choice(&mut lm.session(), "x", &["Safe", "Safer"]).unwrap(),
            "Safe"
        );
    }
}
