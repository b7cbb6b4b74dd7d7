//! Single-forward-pass classification.
//!
//! Each class label must be exactly one vocabulary token. The prompt is fed
//! once; the logits at the final position are read at the label tokens and a
//! softmax restricted to those N entries gives the class distribution. Cost
//! is one forward per prompt token whatever N is.

use serde::{Deserialize, Serialize};

use crate::backend::{prefill, BackendError, LogitVector, Session, TokenId};

/// Exponentiated sums at or below this fall back to a uniform distribution.
pub const UNDERFLOW_GUARD: f64 = 1e-10;

/// Probability floor below which entropy terms are skipped.
pub const ENTROPY_FLOOR: f64 = 1e-10;

/// Above this vocabulary size entropy uses compensated summation.
const COMPENSATED_SUM_THRESHOLD: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("at least two labels are required, got {0}")]
    EmptyLabels(usize),
    #[error("label {0:?} appears more than once")]
    DuplicateLabels(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Which exponentials the underflow guard inspects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxGuard {
    /// Sum of `exp(l - max)`; at least 1 for finite input.
    #[default]
    Shifted,
    /// Sum of `exp(l)` before max-subtraction; trips when every logit
    /// underflows.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Softmax {
    pub probabilities: Vec<f64>,
    pub degenerate: bool,
}

/// Softmax over `logits` with max-subtraction and the uniform fallback.
pub fn restricted_softmax(logits: &[f64], guard: SoftmaxGuard) -> Softmax {
    let n = logits.len();
    if n == 0 {
        return Softmax {
            probabilities: Vec::new(),
            degenerate: true,
        };
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = shifted.iter().sum();
    let guarded = match guard {
        SoftmaxGuard::Shifted => sum,
        SoftmaxGuard::Raw => logits.iter().map(|&l| l.exp()).sum(),
    };
    if guarded.is_nan() || guarded <= UNDERFLOW_GUARD {
        return Softmax {
            probabilities: vec![1.0 / n as f64; n],
            degenerate: true,
        };
    }
    Softmax {
        probabilities: shifted.into_iter().map(|e| e / sum).collect(),
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub label: String,
    pub token: TokenId,
    pub probability: f64,
    /// Score that entered the softmax.
    pub raw_logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Sorted by probability descending, ties by token id ascending.
    pub results: Vec<ClassResult>,
    pub winner: String,
    pub confidence: f64,
    pub degenerate: bool,
}

impl ProbeResult {
    /// Builds a sorted result from per-class scores.
    pub fn from_scores(classes: &[(String, TokenId, f64)], guard: SoftmaxGuard) -> Self {
        let scores: Vec<f64> = classes.iter().map(|c| c.2).collect();
        let soft = restricted_softmax(&scores, guard);
        let mut results: Vec<ClassResult> = classes
            .iter()
            .zip(&soft.probabilities)
            .map(|((label, token, logit), &p)| ClassResult {
                label: label.clone(),
                token: *token,
                probability: p,
                raw_logit: *logit,
            })
            .collect();
        results.sort_by(|a, b| {
            b.probability
                .total_cmp(&a.probability)
                .then(a.token.cmp(&b.token))
        });
        let (winner, confidence) = results
            .first()
            .map(|r| (r.label.clone(), r.probability))
            .unwrap_or_default();
        Self {
            results,
            winner,
            confidence,
            degenerate: soft.degenerate,
        }
    }

    pub fn probability_of(&self, label: &str) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.label == label)
            .map(|r| r.probability)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ProbeOptions {
    pub guard: SoftmaxGuard,
}

/// N-way verbalizer probe. Returns `Ok(None)` if any label is not a single
/// token; no forward pass is made in that case.
pub fn probe_classify<S, L>(
    session: &mut S,
    prompt: &str,
    labels: &[L],
) -> Result<Option<ProbeResult>, ProbeError>
where
    S: Session + ?Sized,
    L: AsRef<str>,
{
    probe_classify_with(session, prompt, labels, ProbeOptions::default())
}

pub fn probe_classify_with<S, L>(
    session: &mut S,
    prompt: &str,
    labels: &[L],
    options: ProbeOptions,
) -> Result<Option<ProbeResult>, ProbeError>
where
    S: Session + ?Sized,
    L: AsRef<str>,
{
    if labels.len() < 2 {
        return Err(ProbeError::EmptyLabels(labels.len()));
    }
    for (i, a) in labels.iter().enumerate() {
        if labels[..i].iter().any(|b| b.as_ref() == a.as_ref()) {
            return Err(ProbeError::DuplicateLabels(a.as_ref().to_owned()));
        }
    }
    let mut tokens = Vec::with_capacity(labels.len());
    for label in labels {
        match session.vocab().text_to_id(label.as_ref()) {
            Some(t) => tokens.push(t),
            None => return Ok(None),
        }
    }
    let logits = prefill(session, prompt)?;
    Ok(Some(score_labels(&logits, labels, &tokens, options.guard)))
}

pub(crate) fn score_labels<L: AsRef<str>>(
    logits: &LogitVector,
    labels: &[L],
    tokens: &[TokenId],
    guard: SoftmaxGuard,
) -> ProbeResult {
    let classes: Vec<(String, TokenId, f64)> = labels
        .iter()
        .zip(tokens)
        .map(|(l, &t)| {
            let score = logits.get(t).expect("label token inside vocabulary") as f64;
            (l.as_ref().to_owned(), t, score)
        })
        .collect();
    ProbeResult::from_scores(&classes, guard)
}

/// Binary probe over the `"Yes"` / `"No"` tokens.
pub fn probe_yes_no<S: Session + ?Sized>(
    session: &mut S,
    prompt: &str,
) -> Result<Option<ProbeResult>, ProbeError> {
    probe_classify(session, prompt, &["Yes", "No"])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyReading {
    pub nats: f64,
    pub max_nats: f64,
}

impl EntropyReading {
    pub fn bits(&self) -> f64 {
        self.nats / std::f64::consts::LN_2
    }
}

#[derive(Default)]
struct Accumulator {
    sum: f64,
    compensation: f64,
    compensated: bool,
}

impl Accumulator {
    fn add(&mut self, x: f64) {
        if !self.compensated {
            self.sum += x;
            return;
        }
        // Neumaier variant of Kahan summation
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Shannon entropy of the full-vocabulary softmax, in nats.
pub fn logit_entropy(logits: &LogitVector) -> EntropyReading {
    entropy_of(logits.as_slice())
}

pub(crate) fn entropy_of(values: &[f32]) -> EntropyReading {
    let n = values.len();
    let max_nats = if n == 0 { 0.0 } else { (n as f64).ln() };
    if n == 0 {
        return EntropyReading {
            nats: 0.0,
            max_nats,
        };
    }
    let compensated = n > COMPENSATED_SUM_THRESHOLD;
    let max = values
        .iter()
        .map(|&v| v as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = Accumulator {
        compensated,
        ..Default::default()
    };
    for &v in values {
        z.add((v as f64 - max).exp());
    }
    let z = z.total();
    let mut h = Accumulator {
        compensated,
        ..Default::default()
    };
    for &v in values {
        let p = (v as f64 - max).exp() / z;
        if p < ENTROPY_FLOOR {
            continue;
        }
        h.add(-p * p.ln());
    }
    EntropyReading {
        nats: h.total().clamp(0.0, max_nats),
        max_nats,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FixtureBuilder, Vocabulary};
    use std::sync::Arc;

    fn yes_no_model(yes: f32, no: f32) -> Arc<crate::backend::FixtureModel> {
        let vocab = Vocabulary::printable_ascii_with_words(&["Yes", "No"]).unwrap();
        Arc::new(
            FixtureBuilder::new(vocab)
                .prompt_scores("ok?", &[("Yes", yes), ("No", no)])
                .unwrap()
                .build()
                .unwrap(),
        )
    }

    #[test]
    fn binary_softmax_values() {
        let r = probe_yes_no(&mut yes_no_model(2.0, 0.0).session(), "ok?")
            .unwrap()
            .unwrap();
        assert_eq!(r.winner, "Yes");
        assert!((r.confidence - 0.880_797_077_977_882_4).abs() < 1e-12);
        let r = probe_yes_no(&mut yes_no_model(5.0, 0.0).session(), "ok?")
            .unwrap()
            .unwrap();
        assert!((r.confidence - 0.993_307_149_075_715).abs() < 1e-12);
        let r = probe_yes_no(&mut yes_no_model(0.0, 0.0).session(), "ok?")
            .unwrap()
            .unwrap();
        assert_eq!(r.confidence, 0.5);
        // tie: lower token id first ("Yes" is 96, "No" is 97)
        assert_eq!(r.winner, "Yes");
    }

    #[test]
    fn missing_verbalizer_is_absent() {
        let vocab = Vocabulary::printable_ascii_with_words(&["No"]).unwrap();
        let model = Arc::new(FixtureBuilder::new(vocab).build().unwrap());
        assert!(probe_yes_no(&mut model.session(), "ok?").unwrap().is_none());
    }

    #[test]
    fn label_validation() {
        let m = yes_no_model(0.0, 0.0);
        let mut s = m.session();
        assert!(matches!(
            probe_classify(&mut s, "x", &["Yes"]),
            Err(ProbeError::EmptyLabels(1))
        ));
        assert!(matches!(
            probe_classify(&mut s, "x", &["Yes", "Yes"]),
            Err(ProbeError::DuplicateLabels(_))
        ));
        assert!(matches!(
            probe_classify(&mut s, "", &["Yes", "No"]),
            Err(ProbeError::Backend(BackendError::EmptyPrompt))
        ));
    }

    #[test]
    fn three_equal_classes_are_uniform() {
        let r = ProbeResult::from_scores(
            &[
                ("A".into(), TokenId(3), 1.5),
                ("B".into(), TokenId(1), 1.5),
                ("C".into(), TokenId(2), 1.5),
            ],
            SoftmaxGuard::Shifted,
        );
        for c in &r.results {
            assert!((c.probability - 1.0 / 3.0).abs() < 1e-15);
        }
        let order: Vec<_> = r.results.iter().map(|c| c.token.0).collect();
        assert_eq!(order, [1, 2, 3]);
        assert_eq!(r.winner, "B");
    }

    #[test]
    fn shifted_guard_never_trips_on_finite_input() {
        let s = restricted_softmax(&[-1000.0, -1000.0], SoftmaxGuard::Shifted);
        assert!(!s.degenerate);
        assert_eq!(s.probabilities, vec![0.5, 0.5]);
    }

    #[test]
    fn raw_guard_falls_back_to_uniform() {
        let s = restricted_softmax(&[-1000.0, -990.0, -1200.0], SoftmaxGuard::Raw);
        assert!(s.degenerate);
        assert_eq!(s.probabilities, vec![1.0 / 3.0; 3]);
        let s = restricted_softmax(&[0.0, -990.0], SoftmaxGuard::Raw);
        assert!(!s.degenerate);
    }

    #[test]
    fn entropy_constants() {
        let uniform = LogitVector::new(vec![0.0; 96]).unwrap();
        assert!((logit_entropy(&uniform).nats - 96f64.ln()).abs() < 1e-12);
        let mut peaked = vec![0.0; 96];
        peaked[7] = 50.0;
        let h = logit_entropy(&LogitVector::new(peaked).unwrap());
        assert!(h.nats < 1e-15, "{}", h.nats);
        let big = LogitVector::new(vec![1.25; 152_064]).unwrap();
        let h = logit_entropy(&big);
        assert!((h.nats - 11.932_056_763_842_207).abs() < 1e-9, "{}", h.nats);
        assert!((h.bits() - 17.214).abs() < 1e-3);
    }

    #[test]
    fn entropy_of_two_point_distribution() {
        // p = (1/2, 1/2) -> ln 2 regardless of the other 94 tokens at -200
        let mut v = vec![-200.0f32; 96];
        v[0] = 3.0;
        v[1] = 3.0;
        let h = logit_entropy(&LogitVector::new(v).unwrap());
        assert!((h.nats - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
