//! Evaluation harness: confusion metrics, Wilson and bootstrap intervals,
//! exact McNemar test, α sweeps.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::audit::{AuditChain, Clock};
use crate::backend::Session;
use crate::calibration::{calibrated_decision, CalibrationError, CalibrationProfile, PolicyAlpha};
use crate::governance::{govern, Decision, Policy, Stage};

pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    DatasetEmpty,
    #[error("invalid counts: {successes} successes out of {trials} trials")]
    InvalidCounts { successes: u64, trials: u64 },
    #[error("confidence must lie in (0, 1), got {0}")]
    InvalidConfidence(f64),
    #[error("sequences differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("resample count must be positive")]
    NoResamples,
    #[error("dataset line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("governance failed closed on {id}: {note}")]
    GovernanceError { id: String, note: String },
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Toxic,
    Benign,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Toxic
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrompt {
    pub id: String,
    pub prompt: String,
    pub label: Label,
}

/// Parses JSON Lines `{"id", "prompt", "label"}`; blank lines are skipped.
pub fn parse_dataset(text: &str) -> Result<Vec<LabeledPrompt>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| EvalError::Parse {
                line: i + 1,
                source,
            })
        })
        .collect()
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledPrompt>, EvalError> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn tally(predictions: &[bool], labels: &[bool]) -> Result<Self, EvalError> {
        if predictions.len() != labels.len() {
            return Err(EvalError::LengthMismatch(predictions.len(), labels.len()));
        }
        let mut c = Confusion::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            c.record(p, l);
        }
        Ok(c)
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    pub resamples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub alpha: f64,
    #[serde(flatten)]
    pub counts: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub wilson_ci_recall: Option<Interval>,
    pub wilson_ci_precision: Option<Interval>,
    pub bootstrap_f1_ci: BootstrapCi,
}

impl MetricsReport {
    pub fn from_predictions(
        alpha: f64,
        predictions: &[bool],
        labels: &[bool],
        resamples: usize,
        seed: u64,
    ) -> Result<Self, EvalError> {
        if labels.is_empty() {
            return Err(EvalError::DatasetEmpty);
        }
        let counts = Confusion::tally(predictions, labels)?;
        let wilson = |s: u64, n: u64| {
            if n == 0 {
                Ok(None)
            } else {
                wilson_ci(s, n, 0.95).map(Some)
            }
        };
        Ok(Self {
            alpha,
            counts,
            accuracy: counts.accuracy(),
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            wilson_ci_recall: wilson(counts.tp, counts.tp + counts.fn_)?,
            wilson_ci_precision: wilson(counts.tp, counts.tp + counts.fp)?,
            bootstrap_f1_ci: bootstrap_f1_ci(predictions, labels, resamples, seed)?,
        })
    }
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_ci(successes: u64, trials: u64, confidence: f64) -> Result<Interval, EvalError> {
    if trials == 0 || successes > trials {
        return Err(EvalError::InvalidCounts { successes, trials });
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(EvalError::InvalidConfidence(confidence));
    }
    let z = Normal::standard().inverse_cdf(0.5 + confidence / 2.0);
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let margin = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if successes == 0 {
        0.0
    } else {
        (center - margin).max(0.0)
    };
    let hi = if successes == trials {
        1.0
    } else {
        (center + margin).min(1.0)
    };
    Ok(Interval { lo, hi })
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Percentile bootstrap (2.5th / 97.5th) of F1, deterministic in `seed`.
pub fn bootstrap_f1_ci(
    predictions: &[bool],
    labels: &[bool],
    resamples: usize,
    seed: u64,
) -> Result<BootstrapCi, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(EvalError::DatasetEmpty);
    }
    if resamples == 0 {
        return Err(EvalError::NoResamples);
    }
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut c = Confusion::default();
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            c.record(predictions[i], labels[i]);
        }
        scores.push(c.f1());
    }
    scores.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        lo: quantile(&scores, 0.025),
        hi: quantile(&scores, 0.975),
        resamples,
        seed,
    })
}

/// Two-sided exact McNemar p-value from discordant counts.
pub fn mcnemar_exact(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let k = b.min(c);
    // log C(n, i) - n ln 2, built incrementally
    let mut log_term = -(n as f64) * std::f64::consts::LN_2;
    let mut tail = log_term.exp();
    for i in 0..k {
        log_term += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        tail += log_term.exp();
    }
    (2.0 * tail).min(1.0)
}

/// Exact McNemar test between two classifiers on the same labels.
/// `b` counts items A gets right and B gets wrong, `c` the reverse.
pub fn mcnemar(pred_a: &[bool], pred_b: &[bool], labels: &[bool]) -> Result<f64, EvalError> {
    if pred_a.len() != labels.len() {
        return Err(EvalError::LengthMismatch(pred_a.len(), labels.len()));
    }
    if pred_b.len() != labels.len() {
        return Err(EvalError::LengthMismatch(pred_b.len(), labels.len()));
    }
    let (mut b, mut c) = (0, 0);
    for ((&a, &bb), &l) in pred_a.iter().zip(pred_b).zip(labels) {
        match (a == l, bb == l) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(mcnemar_exact(b, c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionRule {
    /// Calibrated probe only; positive iff P(positive) > 0.5.
    #[default]
    PureLogit,
    /// Full governance pipeline; positive iff the verdict is not Allow.
    Pipeline,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub policy: Policy,
    pub rule: PredictionRule,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            policy: Policy::default(),
            rule: PredictionRule::PureLogit,
            resamples: DEFAULT_RESAMPLES,
            seed: DEFAULT_SEED,
        }
    }
}

/// Per-item predictions under `config`.
pub fn predict<S: Session + ?Sized>(
    session: &mut S,
    profile: &CalibrationProfile,
    dataset: &[LabeledPrompt],
    config: &EvalConfig,
) -> Result<Vec<bool>, EvalError> {
    let alpha = config.policy.alpha();
    let mut chain = AuditChain::new().with_clock(Clock::Fixed(0));
    dataset
        .iter()
        .map(|item| match config.rule {
            PredictionRule::PureLogit => {
                let r = calibrated_decision(session, profile, alpha, &item.prompt)?;
                let p = r
                    .probability_of(&profile.pair.positive_label)
                    .unwrap_or(0.0);
                Ok(p > 0.5)
            }
            PredictionRule::Pipeline => {
                let v = govern(session, profile, &item.prompt, &config.policy, &mut chain);
                if v.stage == Stage::Error {
                    let note = chain.last().map(|e| e.note.clone()).unwrap_or_default();
                    return Err(EvalError::GovernanceError {
                        id: item.id.clone(),
                        note,
                    });
                }
                Ok(v.decision != Decision::Allow)
            }
        })
        .collect()
}

pub fn run_eval<S: Session + ?Sized>(
    session: &mut S,
    profile: &CalibrationProfile,
    dataset: &[LabeledPrompt],
    config: &EvalConfig,
) -> Result<MetricsReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::DatasetEmpty);
    }
    let predictions = predict(session, profile, dataset, config)?;
    let labels: Vec<bool> = dataset.iter().map(|d| d.label.is_positive()).collect();
    MetricsReport::from_predictions(
        config.policy.alpha().get(),
        &predictions,
        &labels,
        config.resamples,
        config.seed,
    )
}

/// One [`run_eval`] per α, all sharing `profile`.
pub fn alpha_sweep<S: Session + ?Sized>(
    session: &mut S,
    profile: &CalibrationProfile,
    dataset: &[LabeledPrompt],
    alphas: &[PolicyAlpha],
    config: &EvalConfig,
) -> Result<Vec<MetricsReport>, EvalError> {
    alphas
        .iter()
        .map(|&a| {
            let cfg = EvalConfig {
                policy: config.policy.with_alpha(a),
                ..config.clone()
            };
            run_eval(session, profile, dataset, &cfg)
        })
        .collect()
}

fn fmt_interval(i: Option<Interval>) -> String {
    i.map_or_else(|| "-".to_owned(), |i| format!("[{:.3}, {:.3}]", i.lo, i.hi))
}

/// Fixed-width table, one row per report.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>5} {:>4} {:>4} {:>4} {:>4} {:>6} {:>6} {:>6} {:>6}  {:<16} {:<16}",
        "alpha",
        "tp",
        "fp",
        "tn",
        "fn",
        "acc",
        "prec",
        "recall",
        "f1",
        "recall 95% CI",
        "f1 bootstrap CI"
    );
    for r in reports {
        let c = r.counts;
        let _ = writeln!(
            out,
            "{:>5.2} {:>4} {:>4} {:>4} {:>4} {:>6.3} {:>6.3} {:>6.3} {:>6.3}  {:<16} {:<16}",
            r.alpha,
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            r.accuracy,
            r.precision,
            r.recall,
            r.f1,
            fmt_interval(r.wilson_ci_recall),
            fmt_interval(Some(Interval {
                lo: r.bootstrap_f1_ci.lo,
                hi: r.bootstrap_f1_ci.hi
            })),
        );
    }
    out
}
