mod common;

use std::sync::Arc;

use proptest::prelude::*;

use logit_gate::audit::{AuditChain, Clock, Hash32};
use logit_gate::backend::{prefill, FixtureBuilder, Session, ToyLm, Vocabulary};
use logit_gate::calibration::{calibrate, token_fertility_check, PolicyAlpha};
use logit_gate::eval::{alpha_sweep, predict, run_eval, EvalConfig, Label};
use logit_gate::governance::{govern, sanitize, Decision, Policy, Stage};
use logit_gate::kvstate::{kv_checkpoint, kv_fork, kv_restore, KvCheckpoint};
use logit_gate::probe::probe_classify;
use logit_gate::suite;

const CORPUS: &str = include_str!("../data/corpus.txt");

fn toy() -> Arc<ToyLm> {
    Arc::new(ToyLm::train(CORPUS))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn restored_session_continues_bitwise(prompt in "[ -~]{1,40}", suffix in "[ -~]{1,12}") {
        let lm = toy();
        let mut original = lm.session();
        prefill(&mut original, &prompt).unwrap();
        let cp = kv_checkpoint(&original).unwrap();
        let fork = kv_fork(&original).unwrap();
        prop_assert_eq!(&cp, &fork);
        let mut restored = lm.session();
        kv_restore(&mut restored, &KvCheckpoint::from_bytes(&cp.to_bytes()).unwrap()).unwrap();
        prop_assert_eq!(restored.position(), original.position());
        for t in lm.vocab().encode(&suffix).unwrap() {
            let a = original.forward_one(t).unwrap();
            let b = restored.forward_one(t).unwrap();
            prop_assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_is_isolated_from_later_steps(prompt in "[a-z ]{1,20}", more in "[a-z ]{1,8}") {
        let lm = toy();
        let mut s = lm.session();
        prefill(&mut s, &prompt).unwrap();
        let cp = kv_checkpoint(&s).unwrap();
        let before = cp.to_bytes();
        for t in lm.vocab().encode(&more).unwrap() {
            s.forward_one(t).unwrap();
        }
        prop_assert_eq!(cp.to_bytes(), before);
        kv_restore(&mut s, &cp).unwrap();
        prop_assert_eq!(s.position(), cp.position);
    }

    #[test]
    fn corrupted_akvc_bytes_never_load_silently(prompt in "[a-z]{1,16}", pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let lm = toy();
        let mut s = lm.session();
        prefill(&mut s, &prompt).unwrap();
        let mut bytes = kv_checkpoint(&s).unwrap().to_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= flip;
        prop_assert!(KvCheckpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn probe_distribution_is_normalized_and_sorted(scores in prop::collection::vec(-30.0f32..30.0, 2..8)) {
        let words: Vec<String> = (0..scores.len()).map(|i| format!("W{i}")).collect();
        let vocab = Vocabulary::printable_ascii_with_words(&words).unwrap();
        let pairs: Vec<(&str, f32)> = words.iter().map(String::as_str).zip(scores.iter().copied()).collect();
        let model = Arc::new(FixtureBuilder::new(vocab).prompt_scores("q", &pairs).unwrap().build().unwrap());
        let r = probe_classify(&mut model.session(), "q", &words).unwrap().unwrap();
        let total: f64 = r.results.iter().map(|c| c.probability).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert_eq!(&r.winner, &r.results[0].label);
        let best = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert_eq!(r.results[0].raw_logit, best as f64);
    }

    #[test]
    fn faulty_backend_always_blocks(action in "[ -~]{0,60}") {
        let model = Arc::new(suite::fixture().unwrap());
        let pair = token_fertility_check(model.vocab(), "Dangerous", "Safe").unwrap();
        let profile = calibrate(&mut model.session(), &pair).unwrap();
        let mut chain = AuditChain::new().with_clock(Clock::Fixed(0));
        let mut s = common::FaultySession(model.session());
        let v = govern(&mut s, &profile, &action, &Policy::default(), &mut chain);
        prop_assert_eq!(v.decision, Decision::Block);
        prop_assert!(v.stage == Stage::Error || v.stage == Stage::Prefilter);
        prop_assert!(chain.verify().is_ok());
    }

    #[test]
    fn every_verdict_is_chained(actions in prop::collection::vec("[ -~]{0,40}", 1..12)) {
        let model = Arc::new(suite::fixture().unwrap());
        let pair = token_fertility_check(model.vocab(), "Dangerous", "Safe").unwrap();
        let mut s = model.session();
        let profile = calibrate(&mut s, &pair).unwrap();
        let policy = Policy::default();
        let mut chain = AuditChain::new().with_clock(Clock::Fixed(9));
        for (i, a) in actions.iter().enumerate() {
            let v = govern(&mut s, &profile, a, &policy, &mut chain);
            prop_assert_eq!(v.audit_id, i as u64);
            let entry = chain.last().unwrap();
            prop_assert_eq!(entry.decision, v.decision);
            prop_assert_eq!(entry.p_harmful, v.p_harmful);
            prop_assert_eq!(entry.action_digest, Hash32::of(sanitize(a, &policy).as_bytes()));
        }
        prop_assert!(chain.verify().is_ok());
    }

    #[test]
    fn calibrated_positive_set_moves_with_alpha(
        margins in prop::collection::vec((-5.0f32..5.0, any::<bool>()), 1..20),
        delta in prop_oneof![-4.0f32..-0.1, 0.1f32..4.0],
    ) {
        let names: Vec<String> = (0..margins.len()).map(|i| format!("item {i}")).collect();
        let items: Vec<(&str, f32, Label)> = names
            .iter()
            .zip(&margins)
            .map(|(n, &(m, toxic))| (n.as_str(), m, if toxic { Label::Toxic } else { Label::Benign }))
            .collect();
        let (model, data) = common::biased_fixture(delta, &items);
        let mut s = model.session();
        let pair = token_fertility_check(model.vocab(), "Dangerous", "Safe").unwrap();
        let profile = calibrate(&mut s, &pair).unwrap();
        let mut previous: Option<Vec<bool>> = None;
        for a in common::ALPHA_GRID {
            let config = EvalConfig { policy: Policy::default().with_alpha(PolicyAlpha::new(a).unwrap()), resamples: 10, ..EvalConfig::default() };
            let now = predict(&mut s, &profile, &data, &config).unwrap();
            if let Some(prev) = &previous {
                for (p, n) in prev.iter().zip(&now) {
                    // Δ < 0 only adds positives as α grows, Δ > 0 only removes them
                    if delta < 0.0 { prop_assert!(!p || *n) } else { prop_assert!(*p || !n) }
                }
            }
            previous = Some(now);
        }
    }
}

#[test]
fn positive_bias_mirror_lowers_recall() {
    let mirrored: Vec<(&str, f32, Label)> = common::NEGATIVE_BIAS_ITEMS
        .iter()
        .map(|&(n, m, l)| {
            let flipped = if l == Label::Toxic {
                Label::Benign
            } else {
                Label::Toxic
            };
            (n, -m, flipped)
        })
        .collect();
    let (model, data) = common::biased_fixture(3.0, &mirrored);
    let mut s = model.session();
    let pair = token_fertility_check(model.vocab(), "Dangerous", "Safe").unwrap();
    let profile = calibrate(&mut s, &pair).unwrap();
    assert_eq!(profile.bias_delta, 3.0);
    let alphas: Vec<PolicyAlpha> = common::ALPHA_GRID
        .iter()
        .map(|&a| PolicyAlpha::new(a).unwrap())
        .collect();
    let config = EvalConfig {
        resamples: 50,
        ..EvalConfig::default()
    };
    let reports = alpha_sweep(&mut s, &profile, &data, &alphas, &config).unwrap();
    for w in reports.windows(2) {
        assert!(w[1].recall <= w[0].recall, "{w:?}");
        assert!(w[1].counts.tp + w[1].counts.fp <= w[0].counts.tp + w[0].counts.fp);
    }
    assert!(reports[0].recall > reports[4].recall);
}

#[test]
fn sweep_rows_equal_individual_runs() {
    let model = Arc::new(suite::fixture().unwrap());
    let mut s = model.session();
    let pair = token_fertility_check(model.vocab(), "Dangerous", "Safe").unwrap();
    let profile = calibrate(&mut s, &pair).unwrap();
    let data = suite::dataset();
    let config = EvalConfig {
        resamples: 300,
        ..EvalConfig::default()
    };
    let alphas = [0.0, 0.5, 1.0].map(|a| PolicyAlpha::new(a).unwrap());
    let sweep = alpha_sweep(&mut s, &profile, &data, &alphas, &config).unwrap();
    for (row, a) in sweep.iter().zip(alphas) {
        let single = EvalConfig {
            policy: config.policy.with_alpha(a),
            ..config.clone()
        };
        assert_eq!(row, &run_eval(&mut s, &profile, &data, &single).unwrap());
    }
}
