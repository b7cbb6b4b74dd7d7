//! Command-line front end. Each subcommand wraps one library operation and
//! prints either a short human summary or, with `--json`, a single JSON
//! document.
//!
//! Exit codes: 0 success, 2 usage, 3 domain error, 4 audit tamper detected.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::audit::{AuditChain, Clock, VerifyOutcome, DEFAULT_CAPACITY};
use crate::backend::{prefill, FixtureModel, Session, ToyLm};
use crate::calibration::{
    calibrate, select_verbalizer, token_fertility_check, CalibrationError, CalibrationProfile,
    PolicyAlpha, DEFAULT_CANDIDATES,
};
use crate::eval::{alpha_sweep, format_table, load_dataset, EvalConfig, PredictionRule};
use crate::governance::{govern, Policy, PolicyConfig};
use crate::grammar::decode_choice;
use crate::kvstate::{kv_checkpoint, kv_fork, kv_restore, KvCheckpoint};
use crate::probe::{logit_entropy, probe_classify};
use crate::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DOMAIN: u8 = 3;
pub const EXIT_TAMPER: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "logit-gate",
    version,
    about = "Logit-level classification and governance primitives"
)]
pub struct Cli {
    #[command(flatten)]
    pub config: CliConfig,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
#[group(id = "backend", required = true, multiple = false)]
pub struct BackendArgs {
    /// JSON fixture model.
    #[arg(long, value_name = "PATH")]
    pub backend_fixture: Option<PathBuf>,
    /// Plain-text corpus for the character n-gram model.
    #[arg(long, value_name = "PATH")]
    pub toy_corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CliConfig {
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Policy JSON; built-in defaults otherwise.
    #[arg(long, value_name = "PATH", global = true)]
    pub policy: Option<PathBuf>,
    /// Calibration profile. Written by `calibrate`, read by the others;
    /// calibrated on the fly when absent.
    #[arg(long, value_name = "PATH", global = true)]
    pub profile: Option<PathBuf>,
    #[arg(long, default_value_t = crate::eval::DEFAULT_SEED, global = true)]
    pub seed: u64,
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    PureLogit,
    Pipeline,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify a prompt over single-token labels.
    Probe {
        prompt: String,
        #[arg(long, value_delimiter = ',', required = true)]
        labels: Vec<String>,
    },
    /// Measure the verbalizer bias on null prompts.
    Calibrate {
        /// Verbalizer pair as POSITIVE,NEGATIVE; defaults to the first usable
        /// built-in candidate.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        labels: Option<Vec<String>>,
    },
    /// Run actions through the governance pipeline and append to an audit log.
    Govern {
        #[arg(required = true)]
        actions: Vec<String>,
        #[arg(long, value_name = "PATH")]
        audit: PathBuf,
        /// Fixed audit timestamp in milliseconds instead of the wall clock.
        #[arg(long, value_name = "MS")]
        clock_ms: Option<u64>,
    },
    /// Shannon entropy of the next-token distribution.
    Entropy { prompt: String },
    /// Greedy decode constrained to one of the choices.
    Decode {
        prompt: String,
        #[arg(long, value_delimiter = ',', required = true)]
        choices: Vec<String>,
    },
    /// KV checkpoint file operations.
    Kv {
        #[command(subcommand)]
        op: KvOp,
    },
    /// Metrics over a labeled JSON Lines dataset, one row per alpha.
    Eval {
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        alphas: Vec<f64>,
        #[arg(long, value_enum, default_value_t = EvalMode::PureLogit)]
        mode: EvalMode,
        #[arg(long, default_value_t = crate::eval::DEFAULT_RESAMPLES)]
        resamples: usize,
    },
    /// Verify an exported audit log.
    AuditVerify { file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum KvOp {
    /// Prefill a prompt and save the state.
    Checkpoint {
        prompt: String,
        #[arg(long)]
        file: PathBuf,
    },
    /// Restore a saved state, optionally continue with more text, and report
    /// the next-token argmax.
    Restore {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        next: Option<String>,
    },
    /// Restore a saved state and write an independent copy.
    Fork {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Backend {
    Fixture(Arc<FixtureModel>),
    Toy(Arc<ToyLm>),
}

impl Backend {
    fn open(args: &BackendArgs) -> Result<Self, Error> {
        match (&args.backend_fixture, &args.toy_corpus) {
            (Some(p), None) => Ok(Backend::Fixture(Arc::new(FixtureModel::load(p)?))),
            (None, Some(p)) => Ok(Backend::Toy(Arc::new(ToyLm::load(p)?))),
            _ => unreachable!("clap enforces exactly one backend"),
        }
    }

    fn session(&self) -> Box<dyn Session> {
        match self {
            Backend::Fixture(m) => Box::new(m.session()),
            Backend::Toy(m) => Box::new(m.session()),
        }
    }
}

/// What the command produced: exit status plus the printed text.
pub struct Outcome {
    pub code: u8,
    pub output: String,
}

fn emit<T: Serialize>(json: bool, value: &T, human: impl FnOnce() -> String) -> String {
    if json {
        serde_json::to_string_pretty(value).expect("output serializes") + "\n"
    } else {
        human()
    }
}

fn load_policy(path: Option<&Path>) -> Result<Policy, Error> {
    let config = match path {
        Some(p) => PolicyConfig::load(p)?,
        None => PolicyConfig::default(),
    };
    Ok(config.compile()?)
}

fn resolve_profile(
    cfg: &CliConfig,
    session: &mut dyn Session,
) -> Result<CalibrationProfile, Error> {
    match &cfg.profile {
        Some(p) => {
            let profile = CalibrationProfile::load(p)?;
            profile.check_vocab(session.vocab())?;
            Ok(profile)
        }
        None => {
            let pair = select_verbalizer(session.vocab(), &DEFAULT_CANDIDATES)?;
            Ok(calibrate(session, &pair)?)
        }
    }
}

/// Executes a parsed command line.
pub fn run(cli: &Cli) -> Result<Outcome, Error> {
    let cfg = &cli.config;
    let backend = Backend::open(&cfg.backend)?;
    let mut session = backend.session();
    let ok = |output: String| {
        Ok(Outcome {
            code: EXIT_OK,
            output,
        })
    };
    match &cli.command {
        Command::Probe { prompt, labels } => {
            let result = match probe_classify(&mut session, prompt, labels)? {
                Some(r) => r,
                None => {
                    // report the first label that is not a single token
                    let vocab = session.vocab();
                    let bad = labels
                        .iter()
                        .find(|l| vocab.text_to_id(l.as_str()).is_none());
                    let label = bad.expect("probe declined, so some label is missing");
                    return Err(CalibrationError::MultiTokenLabel {
                        label: label.clone(),
                        pieces: vocab.pieces(label),
                    }
                    .into());
                }
            };
            ok(emit(cfg.json, &result, || {
                let mut s = String::new();
                for r in &result.results {
                    s += &format!("{:<16} {:.6}\n", r.label, r.probability);
                }
                s
            }))
        }
        Command::Calibrate { labels } => {
            let pair = match labels.as_deref() {
                Some([pos, neg]) => token_fertility_check(session.vocab(), pos, neg)?,
                _ => select_verbalizer(session.vocab(), &DEFAULT_CANDIDATES)?,
            };
            let profile = calibrate(&mut session, &pair)?;
            if let Some(p) = &cfg.profile {
                profile.save(p)?;
            }
            ok(emit(cfg.json, &profile, || {
                format!(
                    "{}: {}/{} bias {:+.6} over {} null prompts\n",
                    profile.model_name,
                    pair.positive_label,
                    pair.negative_label,
                    profile.bias_delta,
                    profile.null_prompt_count
                )
            }))
        }
        Command::Govern {
            actions,
            audit,
            clock_ms,
        } => {
            let policy = load_policy(cfg.policy.as_deref())?;
            let profile = resolve_profile(cfg, &mut *session)?;
            let mut chain = if audit.exists() {
                AuditChain::read_jsonl(audit, DEFAULT_CAPACITY)?
            } else {
                AuditChain::new()
            };
            chain = chain.with_clock(clock_ms.map_or(Clock::System, Clock::Fixed));
            let verdicts: Vec<_> = actions
                .iter()
                .map(|a| govern(&mut session, &profile, a, &policy, &mut chain))
                .collect();
            chain.write_jsonl(audit)?;
            ok(emit(cfg.json, &verdicts, || {
                verdicts
                    .iter()
                    .zip(actions)
                    .map(|(v, a)| {
                        format!(
                            "#{:<4} {:<5} p={:.4} {:<9} {}\n",
                            v.audit_id,
                            v.decision.as_str(),
                            v.p_harmful,
                            v.stage.as_str(),
                            a
                        )
                    })
                    .collect()
            }))
        }
        Command::Entropy { prompt } => {
            let reading = logit_entropy(&prefill(&mut session, prompt)?);
            ok(emit(cfg.json, &reading, || {
                format!("{:.6} nats (max {:.6})\n", reading.nats, reading.max_nats)
            }))
        }
        Command::Decode { prompt, choices } => {
            let choice = decode_choice(&mut session, prompt, choices)?;
            ok(emit(cfg.json, &json!({ "choice": choice }), || {
                format!("{choice}\n")
            }))
        }
        Command::Kv { op } => run_kv(cfg, op, &mut *session),
        Command::Eval {
            dataset,
            alphas,
            mode,
            resamples,
        } => {
            let policy = load_policy(cfg.policy.as_deref())?;
            let profile = resolve_profile(cfg, &mut *session)?;
            let data = load_dataset(dataset)?;
            let alphas = alphas
                .iter()
                .map(|&a| PolicyAlpha::new(a))
                .collect::<Result<Vec<_>, _>>()?;
            let config = EvalConfig {
                policy,
                rule: match mode {
                    EvalMode::PureLogit => PredictionRule::PureLogit,
                    EvalMode::Pipeline => PredictionRule::Pipeline,
                },
                resamples: *resamples,
                seed: cfg.seed,
            };
            let reports = alpha_sweep(&mut session, &profile, &data, &alphas, &config)?;
            ok(emit(cfg.json, &reports, || format_table(&reports)))
        }
        Command::AuditVerify { file } => {
            let bytes = std::fs::read(file).map_err(crate::audit::AuditError::from)?;
            let outcome = crate::audit::verify_jsonl(&bytes);
            let code = if outcome.is_ok() {
                EXIT_OK
            } else {
                EXIT_TAMPER
            };
            let output = emit(cfg.json, &outcome, || match outcome {
                VerifyOutcome::Ok { entries } => format!("ok ({entries} entries)\n"),
                VerifyOutcome::TamperDetected { index } => {
                    format!("tamper detected at entry {index}\n")
                }
            });
            Ok(Outcome { code, output })
        }
    }
}

fn run_kv(cfg: &CliConfig, op: &KvOp, session: &mut dyn Session) -> Result<Outcome, Error> {
    let summary = |cp: &KvCheckpoint| {
        json!({
            "model_name": cp.model_name,
            "position": cp.position,
            "size": cp.size(),
            "crc32": format!("{:08x}", crc32fast::hash(&cp.payload)),
        })
    };
    let output = match op {
        KvOp::Checkpoint { prompt, file } => {
            prefill(session, prompt)?;
            let cp = kv_checkpoint(session)?;
            cp.write_file(file)?;
            let s = summary(&cp);
            emit(cfg.json, &s, || {
                format!("saved {} positions to {}\n", cp.position, file.display())
            })
        }
        KvOp::Restore { file, next } => {
            let cp = KvCheckpoint::read_file(file)?;
            kv_restore(session, &cp)?;
            let mut report = summary(&cp);
            if let Some(text) = next {
                let mut logits = None;
                for t in session.encode(text)? {
                    logits = Some(session.forward_one(t)?);
                }
                if let Some(l) = logits {
                    let argmax = l.as_slice().iter().enumerate().fold(
                        (0, f32::NEG_INFINITY),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    );
                    let token = crate::backend::TokenId(argmax.0 as u32);
                    let text =
                        String::from_utf8_lossy(session.vocab().text(token).unwrap_or_default())
                            .into_owned();
                    report["next_token"] = json!({ "id": token, "text": text, "logit": argmax.1 });
                }
                report["position"] = json!(session.position());
            }
            emit(cfg.json, &report, || {
                format!("restored to position {}\n", session.position())
            })
        }
        KvOp::Fork { file, out } => {
            let cp = KvCheckpoint::read_file(file)?;
            kv_restore(session, &cp)?;
            let fork = kv_fork(session)?;
            fork.write_file(out)?;
            let s = summary(&fork);
            emit(cfg.json, &s, || {
                format!("forked {} positions to {}\n", fork.position, out.display())
            })
        }
    };
    Ok(Outcome {
        code: EXIT_OK,
        output,
    })
}

/// Parses `args`, runs, writes to the given streams and returns the exit code.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    match run(&cli) {
        Ok(out) => {
            let _ = stdout.write_all(out.output.as_bytes());
            out.code
        }
        Err(e) => {
            let _ = writeln!(stderr, "error[{}]: {e}", e.kind());
            EXIT_DOMAIN
        }
    }
}
