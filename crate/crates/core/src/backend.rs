//! Logit sources.
//!
//! A [`Session`] is the contract every other module is written against: a
//! tokenizer, an incremental forward pass that yields a full-vocabulary
//! [`LogitVector`] per token, and access to the accumulated KV state.
//!
//! Two deterministic reference models are provided so the primitives can be
//! exercised without a real LLM:
//!
//! * [`FixtureModel`] replays logit rows from a table keyed by token history,
//!   falling back to a seeded pseudo-random row for untabled histories.
//! * [`ToyLm`] is a character-level count model with add-one smoothing,
//!   interpolated over context lengths 0..=order.
//!
//! For both, the "KV state" is the token history. Each position serializes to
//! a record of `bytes_per_position` bytes: token id (u32 LE), model digest
//! (u32 LE), zero padding.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Minimum per-position record size: token id + model digest.
pub const MIN_BYTES_PER_POSITION: u64 = 8;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("byte 0x{byte:02x} at offset {offset} has no token")]
    UnencodableInput { offset: usize, byte: u8 },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    InvalidToken { id: u32, vocab_size: usize },
    #[error("prompt encodes to zero tokens")]
    EmptyPrompt,
    #[error("logit row has {got} entries, vocabulary has {expected}")]
    RowLength { expected: usize, got: usize },
    #[error("non-finite logit at index {0}")]
    NonFiniteLogit(usize),
    #[error("duplicate vocabulary entry {0:?}")]
    DuplicateToken(String),
    #[error("empty vocabulary entry")]
    EmptyToken,
    #[error("invalid model configuration: {0}")]
    InvalidModel(String),
    #[error("invalid KV payload: {0}")]
    InvalidKvPayload(String),
    #[error("backend fault: {0}")]
    Fault(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Index into a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Bijective map between token byte strings and ids, ordered by text so that
/// single-token lookup is logarithmic in the vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    by_text: BTreeMap<Vec<u8>, TokenId>,
    texts: Vec<Vec<u8>>,
    longest: usize,
}

impl Vocabulary {
    /// Builds a vocabulary; ids are assigned in iteration order.
    pub fn new<I, T>(entries: I) -> Result<Self, BackendError>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        let mut by_text = BTreeMap::new();
        let mut texts = Vec::new();
        let mut longest = 0;
        for entry in entries {
            let text = entry.as_ref().to_vec();
            if text.is_empty() {
                return Err(BackendError::EmptyToken);
            }
            let id = TokenId(texts.len() as u32);
            if by_text.insert(text.clone(), id).is_some() {
                return Err(BackendError::DuplicateToken(
                    String::from_utf8_lossy(&text).into_owned(),
                ));
            }
            longest = longest.max(text.len());
            texts.push(text);
        }
        Ok(Self {
            by_text,
            texts,
            longest,
        })
    }

    /// The 95 printable ASCII characters followed by `"\n"` (96 entries).
    /// The newline token doubles as end-of-text.
    pub fn printable_ascii() -> Self {
        Self::printable_ascii_with_words::<&str>(&[])
            .expect("printable ASCII is a valid vocabulary")
    }

    /// [`Vocabulary::printable_ascii`] extended with whole-word tokens.
    pub fn printable_ascii_with_words<T: AsRef<[u8]>>(words: &[T]) -> Result<Self, BackendError> {
        let chars = (0x20u8..=0x7e)
            .map(|b| vec![b])
            .chain(std::iter::once(b"\n".to_vec()));
        let words = words.iter().map(|w| w.as_ref().to_vec());
        Self::new(chars.chain(words))
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Returns the id iff `text` is exactly one vocabulary entry.
    pub fn text_to_id(&self, text: impl AsRef<[u8]>) -> Option<TokenId> {
        self.by_text.get(text.as_ref()).copied()
    }

    pub fn text(&self, id: TokenId) -> Option<&[u8]> {
        self.texts.get(id.index()).map(Vec::as_slice)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id.index() < self.texts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, &[u8])> {
        self.texts
            .iter()
            .enumerate()
            .map(|(i, t)| (TokenId(i as u32), t.as_slice()))
    }

    /// Greedy longest-match encoding.
    pub fn encode(&self, text: impl AsRef<[u8]>) -> Result<Vec<TokenId>, BackendError> {
        let text = text.as_ref();
        let mut out = Vec::with_capacity(text.len());
        let mut offset = 0;
        while offset < text.len() {
            let max = self.longest.min(text.len() - offset);
            let hit = (1..=max).rev().find_map(|len| {
                self.text_to_id(&text[offset..offset + len])
                    .map(|id| (id, len))
            });
            match hit {
                Some((id, len)) => {
                    out.push(id);
                    offset += len;
                }
                None => {
                    return Err(BackendError::UnencodableInput {
                        offset,
                        byte: text[offset],
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>, BackendError> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.text(id).ok_or(BackendError::InvalidToken {
                id: id.0,
                vocab_size: self.len(),
            })?);
        }
        Ok(out)
    }

    /// Token texts split from `text` by [`Vocabulary::encode`], lossily decoded.
    pub fn pieces(&self, text: &str) -> Vec<String> {
        match self.encode(text) {
            Ok(ids) => ids
                .iter()
                .filter_map(|&id| self.text(id))
                .map(|t| String::from_utf8_lossy(t).into_owned())
                .collect(),
            Err(_) => Vec::new(),
        }
    }

    fn texts_as_strings(&self) -> Vec<String> {
        self.texts
            .iter()
            .map(|t| String::from_utf8_lossy(t).into_owned())
            .collect()
    }
}

/// Full-vocabulary scores from one forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f32>);

impl LogitVector {
    pub fn new(values: Vec<f32>) -> Result<Self, BackendError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(BackendError::NonFiniteLogit(i));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, id: TokenId) -> Option<f32> {
        self.0.get(id.index()).copied()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

/// Dimensions a KV checkpoint must agree on before it can be restored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelIdentity {
    pub name: String,
    pub layer_count: u32,
    pub bytes_per_position: u64,
}

/// An incremental inference context. Exclusively owned while in use.
pub trait Session {
    fn vocab(&self) -> &Vocabulary;

    fn identity(&self) -> &ModelIdentity;

    /// Tokens processed since the last reset.
    fn position(&self) -> u64;

    /// Feeds one token and returns the logits for the next position.
    fn forward_one(&mut self, token: TokenId) -> Result<LogitVector, BackendError>;

    fn reset_kv(&mut self);

    /// Serialized KV state, exactly `position * bytes_per_position` bytes.
    fn export_kv(&self) -> Vec<u8>;

    /// Replaces the KV state. On error the session is left unchanged.
    fn import_kv(&mut self, position: u64, payload: &[u8]) -> Result<(), BackendError>;

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        self.vocab().encode(text)
    }
}

impl<S: Session + ?Sized> Session for &mut S {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn identity(&self) -> &ModelIdentity {
        (**self).identity()
    }
    fn position(&self) -> u64 {
        (**self).position()
    }
    fn forward_one(&mut self, token: TokenId) -> Result<LogitVector, BackendError> {
        (**self).forward_one(token)
    }
    fn reset_kv(&mut self) {
        (**self).reset_kv()
    }
    fn export_kv(&self) -> Vec<u8> {
        (**self).export_kv()
    }
    fn import_kv(&mut self, position: u64, payload: &[u8]) -> Result<(), BackendError> {
        (**self).import_kv(position, payload)
    }
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        (**self).encode(text)
    }
}

impl<S: Session + ?Sized> Session for Box<S> {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn identity(&self) -> &ModelIdentity {
        (**self).identity()
    }
    fn position(&self) -> u64 {
        (**self).position()
    }
    fn forward_one(&mut self, token: TokenId) -> Result<LogitVector, BackendError> {
        (**self).forward_one(token)
    }
    fn reset_kv(&mut self) {
        (**self).reset_kv()
    }
    fn export_kv(&self) -> Vec<u8> {
        (**self).export_kv()
    }
    fn import_kv(&mut self, position: u64, payload: &[u8]) -> Result<(), BackendError> {
        (**self).import_kv(position, payload)
    }
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        (**self).encode(text)
    }
}

/// Resets the session, feeds every token of `prompt` and returns the logits
/// at the final position.
pub fn prefill<S: Session + ?Sized>(
    session: &mut S,
    prompt: &str,
) -> Result<LogitVector, BackendError> {
    let tokens = session.encode(prompt)?;
    session.reset_kv();
    let mut last = None;
    for tok in tokens {
        last = Some(session.forward_one(tok)?);
    }
    last.ok_or(BackendError::EmptyPrompt)
}

/// Wraps a session and counts forward calls.
#[derive(Debug)]
pub struct CountingSession<S> {
    inner: S,
    forwards: usize,
}

impl<S: Session> CountingSession<S> {
    pub fn new(inner: S) -> Self {
        Self { inner, forwards: 0 }
    }

    pub fn forward_calls(&self) -> usize {
        self.forwards
    }

    pub fn reset_count(&mut self) {
        self.forwards = 0;
    }

    pub fn into_inner(self) -> S {
        self.inner
    }
}

impl<S: Session> Session for CountingSession<S> {
    fn vocab(&self) -> &Vocabulary {
        self.inner.vocab()
    }
    fn identity(&self) -> &ModelIdentity {
        self.inner.identity()
    }
    fn position(&self) -> u64 {
        self.inner.position()
    }
    fn forward_one(&mut self, token: TokenId) -> Result<LogitVector, BackendError> {
        self.forwards += 1;
        self.inner.forward_one(token)
    }
    fn reset_kv(&mut self) {
        self.inner.reset_kv()
    }
    fn export_kv(&self) -> Vec<u8> {
        self.inner.export_kv()
    }
    fn import_kv(&mut self, position: u64, payload: &[u8]) -> Result<(), BackendError> {
        self.inner.import_kv(position, payload)
    }
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        self.inner.encode(text)
    }
}

// Shared history-as-KV-state encoding for the reference models.

fn export_history(history: &[TokenId], digest: u32, bytes_per_position: u64) -> Vec<u8> {
    let record = bytes_per_position as usize;
    let mut out = vec![0u8; history.len() * record];
    for (chunk, tok) in out.chunks_exact_mut(record).zip(history) {
        chunk[..4].copy_from_slice(&tok.0.to_le_bytes());
        chunk[4..8].copy_from_slice(&digest.to_le_bytes());
    }
    out
}

fn import_history(
    position: u64,
    payload: &[u8],
    digest: u32,
    bytes_per_position: u64,
    vocab_size: usize,
) -> Result<Vec<TokenId>, BackendError> {
    let expected = position
        .checked_mul(bytes_per_position)
        .ok_or_else(|| BackendError::InvalidKvPayload("size overflow".into()))?;
    if payload.len() as u64 != expected {
        return Err(BackendError::InvalidKvPayload(format!(
            "payload is {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let record = bytes_per_position as usize;
    let mut history = Vec::with_capacity(position as usize);
    for (i, chunk) in payload.chunks_exact(record.max(1)).enumerate() {
        let id = u32::from_le_bytes(chunk[..4].try_into().unwrap());
        let got = u32::from_le_bytes(chunk[4..8].try_into().unwrap());
        if got != digest {
            return Err(BackendError::InvalidKvPayload(format!(
                "record {i} was produced by a different model"
            )));
        }
        if chunk[8..].iter().any(|&b| b != 0) {
            return Err(BackendError::InvalidKvPayload(format!(
                "record {i} has nonzero padding"
            )));
        }
        if id as usize >= vocab_size {
            return Err(BackendError::InvalidToken { id, vocab_size });
        }
        history.push(TokenId(id));
    }
    Ok(history)
}

fn check_token(vocab: &Vocabulary, token: TokenId) -> Result<(), BackendError> {
    if vocab.contains(token) {
        Ok(())
    } else {
        Err(BackendError::InvalidToken {
            id: token.0,
            vocab_size: vocab.len(),
        })
    }
}

fn check_identity(identity: &ModelIdentity) -> Result<(), BackendError> {
    if identity.bytes_per_position < MIN_BYTES_PER_POSITION {
        return Err(BackendError::InvalidModel(format!(
            "bytes_per_position must be at least {MIN_BYTES_PER_POSITION}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Fixture model

/// On-disk fixture table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureFile {
    pub vocab: Vec<String>,
    pub rows: Vec<FixtureRow>,
    pub default_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes_per_position: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRow {
    pub history: Vec<u32>,
    pub logits: Vec<f32>,
}

/// Table-driven logit source. Rows are keyed by the full token history
/// (including the token just fed).
#[derive(Debug)]
pub struct FixtureModel {
    vocab: Vocabulary,
    rows: HashMap<Vec<TokenId>, Vec<f32>>,
    default_seed: u64,
    identity: ModelIdentity,
    digest: u32,
}

impl FixtureModel {
    pub fn from_file_data(file: FixtureFile) -> Result<Self, BackendError> {
        let vocab = Vocabulary::new(&file.vocab)?;
        let mut builder = FixtureBuilder::new(vocab).seed(file.default_seed);
        if let Some(name) = file.model_name {
            builder = builder.name(name);
        }
        if let Some(layers) = file.layer_count {
            builder = builder.layer_count(layers);
        }
        if let Some(bpp) = file.bytes_per_position {
            builder = builder.bytes_per_position(bpp);
        }
        for row in file.rows {
            builder = builder.row(row.history.into_iter().map(TokenId).collect(), row.logits)?;
        }
        builder.build()
    }

    pub fn from_json(json: &str) -> Result<Self, BackendError> {
        Self::from_file_data(serde_json::from_str(json)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Rows are written sorted by history so the output is stable.
    pub fn to_file_data(&self) -> FixtureFile {
        let mut rows: Vec<FixtureRow> = self
            .rows
            .iter()
            .map(|(h, l)| FixtureRow {
                history: h.iter().map(|t| t.0).collect(),
                logits: l.clone(),
            })
            .collect();
        rows.sort_by(|a, b| a.history.cmp(&b.history));
        FixtureFile {
            vocab: self.vocab.texts_as_strings(),
            rows,
            default_seed: self.default_seed,
            model_name: Some(self.identity.name.clone()),
            layer_count: Some(self.identity.layer_count),
            bytes_per_position: Some(self.identity.bytes_per_position),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file_data()).expect("fixture serializes")
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn identity(&self) -> &ModelIdentity {
        &self.identity
    }

    pub fn session(self: &Arc<Self>) -> FixtureSession {
        FixtureSession {
            model: Arc::clone(self),
            history: Vec::new(),
        }
    }

    /// Logits for a given history, tabled or pseudo-random.
    pub fn logits_for(&self, history: &[TokenId]) -> Vec<f32> {
        if let Some(row) = self.rows.get(history) {
            return row.clone();
        }
        let mut hasher = blake3::Hasher::new();
        hasher.update(&self.default_seed.to_le_bytes());
        for t in history {
            hasher.update(&t.0.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(*hasher.finalize().as_bytes());
        (0..self.vocab.len())
            .map(|_| rng.gen_range(-4.0f32..4.0))
            .collect()
    }
}

pub struct FixtureBuilder {
    vocab: Vocabulary,
    rows: HashMap<Vec<TokenId>, Vec<f32>>,
    default_seed: u64,
    identity: ModelIdentity,
}

impl FixtureBuilder {
    pub fn new(vocab: Vocabulary) -> Self {
        Self {
            vocab,
            rows: HashMap::new(),
            default_seed: 0,
            identity: ModelIdentity {
                name: "fixture".into(),
                layer_count: 1,
                bytes_per_position: MIN_BYTES_PER_POSITION,
            },
        }
    }

    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.identity.name = name.into();
        self
    }

    pub fn layer_count(mut self, layers: u32) -> Self {
        self.identity.layer_count = layers;
        self
    }

    pub fn bytes_per_position(mut self, bpp: u64) -> Self {
        self.identity.bytes_per_position = bpp;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.default_seed = seed;
        self
    }

    pub fn row(mut self, history: Vec<TokenId>, logits: Vec<f32>) -> Result<Self, BackendError> {
        if logits.len() != self.vocab.len() {
            return Err(BackendError::RowLength {
                expected: self.vocab.len(),
                got: logits.len(),
            });
        }
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(BackendError::NonFiniteLogit(i));
        }
        for &t in &history {
            check_token(&self.vocab, t)?;
        }
        self.rows.insert(history, logits);
        Ok(self)
    }

    /// Tables the row reached after feeding the whole of `prompt`.
    pub fn prompt_row(self, prompt: &str, logits: Vec<f32>) -> Result<Self, BackendError> {
        let history = self.vocab.encode(prompt)?;
        self.row(history, logits)
    }

    /// Like [`FixtureBuilder::prompt_row`] with every logit at zero except
    /// the listed token texts.
    pub fn prompt_scores(self, prompt: &str, scores: &[(&str, f32)]) -> Result<Self, BackendError> {
        let mut logits = vec![0.0; self.vocab.len()];
        for (text, value) in scores {
            let id = self.vocab.text_to_id(text).ok_or_else(|| {
                BackendError::InvalidModel(format!("{text:?} is not a single token"))
            })?;
            logits[id.index()] = *value;
        }
        self.prompt_row(prompt, logits)
    }

    pub fn build(self) -> Result<FixtureModel, BackendError> {
        check_identity(&self.identity)?;
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(self.identity.name.as_bytes());
        for (_, text) in self.vocab.iter() {
            hasher.update(&(text.len() as u32).to_le_bytes());
            hasher.update(text);
        }
        hasher.update(&self.default_seed.to_le_bytes());
        Ok(FixtureModel {
            digest: hasher.finalize(),
            vocab: self.vocab,
            rows: self.rows,
            default_seed: self.default_seed,
            identity: self.identity,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FixtureSession {
    model: Arc<FixtureModel>,
    history: Vec<TokenId>,
}

impl FixtureSession {
    pub fn model(&self) -> &Arc<FixtureModel> {
        &self.model
    }

    pub fn history(&self) -> &[TokenId] {
        &self.history
    }
}

impl Session for FixtureSession {
    fn vocab(&self) -> &Vocabulary {
        &self.model.vocab
    }

    fn identity(&self) -> &ModelIdentity {
        &self.model.identity
    }

    fn position(&self) -> u64 {
        self.history.len() as u64
    }

    fn forward_one(&mut self, token: TokenId) -> Result<LogitVector, BackendError> {
        check_token(&self.model.vocab, token)?;
        self.history.push(token);
        LogitVector::new(self.model.logits_for(&self.history))
    }

    fn reset_kv(&mut self) {
        self.history.clear();
    }

    fn export_kv(&self) -> Vec<u8> {
        export_history(
            &self.history,
            self.model.digest,
            self.model.identity.bytes_per_position,
        )
    }

    fn import_kv(&mut self, position: u64, payload: &[u8]) -> Result<(), BackendError> {
        self.history = import_history(
            position,
            payload,
            self.model.digest,
            self.model.identity.bytes_per_position,
            self.model.vocab.len(),
        )?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Toy language model

/// Interpolation weights for context lengths 0, 1, 2, ... (renormalized over
/// the lengths available at a given position).
const TOY_WEIGHTS: [f64; 3] = [0.1, 0.3, 0.6];

/// Character-level count model over [`Vocabulary::printable_ascii`].
///
/// The next-character distribution mixes add-one-smoothed estimates for every
/// context length up to `order`; logits are the natural log of the mixture.
#[derive(Debug)]
pub struct ToyLm {
    vocab: Vocabulary,
    order: usize,
    // counts[k][context of length k] -> per-token counts
    counts: Vec<HashMap<Vec<TokenId>, Vec<u32>>>,
    identity: ModelIdentity,
    digest: u32,
}

impl ToyLm {
    pub const DEFAULT_ORDER: usize = 2;

    /// Trains on `corpus`; bytes outside the vocabulary (including `\r`) are
    /// skipped.
    pub fn train(corpus: &str) -> Self {
        Self::train_with_order(corpus, Self::DEFAULT_ORDER)
    }

    pub fn train_with_order(corpus: &str, order: usize) -> Self {
        let order = order.min(TOY_WEIGHTS.len() - 1);
        let vocab = Vocabulary::printable_ascii();
        let ids: Vec<TokenId> = corpus
            .bytes()
            .filter_map(|b| vocab.text_to_id([b]))
            .collect();
        let mut counts: Vec<HashMap<Vec<TokenId>, Vec<u32>>> = vec![HashMap::new(); order + 1];
        for i in 0..ids.len() {
            for (k, table) in counts.iter_mut().enumerate() {
                if i < k {
                    break;
                }
                let row = table
                    .entry(ids[i - k..i].to_vec())
                    .or_insert_with(|| vec![0; vocab.len()]);
                row[ids[i].index()] += 1;
            }
        }
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&(order as u32).to_le_bytes());
        for t in &ids {
            hasher.update(&t.0.to_le_bytes());
        }
        Self {
            vocab,
            order,
            counts,
            identity: ModelIdentity {
                name: "toy-lm".into(),
                layer_count: order as u32 + 1,
                bytes_per_position: MIN_BYTES_PER_POSITION,
            },
            digest: hasher.finalize(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        Ok(Self::train(&std::fs::read_to_string(path)?))
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.identity.name = name.into();
        self
    }

    pub fn with_bytes_per_position(mut self, bpp: u64) -> Result<Self, BackendError> {
        self.identity.bytes_per_position = bpp;
        check_identity(&self.identity)?;
        Ok(self)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn identity(&self) -> &ModelIdentity {
        &self.identity
    }

    pub fn session(self: &Arc<Self>) -> ToyLmSession {
        ToyLmSession {
            model: Arc::clone(self),
            history: Vec::new(),
        }
    }

    /// Count of `next` following `context` (length ≤ order) in training.
    pub fn count(&self, context: &[TokenId], next: TokenId) -> u32 {
        self.counts
            .get(context.len())
            .and_then(|t| t.get(context))
            .map_or(0, |row| row[next.index()])
    }

    pub fn logits_for(&self, history: &[TokenId]) -> Vec<f32> {
        let v = self.vocab.len();
        let usable = self.order.min(history.len());
        let weight_sum: f64 = TOY_WEIGHTS[..=usable].iter().sum();
        let mut probs = vec![0.0f64; v];
        for (k, weight) in TOY_WEIGHTS.iter().enumerate().take(usable + 1) {
            let w = weight / weight_sum;
            let context = &history[history.len() - k..];
            let row = self.counts[k].get(context);
            let total: u64 = row.map_or(0, |r| r.iter().map(|&c| c as u64).sum());
            let denom = (total + v as u64) as f64;
            for (i, p) in probs.iter_mut().enumerate() {
                let c = row.map_or(0, |r| r[i]) as f64;
                *p += w * (c + 1.0) / denom;
            }
        }
        probs.into_iter().map(|p| p.ln() as f32).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ToyLmSession {
    model: Arc<ToyLm>,
    history: Vec<TokenId>,
}

impl Session for ToyLmSession {
    fn vocab(&self) -> &Vocabulary {
        &self.model.vocab
    }

    fn identity(&self) -> &ModelIdentity {
        &self.model.identity
    }

    fn position(&self) -> u64 {
        self.history.len() as u64
    }

    fn forward_one(&mut self, token: TokenId) -> Result<LogitVector, BackendError> {
        check_token(&self.model.vocab, token)?;
        self.history.push(token);
        LogitVector::new(self.model.logits_for(&self.history))
    }

    fn reset_kv(&mut self) {
        self.history.clear();
    }

    fn export_kv(&self) -> Vec<u8> {
        export_history(
            &self.history,
            self.model.digest,
            self.model.identity.bytes_per_position,
        )
    }

    fn import_kv(&mut self, position: u64, payload: &[u8]) -> Result<(), BackendError> {
        self.history = import_history(
            position,
            payload,
            self.model.digest,
            self.model.identity.bytes_per_position,
            self.model.vocab.len(),
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn split_dangerous_vocab() -> Vocabulary {
        Vocabulary::new(["D", "anger", "ous", "Safe", "Yes", "No"]).unwrap()
    }

    #[test]
    fn text_to_id_exact_entries_only() {
        let v = Vocabulary::printable_ascii_with_words(&["Yes", "No"]).unwrap();
        assert_eq!(v.text_to_id("Yes"), Some(TokenId(96)));
        assert_eq!(v.text_to_id(""), None);
        assert_eq!(v.text_to_id("Ye"), None);
        assert_eq!(split_dangerous_vocab().text_to_id("Dangerous"), None);
    }

    #[test]
    fn greedy_longest_match() {
        let v = split_dangerous_vocab();
        let ids = v.encode("Dangerous").unwrap();
        assert_eq!(v.pieces("Dangerous"), ["D", "anger", "ous"]);
        assert_eq!(ids.len(), 3);
        assert!(v.encode("").unwrap().is_empty());
        let single = Vocabulary::new(["a", "b"]).unwrap();
        assert_eq!(single.encode("ab").unwrap(), vec![TokenId(0), TokenId(1)]);
    }

    #[test]
    fn unencodable_byte_is_reported() {
        let v = Vocabulary::printable_ascii();
        match v.encode("a\tb") {
            Err(BackendError::UnencodableInput { offset, byte }) => {
                assert_eq!((offset, byte), (1, b'\t'));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn vocab_rejects_duplicates_and_empty() {
        assert!(matches!(
            Vocabulary::new(["a", "a"]),
            Err(BackendError::DuplicateToken(_))
        ));
        assert!(matches!(
            Vocabulary::new(["a", ""]),
            Err(BackendError::EmptyToken)
        ));
    }

    #[test]
    fn toy_vocab_has_96_entries() {
        assert_eq!(Vocabulary::printable_ascii().len(), 96);
    }

    #[test]
    fn toy_lm_prefers_frequent_continuation() {
        let lm = Arc::new(ToyLm::train("aaab"));
        let v = lm.vocab();
        let (a, b) = (v.text_to_id("a").unwrap(), v.text_to_id("b").unwrap());
        // count oracle over "aaab": after "a", a follows twice, b once
        let corpus = b"aaab";
        let after_a = |c: u8| {
            corpus
                .windows(2)
                .filter(|w| w[0] == b'a' && w[1] == c)
                .count()
        };
        assert!(after_a(b'a') > after_a(b'b'));
        let mut s = lm.session();
        s.forward_one(a).unwrap();
        let logits = s.forward_one(a).unwrap();
        assert!(logits.get(a).unwrap() > logits.get(b).unwrap());
    }

    #[test]
    fn toy_lm_logits_are_log_probabilities() {
        let lm = Arc::new(ToyLm::train(
            "the quick brown fox\njumps over the lazy dog\n",
        ));
        let mut s = lm.session();
        for tok in lm.vocab().encode("the ").unwrap() {
            let l = s.forward_one(tok).unwrap();
            let total: f64 = l.as_slice().iter().map(|&x| (x as f64).exp()).sum();
            assert!((total - 1.0).abs() < 1e-5, "{total}");
        }
    }

    #[test]
    fn forward_rejects_out_of_range_token() {
        let lm = Arc::new(ToyLm::train("abc"));
        let mut s = lm.session();
        assert!(matches!(
            s.forward_one(TokenId(96)),
            Err(BackendError::InvalidToken {
                id: 96,
                vocab_size: 96
            })
        ));
        assert_eq!(s.position(), 0);
    }

    #[test]
    fn fixture_returns_tabled_row_and_seeded_fallback() {
        let vocab = Vocabulary::new(["a", "b", "c"]).unwrap();
        let model = Arc::new(
            FixtureBuilder::new(vocab)
                .seed(7)
                .row(vec![TokenId(0), TokenId(1)], vec![1.0, 2.0, 3.0])
                .unwrap()
                .build()
                .unwrap(),
        );
        let mut s = model.session();
        let first = s.forward_one(TokenId(0)).unwrap();
        assert!(first.as_slice().iter().all(|v| (-4.0..4.0).contains(v)));
        assert_eq!(
            s.forward_one(TokenId(1)).unwrap().as_slice(),
            &[1.0, 2.0, 3.0]
        );
        let mut again = model.session();
        assert_eq!(again.forward_one(TokenId(0)).unwrap(), first);
    }

    #[test]
    fn fixture_json_round_trip() {
        let json =
            r#"{"vocab":["x","y"],"rows":[{"history":[0],"logits":[0.5,-1.0]}],"default_seed":3}"#;
        let model = FixtureModel::from_json(json).unwrap();
        assert_eq!(model.identity().name, "fixture");
        let again = FixtureModel::from_json(&model.to_json()).unwrap();
        assert_eq!(again.to_file_data(), model.to_file_data());
        assert_eq!(again.logits_for(&[TokenId(0)]), vec![0.5, -1.0]);
    }

    #[test]
    fn fixture_rejects_bad_rows() {
        let json =
            r#"{"vocab":["x","y"],"rows":[{"history":[0],"logits":[0.5]}],"default_seed":3}"#;
        assert!(matches!(
            FixtureModel::from_json(json),
            Err(BackendError::RowLength { .. })
        ));
        let json = r#"{"vocab":["x"],"rows":[{"history":[4],"logits":[0.5]}],"default_seed":3}"#;
        assert!(matches!(
            FixtureModel::from_json(json),
            Err(BackendError::InvalidToken { .. })
        ));
    }

    #[test]
    fn reset_is_idempotent_and_replays() {
        let lm = Arc::new(ToyLm::train("hello world"));
        let mut s = lm.session();
        let toks = lm.vocab().encode("hel").unwrap();
        let fresh: Vec<_> = toks.iter().map(|&t| s.forward_one(t).unwrap()).collect();
        s.reset_kv();
        s.reset_kv();
        assert_eq!(s.position(), 0);
        let replay: Vec<_> = toks.iter().map(|&t| s.forward_one(t).unwrap()).collect();
        assert_eq!(fresh, replay);
    }

    #[test]
    fn prefill_counts_one_forward_per_token() {
        let lm = Arc::new(ToyLm::train("abc"));
        let mut s = CountingSession::new(lm.session());
        prefill(&mut s, "abcab").unwrap();
        assert_eq!(s.forward_calls(), 5);
        assert_eq!(s.position(), 5);
        assert!(matches!(
            prefill(&mut s, ""),
            Err(BackendError::EmptyPrompt)
        ));
    }

    #[test]
    fn kv_payload_round_trip_and_validation() {
        let lm = Arc::new(ToyLm::train("abcabc"));
        let mut s = lm.session();
        prefill(&mut s, "abc").unwrap();
        let payload = s.export_kv();
        assert_eq!(payload.len(), 3 * 8);
        let mut other = lm.session();
        other.import_kv(3, &payload).unwrap();
        assert_eq!(other.position(), 3);
        assert!(other.import_kv(2, &payload).is_err());
        let foreign = Arc::new(ToyLm::train("zzz"));
        assert!(foreign.session().import_kv(3, &payload).is_err());
    }

    proptest! {
        #[test]
        fn ascii_round_trip(text in "[ -~\n]{0,64}") {
            let v = Vocabulary::printable_ascii();
            let ids = v.encode(&text).unwrap();
            prop_assert_eq!(ids.len(), text.len());
            prop_assert_eq!(v.decode(&ids).unwrap(), text.into_bytes());
        }

        #[test]
        fn identical_histories_give_identical_logits(text in "[a-e]{1,16}") {
            let lm = Arc::new(ToyLm::train("abcdeabcdeaabbccddee"));
            let (mut a, mut b) = (lm.session(), lm.session());
            for t in lm.vocab().encode(&text).unwrap() {
                let (la, lb) = (a.forward_one(t).unwrap(), b.forward_one(t).unwrap());
                prop_assert!(la.as_slice().iter().zip(lb.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
