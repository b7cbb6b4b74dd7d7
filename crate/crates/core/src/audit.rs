//! Tamper-evident audit log.
//!
//! Each entry commits to its predecessor through BLAKE3:
//!
//! ```text
//! entry_hash = BLAKE3( seq u64 | timestamp_ms u64 | action_digest [32]
//!                    | decision str | p_harmful f64 bits | stage str | note str
//!                    | prev_hash [32] )
//! ```
//!
//! Integers are little-endian; `str` is a u32 LE byte length followed by
//! UTF-8. The genesis entry links to 32 zero bytes.
//!
//! Entries live in a bounded ring buffer. Eviction keeps the running head
//! hash, so the retained window verifies from its oldest entry. Removing a
//! suffix is not detectable from the entries alone.

use std::borrow::Cow;
use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::governance::Decision;

pub const DEFAULT_CAPACITY: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("capacity must be at least 1")]
    ZeroCapacity,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 32-byte digest, hex-encoded in JSON.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Hash32(pub [u8; 32]);

impl Hash32 {
    pub const ZERO: Hash32 = Hash32([0; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Hash32(*blake3::hash(bytes).as_bytes())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_hex())
    }
}

impl Serialize for Hash32 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut buf = [0u8; 64];
        hex::encode_to_slice(self.0, &mut buf).expect("64 hex digits");
        s.serialize_str(std::str::from_utf8(&buf).expect("hex is ascii"))
    }
}

impl<'de> Deserialize<'de> for Hash32 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct HexVisitor;
        impl serde::de::Visitor<'_> for HexVisitor {
            type Value = Hash32;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("64 hex digits")
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<Hash32, E> {
                let mut out = [0u8; 32];
                hex::decode_to_slice(v, &mut out).map_err(E::custom)?;
                Ok(Hash32(out))
            }
        }
        d.deserialize_str(HexVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditEntry {
    pub sequence_number: u64,
    pub timestamp_ms: u64,
    pub action_digest: Hash32,
    pub decision: Decision,
    pub p_harmful: f64,
    pub stage: String,
    pub note: String,
    pub prev_hash: Hash32,
    pub entry_hash: Hash32,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct EntryFields<'a> {
    sequence_number: u64,
    timestamp_ms: u64,
    action_digest: Hash32,
    decision: Decision,
    p_harmful: f64,
    stage: &'a str,
    note: &'a str,
    prev_hash: Hash32,
}

fn canonical_bytes(f: &EntryFields<'_>) -> Vec<u8> {
    let mut out = Vec::with_capacity(128);
    out.extend_from_slice(&f.sequence_number.to_le_bytes());
    out.extend_from_slice(&f.timestamp_ms.to_le_bytes());
    out.extend_from_slice(&f.action_digest.0);
    put_str(&mut out, f.decision.as_str());
    out.extend_from_slice(&f.p_harmful.to_bits().to_le_bytes());
    put_str(&mut out, f.stage);
    put_str(&mut out, f.note);
    out.extend_from_slice(&f.prev_hash.0);
    out
}

/// Borrowing twin of [`AuditEntry`] used when verifying exported lines.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryView<'a> {
    sequence_number: u64,
    timestamp_ms: u64,
    action_digest: Hash32,
    decision: Decision,
    p_harmful: f64,
    #[serde(borrow)]
    stage: Cow<'a, str>,
    #[serde(borrow)]
    note: Cow<'a, str>,
    prev_hash: Hash32,
    entry_hash: Hash32,
}

impl EntryView<'_> {
    fn compute_hash(&self) -> Hash32 {
        Hash32::of(&canonical_bytes(&EntryFields {
            sequence_number: self.sequence_number,
            timestamp_ms: self.timestamp_ms,
            action_digest: self.action_digest,
            decision: self.decision,
            p_harmful: self.p_harmful,
            stage: &self.stage,
            note: &self.note,
            prev_hash: self.prev_hash,
        }))
    }
}

impl AuditEntry {
    /// Canonical byte encoding hashed into `entry_hash`.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_bytes(&EntryFields {
            sequence_number: self.sequence_number,
            timestamp_ms: self.timestamp_ms,
            action_digest: self.action_digest,
            decision: self.decision,
            p_harmful: self.p_harmful,
            stage: &self.stage,
            note: &self.note,
            prev_hash: self.prev_hash,
        })
    }

    pub fn compute_hash(&self) -> Hash32 {
        Hash32::of(&self.canonical_bytes())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("audit entry serializes")
    }
}

/// Payload of one governance decision before it is chained.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub action_digest: Hash32,
    pub decision: Decision,
    pub p_harmful: f64,
    pub stage: String,
    pub note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    System,
    Fixed(u64),
}

impl Clock {
    fn now_ms(self) -> u64 {
        match self {
            Clock::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
            Clock::Fixed(ms) => ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum VerifyOutcome {
    Ok { entries: usize },
    TamperDetected { index: usize },
}

impl VerifyOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, VerifyOutcome::Ok { .. })
    }
}

#[derive(Debug, Clone)]
pub struct AuditChain {
    entries: VecDeque<AuditEntry>,
    capacity: usize,
    head: Hash32,
    next_sequence: u64,
    clock: Clock,
}

impl Default for AuditChain {
    fn default() -> Self {
        Self::new()
    }
}

impl AuditChain {
    pub fn new() -> Self {
        Self::with_capacity(DEFAULT_CAPACITY).expect("nonzero default capacity")
    }

    pub fn with_capacity(capacity: usize) -> Result<Self, AuditError> {
        if capacity == 0 {
            return Err(AuditError::ZeroCapacity);
        }
        Ok(Self {
            entries: VecDeque::new(),
            capacity,
            head: Hash32::ZERO,
            next_sequence: 0,
            clock: Clock::System,
        })
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn append(&mut self, record: DecisionRecord) -> AuditEntry {
        let mut entry = AuditEntry {
            sequence_number: self.next_sequence,
            timestamp_ms: self.clock.now_ms(),
            action_digest: record.action_digest,
            decision: record.decision,
            p_harmful: record.p_harmful,
            stage: record.stage,
            note: record.note,
            prev_hash: self.head,
            entry_hash: Hash32::ZERO,
        };
        entry.entry_hash = entry.compute_hash();
        self.head = entry.entry_hash;
        self.next_sequence += 1;
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry.clone());
        entry
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn head_hash(&self) -> Hash32 {
        self.head
    }

    pub fn entries(&self) -> impl Iterator<Item = &AuditEntry> {
        self.entries.iter()
    }

    pub fn last(&self) -> Option<&AuditEntry> {
        self.entries.back()
    }

    pub fn verify(&self) -> VerifyOutcome {
        let (a, b) = self.entries.as_slices();
        if b.is_empty() {
            verify_entries(a)
        } else {
            verify_entries(&self.entries.iter().cloned().collect::<Vec<_>>())
        }
    }

    /// JSON Lines, one entry per line, trailing newline.
    pub fn export_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.to_json_line());
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), AuditError> {
        std::fs::write(path, self.export_jsonl())?;
        Ok(())
    }

    /// Rebuilds a chain from exported entries; appends continue from the last
    /// one. Call [`AuditChain::verify`] before trusting it.
    pub fn import_jsonl(text: &str, capacity: usize) -> Result<Self, AuditError> {
        let mut chain = Self::with_capacity(capacity)?;
        for (line, raw) in jsonl_lines(text.as_bytes()).enumerate() {
            let entry: AuditEntry =
                serde_json::from_slice(raw).map_err(|source| AuditError::Parse { line, source })?;
            chain.head = entry.entry_hash;
            chain.next_sequence = entry.sequence_number + 1;
            if chain.entries.len() == chain.capacity {
                chain.entries.pop_front();
            }
            chain.entries.push_back(entry);
        }
        Ok(chain)
    }

    pub fn read_jsonl(path: impl AsRef<Path>, capacity: usize) -> Result<Self, AuditError> {
        Self::import_jsonl(&std::fs::read_to_string(path)?, capacity)
    }
}

fn jsonl_lines(bytes: &[u8]) -> impl Iterator<Item = &[u8]> {
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    let empty = body.is_empty();
    body.split(|&b| b == b'\n').filter(move |_| !empty)
}

fn entry_holds(prev: Option<&AuditEntry>, e: &AuditEntry) -> bool {
    let linked = match prev {
        Some(prev) => {
            e.prev_hash == prev.entry_hash
                && Some(e.sequence_number) == prev.sequence_number.checked_add(1)
        }
        None => e.sequence_number != 0 || e.prev_hash == Hash32::ZERO,
    };
    linked && e.compute_hash() == e.entry_hash
}

/// Recomputes every hash and link; reports the first index that fails.
pub fn verify_entries(entries: &[AuditEntry]) -> VerifyOutcome {
    for (i, e) in entries.iter().enumerate() {
        if !entry_holds(i.checked_sub(1).map(|p| &entries[p]), e) {
            return VerifyOutcome::TamperDetected { index: i };
        }
    }
    VerifyOutcome::Ok {
        entries: entries.len(),
    }
}

/// Verifies an exported JSON Lines file, stopping at the first break. A line
/// that fails to parse, or that is not the canonical serialization of what
/// it parses to, counts as a break at that line.
pub fn verify_jsonl(bytes: &[u8]) -> VerifyOutcome {
    // (sequence_number, entry_hash) of the previous line
    let mut prev: Option<(u64, Hash32)> = None;
    let mut canonical = Vec::with_capacity(512);
    let mut count = 0;
    for (i, line) in jsonl_lines(bytes).enumerate() {
        let Ok(entry) = serde_json::from_slice::<EntryView>(line) else {
            return VerifyOutcome::TamperDetected { index: i };
        };
        canonical.clear();
        serde_json::to_writer(&mut canonical, &entry).expect("audit entry serializes");
        let linked = match prev {
            Some((seq, hash)) => {
                entry.prev_hash == hash && Some(entry.sequence_number) == seq.checked_add(1)
            }
            None => entry.sequence_number != 0 || entry.prev_hash == Hash32::ZERO,
        };
        if canonical != line || !linked || entry.compute_hash() != entry.entry_hash {
            return VerifyOutcome::TamperDetected { index: i };
        }
        prev = Some((entry.sequence_number, entry.entry_hash));
        count += 1;
    }
    VerifyOutcome::Ok { entries: count }
}
