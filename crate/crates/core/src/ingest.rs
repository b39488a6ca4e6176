//! Listing ingestion and minimal canonicalization.
//!
//! Two listing formats are accepted: a flat assembly text with sentinel
//! headers (`;; FUNC <name> @ 0x<addr>`) and one-JSON-object-per-line
//! function records. Canonicalization rewrites absolute in-image address
//! literals to `MEM_PTR` and otherwise leaves every mnemonic, register and
//! immediate untouched.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Replacement token for absolute in-image addresses.
pub const MEM_PTR: &str = "MEM_PTR";

const SENTINEL: &str = ";; FUNC ";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("listing is not valid UTF-8: {0}")]
    InvalidUtf8(String),
    #[error("line {line}: malformed function header: {reason}")]
    MalformedHeader { line: usize, reason: String },
    #[error("line {line}: instruction outside of any function")]
    InstructionOutsideFunction { line: usize },
    #[error("function `{name}` has no instruction lines")]
    EmptyFunction { name: String },
    #[error("duplicate function address 0x{address:x} in sample `{sample_id}`")]
    DuplicateAddress { sample_id: String, address: u64 },
    #[error("line {line}: malformed JSON function record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("empty sample id")]
    EmptySampleId,
    #[error("invalid address range: 0x{low:x} must be below 0x{high:x}")]
    InvalidRange { low: u64, high: u64 },
    #[error("invalid address range syntax `{0}` (expected 0x<lo>:0x<hi>)")]
    RangeSyntax(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ListingFormat {
    FlatAsm,
    #[serde(rename = "jsonl")]
    FunctionJsonl,
}

impl std::str::FromStr for ListingFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flatasm" => Ok(ListingFormat::FlatAsm),
            "jsonl" => Ok(ListingFormat::FunctionJsonl),
            other => Err(format!("unknown listing format `{other}`")),
        }
    }
}

/// A function as exported by the disassembler, before canonicalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawFunction {
    pub sample_id: String,
    pub name: String,
    pub start_address: u64,
    pub lines: Vec<String>,
}

/// Inclusive absolute-address range of a binary image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddrRange {
    low: u64,
    high: u64,
}

impl AddrRange {
    pub fn new(low: u64, high: u64) -> Result<Self, IngestError> {
        if low >= high {
            return Err(IngestError::InvalidRange { low, high });
        }
        Ok(Self { low, high })
    }

    pub fn low(&self) -> u64 {
        self.low
    }

    pub fn high(&self) -> u64 {
        self.high
    }

    pub fn contains(&self, value: u64) -> bool {
        self.low <= value && value <= self.high
    }
}

impl std::str::FromStr for AddrRange {
    type Err = IngestError;

    /// Parses `0x<lo>:0x<hi>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || IngestError::RangeSyntax(s.to_string());
        let (lo, hi) = s.split_once(':').ok_or_else(err)?;
        let lo = parse_hex_u64(lo.trim()).ok_or_else(err)?;
        let hi = parse_hex_u64(hi.trim()).ok_or_else(err)?;
        AddrRange::new(lo, hi)
    }
}

impl fmt::Display for AddrRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:x}:0x{:x}", self.low, self.high)
    }
}

/// 256-bit content hash of a canonical rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn of_text(text: &str) -> Self {
        ContentHash(Sha256::digest(text.as_bytes()).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s.trim()).ok()?;
        Some(ContentHash(bytes.try_into().ok()?))
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ContentHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ContentHash::from_hex(&s).ok_or_else(|| serde::de::Error::custom("bad content hash"))
    }
}

/// A function after minimal canonicalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonFunction {
    pub sample_id: String,
    pub name: String,
    pub start_address: u64,
    pub content_hash: ContentHash,
    pub lines: Vec<String>,
    pub source_line_count: usize,
}

impl CanonFunction {
    /// Lines joined by `\n`, no trailing newline. This is the text that is
    /// hashed and sent to the embedding provider.
    pub fn render_text(&self) -> String {
        self.lines.join("\n")
    }

    pub fn to_record(&self) -> FunctionRecord {
        FunctionRecord {
            sample_id: self.sample_id.clone(),
            name: self.name.clone(),
            address: format!("0x{:x}", self.start_address),
            lines: self.lines.clone(),
        }
    }
}

/// One line of the FunctionJsonl format. Field order is the wire order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub sample_id: String,
    pub name: String,
    pub address: String,
    pub lines: Vec<String>,
}

impl FunctionRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("function record serializes")
    }
}

impl From<&RawFunction> for FunctionRecord {
    fn from(f: &RawFunction) -> Self {
        FunctionRecord {
            sample_id: f.sample_id.clone(),
            name: f.name.clone(),
            address: format!("0x{:x}", f.start_address),
            lines: f.lines.clone(),
        }
    }
}

fn parse_hex_u64(s: &str) -> Option<u64> {
    let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X"))?;
    if digits.is_empty() {
        return None;
    }
    u64::from_str_radix(digits, 16).ok()
}

/// Splits a listing into functions. `sample_id` names the sample for
/// FlatAsm input; FunctionJsonl records carry their own.
pub fn parse_listing(
    text: &[u8],
    format: ListingFormat,
    sample_id: &str,
) -> Result<Vec<RawFunction>, IngestError> {
    let text = std::str::from_utf8(text).map_err(|e| IngestError::InvalidUtf8(e.to_string()))?;
    let mut functions = match format {
        ListingFormat::FlatAsm => {
            if sample_id.is_empty() {
                return Err(IngestError::EmptySampleId);
            }
            parse_flat_asm(text, sample_id)?
        }
        ListingFormat::FunctionJsonl => parse_function_jsonl(text)?,
    };

    let mut seen = HashSet::new();
    for f in &functions {
        if !seen.insert((f.sample_id.as_str(), f.start_address)) {
            return Err(IngestError::DuplicateAddress {
                sample_id: f.sample_id.clone(),
                address: f.start_address,
            });
        }
    }
    functions.sort_by(|a, b| {
        a.sample_id
            .cmp(&b.sample_id)
            .then(a.start_address.cmp(&b.start_address))
    });
    Ok(functions)
}

fn parse_flat_asm(text: &str, sample_id: &str) -> Result<Vec<RawFunction>, IngestError> {
    let mut out: Vec<RawFunction> = Vec::new();
    let mut current: Option<RawFunction> = None;

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(SENTINEL) {
            if let Some(done) = current.take() {
                out.push(finish_function(done)?);
            }
            current = Some(parse_header(rest, sample_id, line_no)?);
            continue;
        }
        if line == SENTINEL.trim_end() {
            return Err(IngestError::MalformedHeader {
                line: line_no,
                reason: "missing name and address".into(),
            });
        }
        if line.starts_with(';') {
            continue;
        }
        let instr = match line.find(';') {
            Some(pos) => line[..pos].trim_end(),
            None => line,
        };
        if instr.is_empty() || is_label(instr) {
            continue;
        }
        match current.as_mut() {
            Some(f) => f.lines.push(instr.to_string()),
            None => return Err(IngestError::InstructionOutsideFunction { line: line_no }),
        }
    }
    if let Some(done) = current.take() {
        out.push(finish_function(done)?);
    }
    Ok(out)
}

fn is_label(s: &str) -> bool {
    s.ends_with(':') && !s.contains(char::is_whitespace)
}

fn parse_header(rest: &str, sample_id: &str, line: usize) -> Result<RawFunction, IngestError> {
    let malformed = |reason: &str| IngestError::MalformedHeader {
        line,
        reason: reason.to_string(),
    };
    let (name, addr) = rest
        .rsplit_once(" @ ")
        .ok_or_else(|| malformed("expected `<name> @ 0x<addr>`"))?;
    let name = name.trim();
    if name.is_empty() {
        return Err(malformed("empty function name"));
    }
    let start_address =
        parse_hex_u64(addr.trim()).ok_or_else(|| malformed("address is not 0x-prefixed hex"))?;
    Ok(RawFunction {
        sample_id: sample_id.to_string(),
        name: name.to_string(),
        start_address,
        lines: Vec::new(),
    })
}

fn finish_function(f: RawFunction) -> Result<RawFunction, IngestError> {
    if f.lines.is_empty() {
        return Err(IngestError::EmptyFunction { name: f.name });
    }
    Ok(f)
}

fn parse_function_jsonl(text: &str) -> Result<Vec<RawFunction>, IngestError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let rec: FunctionRecord =
            serde_json::from_str(line).map_err(|e| IngestError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        out.push(raw_from_record(rec, line_no)?);
    }
    Ok(out)
}

/// Validates a decoded record and converts it to a [`RawFunction`].
pub fn raw_from_record(rec: FunctionRecord, line: usize) -> Result<RawFunction, IngestError> {
    if rec.sample_id.is_empty() {
        return Err(IngestError::EmptySampleId);
    }
    let start_address = parse_hex_u64(&rec.address).ok_or(IngestError::MalformedRecord {
        line,
        reason: format!("address `{}` is not 0x-prefixed hex", rec.address),
    })?;
    if rec.lines.is_empty() {
        return Err(IngestError::EmptyFunction { name: rec.name });
    }
    Ok(RawFunction {
        sample_id: rec.sample_id,
        name: rec.name,
        start_address,
        lines: rec.lines,
    })
}

/// Renders functions back into FlatAsm text.
pub fn render_flat_asm(functions: &[RawFunction]) -> String {
    let mut out = String::new();
    for f in functions {
        out.push_str(&format!("{SENTINEL}{} @ 0x{:x}\n", f.name, f.start_address));
        for line in &f.lines {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '$' | '@' | '?')
}

/// IDA-style `0040123Ah` literal: leading decimal digit, hex digits, `h` suffix.
fn parse_h_suffix_hex(tok: &str) -> Option<u64> {
    let digits = tok.strip_suffix('h')?;
    let first = digits.chars().next()?;
    if !first.is_ascii_digit() || !digits.chars().all(|c| c.is_ascii_hexdigit()) {
        return None;
    }
    u64::from_str_radix(digits, 16).ok()
}

fn canonical_word(word: &str, in_brackets: bool, range: Option<AddrRange>) -> String {
    if word == MEM_PTR {
        return word.to_string();
    }
    let lower = word.to_ascii_lowercase();
    let address = parse_hex_u64(&lower).or_else(|| {
        if in_brackets {
            parse_h_suffix_hex(&lower)
        } else {
            None
        }
    });
    match (address, range) {
        (Some(v), Some(r)) if r.contains(v) => MEM_PTR.to_string(),
        _ => lower,
    }
}

/// Canonicalizes one instruction line. Without a range no literal is
/// treated as an address.
pub fn canonicalize_line(line: &str, range: Option<AddrRange>) -> String {
    let mut out = String::with_capacity(line.len());
    let mut depth = 0usize;
    let mut pending_space = false;
    let mut chars = line.trim().char_indices().peekable();
    let trimmed = line.trim();

    while let Some((start, c)) = chars.next() {
        if c.is_whitespace() {
            pending_space = true;
            continue;
        }
        if pending_space && !out.is_empty() {
            out.push(' ');
        }
        pending_space = false;
        if is_word_char(c) {
            let mut end = start + c.len_utf8();
            while let Some(&(i, n)) = chars.peek() {
                if !is_word_char(n) {
                    break;
                }
                end = i + n.len_utf8();
                chars.next();
            }
            out.push_str(&canonical_word(&trimmed[start..end], depth > 0, range));
        } else {
            match c {
                '[' => depth += 1,
                ']' => depth = depth.saturating_sub(1),
                _ => {}
            }
            out.extend(c.to_lowercase());
        }
    }
    out
}

/// Applies minimal canonicalization: in-range absolute address literals
/// become `MEM_PTR`, whitespace collapses to single spaces and text is
/// lowercased. Nothing else changes.
pub fn canonicalize(f: &RawFunction, range: AddrRange) -> CanonFunction {
    canonicalize_opt(f, Some(range))
}

/// As [`canonicalize`], with address rewriting skipped when `range` is
/// `None` (for records that are already canonical).
pub fn canonicalize_opt(f: &RawFunction, range: Option<AddrRange>) -> CanonFunction {
    let lines: Vec<String> = f
        .lines
        .iter()
        .map(|l| canonicalize_line(l, range))
        .filter(|l| !l.is_empty())
        .collect();
    let content_hash = ContentHash::of_text(&lines.join("\n"));
    CanonFunction {
        sample_id: f.sample_id.clone(),
        name: f.name.clone(),
        start_address: f.start_address,
        content_hash,
        lines,
        source_line_count: f.lines.len(),
    }
}
