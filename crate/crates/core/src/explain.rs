//! Differential explanation of an anchor function against its proof.
//!
//! The prompt is a fixed, versioned template. The stub generator only
//! states facts computed from the two listings, so each of its claims can
//! be checked mechanically.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const TEMPLATE_VERSION: u32 = 1;

const FENCE: &str = "```";
const ESCAPED_FENCE: &str = "\\`\\`\\`";

const SYSTEM_INSTRUCTION: &str = "You are a malware analyst performing differential analysis of two \
assembly functions. Ignore superficial syntactic differences such as register reallocation, \
instruction substitution, dead code and renamed labels. Focus only on the functional logic the \
two functions share. Ground every claim in instructions that appear in the listings.";

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("invalid explanation request: {0}")]
    InvalidRequest(String),
    #[error("generation service unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("generator returned an empty completion")]
    EmptyCompletion,
    #[error("remote generator requires an endpoint")]
    MissingEndpoint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofProvenance {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_seen: Option<chrono::NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationRequest {
    pub anchor_text: String,
    pub proof_text: String,
    pub family: String,
    pub proof_provenance: ProofProvenance,
}

impl ExplanationRequest {
    pub fn validate(&self) -> Result<(), ExplainError> {
        if self.anchor_text.is_empty() || self.proof_text.is_empty() {
            return Err(ExplainError::InvalidRequest("listings must be non-empty".into()));
        }
        if self.family.is_empty() {
            return Err(ExplainError::InvalidRequest("family must be non-empty".into()));
        }
        Ok(())
    }

    /// SHA-256 over the template version and length-prefixed fields.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(TEMPLATE_VERSION.to_le_bytes());
        let first_seen = self
            .proof_provenance
            .first_seen
            .map(|d| d.to_string())
            .unwrap_or_default();
        for field in [
            self.anchor_text.as_str(),
            self.proof_text.as_str(),
            self.family.as_str(),
            self.proof_provenance.sample_id.as_str(),
            first_seen.as_str(),
        ] {
            h.update((field.len() as u64).to_le_bytes());
            h.update(field.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn escape_fence(text: &str) -> String {
    text.replace('\\', "\\\\").replace(FENCE, ESCAPED_FENCE)
}

/// Inverse of the listing escaping applied by [`build_prompt`].
pub fn unescape_listing(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(n) = chars.next() {
                out.push(n);
            }
        } else {
            out.push(c);
        }
    }
    out
}

pub fn question(family: &str) -> String {
    format!("Why is this function considered a variant of Family {family}?")
}

pub fn build_prompt(req: &ExplanationRequest) -> String {
    let first_seen = req
        .proof_provenance
        .first_seen
        .map(|d| d.to_string())
        .unwrap_or_else(|| "unknown".into());
    let mut p = String::new();
    p.push_str(&format!("[template v{TEMPLATE_VERSION}]\n"));
    p.push_str(SYSTEM_INSTRUCTION);
    p.push_str("\n\nANCHOR (function from the sample under analysis):\n");
    p.push_str(FENCE);
    p.push('\n');
    p.push_str(&escape_fence(&req.anchor_text));
    p.push('\n');
    p.push_str(FENCE);
    p.push_str(&format!(
        "\n\nPROOF (closest known reference; sample {}, first seen {first_seen}):\n",
        req.proof_provenance.sample_id
    ));
    p.push_str(FENCE);
    p.push('\n');
    p.push_str(&escape_fence(&req.proof_text));
    p.push('\n');
    p.push_str(FENCE);
    p.push_str("\n\nQuestion: ");
    p.push_str(&question(&req.family));
    p.push('\n');
    p
}

/// Extracts the ANCHOR and PROOF listings back out of a prompt.
pub fn parse_prompt_listings(prompt: &str) -> Option<(String, String)> {
    let mut blocks = Vec::new();
    let mut inside: Option<Vec<&str>> = None;
    for line in prompt.lines() {
        if line == FENCE {
            match inside.take() {
                Some(body) => blocks.push(unescape_listing(&body.join("\n"))),
                None => inside = Some(Vec::new()),
            }
        } else if let Some(body) = inside.as_mut() {
            body.push(line);
        }
    }
    match blocks.as_slice() {
        [a, b] => Some((a.clone(), b.clone())),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Remote,
    StubTemplate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub text: String,
    pub generator: GeneratorKind,
    pub request_digest: String,
    pub template_version: u32,
    /// Set for model-generated text, whose claims are not checked locally.
    pub unverified_claims: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorConfig {
    Stub,
    Remote {
        endpoint: String,
        model: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_retries")]
        retries: u32,
    },
}

fn default_timeout_ms() -> u64 {
    120_000
}
fn default_retries() -> u32 {
    1
}

/// Parses a decimal or `0x` hex literal; `MEM_PTR` and symbols are not
/// constants.
pub fn parse_numeric_literal(tok: &str) -> Option<u64> {
    let t = tok.trim_start_matches(['+', '-']);
    if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        return u64::from_str_radix(h, 16).ok();
    }
    if !t.is_empty() && t.chars().all(|c| c.is_ascii_digit()) {
        return t.parse().ok();
    }
    None
}

/// Numeric constants of a listing, normalized to their values.
pub fn listing_constants(text: &str) -> BTreeSet<u64> {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter_map(parse_numeric_literal)
        .collect()
}

fn mnemonic_counts(text: &str) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for line in text.lines() {
        if let Some(mn) = line.split_whitespace().next() {
            *m.entry(mn).or_insert(0) += 1;
        }
    }
    m
}

/// Multiset Jaccard overlap of mnemonics, in percent.
pub fn mnemonic_overlap_pct(a: &str, b: &str) -> f64 {
    let (ma, mb) = (mnemonic_counts(a), mnemonic_counts(b));
    let keys: BTreeSet<&str> = ma.keys().chain(mb.keys()).copied().collect();
    let (mut inter, mut union) = (0usize, 0usize);
    for k in keys {
        let (x, y) = (ma.get(k).copied().unwrap_or(0), mb.get(k).copied().unwrap_or(0));
        inter += x.min(y);
        union += x.max(y);
    }
    if union == 0 {
        0.0
    } else {
        100.0 * inter as f64 / union as f64
    }
}

/// Constants present in both listings.
pub fn shared_constants(a: &str, b: &str) -> Vec<u64> {
    listing_constants(a)
        .intersection(&listing_constants(b))
        .copied()
        .collect()
}

fn stub_text(req: &ExplanationRequest) -> String {
    let overlap = mnemonic_overlap_pct(&req.anchor_text, &req.proof_text);
    let shared = shared_constants(&req.anchor_text, &req.proof_text);
    let mut s = format!(
        "Functional identity: the anchor function is attributed to family {} by its \
         nearest reference function from sample {}.\n",
        req.family, req.proof_provenance.sample_id
    );
    s.push_str(&format!("Shared mnemonic overlap: {overlap:.1}%\n"));
    if shared.is_empty() {
        s.push_str("Shared constants: none\n");
    } else {
        let list: Vec<String> = shared.iter().map(|v| format!("0x{v:x} ({v})")).collect();
        s.push_str(&format!("Shared constants: {}\n", list.join(", ")));
    }
    s
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    model: &'a str,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct GenerateResponse {
    completion: String,
}

pub fn generate(req: &ExplanationRequest, cfg: &GeneratorConfig) -> Result<Explanation, ExplainError> {
    req.validate()?;
    let request_digest = req.digest();
    match cfg {
        GeneratorConfig::Stub => Ok(Explanation {
            text: stub_text(req),
            generator: GeneratorKind::StubTemplate,
            request_digest,
            template_version: TEMPLATE_VERSION,
            unverified_claims: false,
        }),
        GeneratorConfig::Remote {
            endpoint,
            model,
            timeout_ms,
            retries,
        } => {
            if endpoint.is_empty() {
                return Err(ExplainError::MissingEndpoint);
            }
            let prompt = build_prompt(req);
            let text = post_generate(endpoint, model, &prompt, *timeout_ms, *retries)?;
            if text.is_empty() {
                return Err(ExplainError::EmptyCompletion);
            }
            Ok(Explanation {
                text,
                generator: GeneratorKind::Remote,
                request_digest,
                template_version: TEMPLATE_VERSION,
                unverified_claims: true,
            })
        }
    }
}

fn post_generate(
    endpoint: &str,
    model: &str,
    prompt: &str,
    timeout_ms: u64,
    retries: u32,
) -> Result<String, ExplainError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(timeout_ms)))
        .build()
        .into();
    let url = format!("{}/generate", endpoint.trim_end_matches('/'));
    let body = GenerateRequest { model, prompt };
    let mut last = String::new();
    for attempt in 0..=retries {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(100 * u64::from(attempt)));
        }
        match agent.post(&url).send_json(&body) {
            Ok(mut resp) => {
                return resp
                    .body_mut()
                    .read_json::<GenerateResponse>()
                    .map(|r| r.completion)
                    .map_err(|e| ExplainError::RemoteUnavailable(e.to_string()));
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(ExplainError::RemoteUnavailable(last))
}
