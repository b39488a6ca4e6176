//! Embedding providers: a remote embedding service and a deterministic
//! signed feature-hashing encoder used when no model is available.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variable that overrides the configured remote endpoint.
pub const ENDPOINT_ENV: &str = "ASMRAG_EMBED_ENDPOINT";
/// File name of the provider config stored inside a KB directory.
pub const ENCODER_FILE: &str = "encoder.json";

const NORM_TOLERANCE: f64 = 1e-5;
const MIN_DIM: usize = 8;
const GRAM_SEPARATOR: char = '\u{1f}';

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding service unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("empty text at batch position {0}")]
    EmptyText(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("vector contains a non-finite value")]
    NonFinite,
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
    #[error("malformed embedding response: {0}")]
    BadResponse(String),
}

/// A unit-norm dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// Scales `raw` to unit L2 norm.
    pub fn normalize(raw: &[f32]) -> Result<Self, EmbedError> {
        if raw.is_empty() {
            return Err(EmbedError::ZeroVector);
        }
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let norm = raw.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(EmbedError::ZeroVector);
        }
        let values = raw.iter().map(|&x| (f64::from(x) / norm) as f32).collect();
        Ok(Self { values })
    }

    /// Wraps values that are already unit norm (e.g. read back from disk).
    pub fn from_unit(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let v = Self { values };
        if (v.norm() - 1.0).abs() > NORM_TOLERANCE {
            return Err(EmbedError::InvalidConfig(format!(
                "vector norm {} is not 1",
                v.norm()
            )));
        }
        Ok(v)
    }

    /// The unit basis vector `e_i`.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut values = vec![0.0; dim];
        values[i] = 1.0;
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }
}

impl Serialize for EmbeddingVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.values.serialize(s)
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let values = Vec::<f32>::deserialize(d)?;
        EmbeddingVector::normalize(&values).map_err(serde::de::Error::custom)
    }
}

/// Bag of signed, hashed token n-grams.
///
/// Tokens are whitespace separated. A text with fewer tokens than `ngram`
/// contributes a single gram made of all its tokens. An empty accumulator
/// maps to `e_0`.
pub fn hash_encode(text: &str, dim: usize, seed: u64, ngram: usize) -> EmbeddingVector {
    assert!(dim >= MIN_DIM, "hash encoder dimension must be >= {MIN_DIM}");
    let ngram = ngram.max(1);
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let mut acc = vec![0.0f64; dim];

    let mut add = |gram: &[&str]| {
        let h = gram_hash(gram, seed);
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        acc[bucket] += sign;
    };
    if !tokens.is_empty() && tokens.len() < ngram {
        add(&tokens);
    } else {
        for gram in tokens.windows(ngram) {
            add(gram);
        }
    }

    let raw: Vec<f32> = acc.iter().map(|&x| x as f32).collect();
    EmbeddingVector::normalize(&raw).unwrap_or_else(|_| EmbeddingVector::basis(dim, 0))
}

fn gram_hash(gram: &[&str], seed: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for (i, tok) in gram.iter().enumerate() {
        if i > 0 {
            hasher.update(GRAM_SEPARATOR.to_string().as_bytes());
        }
        hasher.update(tok.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Remote,
    HashEncoder,
}

/// Serializable provider description. Stored next to a knowledge base so
/// scans reuse the encoder the KB was built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub dim: usize,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ngram")]
    pub ngram: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_ngram() -> usize {
    2
}
fn default_timeout_ms() -> u64 {
    30_000
}
fn default_retries() -> u32 {
    2
}
fn default_max_batch() -> usize {
    64
}
fn default_max_in_flight() -> usize {
    4
}

impl ProviderConfig {
    pub fn hash_encoder(dim: usize, seed: u64, ngram: usize) -> Self {
        Self {
            kind: ProviderKind::HashEncoder,
            dim,
            endpoint: None,
            model_name: None,
            seed,
            ngram,
            timeout_ms: default_timeout_ms(),
            retries: default_retries(),
            max_batch: default_max_batch(),
            max_in_flight: default_max_in_flight(),
        }
    }

    pub fn remote(endpoint: &str, model_name: &str, dim: usize) -> Self {
        Self {
            kind: ProviderKind::Remote,
            endpoint: Some(endpoint.to_string()),
            model_name: Some(model_name.to_string()),
            ..Self::hash_encoder(dim, 0, default_ngram())
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim < MIN_DIM {
            return Err(EmbedError::InvalidConfig(format!(
                "dim must be >= {MIN_DIM}, got {}",
                self.dim
            )));
        }
        match self.kind {
            ProviderKind::Remote => {
                if self.endpoint.as_deref().unwrap_or("").is_empty() {
                    return Err(EmbedError::InvalidConfig(
                        "remote provider requires an endpoint".into(),
                    ));
                }
            }
            ProviderKind::HashEncoder => {
                if self.ngram == 0 {
                    return Err(EmbedError::InvalidConfig("ngram must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &std::path::Path) -> std::io::Result<()> {
        let json = serde_json::to_vec_pretty(self).expect("provider config serializes");
        std::fs::write(dir.join(ENCODER_FILE), json)
    }

    pub fn load(dir: &std::path::Path) -> Result<Self, EmbedError> {
        let path = dir.join(ENCODER_FILE);
        let bytes = std::fs::read(&path)
            .map_err(|e| EmbedError::InvalidConfig(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| EmbedError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Applies the `ASMRAG_EMBED_ENDPOINT` override to remote configs.
    pub fn with_env_override(mut self) -> Self {
        if self.kind == ProviderKind::Remote {
            if let Ok(ep) = std::env::var(ENDPOINT_ENV) {
                if !ep.is_empty() {
                    self.endpoint = Some(ep);
                }
            }
        }
        self
    }
}

/// A configured embedding provider.
pub enum Provider {
    HashEncoder { dim: usize, seed: u64, ngram: usize },
    Remote(RemoteEmbedder),
}

impl Provider {
    pub fn from_config(cfg: &ProviderConfig) -> Result<Self, EmbedError> {
        cfg.validate()?;
        Ok(match cfg.kind {
            ProviderKind::HashEncoder => Provider::HashEncoder {
                dim: cfg.dim,
                seed: cfg.seed,
                ngram: cfg.ngram,
            },
            ProviderKind::Remote => Provider::Remote(RemoteEmbedder::new(cfg)?),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Provider::HashEncoder { dim, .. } => *dim,
            Provider::Remote(r) => r.dim,
        }
    }

    /// Embeds a batch; output order matches input order.
    pub fn embed_batch<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        if let Some(pos) = texts.iter().position(|t| t.as_ref().is_empty()) {
            return Err(EmbedError::EmptyText(pos));
        }
        match self {
            Provider::HashEncoder { dim, seed, ngram } => Ok(texts
                .iter()
                .map(|t| hash_encode(t.as_ref(), *dim, *seed, *ngram))
                .collect()),
            Provider::Remote(r) => r.embed(texts),
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    texts: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    slots: Mutex<usize>,
    cv: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut free = self.slots.lock().expect("in-flight lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("in-flight lock");
        }
        *free -= 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.slots.lock().expect("in-flight lock") += 1;
        self.0.cv.notify_one();
    }
}

/// Client for `POST {endpoint}/embed`.
pub struct RemoteEmbedder {
    agent: ureq::Agent,
    url: String,
    model: String,
    dim: usize,
    retries: u32,
    max_batch: usize,
    in_flight: InFlight,
}

impl RemoteEmbedder {
    pub fn new(cfg: &ProviderConfig) -> Result<Self, EmbedError> {
        let endpoint = cfg
            .endpoint
            .clone()
            .filter(|e| !e.is_empty())
            .ok_or_else(|| EmbedError::InvalidConfig("remote provider requires an endpoint".into()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build()
            .into();
        Ok(Self {
            agent,
            url: format!("{}/embed", endpoint.trim_end_matches('/')),
            model: cfg.model_name.clone().unwrap_or_default(),
            dim: cfg.dim,
            retries: cfg.retries,
            max_batch: cfg.max_batch.max(1),
            in_flight: InFlight {
                slots: Mutex::new(cfg.max_in_flight.max(1)),
                cv: Condvar::new(),
            },
        })
    }

    fn embed<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.max_batch) {
            let raw = self.post_with_retries(chunk)?;
            if raw.len() != chunk.len() {
                return Err(EmbedError::BadResponse(format!(
                    "expected {} vectors, got {}",
                    chunk.len(),
                    raw.len()
                )));
            }
            for v in raw {
                if v.len() != self.dim {
                    return Err(EmbedError::DimMismatch {
                        expected: self.dim,
                        got: v.len(),
                    });
                }
                out.push(EmbeddingVector::normalize(&v)?);
            }
        }
        Ok(out)
    }

    fn post_with_retries<S: AsRef<str>>(&self, chunk: &[S]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let body = EmbedRequest {
            model: &self.model,
            texts: chunk.iter().map(|t| t.as_ref()).collect(),
        };
        let _slot = self.in_flight.acquire();
        let mut last_err = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                log::warn!("retrying embedding request ({attempt}/{}): {last_err}", self.retries);
                std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
            }
            match self.agent.post(&self.url).send_json(&body) {
                Ok(mut resp) => {
                    return resp
                        .body_mut()
                        .read_json::<EmbedResponse>()
                        .map(|r| r.vectors)
                        .map_err(|e| EmbedError::BadResponse(e.to_string()));
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(EmbedError::RemoteUnavailable(last_err))
    }
}
