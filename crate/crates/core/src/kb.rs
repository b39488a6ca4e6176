//! Append-only knowledge base of labeled embeddings with exact cosine top-k.
//!
//! On-disk layout of a KB directory:
//!
//! * `manifest.json`: dim, metric, format version, entry count and SHA-256
//!   checksums of the two data files
//! * `vectors.f32le`: `count * dim` little-endian `f32` values
//! * `meta.jsonl`: one metadata object per entry, aligned with the vectors

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::EmbeddingVector;

pub const FORMAT_VERSION: u32 = 1;
pub const METRIC: &str = "cosine";

const MANIFEST_FILE: &str = "manifest.json";
const VECTORS_FILE: &str = "vectors.f32le";
const META_FILE: &str = "meta.jsonl";

#[derive(Debug, Error)]
pub enum KbError {
    #[error("dimension mismatch: KB has {expected}, vector has {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("knowledge base is empty")]
    EmptyKb,
    #[error("k must be >= 1")]
    InvalidK,
    #[error("malicious entries require a non-empty family")]
    MissingFamily,
    #[error("benign entries must not carry a family")]
    UnexpectedFamily,
    #[error("unsupported KB format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("no KB manifest in {0}")]
    ManifestMissing(String),
    #[error("corrupt KB: {0}")]
    CorruptManifest(String),
    #[error("unknown entry id {0}")]
    UnknownEntry(u64),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malicious,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Ingested,
    Promoted,
}

/// Entry metadata; the vector lives in the KB's flat store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub entry_id: u64,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    pub sample_id: String,
    pub function_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_seen: Option<NaiveDate>,
    pub origin: Origin,
    /// Canonical listing, kept so the entry can serve as explanation evidence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// An entry to be inserted; the KB assigns the id.
#[derive(Debug, Clone, PartialEq)]
pub struct NewEntry {
    pub vector: EmbeddingVector,
    pub label: Label,
    pub family: Option<String>,
    pub sample_id: String,
    pub function_name: String,
    pub first_seen: Option<NaiveDate>,
    pub text: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub entry_id: u64,
    pub similarity: f64,
}

/// Top-k result, descending by similarity, ties by ascending entry id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub k_requested: usize,
    pub neighbors: Vec<Neighbor>,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// The first `k` neighbors, which is exactly the top-`k` result.
    pub fn truncated(&self, k: usize) -> Neighborhood {
        Neighborhood {
            k_requested: k,
            neighbors: self.neighbors.iter().take(k).copied().collect(),
        }
    }
}

/// Ranking order used everywhere: higher similarity first, then lower id.
pub fn rank_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then(a.entry_id.cmp(&b.entry_id))
}

/// Cosine similarity, accumulated in `f64`.
pub fn cosine_sim(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, KbError> {
    if a.dim() != b.dim() {
        return Err(KbError::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(cosine_slices(a.values(), b.values()))
}

fn cosine_slices(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na * nb).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checksums {
    pub vectors_sha256: String,
    pub meta_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dim: usize,
    pub metric: String,
    pub entry_count: usize,
    pub checksums: Checksums,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KbStats {
    pub dim: usize,
    pub entry_count: usize,
    pub benign: usize,
    pub malicious: usize,
    pub promoted: usize,
    pub families: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    dim: usize,
    vectors: Vec<f32>,
    meta: Vec<EntryMeta>,
}

impl KnowledgeBase {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: Vec::new(),
            meta: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    /// Id the next inserted entry will receive.
    pub fn next_entry_id(&self) -> u64 {
        self.meta.last().map_or(0, |m| m.entry_id + 1)
    }

    pub fn entries(&self) -> &[EntryMeta] {
        &self.meta
    }

    fn index_of(&self, entry_id: u64) -> Option<usize> {
        self.meta.binary_search_by_key(&entry_id, |m| m.entry_id).ok()
    }

    pub fn entry(&self, entry_id: u64) -> Option<&EntryMeta> {
        self.index_of(entry_id).map(|i| &self.meta[i])
    }

    pub fn vector_at(&self, index: usize) -> &[f32] {
        &self.vectors[index * self.dim..(index + 1) * self.dim]
    }

    pub fn vector(&self, entry_id: u64) -> Option<EmbeddingVector> {
        let i = self.index_of(entry_id)?;
        EmbeddingVector::from_unit(self.vector_at(i).to_vec()).ok()
    }

    fn check_dim(&self, v: &EmbeddingVector) -> Result<(), KbError> {
        if v.dim() != self.dim {
            return Err(KbError::DimMismatch {
                expected: self.dim,
                got: v.dim(),
            });
        }
        Ok(())
    }

    pub fn insert(&mut self, entry: NewEntry) -> Result<u64, KbError> {
        self.append(entry, Origin::Ingested)
    }

    /// Appends a confirmed query embedding as a malicious entry of `family`.
    pub fn promote(
        &mut self,
        vector: EmbeddingVector,
        family: &str,
        sample_id: &str,
        function_name: &str,
        first_seen: Option<NaiveDate>,
        text: Option<String>,
    ) -> Result<u64, KbError> {
        if family.is_empty() {
            return Err(KbError::MissingFamily);
        }
        self.append(
            NewEntry {
                vector,
                label: Label::Malicious,
                family: Some(family.to_string()),
                sample_id: sample_id.to_string(),
                function_name: function_name.to_string(),
                first_seen,
                text,
            },
            Origin::Promoted,
        )
    }

    fn append(&mut self, entry: NewEntry, origin: Origin) -> Result<u64, KbError> {
        self.check_dim(&entry.vector)?;
        match (entry.label, entry.family.as_deref()) {
            (Label::Malicious, None | Some("")) => return Err(KbError::MissingFamily),
            (Label::Benign, Some(_)) => return Err(KbError::UnexpectedFamily),
            _ => {}
        }
        let entry_id = self.next_entry_id();
        self.vectors.extend_from_slice(entry.vector.values());
        self.meta.push(EntryMeta {
            entry_id,
            label: entry.label,
            family: entry.family,
            sample_id: entry.sample_id,
            function_name: entry.function_name,
            first_seen: entry.first_seen,
            origin,
            text: entry.text,
        });
        Ok(entry_id)
    }

    /// Exact top-k by cosine similarity.
    pub fn search(&self, q: &EmbeddingVector, k: usize) -> Result<Neighborhood, KbError> {
        self.search_where(q, k, |_| true)
    }

    /// Exact top-k restricted to entries accepted by `keep`.
    pub fn search_where<F>(&self, q: &EmbeddingVector, k: usize, keep: F) -> Result<Neighborhood, KbError>
    where
        F: Fn(&EntryMeta) -> bool,
    {
        if k == 0 {
            return Err(KbError::InvalidK);
        }
        if self.is_empty() {
            return Err(KbError::EmptyKb);
        }
        self.check_dim(q)?;
        let mut scored: Vec<Neighbor> = self
            .meta
            .iter()
            .enumerate()
            .filter(|(_, m)| keep(m))
            .map(|(i, m)| Neighbor {
                entry_id: m.entry_id,
                similarity: cosine_slices(q.values(), self.vector_at(i)),
            })
            .collect();
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        Ok(Neighborhood {
            k_requested: k,
            neighbors: scored,
        })
    }

    pub fn stats(&self) -> KbStats {
        let mut families = BTreeMap::new();
        let (mut benign, mut malicious, mut promoted) = (0, 0, 0);
        for m in &self.meta {
            match m.label {
                Label::Benign => benign += 1,
                Label::Malicious => malicious += 1,
            }
            if m.origin == Origin::Promoted {
                promoted += 1;
            }
            if let Some(f) = &m.family {
                *families.entry(f.clone()).or_insert(0) += 1;
            }
        }
        KbStats {
            dim: self.dim,
            entry_count: self.len(),
            benign,
            malicious,
            promoted,
            families,
        }
    }

    fn vector_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.vectors.len() * 4);
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn meta_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for m in &self.meta {
            serde_json::to_writer(&mut out, m).expect("entry metadata serializes");
            out.push(b'\n');
        }
        out
    }

    /// Writes the KB directory. Data files are written first and the
    /// manifest last, each through a temp file and rename.
    pub fn save(&self, dir: &Path) -> Result<Manifest, KbError> {
        fs::create_dir_all(dir)?;
        let vectors = self.vector_bytes();
        let meta = self.meta_bytes();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dim: self.dim,
            metric: METRIC.to_string(),
            entry_count: self.len(),
            checksums: Checksums {
                vectors_sha256: hex::encode(Sha256::digest(&vectors)),
                meta_sha256: hex::encode(Sha256::digest(&meta)),
            },
        };
        write_atomic(&dir.join(VECTORS_FILE), &vectors)?;
        write_atomic(&dir.join(META_FILE), &meta)?;
        let manifest_json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST_FILE), &manifest_json)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self, KbError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(KbError::ManifestMissing(dir.display().to_string()));
        }
        let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)
            .map_err(|e| KbError::CorruptManifest(format!("manifest.json: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(KbError::VersionMismatch {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if manifest.metric != METRIC {
            return Err(KbError::CorruptManifest(format!(
                "unsupported metric `{}`",
                manifest.metric
            )));
        }
        let vectors = fs::read(dir.join(VECTORS_FILE))?;
        let meta = fs::read(dir.join(META_FILE))?;
        if hex::encode(Sha256::digest(&vectors)) != manifest.checksums.vectors_sha256 {
            return Err(KbError::CorruptManifest("vectors checksum mismatch".into()));
        }
        if hex::encode(Sha256::digest(&meta)) != manifest.checksums.meta_sha256 {
            return Err(KbError::CorruptManifest("metadata checksum mismatch".into()));
        }
        if vectors.len() != manifest.entry_count * manifest.dim * 4 {
            return Err(KbError::CorruptManifest("vector file length mismatch".into()));
        }
        let vectors: Vec<f32> = vectors
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        let mut entries = Vec::with_capacity(manifest.entry_count);
        for (i, line) in meta.split(|&b| b == b'\n').filter(|l| !l.is_empty()).enumerate() {
            let m: EntryMeta = serde_json::from_slice(line)
                .map_err(|e| KbError::CorruptManifest(format!("meta.jsonl line {}: {e}", i + 1)))?;
            entries.push(m);
        }
        if entries.len() != manifest.entry_count {
            return Err(KbError::CorruptManifest("entry count mismatch".into()));
        }
        if entries.windows(2).any(|w| w[0].entry_id >= w[1].entry_id) {
            return Err(KbError::CorruptManifest("entry ids not strictly increasing".into()));
        }
        Ok(Self {
            dim: manifest.dim,
            vectors,
            meta: entries,
        })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), KbError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
