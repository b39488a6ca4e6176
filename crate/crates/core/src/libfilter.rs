//! Library boilerplate removal: exact content-hash blocklist followed by
//! semantic matching against a reference library index.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingVector;
use crate::ingest::{CanonFunction, ContentHash};
use crate::kb::{KbError, KnowledgeBase, Label, NewEntry};

const PROVENANCE_FILE: &str = "provenance.jsonl";

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("library index is empty")]
    EmptyLibIndex,
    #[error("tau_lib must lie in (0, 1), got {0}")]
    InvalidTau(f64),
    #[error("calibration grid is empty")]
    EmptyGrid,
    #[error("calibration grid must be sorted ascending")]
    UnsortedGrid,
    #[error("calibration sets must both be non-empty")]
    EmptyCalibrationSet,
    #[error("malformed blocklist line {line}: `{text}`")]
    MalformedBlocklist { line: usize, text: String },
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Where a library reference function came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LibProvenance {
    pub library: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compiler: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opt_level: Option<String>,
}

/// Reference library vectors, stored as a separate KB directory.
#[derive(Debug, Clone, PartialEq)]
pub struct LibIndex {
    kb: KnowledgeBase,
    provenance: Vec<LibProvenance>,
}

impl LibIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            kb: KnowledgeBase::new(dim),
            provenance: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.kb.dim()
    }

    pub fn len(&self) -> usize {
        self.kb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kb.is_empty()
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn provenance(&self, entry_id: u64) -> Option<&LibProvenance> {
        let idx = self.kb.entries().iter().position(|m| m.entry_id == entry_id)?;
        self.provenance.get(idx)
    }

    pub fn add(
        &mut self,
        vector: EmbeddingVector,
        function_name: &str,
        provenance: LibProvenance,
    ) -> Result<u64, FilterError> {
        let id = self.kb.insert(NewEntry {
            vector,
            label: Label::Benign,
            family: None,
            sample_id: provenance.library.clone(),
            function_name: function_name.to_string(),
            first_seen: None,
            text: None,
        })?;
        self.provenance.push(provenance);
        Ok(id)
    }

    pub fn save(&self, dir: &Path) -> Result<(), FilterError> {
        self.kb.save(dir)?;
        let mut out = String::new();
        for p in &self.provenance {
            out.push_str(&serde_json::to_string(p).expect("provenance serializes"));
            out.push('\n');
        }
        fs::write(dir.join(PROVENANCE_FILE), out)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, FilterError> {
        let kb = KnowledgeBase::load(dir)?;
        let path = dir.join(PROVENANCE_FILE);
        let provenance = if path.is_file() {
            fs::read_to_string(&path)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).unwrap_or_default())
                .collect()
        } else {
            vec![LibProvenance::default(); kb.len()]
        };
        Ok(Self { kb, provenance })
    }
}

/// Set of canonical content hashes of known boilerplate.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Blocklist {
    hashes: HashSet<ContentHash>,
}

impl Blocklist {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, h: ContentHash) -> bool {
        self.hashes.insert(h)
    }

    pub fn contains(&self, h: &ContentHash) -> bool {
        self.hashes.contains(h)
    }

    pub fn len(&self) -> usize {
        self.hashes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hashes.is_empty()
    }

    /// One lowercase hex hash per line; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self, FilterError> {
        let mut bl = Blocklist::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let h = ContentHash::from_hex(t).ok_or_else(|| FilterError::MalformedBlocklist {
                line: i + 1,
                text: t.to_string(),
            })?;
            bl.insert(h);
        }
        Ok(bl)
    }

    pub fn to_text(&self) -> String {
        let mut hexes: Vec<String> = self.hashes.iter().map(ContentHash::to_hex).collect();
        hexes.sort();
        hexes.into_iter().map(|h| h + "\n").collect()
    }
}

pub fn blocklist_check(f: &CanonFunction, bl: &Blocklist) -> bool {
    bl.contains(&f.content_hash)
}

/// Semantic filter outcome for one vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LibMatch {
    pub phi: bool,
    pub best_lib_sim: f64,
    pub best_lib_entry: Option<u64>,
}

fn check_tau(tau_lib: f64) -> Result<(), FilterError> {
    if !(tau_lib > 0.0 && tau_lib < 1.0) {
        return Err(FilterError::InvalidTau(tau_lib));
    }
    Ok(())
}

/// `phi = 1` iff the best library similarity is strictly above `tau_lib`.
pub fn phi(v: &EmbeddingVector, lib: &LibIndex, tau_lib: f64) -> Result<LibMatch, FilterError> {
    check_tau(tau_lib)?;
    if lib.is_empty() {
        return Err(FilterError::EmptyLibIndex);
    }
    let best = lib.kb.search(v, 1)?.neighbors[0];
    Ok(LibMatch {
        phi: best.similarity > tau_lib,
        best_lib_sim: best.similarity,
        best_lib_entry: Some(best.entry_id),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    Blocklisted,
    LibraryMatch,
    Kept,
}

/// Audit record for one function. Blocklisted functions never reach the
/// semantic check, so `lib_match` is absent for them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub function: String,
    pub content_hash: ContentHash,
    pub reason: FilterReason,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lib_match: Option<LibMatch>,
}

impl FilterDecision {
    pub fn kept(&self) -> bool {
        self.reason == FilterReason::Kept
    }
}

/// Settings for library filtering; either stage may be absent.
#[derive(Debug, Clone, Copy)]
pub struct LibFilter<'a> {
    pub lib: Option<&'a LibIndex>,
    pub blocklist: Option<&'a Blocklist>,
    pub tau_lib: f64,
}

impl<'a> LibFilter<'a> {
    pub fn none() -> Self {
        Self {
            lib: None,
            blocklist: None,
            tau_lib: 0.95,
        }
    }

    /// Exact-hash stage only.
    pub fn is_blocklisted(&self, f: &CanonFunction) -> bool {
        self.blocklist.is_some_and(|bl| blocklist_check(f, bl))
    }

    /// Semantic stage only.
    pub fn semantic(&self, v: &EmbeddingVector) -> Result<Option<LibMatch>, FilterError> {
        match self.lib {
            Some(lib) if !lib.is_empty() => phi(v, lib, self.tau_lib).map(Some),
            Some(_) => Err(FilterError::EmptyLibIndex),
            None => {
                check_tau(self.tau_lib)?;
                Ok(None)
            }
        }
    }
}

/// Result of filtering one sample: surviving indices in input order plus
/// one decision per input function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<usize>,
    pub decisions: Vec<FilterDecision>,
}

pub fn filter_sample(
    functions: &[(CanonFunction, EmbeddingVector)],
    lib: &LibIndex,
    bl: &Blocklist,
    tau_lib: f64,
) -> Result<FilterOutcome, FilterError> {
    filter_with(
        functions,
        &LibFilter {
            lib: Some(lib),
            blocklist: Some(bl),
            tau_lib,
        },
    )
}

pub fn filter_with(
    functions: &[(CanonFunction, EmbeddingVector)],
    filter: &LibFilter<'_>,
) -> Result<FilterOutcome, FilterError> {
    check_tau(filter.tau_lib)?;
    let mut kept = Vec::new();
    let mut decisions = Vec::with_capacity(functions.len());
    for (i, (f, v)) in functions.iter().enumerate() {
        let decision = if filter.is_blocklisted(f) {
            FilterDecision {
                function: f.name.clone(),
                content_hash: f.content_hash,
                reason: FilterReason::Blocklisted,
                lib_match: None,
            }
        } else {
            let lib_match = filter.semantic(v)?;
            let reason = if lib_match.is_some_and(|m| m.phi) {
                FilterReason::LibraryMatch
            } else {
                FilterReason::Kept
            };
            FilterDecision {
                function: f.name.clone(),
                content_hash: f.content_hash,
                reason,
                lib_match,
            }
        };
        if decision.kept() {
            kept.push(i);
        }
        decisions.push(decision);
    }
    Ok(FilterOutcome { kept, decisions })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauLibRow {
    pub tau: f64,
    pub filter_precision: f64,
    pub malicious_recall: f64,
    /// Fraction of all calibration vectors removed by the filter.
    pub reduction: f64,
    pub downstream_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauLibReport {
    pub rows: Vec<TauLibRow>,
    pub selected: f64,
}

/// Grid search over `tau_lib`.
///
/// `pos` are known library functions, `neg` malicious functions. Filter
/// precision over an empty filtered set is taken as 1. The selected tau
/// maximizes `downstream_eval(tau)`, ties going to the higher malicious
/// recall and then to the lower tau.
pub fn calibrate_tau_lib<F>(
    lib: &LibIndex,
    pos: &[EmbeddingVector],
    neg: &[EmbeddingVector],
    grid: &[f64],
    mut downstream_eval: F,
) -> Result<TauLibReport, FilterError>
where
    F: FnMut(f64) -> f64,
{
    if grid.is_empty() {
        return Err(FilterError::EmptyGrid);
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(FilterError::UnsortedGrid);
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(FilterError::EmptyCalibrationSet);
    }
    for &t in grid {
        check_tau(t)?;
    }
    if lib.is_empty() {
        return Err(FilterError::EmptyLibIndex);
    }

    // The best library similarity does not depend on tau.
    let best = |vs: &[EmbeddingVector]| -> Result<Vec<f64>, FilterError> {
        vs.iter()
            .map(|v| Ok(lib.kb.search(v, 1)?.neighbors[0].similarity))
            .collect()
    };
    let pos_best = best(pos)?;
    let neg_best = best(neg)?;
    let total = (pos.len() + neg.len()) as f64;

    let mut rows = Vec::with_capacity(grid.len());
    for &tau in grid {
        let pos_filtered = pos_best.iter().filter(|&&s| s > tau).count();
        let neg_filtered = neg_best.iter().filter(|&&s| s > tau).count();
        let filtered = pos_filtered + neg_filtered;
        rows.push(TauLibRow {
            tau,
            filter_precision: if filtered == 0 {
                1.0
            } else {
                pos_filtered as f64 / filtered as f64
            },
            malicious_recall: (neg.len() - neg_filtered) as f64 / neg.len() as f64,
            reduction: filtered as f64 / total,
            downstream_f1: downstream_eval(tau),
        });
    }

    let mut selected = rows[0];
    for r in &rows[1..] {
        let better = r.downstream_f1 > selected.downstream_f1
            || (r.downstream_f1 == selected.downstream_f1
                && r.malicious_recall > selected.malicious_recall);
        if better {
            selected = *r;
        }
    }
    Ok(TauLibReport {
        selected: selected.tau,
        rows,
    })
}
