//! Function scoring, sample verdicts, family attribution and anchor
//! selection.
//!
//! Each function's neighborhood is retrieved once and reused by every
//! later stage. Similarities enter votes and masses as `max(sim, 0)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbedError, EmbeddingVector, Provider};
use crate::ingest::CanonFunction;
use crate::kb::{EntryMeta, KbError, KnowledgeBase, Label, Neighborhood};

/// Weight sums at or below this are treated as "no evidence".
pub const DEGENERATE_WEIGHT: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("empty neighborhood")]
    EmptyNeighborhood,
    #[error("sample has no functions left to score")]
    NoFunctions,
    #[error("flagged functions have no malicious neighbors")]
    NoMaliciousNeighbors,
    #[error("no flagged function has a neighbor in family `{0}`")]
    NoFamilyNeighbors(String),
    #[error("no flagged functions")]
    NoFlagged,
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("function and vector counts differ ({functions} vs {vectors})")]
    CountMismatch { functions: usize, vectors: usize },
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_func: f64,
    pub tau_file: f64,
    pub k: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau_func: 0.70,
            tau_file: 0.15,
            k: 20,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), DetectError> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.tau_func) {
            return Err(DetectError::InvalidThresholds(format!(
                "tau_func must lie in (0, 1), got {}",
                self.tau_func
            )));
        }
        if !open_unit(self.tau_file) {
            return Err(DetectError::InvalidThresholds(format!(
                "tau_file must lie in (0, 1), got {}",
                self.tau_file
            )));
        }
        if self.k == 0 {
            return Err(DetectError::InvalidThresholds("k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Benign,
    Malicious,
}

/// Similarity-weighted vote over a neighborhood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vote {
    pub alpha: f64,
    pub degenerate: bool,
}

/// `alpha = sum(w * [malicious]) / sum(w)` with `w = max(sim, 0)`.
/// A weight sum at or below [`DEGENERATE_WEIGHT`] yields `alpha = 0`.
pub fn distance_weighted_vote<I>(neighbors: I) -> Vote
where
    I: IntoIterator<Item = (f64, bool)>,
{
    let (mut mal, mut total) = (0.0f64, 0.0f64);
    for (sim, malicious) in neighbors {
        let w = sim.max(0.0);
        total += w;
        if malicious {
            mal += w;
        }
    }
    if total <= DEGENERATE_WEIGHT {
        return Vote {
            alpha: 0.0,
            degenerate: true,
        };
    }
    Vote {
        alpha: mal / total,
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionScore {
    /// Position of the function within the scored sample.
    pub ordinal: usize,
    pub function_name: String,
    pub alpha: f64,
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
    pub neighborhood: Neighborhood,
}

fn lookup(kb: &KnowledgeBase, entry_id: u64) -> Result<&EntryMeta, DetectError> {
    kb.entry(entry_id)
        .ok_or(DetectError::Kb(KbError::UnknownEntry(entry_id)))
}

pub fn function_score(
    ordinal: usize,
    function_name: &str,
    neighborhood: Neighborhood,
    kb: &KnowledgeBase,
    tau_func: f64,
) -> Result<FunctionScore, DetectError> {
    if neighborhood.is_empty() {
        return Err(DetectError::EmptyNeighborhood);
    }
    let mut votes = Vec::with_capacity(neighborhood.len());
    for n in &neighborhood.neighbors {
        votes.push((n.similarity, lookup(kb, n.entry_id)?.label == Label::Malicious));
    }
    let vote = distance_weighted_vote(votes);
    if vote.degenerate {
        log::warn!("function `{function_name}`: neighborhood weights sum to ~0, alpha set to 0");
    }
    Ok(FunctionScore {
        ordinal,
        function_name: function_name.to_string(),
        alpha: vote.alpha,
        flagged: vote.alpha > tau_func,
        degenerate: vote.degenerate,
        neighborhood,
    })
}

/// Retrieves the neighborhood of `q` and scores it.
pub fn score_query(
    ordinal: usize,
    function_name: &str,
    q: &EmbeddingVector,
    kb: &KnowledgeBase,
    thresholds: &Thresholds,
) -> Result<FunctionScore, DetectError> {
    let nbhd = kb.search(q, thresholds.k)?;
    function_score(ordinal, function_name, nbhd, kb, thresholds.tau_func)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub omega: f64,
    pub flagged: usize,
    pub total: usize,
    pub verdict: Verdict,
}

/// Fraction of flagged functions, and the strict `omega > tau_file` verdict.
pub fn sample_score(scores: &[FunctionScore], tau_file: f64) -> Result<SampleScore, DetectError> {
    if scores.is_empty() {
        return Err(DetectError::NoFunctions);
    }
    let flagged = scores.iter().filter(|s| s.flagged).count();
    let omega = flagged as f64 / scores.len() as f64;
    Ok(SampleScore {
        omega,
        flagged,
        total: scores.len(),
        verdict: if omega > tau_file {
            Verdict::Malicious
        } else {
            Verdict::Benign
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyAttribution {
    pub scores: BTreeMap<String, f64>,
    pub c_best: String,
}

/// Accumulates similarity mass per family over the malicious neighbors of
/// every flagged function. Ties go to the lexicographically smallest name.
pub fn attribute_family(
    flagged: &[&FunctionScore],
    kb: &KnowledgeBase,
) -> Result<FamilyAttribution, DetectError> {
    if flagged.is_empty() {
        return Err(DetectError::NoFlagged);
    }
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    for fs in flagged {
        for n in &fs.neighborhood.neighbors {
            let m = lookup(kb, n.entry_id)?;
            if m.label == Label::Benign {
                continue;
            }
            if let Some(fam) = &m.family {
                *scores.entry(fam.clone()).or_insert(0.0) += n.similarity.max(0.0);
            }
        }
    }
    let mut best: Option<(&String, f64)> = None;
    for (fam, &s) in &scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((fam, s));
        }
    }
    match best {
        Some((fam, s)) if s > 0.0 => Ok(FamilyAttribution {
            c_best: fam.clone(),
            scores,
        }),
        _ => Err(DetectError::NoMaliciousNeighbors),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSelection {
    pub ordinal: usize,
    pub function_name: String,
    pub mass: f64,
    pub proof_entry_id: u64,
    pub proof_sim: f64,
}

/// Similarity mass of `fs`'s neighborhood inside `family`.
pub fn family_mass(fs: &FunctionScore, family: &str, kb: &KnowledgeBase) -> Result<f64, DetectError> {
    let mut mass = 0.0;
    for n in &fs.neighborhood.neighbors {
        if lookup(kb, n.entry_id)?.family.as_deref() == Some(family) {
            mass += n.similarity.max(0.0);
        }
    }
    Ok(mass)
}

/// Picks the flagged function with the largest family mass (ties to the
/// lower ordinal) and its nearest entry of that family as proof.
///
/// Because neighborhoods are exact top-k, the first `c_best` neighbor is
/// also the nearest `c_best` entry in the whole KB.
pub fn select_anchor(
    flagged: &[&FunctionScore],
    c_best: &str,
    kb: &KnowledgeBase,
) -> Result<AnchorSelection, DetectError> {
    if flagged.is_empty() {
        return Err(DetectError::NoFlagged);
    }
    let mut best: Option<(&FunctionScore, f64)> = None;
    let mut ordered: Vec<&&FunctionScore> = flagged.iter().collect();
    ordered.sort_by_key(|fs| fs.ordinal);
    for fs in ordered {
        let mass = family_mass(fs, c_best, kb)?;
        if mass > 0.0 && best.is_none_or(|(_, b)| mass > b) {
            best = Some((fs, mass));
        }
    }
    let (anchor, mass) = best.ok_or_else(|| DetectError::NoFamilyNeighbors(c_best.to_string()))?;
    let mut proof = None;
    for n in &anchor.neighborhood.neighbors {
        if lookup(kb, n.entry_id)?.family.as_deref() == Some(c_best) {
            proof = Some(*n);
            break;
        }
    }
    let proof = proof.ok_or_else(|| DetectError::NoFamilyNeighbors(c_best.to_string()))?;
    Ok(AnchorSelection {
        ordinal: anchor.ordinal,
        function_name: anchor.function_name.clone(),
        mass,
        proof_entry_id: proof.entry_id,
        proof_sim: proof.similarity,
    })
}

/// 1 iff some neighbor belongs to `true_family`.
pub fn recall_at_k(nbhd: &Neighborhood, kb: &KnowledgeBase, true_family: &str) -> u8 {
    let hit = nbhd
        .neighbors
        .iter()
        .any(|n| kb.entry(n.entry_id).and_then(|m| m.family.as_deref()) == Some(true_family));
    u8::from(hit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanStatus {
    Scored,
    /// Every function was filtered out; the verdict defaults to benign.
    NoFunctions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorInfo {
    pub ordinal: usize,
    pub function_name: String,
    pub mass: f64,
    /// The anchor embedding, needed for promotion.
    pub vector: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProofInfo {
    pub entry_id: u64,
    pub similarity: f64,
    pub sample_id: String,
    pub function_name: String,
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_seen: Option<chrono::NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleVerdict {
    pub sample_id: String,
    pub status: ScanStatus,
    pub omega: f64,
    pub verdict: Verdict,
    pub thresholds: Thresholds,
    pub functions: Vec<FunctionScore>,
    pub family_scores: BTreeMap<String, f64>,
    pub c_best: Option<String>,
    pub anchor: Option<AnchorInfo>,
    pub proof: Option<ProofInfo>,
}

impl SampleVerdict {
    pub fn flagged_names(&self) -> Vec<&str> {
        self.functions
            .iter()
            .filter(|f| f.flagged)
            .map(|f| f.function_name.as_str())
            .collect()
    }

    fn benign_empty(sample_id: &str, thresholds: Thresholds) -> Self {
        SampleVerdict {
            sample_id: sample_id.to_string(),
            status: ScanStatus::NoFunctions,
            omega: 0.0,
            verdict: Verdict::Benign,
            thresholds,
            functions: Vec::new(),
            family_scores: BTreeMap::new(),
            c_best: None,
            anchor: None,
            proof: None,
        }
    }
}

/// Scores already-embedded, already-filtered functions against `kb`.
pub fn score_embedded(
    sample_id: &str,
    functions: &[CanonFunction],
    vectors: &[EmbeddingVector],
    kb: &KnowledgeBase,
    thresholds: &Thresholds,
) -> Result<SampleVerdict, DetectError> {
    thresholds.validate()?;
    if functions.len() != vectors.len() {
        return Err(DetectError::CountMismatch {
            functions: functions.len(),
            vectors: vectors.len(),
        });
    }
    if functions.is_empty() {
        return Ok(SampleVerdict::benign_empty(sample_id, *thresholds));
    }
    let scores = functions
        .iter()
        .zip(vectors)
        .enumerate()
        .map(|(i, (f, q))| score_query(i, &f.name, q, kb, thresholds))
        .collect::<Result<Vec<_>, _>>()?;
    let sample = sample_score(&scores, thresholds.tau_file)?;

    let mut verdict = SampleVerdict {
        sample_id: sample_id.to_string(),
        status: ScanStatus::Scored,
        omega: sample.omega,
        verdict: sample.verdict,
        thresholds: *thresholds,
        functions: Vec::new(),
        family_scores: BTreeMap::new(),
        c_best: None,
        anchor: None,
        proof: None,
    };
    if sample.verdict == Verdict::Malicious {
        let flagged: Vec<&FunctionScore> = scores.iter().filter(|s| s.flagged).collect();
        let attribution = attribute_family(&flagged, kb)?;
        let anchor = select_anchor(&flagged, &attribution.c_best, kb)?;
        let proof_meta = lookup(kb, anchor.proof_entry_id)?;
        verdict.anchor = Some(AnchorInfo {
            ordinal: anchor.ordinal,
            function_name: anchor.function_name.clone(),
            mass: anchor.mass,
            vector: vectors[anchor.ordinal].values().to_vec(),
            text: Some(functions[anchor.ordinal].render_text()),
        });
        verdict.proof = Some(ProofInfo {
            entry_id: anchor.proof_entry_id,
            similarity: anchor.proof_sim,
            sample_id: proof_meta.sample_id.clone(),
            function_name: proof_meta.function_name.clone(),
            family: attribution.c_best.clone(),
            first_seen: proof_meta.first_seen,
            text: proof_meta.text.clone(),
        });
        verdict.family_scores = attribution.scores;
        verdict.c_best = Some(attribution.c_best);
    }
    verdict.functions = scores;
    Ok(verdict)
}

/// Embeds, retrieves, scores, attributes and anchors one sample.
pub fn scan_sample(
    sample_id: &str,
    functions: &[CanonFunction],
    kb: &KnowledgeBase,
    thresholds: &Thresholds,
    provider: &Provider,
) -> Result<SampleVerdict, DetectError> {
    if functions.is_empty() {
        thresholds.validate()?;
        return Ok(SampleVerdict::benign_empty(sample_id, *thresholds));
    }
    let texts: Vec<String> = functions.iter().map(CanonFunction::render_text).collect();
    let vectors = provider.embed_batch(&texts)?;
    score_embedded(sample_id, functions, &vectors, kb, thresholds)
}
