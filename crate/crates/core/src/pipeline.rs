//! End-to-end scanning: canonicalize, blocklist, embed, library filter,
//! then score against the KB.

use serde::{Deserialize, Serialize};

use crate::detector::{score_embedded, SampleVerdict, Thresholds};
use crate::embedding::{EmbeddingVector, Provider};
use crate::ingest::{canonicalize, canonicalize_opt, AddrRange, CanonFunction, RawFunction};
use crate::kb::KnowledgeBase;
use crate::libfilter::{Blocklist, FilterDecision, FilterReason, LibFilter, LibIndex, LibProvenance};
use crate::Error;

/// Functions that survived filtering, with their embeddings.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample_id: String,
    pub kept: Vec<CanonFunction>,
    pub vectors: Vec<EmbeddingVector>,
    pub decisions: Vec<FilterDecision>,
}

/// Canonicalizes and filters a sample. Blocklisted functions are dropped
/// before embedding; the rest are embedded in one batch and checked
/// against the library index.
pub fn prepare_sample(
    sample_id: &str,
    raw: &[RawFunction],
    range: AddrRange,
    provider: &Provider,
    filter: &LibFilter<'_>,
) -> Result<PreparedSample, Error> {
    let canon: Vec<CanonFunction> = raw.iter().map(|f| canonicalize(f, range)).collect();
    let mut decisions: Vec<Option<FilterDecision>> = vec![None; canon.len()];
    let mut to_embed = Vec::new();
    for (i, f) in canon.iter().enumerate() {
        if filter.is_blocklisted(f) {
            decisions[i] = Some(FilterDecision {
                function: f.name.clone(),
                content_hash: f.content_hash,
                reason: FilterReason::Blocklisted,
                lib_match: None,
            });
        } else {
            to_embed.push(i);
        }
    }

    let mut kept = Vec::new();
    let mut vectors = Vec::new();
    if !to_embed.is_empty() {
        let texts: Vec<String> = to_embed.iter().map(|&i| canon[i].render_text()).collect();
        let embedded = provider.embed_batch(&texts)?;
        for (&i, v) in to_embed.iter().zip(embedded) {
            let lib_match = filter.semantic(&v)?;
            let dropped = lib_match.is_some_and(|m| m.phi);
            decisions[i] = Some(FilterDecision {
                function: canon[i].name.clone(),
                content_hash: canon[i].content_hash,
                reason: if dropped {
                    FilterReason::LibraryMatch
                } else {
                    FilterReason::Kept
                },
                lib_match,
            });
            if !dropped {
                kept.push(canon[i].clone());
                vectors.push(v);
            }
        }
    }
    Ok(PreparedSample {
        sample_id: sample_id.to_string(),
        kept,
        vectors,
        decisions: decisions.into_iter().map(|d| d.expect("every function decided")).collect(),
    })
}

/// Builds the library index and blocklist from reference functions.
///
/// The library name is the function's sample id with any `lib:` prefix
/// removed. With `range` unset the listings are taken as already canonical.
pub fn build_library(
    functions: &[RawFunction],
    range: Option<AddrRange>,
    provider: &Provider,
) -> Result<(LibIndex, Blocklist), Error> {
    let canon: Vec<CanonFunction> = functions.iter().map(|f| canonicalize_opt(f, range)).collect();
    let texts: Vec<String> = canon.iter().map(CanonFunction::render_text).collect();
    let vectors = if texts.is_empty() {
        Vec::new()
    } else {
        provider.embed_batch(&texts)?
    };
    let mut lib = LibIndex::new(provider.dim());
    let mut blocklist = Blocklist::new();
    for (f, v) in canon.iter().zip(vectors) {
        blocklist.insert(f.content_hash);
        let library = f.sample_id.strip_prefix("lib:").unwrap_or(&f.sample_id).to_string();
        lib.add(
            v,
            &f.name,
            LibProvenance {
                library,
                ..LibProvenance::default()
            },
        )?;
    }
    Ok((lib, blocklist))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub verdict: SampleVerdict,
    pub filter_decisions: Vec<FilterDecision>,
}

/// A read-only view of everything a scan needs.
pub struct Scanner<'a> {
    pub kb: &'a KnowledgeBase,
    pub filter: LibFilter<'a>,
    pub thresholds: Thresholds,
    pub provider: &'a Provider,
}

impl Scanner<'_> {
    pub fn prepare(
        &self,
        sample_id: &str,
        raw: &[RawFunction],
        range: AddrRange,
    ) -> Result<PreparedSample, Error> {
        prepare_sample(sample_id, raw, range, self.provider, &self.filter)
    }

    pub fn score(&self, prepared: &PreparedSample) -> Result<SampleVerdict, Error> {
        Ok(score_embedded(
            &prepared.sample_id,
            &prepared.kept,
            &prepared.vectors,
            self.kb,
            &self.thresholds,
        )?)
    }

    pub fn scan(&self, sample_id: &str, raw: &[RawFunction], range: AddrRange) -> Result<ScanReport, Error> {
        let prepared = self.prepare(sample_id, raw, range)?;
        let verdict = self.score(&prepared)?;
        Ok(ScanReport {
            verdict,
            filter_decisions: prepared.decisions,
        })
    }
}
