//! Dataset splits, KB construction from labeled samples, and end-to-end
//! metrics.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calibrate::{Confusion, ValidationSample};
use crate::corpus::{OptLevel, SampleRecord};
use crate::detector::{recall_at_k, Verdict};
use crate::embedding::Provider;
use crate::kb::{KnowledgeBase, Label, NewEntry};
use crate::libfilter::LibFilter;
use crate::pipeline::{prepare_sample, PreparedSample, Scanner};
use crate::Error;

pub const DEFAULT_KS: [usize; 5] = [1, 5, 10, 20, 50];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SplitError {
    #[error("split windows overlap or are inverted")]
    OverlappingWindows,
    #[error("sample `{0}` has no first_seen date")]
    MissingDate(String),
    #[error("sample `{0}` has no optimization level")]
    MissingOptLevel(String),
}

/// Date rules: KB = before `kb_cutoff`; validation = within
/// `[val_start, val_end]`; test = on or after `test_start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kb_cutoff: NaiveDate,
    pub val_start: NaiveDate,
    pub val_end: NaiveDate,
    pub test_start: NaiveDate,
}

impl SplitSpec {
    /// Cutoffs 2022-06-01 / 2022-06-01..2023-05-31 / 2023-06-01.
    pub fn standard() -> Self {
        let d = |y, m, dd| NaiveDate::from_ymd_opt(y, m, dd).expect("valid date");
        Self {
            kb_cutoff: d(2022, 6, 1),
            val_start: d(2022, 6, 1),
            val_end: d(2023, 5, 31),
            test_start: d(2023, 6, 1),
        }
    }

    pub fn validate(&self) -> Result<(), SplitError> {
        let ok = self.kb_cutoff <= self.val_start
            && self.val_start <= self.val_end
            && self.val_end < self.test_start;
        if ok {
            Ok(())
        } else {
            Err(SplitError::OverlappingWindows)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Kb,
    Val,
    Test,
    Unassigned,
}

pub fn assign_partition(date: NaiveDate, spec: &SplitSpec) -> Partition {
    if date < spec.kb_cutoff {
        Partition::Kb
    } else if date >= spec.val_start && date <= spec.val_end {
        Partition::Val
    } else if date >= spec.test_start {
        Partition::Test
    } else {
        Partition::Unassigned
    }
}

#[derive(Debug, Clone, Default)]
pub struct ChronoSplit {
    pub kb: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
    pub unassigned: Vec<SampleRecord>,
}

pub fn chronological_split(corpus: &[SampleRecord], spec: &SplitSpec) -> Result<ChronoSplit, SplitError> {
    spec.validate()?;
    let mut out = ChronoSplit::default();
    for r in corpus {
        let date = r
            .first_seen
            .ok_or_else(|| SplitError::MissingDate(r.sample_id.clone()))?;
        let bucket = match assign_partition(date, spec) {
            Partition::Kb => &mut out.kb,
            Partition::Val => &mut out.val,
            Partition::Test => &mut out.test,
            Partition::Unassigned => &mut out.unassigned,
        };
        bucket.push(r.clone());
    }
    Ok(out)
}

/// True iff every test sample is dated at or after the latest KB sample.
pub fn no_lookahead(kb: &[SampleRecord], test: &[SampleRecord]) -> bool {
    let kb_max = kb.iter().filter_map(|r| r.first_seen).max();
    match kb_max {
        None => true,
        Some(max) => test.iter().all(|r| r.first_seen.is_some_and(|d| d >= max)),
    }
}

/// Leave-one-optimization-out: the KB gets the wild base plus every source
/// recompilation not at `held_out`; the test set is exactly the held-out
/// recompilations.
pub fn loo_opt_split(
    src: &[SampleRecord],
    held_out: OptLevel,
    wild_kb: &[SampleRecord],
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>), SplitError> {
    let mut kb: Vec<SampleRecord> = wild_kb.to_vec();
    let mut test = Vec::new();
    for r in src {
        let level = r
            .opt_level
            .ok_or_else(|| SplitError::MissingOptLevel(r.sample_id.clone()))?;
        if level == held_out {
            test.push(r.clone());
        } else {
            kb.push(r.clone());
        }
    }
    Ok((kb, test))
}

/// Prepares one labeled sample through canonicalization and filtering.
pub fn prepare_record(
    record: &SampleRecord,
    provider: &Provider,
    filter: &LibFilter<'_>,
) -> Result<PreparedSample, Error> {
    let raw = record.raw_functions()?;
    prepare_sample(&record.sample_id, &raw, record.addr_range, provider, filter)
}

/// Builds a KB from labeled samples; each surviving function inherits its
/// sample's label, family and date.
pub fn build_kb(
    samples: &[SampleRecord],
    provider: &Provider,
    filter: &LibFilter<'_>,
) -> Result<KnowledgeBase, Error> {
    let mut kb = KnowledgeBase::new(provider.dim());
    for s in samples {
        s.validate()?;
        let prepared = prepare_record(s, provider, filter)?;
        for (f, v) in prepared.kept.iter().zip(prepared.vectors) {
            kb.insert(NewEntry {
                vector: v,
                label: s.label,
                family: s.family.clone(),
                sample_id: s.sample_id.clone(),
                function_name: f.name.clone(),
                first_seen: s.first_seen,
                text: Some(f.render_text()),
            })?;
        }
    }
    Ok(kb)
}

/// Prepares validation samples for threshold calibration.
pub fn validation_samples(
    samples: &[SampleRecord],
    provider: &Provider,
    filter: &LibFilter<'_>,
) -> Result<Vec<ValidationSample>, Error> {
    samples
        .iter()
        .map(|s| {
            let p = prepare_record(s, provider, filter)?;
            Ok(ValidationSample {
                sample_id: s.sample_id.clone(),
                label: s.label,
                vectors: p.vectors,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

impl From<Confusion> for BinaryMetrics {
    fn from(c: Confusion) -> Self {
        Self {
            accuracy: c.accuracy(),
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            confusion: c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMetrics {
    pub per_family: BTreeMap<String, FamilyMetrics>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub evaluated_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileMetrics {
    pub from: Option<NaiveDate>,
    pub to: Option<NaiveDate>,
    pub samples: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub truth: Label,
    pub true_family: Option<String>,
    pub verdict: Verdict,
    pub predicted_family: Option<String>,
    pub omega: f64,
    pub flagged: Vec<String>,
    pub first_seen: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub detection: BinaryMetrics,
    pub attribution: AttributionMetrics,
    /// Mean Recall@k over surviving functions of malicious test samples.
    pub recall_at_k: BTreeMap<usize, f64>,
    pub recall_queries: usize,
    pub drift_quartiles: Vec<QuartileMetrics>,
    pub samples: Vec<SampleOutcome>,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let c = Confusion { tp, fp, tn: 0, fn_ };
    (c.precision(), c.recall(), c.f1())
}

/// Per-family scores over samples predicted malicious. A sample's true
/// class is its family, or `benign` for benign samples.
pub fn attribution_metrics(outcomes: &[SampleOutcome]) -> AttributionMetrics {
    let flagged: Vec<&SampleOutcome> = outcomes.iter().filter(|o| o.verdict == Verdict::Malicious).collect();
    let truth = |o: &SampleOutcome| o.true_family.clone().unwrap_or_else(|| "benign".into());
    let families: BTreeSet<String> = outcomes.iter().filter_map(|o| o.true_family.clone()).collect();
    let mut per_family = BTreeMap::new();
    for fam in &families {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for o in &flagged {
            let t = truth(o) == *fam;
            let p = o.predicted_family.as_deref() == Some(fam.as_str());
            match (t, p) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let (precision, recall, f1) = prf(tp, fp, fn_);
        per_family.insert(
            fam.clone(),
            FamilyMetrics {
                precision,
                recall,
                f1,
                support: tp + fn_,
            },
        );
    }
    let scored: Vec<&FamilyMetrics> = per_family.values().filter(|m| m.support > 0).collect();
    let macro_f1 = if scored.is_empty() {
        0.0
    } else {
        scored.iter().map(|m| m.f1).sum::<f64>() / scored.len() as f64
    };
    let total: usize = scored.iter().map(|m| m.support).sum();
    let weighted_f1 = if total == 0 {
        0.0
    } else {
        scored.iter().map(|m| m.f1 * m.support as f64).sum::<f64>() / total as f64
    };
    AttributionMetrics {
        per_family,
        macro_f1,
        weighted_f1,
        evaluated_samples: flagged.len(),
    }
}

/// Detection F1 over four equal-count partitions by date.
pub fn drift_quartiles(outcomes: &[SampleOutcome]) -> Vec<QuartileMetrics> {
    let mut sorted: Vec<&SampleOutcome> = outcomes.iter().collect();
    sorted.sort_by(|a, b| a.first_seen.cmp(&b.first_seen).then(a.sample_id.cmp(&b.sample_id)));
    let n = sorted.len();
    (0..4)
        .map(|q| {
            let chunk = &sorted[q * n / 4..(q + 1) * n / 4];
            let mut c = Confusion::default();
            for o in chunk {
                c.add(o.truth == Label::Malicious, o.verdict == Verdict::Malicious);
            }
            QuartileMetrics {
                from: chunk.first().and_then(|o| o.first_seen),
                to: chunk.last().and_then(|o| o.first_seen),
                samples: chunk.len(),
                f1: c.f1(),
            }
        })
        .collect()
}

/// Scans every test sample and computes detection, attribution,
/// Recall@k and temporal-drift metrics.
pub fn evaluate(test: &[SampleRecord], scanner: &Scanner<'_>, ks: &[usize]) -> Result<EvalMetrics, Error> {
    if test.is_empty() {
        return Err(Error::InvalidRecord("test set is empty".into()));
    }
    let k_max = ks.iter().copied().max().unwrap_or(1).max(1);
    let mut conf = Confusion::default();
    let mut outcomes = Vec::with_capacity(test.len());
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut queries = 0usize;

    for s in test {
        let prepared = prepare_record(s, scanner.provider, &scanner.filter)?;
        let verdict = scanner.score(&prepared)?;
        conf.add(s.is_malicious(), verdict.verdict == Verdict::Malicious);

        if let (true, Some(fam)) = (s.is_malicious(), s.family.as_deref()) {
            for q in &prepared.vectors {
                let nbhd = scanner.kb.search(q, k_max)?;
                queries += 1;
                for (&k, count) in hits.iter_mut() {
                    *count += usize::from(recall_at_k(&nbhd.truncated(k), scanner.kb, fam));
                }
            }
        }
        outcomes.push(SampleOutcome {
            sample_id: s.sample_id.clone(),
            truth: s.label,
            true_family: s.family.clone(),
            verdict: verdict.verdict,
            predicted_family: verdict.c_best.clone(),
            omega: verdict.omega,
            flagged: verdict.flagged_names().into_iter().map(String::from).collect(),
            first_seen: s.first_seen,
        });
    }

    let recall_at_k = hits
        .into_iter()
        .map(|(k, h)| (k, if queries == 0 { 0.0 } else { h as f64 / queries as f64 }))
        .collect();
    Ok(EvalMetrics {
        detection: conf.into(),
        attribution: attribution_metrics(&outcomes),
        recall_at_k,
        recall_queries: queries,
        drift_quartiles: drift_quartiles(&outcomes),
        samples: outcomes,
    })
}
