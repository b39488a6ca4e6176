//! Joint grid search over `(tau_func, tau_file)`.
//!
//! Neighborhoods and alpha values are computed once per validation
//! function; every grid point then only re-thresholds the cached alphas.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{distance_weighted_vote, DetectError};
use crate::embedding::EmbeddingVector;
use crate::kb::{KnowledgeBase, Label};

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("grid is empty")]
    EmptyGrid,
    #[error("validation set must contain both benign and malicious samples")]
    OneClassValidation,
    #[error("no grid row satisfies func_fpr < {0}")]
    NoFeasibleRow(f64),
    #[error("malformed grid `{0}` (expected lo:hi:step)")]
    GridSyntax(String),
    #[error(transparent)]
    Detect(#[from] DetectError),
}

/// One validation sample: its label and the embeddings of its surviving
/// functions.
#[derive(Debug, Clone)]
pub struct ValidationSample {
    pub sample_id: String,
    pub label: Label,
    pub vectors: Vec<EmbeddingVector>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub tau_func: f64,
    pub tau_file: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub func_fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rows: Vec<CalibrationRow>,
    pub selected: (f64, f64),
    pub fpr_cap: f64,
}

impl CalibrationReport {
    pub fn selected_row(&self) -> &CalibrationRow {
        self.rows
            .iter()
            .find(|r| (r.tau_func, r.tau_file) == self.selected)
            .expect("selected row is in the table")
    }
}

/// Binary confusion counts with the positive class = malicious.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Cached per-function alpha values for one sample.
struct CachedSample {
    malicious: bool,
    alphas: Vec<f64>,
}

/// Evaluates one grid point from per-sample alpha lists.
///
/// A sample with no surviving functions is predicted benign. Function-level
/// FPR counts flagged functions of benign samples over all functions of
/// benign samples.
pub fn evaluate_point<'a, I>(samples: I, tau_func: f64, tau_file: f64) -> CalibrationRow
where
    I: IntoIterator<Item = (bool, &'a [f64])>,
{
    let mut conf = Confusion::default();
    let (mut benign_funcs, mut benign_flagged) = (0usize, 0usize);
    for (malicious, alphas) in samples {
        let flagged = alphas.iter().filter(|&&a| a > tau_func).count();
        let predicted = !alphas.is_empty() && flagged as f64 / alphas.len() as f64 > tau_file;
        conf.add(malicious, predicted);
        if !malicious {
            benign_funcs += alphas.len();
            benign_flagged += flagged;
        }
    }
    CalibrationRow {
        tau_func,
        tau_file,
        f1: conf.f1(),
        precision: conf.precision(),
        recall: conf.recall(),
        func_fpr: ratio(benign_flagged, benign_funcs),
    }
}

/// Alpha values of every function in `sample`, one KB search each.
pub fn sample_alphas(
    sample: &ValidationSample,
    kb: &KnowledgeBase,
    k: usize,
) -> Result<Vec<f64>, CalibrateError> {
    sample
        .vectors
        .iter()
        .map(|q| {
            let nbhd = kb.search(q, k).map_err(DetectError::from)?;
            let votes = nbhd.neighbors.iter().map(|n| {
                let malicious = kb
                    .entry(n.entry_id)
                    .is_some_and(|m| m.label == Label::Malicious);
                (n.similarity, malicious)
            });
            Ok(distance_weighted_vote(votes.collect::<Vec<_>>()).alpha)
        })
        .collect()
}

/// Picks the best feasible row: max F1, then max precision, then lowest
/// tau_func, then lowest tau_file. Feasible means `func_fpr < fpr_cap`.
pub fn select_row(rows: &[CalibrationRow], fpr_cap: f64) -> Option<&CalibrationRow> {
    let mut best: Option<&CalibrationRow> = None;
    for r in rows.iter().filter(|r| r.func_fpr < fpr_cap) {
        let better = match best {
            None => true,
            Some(b) => {
                r.f1 > b.f1
                    || (r.f1 == b.f1 && r.precision > b.precision)
                    || (r.f1 == b.f1
                        && r.precision == b.precision
                        && (r.tau_func, r.tau_file) < (b.tau_func, b.tau_file))
            }
        };
        if better {
            best = Some(r);
        }
    }
    best
}

pub fn grid_search(
    validation: &[ValidationSample],
    grid_func: &[f64],
    grid_file: &[f64],
    fpr_cap: f64,
    kb: &KnowledgeBase,
    k: usize,
) -> Result<CalibrationReport, CalibrateError> {
    if grid_func.is_empty() || grid_file.is_empty() {
        return Err(CalibrateError::EmptyGrid);
    }
    let has = |l: Label| validation.iter().any(|s| s.label == l);
    if !has(Label::Benign) || !has(Label::Malicious) {
        return Err(CalibrateError::OneClassValidation);
    }
    let cached: Vec<CachedSample> = validation
        .iter()
        .map(|s| {
            Ok(CachedSample {
                malicious: s.label == Label::Malicious,
                alphas: sample_alphas(s, kb, k)?,
            })
        })
        .collect::<Result<_, CalibrateError>>()?;

    let mut rows = Vec::with_capacity(grid_func.len() * grid_file.len());
    for &tf in grid_func {
        for &tfile in grid_file {
            rows.push(evaluate_point(
                cached.iter().map(|c| (c.malicious, c.alphas.as_slice())),
                tf,
                tfile,
            ));
        }
    }
    let selected = select_row(&rows, fpr_cap).ok_or(CalibrateError::NoFeasibleRow(fpr_cap))?;
    Ok(CalibrationReport {
        selected: (selected.tau_func, selected.tau_file),
        rows,
        fpr_cap,
    })
}

/// Parses `lo:hi:step` into an inclusive, rounded grid.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, CalibrateError> {
    let err = || CalibrateError::GridSyntax(spec.to_string());
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| err()))
        .collect::<Result<_, _>>()?;
    let [lo, hi, step] = parts[..] else {
        return Err(err());
    };
    if step.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || hi < lo {
        return Err(err());
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..n)
        .map(|i| ((lo + i as f64 * step) * 1e6).round() / 1e6)
        .collect())
}
