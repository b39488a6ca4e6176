use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use asmrag_core::embedding::EmbeddingVector;
use asmrag_core::explain::{generate, Explanation, ExplanationRequest, GeneratorConfig, ProofProvenance};
use asmrag_core::kb::{KbError, KbStats};
use asmrag_core::pipeline::{ScanReport, Scanner};
use asmrag_core::{
    AddrRange, Blocklist, KnowledgeBase, LibFilter, LibIndex, Provider, ProviderConfig, RawFunction, SampleVerdict,
    Thresholds, Verdict,
};
use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{self, AuditError, AuditLog, AuditRecord};
use crate::queue::{Decision, ItemStatus, QueueError, QueueSummary, Resolution, TriageItem, TriageQueue};

pub const LOCK_FILE: &str = ".asmrag.lock";
pub const AUDIT_FILE: &str = "audit.jsonl";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("knowledge base {0} is locked by another process (remove the lock file if stale)")]
    KbLocked(PathBuf),
    #[error("cannot bind {addr}: {reason}")]
    BindFailure { addr: String, reason: String },
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Core(#[from] asmrag_core::Error),
    #[error("audit log and knowledge base disagree: {0}")]
    Reconcile(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<asmrag_core::embedding::EmbedError> for ServiceError {
    fn from(e: asmrag_core::embedding::EmbedError) -> Self {
        ServiceError::Core(e.into())
    }
}

impl From<asmrag_core::libfilter::FilterError> for ServiceError {
    fn from(e: asmrag_core::libfilter::FilterError) -> Self {
        ServiceError::Core(e.into())
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub kb_dir: PathBuf,
    pub lib_dir: Option<PathBuf>,
    pub blocklist: Option<PathBuf>,
    /// Defaults to `audit.jsonl` inside the KB directory.
    pub audit_path: Option<PathBuf>,
    /// Defaults to the encoder config stored with the KB.
    pub provider: Option<ProviderConfig>,
    pub thresholds: Thresholds,
    pub tau_lib: f64,
    pub generator: GeneratorConfig,
}

impl ServiceConfig {
    pub fn new(kb_dir: impl Into<PathBuf>) -> Self {
        Self {
            kb_dir: kb_dir.into(),
            lib_dir: None,
            blocklist: None,
            audit_path: None,
            provider: None,
            thresholds: Thresholds::default(),
            tau_lib: 0.95,
            generator: GeneratorConfig::Stub,
        }
    }
}

/// Exclusive ownership of a KB directory for the life of the service.
struct KbLock(PathBuf);

impl KbLock {
    fn acquire(dir: &Path) -> Result<Self, ServiceError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(KbLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(ServiceError::KbLocked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for KbLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ScanOutcome {
    Queued { item_id: u64, report: Box<ScanReport> },
    Benign { report: Box<ScanReport> },
}

impl ScanOutcome {
    pub fn item_id(&self) -> Option<u64> {
        match self {
            ScanOutcome::Queued { item_id, .. } => Some(*item_id),
            ScanOutcome::Benign { .. } => None,
        }
    }

    pub fn report(&self) -> &ScanReport {
        match self {
            ScanOutcome::Queued { report, .. } | ScanOutcome::Benign { report } => report,
        }
    }
}

struct Ledger {
    queue: TriageQueue,
    log: AuditLog,
}

pub struct TriageService {
    kb: RwLock<KnowledgeBase>,
    kb_dir: PathBuf,
    lib: Option<LibIndex>,
    blocklist: Option<Blocklist>,
    tau_lib: f64,
    provider: Provider,
    thresholds: Thresholds,
    generator: GeneratorConfig,
    ledger: Mutex<Ledger>,
    _lock: KbLock,
}

impl TriageService {
    pub fn open(cfg: ServiceConfig) -> Result<Self, ServiceError> {
        cfg.thresholds.validate().map_err(asmrag_core::Error::from)?;
        let lock = KbLock::acquire(&cfg.kb_dir)?;
        let mut kb = KnowledgeBase::load(&cfg.kb_dir)?;
        let provider_cfg = match cfg.provider {
            Some(p) => p,
            None => ProviderConfig::load(&cfg.kb_dir)?.with_env_override(),
        };
        let provider = Provider::from_config(&provider_cfg)?;
        if provider.dim() != kb.dim() {
            return Err(KbError::DimMismatch {
                expected: kb.dim(),
                got: provider.dim(),
            }
            .into());
        }
        let lib = cfg.lib_dir.as_deref().map(LibIndex::load).transpose()?;
        let blocklist = match &cfg.blocklist {
            Some(p) => Some(Blocklist::parse(&std::fs::read_to_string(p)?)?),
            None => None,
        };

        let audit_path = cfg.audit_path.unwrap_or_else(|| cfg.kb_dir.join(AUDIT_FILE));
        let log = AuditLog::open(&audit_path)?;
        let queue = audit::replay(&audit::read_records(&audit_path)?)?;
        if reconcile(&queue, &mut kb)? {
            kb.save(&cfg.kb_dir)?;
        }
        log::info!(
            "opened KB {} ({} entries), {} queued items",
            cfg.kb_dir.display(),
            kb.len(),
            queue.len()
        );
        Ok(Self {
            kb: RwLock::new(kb),
            kb_dir: cfg.kb_dir,
            lib,
            blocklist,
            tau_lib: cfg.tau_lib,
            provider,
            thresholds: cfg.thresholds,
            generator: cfg.generator,
            ledger: Mutex::new(Ledger { queue, log }),
            _lock: lock,
        })
    }

    pub fn thresholds(&self) -> Thresholds {
        self.thresholds
    }

    /// Runs the detector against a KB snapshot and queues malicious results.
    pub fn scan(&self, sample_id: &str, raw: &[RawFunction], range: AddrRange) -> Result<ScanOutcome, ServiceError> {
        let report = {
            let kb = self.kb.read().expect("kb lock poisoned");
            let scanner = Scanner {
                kb: &kb,
                filter: LibFilter {
                    lib: self.lib.as_ref(),
                    blocklist: self.blocklist.as_ref(),
                    tau_lib: self.tau_lib,
                },
                thresholds: self.thresholds,
                provider: &self.provider,
            };
            scanner.scan(sample_id, raw, range)?
        };
        if report.verdict.verdict != Verdict::Malicious {
            return Ok(ScanOutcome::Benign {
                report: Box::new(report),
            });
        }
        let explanation = self.explain(&report.verdict);
        let mut ledger = self.ledger.lock().expect("ledger lock poisoned");
        let item = ledger.queue.prepare(report.verdict.clone(), explanation)?;
        ledger.log.append(&AuditRecord::Enqueued {
            item: Box::new(item.clone()),
        })?;
        let item_id = ledger.queue.insert(item)?;
        Ok(ScanOutcome::Queued {
            item_id,
            report: Box::new(report),
        })
    }

    fn explain(&self, v: &SampleVerdict) -> Explanation {
        let (anchor, proof) = (v.anchor.as_ref(), v.proof.as_ref());
        let req = ExplanationRequest {
            anchor_text: anchor.and_then(|a| a.text.clone()).unwrap_or_default(),
            proof_text: proof.and_then(|p| p.text.clone()).unwrap_or_default(),
            family: v.c_best.clone().unwrap_or_default(),
            proof_provenance: ProofProvenance {
                sample_id: proof.map(|p| p.sample_id.clone()).unwrap_or_default(),
                first_seen: proof.and_then(|p| p.first_seen),
            },
        };
        match generate(&req, &self.generator) {
            Ok(e) => e,
            Err(e) => {
                log::warn!("explanation for `{}` fell back to the stub: {e}", v.sample_id);
                generate(&req, &GeneratorConfig::Stub).unwrap_or_else(|_| Explanation {
                    text: String::new(),
                    generator: asmrag_core::explain::GeneratorKind::StubTemplate,
                    request_digest: req.digest(),
                    template_version: asmrag_core::explain::TEMPLATE_VERSION,
                    unverified_claims: false,
                })
            }
        }
    }

    /// Resolves a pending item. Confirmation writes the audit record first,
    /// then promotes the anchor embedding and persists the KB.
    pub fn resolve(&self, item_id: u64, decision: Decision, analyst_id: &str) -> Result<Resolution, ServiceError> {
        if analyst_id.trim().is_empty() {
            return Err(ServiceError::BadRequest("analyst_id must be non-empty".into()));
        }
        let mut ledger = self.ledger.lock().expect("ledger lock poisoned");
        let item = ledger.queue.check_pending(item_id)?.clone();
        let mut resolution = Resolution {
            item_id,
            decision,
            analyst_id: analyst_id.to_string(),
            at: Utc::now(),
            promoted_entry_id: None,
        };
        match decision {
            Decision::Reject => {
                ledger.log.append(&AuditRecord::Resolved {
                    resolution: resolution.clone(),
                })?;
                ledger.queue.apply(&resolution)?;
            }
            Decision::Confirm => {
                let mut kb = self.kb.write().expect("kb lock poisoned");
                let (vector, family) = promotion_input(&item)?;
                if vector.dim() != kb.dim() {
                    return Err(KbError::DimMismatch {
                        expected: kb.dim(),
                        got: vector.dim(),
                    }
                    .into());
                }
                resolution.promoted_entry_id = Some(kb.next_entry_id());
                ledger.log.append(&AuditRecord::Resolved {
                    resolution: resolution.clone(),
                })?;
                let id = promote(&mut kb, &item, vector, &family, resolution.at)?;
                debug_assert_eq!(Some(id), resolution.promoted_entry_id);
                ledger.queue.apply(&resolution)?;
                kb.save(&self.kb_dir)?;
            }
        }
        Ok(resolution)
    }

    pub fn queue(&self, status: Option<ItemStatus>) -> Vec<QueueSummary> {
        let ledger = self.ledger.lock().expect("ledger lock poisoned");
        ledger.queue.list(status).into_iter().map(QueueSummary::from).collect()
    }

    pub fn item(&self, item_id: u64) -> Result<TriageItem, ServiceError> {
        let ledger = self.ledger.lock().expect("ledger lock poisoned");
        Ok(ledger
            .queue
            .get(item_id)
            .cloned()
            .ok_or(QueueError::UnknownItem(item_id))?)
    }

    pub fn kb_stats(&self) -> KbStats {
        self.kb.read().expect("kb lock poisoned").stats()
    }

    /// Runs `f` against the current KB.
    pub fn with_kb<T>(&self, f: impl FnOnce(&KnowledgeBase) -> T) -> T {
        f(&self.kb.read().expect("kb lock poisoned"))
    }

    pub fn provider(&self) -> &Provider {
        &self.provider
    }
}

fn promotion_input(item: &TriageItem) -> Result<(EmbeddingVector, String), ServiceError> {
    let anchor = item
        .verdict
        .anchor
        .as_ref()
        .ok_or_else(|| ServiceError::Reconcile(format!("item {} has no anchor", item.item_id)))?;
    let vector = EmbeddingVector::from_unit(anchor.vector.clone())?;
    let family = item
        .verdict
        .c_best
        .clone()
        .ok_or_else(|| ServiceError::Reconcile(format!("item {} has no family", item.item_id)))?;
    Ok((vector, family))
}

fn promote(
    kb: &mut KnowledgeBase,
    item: &TriageItem,
    vector: EmbeddingVector,
    family: &str,
    at: chrono::DateTime<Utc>,
) -> Result<u64, KbError> {
    let anchor = item.verdict.anchor.as_ref().expect("checked by promotion_input");
    kb.promote(
        vector,
        family,
        &item.verdict.sample_id,
        &anchor.function_name,
        Some(at.date_naive()),
        Some(item.anchor_text.clone()),
    )
}

/// Re-applies confirmed promotions missing from the KB (a crash between
/// the audit write and the KB save). Returns whether the KB changed.
fn reconcile(queue: &TriageQueue, kb: &mut KnowledgeBase) -> Result<bool, ServiceError> {
    let mut confirmed: Vec<&TriageItem> = queue
        .list(Some(ItemStatus::Confirmed))
        .into_iter()
        .filter(|it| it.promoted_entry_id.is_some())
        .collect();
    confirmed.sort_by_key(|it| it.promoted_entry_id);
    let mut changed = false;
    for it in confirmed {
        let id = it.promoted_entry_id.expect("filtered above");
        if let Some(e) = kb.entry(id) {
            if e.sample_id != it.verdict.sample_id {
                return Err(ServiceError::Reconcile(format!(
                    "entry {id} belongs to `{}`, audit expects `{}`",
                    e.sample_id, it.verdict.sample_id
                )));
            }
            continue;
        }
        if id != kb.next_entry_id() {
            return Err(ServiceError::Reconcile(format!(
                "promoted entry {id} is missing and cannot be replayed (next id {})",
                kb.next_entry_id()
            )));
        }
        let (vector, family) = promotion_input(it)?;
        log::warn!("replaying promotion of item {} as entry {id}", it.item_id);
        promote(kb, it, vector, &family, it.resolved_at.unwrap_or_else(Utc::now))?;
        changed = true;
    }
    Ok(changed)
}
