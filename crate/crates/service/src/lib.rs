//! Analyst review queue over scan results, with confirmed anchors
//! promoted into the knowledge base.

pub mod audit;
pub mod http;
pub mod queue;
pub mod service;

pub use queue::{Decision, ItemStatus, QueueSummary, Resolution, TriageItem, TriageQueue};
pub use service::{ScanOutcome, ServiceConfig, ServiceError, TriageService};
