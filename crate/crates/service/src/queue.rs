//! Review queue state. Pure data; persistence lives in [`crate::audit`].

use std::collections::BTreeMap;

use asmrag_core::explain::Explanation;
use asmrag_core::{SampleVerdict, Verdict};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QueueError {
    #[error("benign samples are not queued")]
    BenignVerdict,
    #[error("malicious verdict has no anchor")]
    MissingAnchor,
    #[error("unknown item {0}")]
    UnknownItem(u64),
    #[error("item {0} is already resolved")]
    AlreadyResolved(u64),
    #[error("item id {got} out of sequence (expected {expected})")]
    OutOfSequence { got: u64, expected: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemStatus {
    Pending,
    Confirmed,
    Rejected,
}

impl std::str::FromStr for ItemStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(ItemStatus::Pending),
            "confirmed" => Ok(ItemStatus::Confirmed),
            "rejected" => Ok(ItemStatus::Rejected),
            other => Err(format!("unknown status `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Confirm,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageItem {
    pub item_id: u64,
    pub verdict: SampleVerdict,
    pub anchor_text: String,
    pub proof_text: String,
    pub explanation: Explanation,
    pub status: ItemStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_by: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_at: Option<DateTime<Utc>>,
    /// KB entry created when the item was confirmed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub promoted_entry_id: Option<u64>,
}

/// Row of the queue listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSummary {
    pub item_id: u64,
    pub sample_id: String,
    pub omega: f64,
    pub c_best: Option<String>,
    pub status: ItemStatus,
}

impl From<&TriageItem> for QueueSummary {
    fn from(it: &TriageItem) -> Self {
        QueueSummary {
            item_id: it.item_id,
            sample_id: it.verdict.sample_id.clone(),
            omega: it.verdict.omega,
            c_best: it.verdict.c_best.clone(),
            status: it.status,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub item_id: u64,
    pub decision: Decision,
    pub analyst_id: String,
    pub at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub promoted_entry_id: Option<u64>,
}

/// Items keyed by id; ids are assigned in arrival order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriageQueue {
    items: BTreeMap<u64, TriageItem>,
}

impl TriageQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn next_item_id(&self) -> u64 {
        self.items.keys().next_back().map_or(1, |id| id + 1)
    }

    pub fn get(&self, item_id: u64) -> Option<&TriageItem> {
        self.items.get(&item_id)
    }

    /// Builds a pending item for the next id without inserting it.
    pub fn prepare(
        &self,
        verdict: SampleVerdict,
        explanation: Explanation,
    ) -> Result<TriageItem, QueueError> {
        if verdict.verdict != Verdict::Malicious {
            return Err(QueueError::BenignVerdict);
        }
        let anchor_text = verdict
            .anchor
            .as_ref()
            .and_then(|a| a.text.clone())
            .ok_or(QueueError::MissingAnchor)?;
        let proof_text = verdict.proof.as_ref().and_then(|p| p.text.clone()).unwrap_or_default();
        Ok(TriageItem {
            item_id: self.next_item_id(),
            verdict,
            anchor_text,
            proof_text,
            explanation,
            status: ItemStatus::Pending,
            resolved_by: None,
            resolved_at: None,
            promoted_entry_id: None,
        })
    }

    /// Inserts a prepared item. Ids must arrive in sequence.
    pub fn insert(&mut self, item: TriageItem) -> Result<u64, QueueError> {
        let expected = self.next_item_id();
        if item.item_id != expected {
            return Err(QueueError::OutOfSequence {
                got: item.item_id,
                expected,
            });
        }
        self.items.insert(item.item_id, item);
        Ok(expected)
    }

    pub fn enqueue(&mut self, verdict: SampleVerdict, explanation: Explanation) -> Result<u64, QueueError> {
        let item = self.prepare(verdict, explanation)?;
        self.insert(item)
    }

    /// Checks that `item_id` exists and is pending.
    pub fn check_pending(&self, item_id: u64) -> Result<&TriageItem, QueueError> {
        let it = self.items.get(&item_id).ok_or(QueueError::UnknownItem(item_id))?;
        if it.status != ItemStatus::Pending {
            return Err(QueueError::AlreadyResolved(item_id));
        }
        Ok(it)
    }

    pub fn apply(&mut self, r: &Resolution) -> Result<(), QueueError> {
        self.check_pending(r.item_id)?;
        let it = self.items.get_mut(&r.item_id).expect("checked above");
        it.status = match r.decision {
            Decision::Confirm => ItemStatus::Confirmed,
            Decision::Reject => ItemStatus::Rejected,
        };
        it.resolved_by = Some(r.analyst_id.clone());
        it.resolved_at = Some(r.at);
        it.promoted_entry_id = r.promoted_entry_id;
        Ok(())
    }

    /// Items with the given status (all when `None`), by descending omega
    /// then arrival.
    pub fn list(&self, status: Option<ItemStatus>) -> Vec<&TriageItem> {
        let mut out: Vec<&TriageItem> = self
            .items
            .values()
            .filter(|it| status.is_none_or(|s| it.status == s))
            .collect();
        out.sort_by(|a, b| {
            b.verdict
                .omega
                .total_cmp(&a.verdict.omega)
                .then(a.item_id.cmp(&b.item_id))
        });
        out
    }
}
