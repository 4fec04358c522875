//! Capsules: validated execution units.
//!
//! A capsule records one validated run: the task it answered (as a digest),
//! the genes that guided it, a stage-labeled trace, the observed outcome as
//! an exact rational, and the validation checks that passed or failed.

use super::canonical::{collapse_whitespace, normalize_document, sha256_hex, AssetId};
use super::literal_tag;
use crate::rate::Rate;
use serde::{Deserialize, Serialize};

literal_tag!(CapsuleTag, "Capsule");

/// Outcome class. Must agree with the rational rate: `pass` ⇔ rate 1,
/// `fail` ⇔ rate 0, `partial` strictly between.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Pass,
    Partial,
    Fail,
}

/// Observed outcome of the capsule's run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsuleOutcome {
    pub kind: OutcomeKind,
    pub rate: Rate,
}

impl CapsuleOutcome {
    /// Classifies a rate into the matching outcome kind.
    pub fn from_rate(rate: Rate) -> CapsuleOutcome {
        let kind = if rate == Rate::one() {
            OutcomeKind::Pass
        } else if rate == Rate::zero() {
            OutcomeKind::Fail
        } else {
            OutcomeKind::Partial
        };
        CapsuleOutcome { kind, rate }
    }

    pub fn is_coherent(&self) -> bool {
        CapsuleOutcome::from_rate(self.rate).kind == self.kind
    }
}

/// One stage-labeled trace record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceStep {
    pub stage: String,
    pub payload: String,
}

/// One validation check result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationCheck {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

/// A capsule. Field order is the canonical serialization order; `asset_id`
/// is excluded from canonical bytes. `lineage` optionally references the
/// ledger ordering key of the event that minted this capsule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Capsule {
    pub object_type: CapsuleTag,
    #[serde(default = "super::validate::default_schema_version")]
    pub schema_version: String,
    pub id: String,
    pub task_signature: String,
    pub gene_refs: Vec<AssetId>,
    #[serde(default)]
    pub trace: Vec<TraceStep>,
    pub outcome: CapsuleOutcome,
    #[serde(default)]
    pub validation_record: Vec<ValidationCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asset_id: Option<AssetId>,
}

impl Capsule {
    pub(super) fn normalize(&mut self) {
        self.task_signature = self.task_signature.trim().to_lowercase();
        for t in &mut self.trace {
            t.stage = collapse_whitespace(&t.stage);
            t.payload = normalize_document(&t.payload);
        }
        for v in &mut self.validation_record {
            v.check = collapse_whitespace(&v.check);
            v.detail = normalize_document(&v.detail);
        }
    }
}

/// Digest binding a capsule to its task: SHA-256 over the scenario id and
/// the task text, newline-separated.
pub fn task_signature(scenario_id: &str, task_text: &str) -> String {
    sha256_hex(format!("{scenario_id}\n{task_text}").as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outcome_classification() {
        assert_eq!(
            CapsuleOutcome::from_rate(Rate::one()).kind,
            OutcomeKind::Pass
        );
        assert_eq!(
            CapsuleOutcome::from_rate(Rate::zero()).kind,
            OutcomeKind::Fail
        );
        assert_eq!(
            CapsuleOutcome::from_rate(Rate::new(7, 14).unwrap()).kind,
            OutcomeKind::Partial
        );
        let bad = CapsuleOutcome {
            kind: OutcomeKind::Pass,
            rate: Rate::new(1, 2).unwrap(),
        };
        assert!(!bad.is_coherent());
    }

    #[test]
    fn task_signature_is_stable() {
        let a = task_signature("S901_toy", "Detect peaks.");
        assert_eq!(a.len(), 64);
        assert_eq!(a, task_signature("S901_toy", "Detect peaks."));
        assert_ne!(a, task_signature("S902_toy", "Detect peaks."));
    }
}
