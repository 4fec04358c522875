//! Evolution events: the append-only ledger's record type.
//!
//! An event ties a signal and an intent to a concrete change between two
//! assets. The ledger ordering key is a store-assigned monotonic counter;
//! the wall-clock timestamp riding along is advisory only and never affects
//! protocol order.

use super::canonical::{collapse_whitespace, normalize_document, AssetId};
use super::literal_tag;
use serde::{Deserialize, Serialize};

literal_tag!(EventTag, "Event");

/// What kind of change an event records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Repair,
    Innovation,
    ValidationPass,
    ValidationFail,
    Solidify,
}

impl EventType {
    pub fn as_str(self) -> &'static str {
        match self {
            EventType::Repair => "repair",
            EventType::Innovation => "innovation",
            EventType::ValidationPass => "validation_pass",
            EventType::ValidationFail => "validation_fail",
            EventType::Solidify => "solidify",
        }
    }
}

/// The closed signal taxonomy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Error,
    Exception,
    Failed,
    Unstable,
    UserFeatureRequest,
    UserImprovementSuggestion,
    PerfBottleneck,
    CapabilityGap,
    StableSuccessPlateau,
}

impl SignalKind {
    /// Failure-class signals demand repair; the rest are opportunities.
    pub fn is_failure_class(self) -> bool {
        matches!(
            self,
            SignalKind::Error | SignalKind::Exception | SignalKind::Failed | SignalKind::Unstable
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SignalKind::Error => "error",
            SignalKind::Exception => "exception",
            SignalKind::Failed => "failed",
            SignalKind::Unstable => "unstable",
            SignalKind::UserFeatureRequest => "user_feature_request",
            SignalKind::UserImprovementSuggestion => "user_improvement_suggestion",
            SignalKind::PerfBottleneck => "perf_bottleneck",
            SignalKind::CapabilityGap => "capability_gap",
            SignalKind::StableSuccessPlateau => "stable_success_plateau",
        }
    }
}

/// A standardized protocol signal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Signal {
    pub kind: SignalKind,
    pub evidence: String,
    pub source_ref: String,
}

/// Loop objective derived from signals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Repair,
    Optimize,
    Extend,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Repair => "repair",
            Objective::Optimize => "optimize",
            Objective::Extend => "extend",
        }
    }
}

/// How widely a change may propagate, measured by capsule references to the
/// target: 0 → local, 1–3 → module, more → system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlastRadius {
    Local,
    Module,
    System,
}

impl BlastRadius {
    pub fn from_capsule_refs(refs: usize) -> BlastRadius {
        match refs {
            0 => BlastRadius::Local,
            1..=3 => BlastRadius::Module,
            _ => BlastRadius::System,
        }
    }
}

/// A mutation intent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intent {
    pub objective: Objective,
    pub target_asset: AssetId,
    pub blast_radius: BlastRadius,
    pub rationale: String,
}

/// Validation verdict carried on an event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationResult {
    Pass,
    Fail,
    Skipped,
}

/// Ledger position: the authoritative monotonic counter plus an advisory
/// RFC 3339 wall-clock stamp.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderingKey {
    pub seq: u64,
    pub at: String,
}

/// A ledger event. Field order is the canonical serialization order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub object_type: EventTag,
    pub event_type: EventType,
    pub run_id: String,
    #[serde(default)]
    pub src_asset: Option<AssetId>,
    #[serde(default)]
    pub dst_asset: Option<AssetId>,
    pub signal: Signal,
    pub intent: Intent,
    pub diff: String,
    pub validation_result: ValidationResult,
    pub ordering: OrderingKey,
}

impl Event {
    pub(super) fn normalize(&mut self) {
        self.run_id = collapse_whitespace(&self.run_id);
        self.signal.evidence = collapse_whitespace(&self.signal.evidence);
        self.signal.source_ref = collapse_whitespace(&self.signal.source_ref);
        self.intent.rationale = collapse_whitespace(&self.intent.rationale);
        self.diff = normalize_document(&self.diff);
    }
}

/// An event as submitted to the store, before an ordering key is assigned.
#[derive(Clone, Debug, PartialEq)]
pub struct EventDraft {
    pub event_type: EventType,
    pub run_id: String,
    pub src_asset: Option<AssetId>,
    pub dst_asset: Option<AssetId>,
    pub signal: Signal,
    pub intent: Intent,
    pub diff: String,
    pub validation_result: ValidationResult,
}

impl EventDraft {
    /// Stamps the draft into a full event at the given ledger position.
    pub fn into_event(self, seq: u64, at: String) -> Event {
        Event {
            object_type: EventTag,
            event_type: self.event_type,
            run_id: self.run_id,
            src_asset: self.src_asset,
            dst_asset: self.dst_asset,
            signal: self.signal,
            intent: self.intent,
            diff: self.diff,
            validation_result: self.validation_result,
            ordering: OrderingKey { seq, at },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blast_radius_thresholds() {
        assert_eq!(BlastRadius::from_capsule_refs(0), BlastRadius::Local);
        assert_eq!(BlastRadius::from_capsule_refs(1), BlastRadius::Module);
        assert_eq!(BlastRadius::from_capsule_refs(3), BlastRadius::Module);
        assert_eq!(BlastRadius::from_capsule_refs(4), BlastRadius::System);
        assert_eq!(BlastRadius::from_capsule_refs(5), BlastRadius::System);
    }

    #[test]
    fn failure_class_partition() {
        use SignalKind::*;
        let failure = [Error, Exception, Failed, Unstable];
        let opportunity = [
            UserFeatureRequest,
            UserImprovementSuggestion,
            PerfBottleneck,
            CapabilityGap,
            StableSuccessPlateau,
        ];
        assert!(failure.iter().all(|k| k.is_failure_class()));
        assert!(opportunity.iter().all(|k| !k.is_failure_class()));
    }
}
