//! Genes: compact, strategy-bearing experience objects.

use super::canonical::{collapse_whitespace, normalize_keyword, AssetId};
use super::literal_tag;
use serde::{Deserialize, Serialize};

literal_tag!(GeneTag, "Gene");

/// Strategy step polarity. `DO` prescribes, `AVOID` proscribes; AVOID steps
/// are how a gene carries its pitfall cues.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    #[serde(rename = "DO")]
    Do,
    #[serde(rename = "AVOID")]
    Avoid,
}

/// One ranked strategy step. Ranks are 1-based and must form a contiguous
/// permutation within a gene; canonical form sorts steps by rank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyStep {
    pub kind: StepKind,
    pub text: String,
    pub rank: u32,
}

impl StrategyStep {
    pub fn new(kind: StepKind, text: impl Into<String>, rank: u32) -> StrategyStep {
        StrategyStep {
            kind,
            text: text.into(),
            rank,
        }
    }
}

/// Executable validation hook: a command expected to exit with a given code.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationHook {
    pub command: String,
    pub expected_exit: i32,
    pub description: String,
}

/// Provenance of a gene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    RunExperience,
    BuiltinTopicPrior,
    ExternalCorpus,
    Manual,
}

impl SourceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::RunExperience => "run_experience",
            SourceTag::BuiltinTopicPrior => "builtin_topic_prior",
            SourceTag::ExternalCorpus => "external_corpus",
            SourceTag::Manual => "manual",
        }
    }
}

/// A strategic gene.
///
/// Field declaration order here *is* the canonical serialization order.
/// `asset_id` is derived from the canonical bytes and therefore excluded
/// from them (it is dropped before encoding).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gene {
    pub object_type: GeneTag,
    #[serde(default = "super::validate::default_schema_version")]
    pub schema_version: String,
    pub id: String,
    pub signals_match: Vec<String>,
    pub summary: String,
    pub strategy: Vec<StrategyStep>,
    #[serde(default)]
    pub constraints: Vec<String>,
    #[serde(default)]
    pub validation: Vec<ValidationHook>,
    pub source_tag: SourceTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asset_id: Option<AssetId>,
}

impl Gene {
    /// Convenience constructor with the schema default version and no
    /// constraints or hooks.
    pub fn new(
        id: impl Into<String>,
        signals_match: Vec<String>,
        summary: impl Into<String>,
        strategy: Vec<StrategyStep>,
        source_tag: SourceTag,
    ) -> Gene {
        Gene {
            object_type: GeneTag,
            schema_version: super::SCHEMA_VERSION.to_string(),
            id: id.into(),
            signals_match,
            summary: summary.into(),
            strategy,
            constraints: Vec::new(),
            validation: Vec::new(),
            source_tag,
            asset_id: None,
        }
    }

    /// True iff `id` matches `gene_[a-z0-9_]+`.
    pub fn id_is_valid(id: &str) -> bool {
        match id.strip_prefix("gene_") {
            Some(rest) => {
                !rest.is_empty()
                    && rest
                        .bytes()
                        .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
            }
            None => false,
        }
    }

    pub(super) fn normalize(&mut self) {
        for k in &mut self.signals_match {
            *k = normalize_keyword(k);
        }
        self.summary = collapse_whitespace(&self.summary);
        self.strategy.sort_by_key(|s| s.rank);
        for s in &mut self.strategy {
            s.text = collapse_whitespace(&s.text);
        }
        for c in &mut self.constraints {
            *c = collapse_whitespace(c);
        }
        for h in &mut self.validation {
            h.command = collapse_whitespace(&h.command);
            h.description = collapse_whitespace(&h.description);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_pattern() {
        assert!(Gene::id_is_valid("gene_uv_vis_fwhm"));
        assert!(Gene::id_is_valid("gene_arxiv_ebe24f551e12"));
        assert!(!Gene::id_is_valid("gene_"));
        assert!(!Gene::id_is_valid("gene_UV"));
        assert!(!Gene::id_is_valid("skill_uv"));
        assert!(!Gene::id_is_valid("gene_a-b"));
    }

    #[test]
    fn object_type_tag_is_checked_on_deserialize() {
        let err = serde_json::from_str::<Gene>(
            r#"{"object_type":"Skill","id":"gene_x","signals_match":["a"],
                "summary":"s","strategy":[{"kind":"DO","text":"t","rank":1}],
                "source_tag":"manual"}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("expected object_type"));
    }
}
