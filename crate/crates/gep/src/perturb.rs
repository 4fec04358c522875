//! Mutation operators for robustness studies.
//!
//! Operators never edit in place: each one takes a canonical gene, returns
//! a freshly canonicalized mutant (same gene id, new asset id) plus an
//! event-ready diff string listing every changed field. Field-scope laws
//! hold by construction and are pinned by tests: structural inversion and
//! content substitution each touch exactly their declared field set.
//!
//! Content mutations draw their replacement text from an explicit
//! [`SubstitutionTable`] loaded from a JSON document — the engine ships a
//! sample table under `fixtures/tables/` but invents no content silently.

use crate::objects::{canonicalize, Canonical, Gene, SkillPackage, SkillSection, StepKind, StrategyStep};
use crate::render::{render_skill, ControlPrompt, SkillRequest};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Content-substitution modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationMode {
    WrongAlgorithm,
    WrongDomain,
    StaleParadigm,
}

impl MutationMode {
    pub const ALL: [MutationMode; 3] = [
        MutationMode::WrongAlgorithm,
        MutationMode::WrongDomain,
        MutationMode::StaleParadigm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MutationMode::WrongAlgorithm => "wrong_algorithm",
            MutationMode::WrongDomain => "wrong_domain",
            MutationMode::StaleParadigm => "stale_paradigm",
        }
    }

    pub fn from_name(name: &str) -> Option<MutationMode> {
        MutationMode::ALL.into_iter().find(|m| m.as_str() == name)
    }
}

/// One replacement step (rank is assigned by position when applied).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplacementStep {
    pub kind: StepKind,
    pub text: String,
}

/// Replacement content for one mutation mode. Which parts must be present
/// depends on the mode: step modes need `steps`, domain mode needs
/// `keywords` and `summary`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Replacement {
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub summary: String,
    #[serde(default)]
    pub steps: Vec<ReplacementStep>,
}

/// Replacement content per mutation mode, with provenance for the ledger.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubstitutionTable {
    pub provenance: String,
    pub entries: BTreeMap<MutationMode, Replacement>,
}

impl SubstitutionTable {
    pub fn from_json(text: &str) -> Result<SubstitutionTable, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &std::path::Path) -> Result<SubstitutionTable, PerturbError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PerturbError::TableUnreadable(format!("{}: {e}", path.display())))?;
        SubstitutionTable::from_json(&text)
            .map_err(|e| PerturbError::TableUnreadable(format!("{}: {e}", path.display())))
    }
}

/// Result of a mutation operator: the mutant gene (canonical, same gene id,
/// fresh asset id unless a no-op), the operator label, the field diff, and
/// an optional no-op warning.
#[derive(Clone, Debug)]
pub struct Mutation {
    pub gene: Canonical<Gene>,
    pub operator: &'static str,
    /// One line per changed top-level gene field:
    /// `{field}: {old_json} -> {new_json}`. Empty for a no-op.
    pub diff: String,
    pub warning: Option<String>,
}

impl Mutation {
    /// True iff the operator actually produced different content.
    pub fn changed_from(&self, original: &Canonical<Gene>) -> bool {
        self.gene.asset_id() != original.asset_id()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PerturbError {
    #[error("substitution table has no entry for mode {}", .0.as_str())]
    MissingEntry(MutationMode),
    #[error("substitution entry for {} lacks required {needs}", mode.as_str())]
    IncompleteEntry {
        mode: MutationMode,
        needs: &'static str,
    },
    #[error("overconstrain requires at least one extra constraint")]
    NoExtraConstraints,
    #[error("constraint {0:?} would be a duplicate")]
    DuplicateConstraint(String),
    #[error("constraint strings must not be blank")]
    BlankConstraint,
    #[error("substitution table unreadable: {0}")]
    TableUnreadable(String),
}

/// Gene content fields, in canonical order, that operators may change and
/// diff lines may mention (`asset_id` is addressed by events, not diffs).
const GENE_FIELDS: [&str; 9] = [
    "object_type",
    "schema_version",
    "id",
    "signals_match",
    "summary",
    "strategy",
    "constraints",
    "validation",
    "source_tag",
];

/// One line per top-level field whose canonical value changed.
pub(crate) fn field_diff(original: &Gene, mutated: &Gene) -> String {
    let o = serde_json::to_value(original).expect("genes serialize");
    let m = serde_json::to_value(mutated).expect("genes serialize");
    let mut lines = Vec::new();
    for field in GENE_FIELDS {
        if o[field] != m[field] {
            lines.push(format!("{field}: {} -> {}", o[field], m[field]));
        }
    }
    lines.join("\n")
}

fn recanonicalize(operator: &'static str, mut mutant: Gene) -> Canonical<Gene> {
    mutant.asset_id = None;
    match canonicalize(&mutant) {
        Ok(c) => c,
        Err(report) => unreachable!("{operator} produced an invalid gene: {report}"),
    }
}

/// Reverses the strategy order and renumbers ranks `1..n`. All other
/// fields are untouched. A single-step gene is returned unchanged with a
/// warning (there is no order to invert). Applying the operator twice
/// yields a gene canonical-equal to the original.
pub fn invert_priority(g: &Canonical<Gene>) -> Mutation {
    if g.strategy.len() < 2 {
        return Mutation {
            gene: g.clone(),
            operator: "invert_priority",
            diff: String::new(),
            warning: Some("single-step gene: priority inversion is a no-op".to_string()),
        };
    }
    let mut mutant = g.object().clone();
    mutant.strategy.reverse();
    for (i, step) in mutant.strategy.iter_mut().enumerate() {
        step.rank = (i + 1) as u32;
    }
    let mutated = recanonicalize("invert_priority", mutant);
    Mutation {
        diff: field_diff(g.object(), mutated.object()),
        gene: mutated,
        operator: "invert_priority",
        warning: None,
    }
}

/// Appends extra constraints in order. Blank strings and duplicates (against
/// existing constraints or within `extra`) are rejected rather than silently
/// deduplicated, so repeated application keeps changing the asset.
pub fn overconstrain(g: &Canonical<Gene>, extra: &[String]) -> Result<Mutation, PerturbError> {
    if extra.is_empty() {
        return Err(PerturbError::NoExtraConstraints);
    }
    let mut mutant = g.object().clone();
    for c in extra {
        let c = crate::objects::collapse_whitespace(c);
        if c.is_empty() {
            return Err(PerturbError::BlankConstraint);
        }
        if mutant.constraints.contains(&c) {
            return Err(PerturbError::DuplicateConstraint(c));
        }
        mutant.constraints.push(c);
    }
    let mutated = recanonicalize("overconstrain", mutant);
    Ok(Mutation {
        diff: field_diff(g.object(), mutated.object()),
        gene: mutated,
        operator: "overconstrain",
        warning: None,
    })
}

/// Replaces gene content from the table entry for `mode`:
///
/// - `wrong_algorithm` and `stale_paradigm` replace the strategy steps
///   only (keywords, summary, constraints untouched);
/// - `wrong_domain` replaces keywords and summary only (strategy
///   untouched).
pub fn substitute_content(
    g: &Canonical<Gene>,
    table: &SubstitutionTable,
    mode: MutationMode,
) -> Result<Mutation, PerturbError> {
    let entry = table
        .entries
        .get(&mode)
        .ok_or(PerturbError::MissingEntry(mode))?;
    let mut mutant = g.object().clone();
    match mode {
        MutationMode::WrongAlgorithm | MutationMode::StaleParadigm => {
            if entry.steps.is_empty() {
                return Err(PerturbError::IncompleteEntry {
                    mode,
                    needs: "steps",
                });
            }
            mutant.strategy = entry
                .steps
                .iter()
                .enumerate()
                .map(|(i, s)| StrategyStep::new(s.kind, s.text.clone(), (i + 1) as u32))
                .collect();
        }
        MutationMode::WrongDomain => {
            if entry.keywords.is_empty() {
                return Err(PerturbError::IncompleteEntry {
                    mode,
                    needs: "keywords",
                });
            }
            if entry.summary.trim().is_empty() {
                return Err(PerturbError::IncompleteEntry {
                    mode,
                    needs: "summary",
                });
            }
            mutant.signals_match = entry.keywords.clone();
            mutant.summary = entry.summary.clone();
        }
    }
    let mutated = recanonicalize(mode.as_str(), mutant);
    Ok(Mutation {
        diff: field_diff(g.object(), mutated.object()),
        gene: mutated,
        operator: mode.as_str(),
        warning: None,
    })
}

/// The sections the decomposition study splits a skill into.
pub const SPLIT_SECTIONS: [SkillSection; 5] = [
    SkillSection::Overview,
    SkillSection::Workflow,
    SkillSection::Pitfalls,
    SkillSection::ErrorHandling,
    SkillSection::Quickref,
];

/// Splits a skill into one single-section prompt per non-empty section
/// among overview, workflow, pitfalls, error handling, and quick
/// reference. Each value equals the corresponding single-section render.
pub fn split_skill(s: &Canonical<SkillPackage>) -> BTreeMap<SkillSection, ControlPrompt> {
    let mut out = BTreeMap::new();
    for sec in SPLIT_SECTIONS {
        if !s.section(sec).is_empty() {
            let prompt = render_skill(s, SkillRequest::Section(sec))
                .expect("non-empty section renders");
            out.insert(sec, prompt);
        }
    }
    out
}
