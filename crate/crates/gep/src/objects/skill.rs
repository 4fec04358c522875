//! Skill packages: documentation-style experience objects.
//!
//! A skill package holds up to eight named document sections. The first four
//! (`overview`, `workflow`, `pitfalls`, `error_handling`) are the main body;
//! `api_notes`, `examples`, and `scripts` are auxiliary; `quickref` is an
//! optional condensed reference. An empty string means the section is absent;
//! at least one main section must be non-empty.

use super::canonical::normalize_document;
use super::literal_tag;
use serde::{Deserialize, Serialize};

literal_tag!(SkillTag, "SkillPackage");

/// The closed set of skill-package section names, in schema order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillSection {
    Overview,
    Workflow,
    Pitfalls,
    ErrorHandling,
    ApiNotes,
    Examples,
    Scripts,
    Quickref,
}

impl SkillSection {
    pub const ALL: [SkillSection; 8] = [
        SkillSection::Overview,
        SkillSection::Workflow,
        SkillSection::Pitfalls,
        SkillSection::ErrorHandling,
        SkillSection::ApiNotes,
        SkillSection::Examples,
        SkillSection::Scripts,
        SkillSection::Quickref,
    ];

    /// Main-body sections (`d_main`).
    pub const MAIN: [SkillSection; 4] = [
        SkillSection::Overview,
        SkillSection::Workflow,
        SkillSection::Pitfalls,
        SkillSection::ErrorHandling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SkillSection::Overview => "overview",
            SkillSection::Workflow => "workflow",
            SkillSection::Pitfalls => "pitfalls",
            SkillSection::ErrorHandling => "error_handling",
            SkillSection::ApiNotes => "api_notes",
            SkillSection::Examples => "examples",
            SkillSection::Scripts => "scripts",
            SkillSection::Quickref => "quickref",
        }
    }

    pub fn heading(self) -> &'static str {
        match self {
            SkillSection::Overview => "## Overview",
            SkillSection::Workflow => "## Workflow",
            SkillSection::Pitfalls => "## Pitfalls",
            SkillSection::ErrorHandling => "## Error Handling",
            SkillSection::ApiNotes => "## API Notes",
            SkillSection::Examples => "## Examples",
            SkillSection::Scripts => "## Scripts",
            SkillSection::Quickref => "## Quick Reference",
        }
    }

    pub fn from_name(name: &str) -> Option<SkillSection> {
        SkillSection::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// A skill package. Field order is the canonical serialization order;
/// `asset_id` is excluded from canonical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkillPackage {
    pub object_type: SkillTag,
    #[serde(default = "super::validate::default_schema_version")]
    pub schema_version: String,
    pub id: String,
    #[serde(default)]
    pub overview: String,
    #[serde(default)]
    pub workflow: String,
    #[serde(default)]
    pub pitfalls: String,
    #[serde(default)]
    pub error_handling: String,
    #[serde(default)]
    pub api_notes: String,
    #[serde(default)]
    pub examples: String,
    #[serde(default)]
    pub scripts: String,
    #[serde(default)]
    pub quickref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asset_id: Option<super::AssetId>,
}

impl SkillPackage {
    /// An empty package with the given id; fill sections before use.
    pub fn empty(id: impl Into<String>) -> SkillPackage {
        SkillPackage {
            object_type: SkillTag,
            schema_version: super::SCHEMA_VERSION.to_string(),
            id: id.into(),
            overview: String::new(),
            workflow: String::new(),
            pitfalls: String::new(),
            error_handling: String::new(),
            api_notes: String::new(),
            examples: String::new(),
            scripts: String::new(),
            quickref: String::new(),
            asset_id: None,
        }
    }

    pub fn section(&self, s: SkillSection) -> &str {
        match s {
            SkillSection::Overview => &self.overview,
            SkillSection::Workflow => &self.workflow,
            SkillSection::Pitfalls => &self.pitfalls,
            SkillSection::ErrorHandling => &self.error_handling,
            SkillSection::ApiNotes => &self.api_notes,
            SkillSection::Examples => &self.examples,
            SkillSection::Scripts => &self.scripts,
            SkillSection::Quickref => &self.quickref,
        }
    }

    pub fn section_mut(&mut self, s: SkillSection) -> &mut String {
        match s {
            SkillSection::Overview => &mut self.overview,
            SkillSection::Workflow => &mut self.workflow,
            SkillSection::Pitfalls => &mut self.pitfalls,
            SkillSection::ErrorHandling => &mut self.error_handling,
            SkillSection::ApiNotes => &mut self.api_notes,
            SkillSection::Examples => &mut self.examples,
            SkillSection::Scripts => &mut self.scripts,
            SkillSection::Quickref => &mut self.quickref,
        }
    }

    /// Sections with non-empty content, in schema order.
    pub fn present_sections(&self) -> Vec<SkillSection> {
        SkillSection::ALL
            .into_iter()
            .filter(|s| !self.section(*s).is_empty())
            .collect()
    }

    pub(super) fn normalize(&mut self) {
        for s in SkillSection::ALL {
            let body = self.section_mut(s);
            *body = normalize_document(body);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn section_names_round_trip() {
        for s in SkillSection::ALL {
            assert_eq!(SkillSection::from_name(s.name()), Some(s));
        }
        assert_eq!(SkillSection::from_name("notes"), None);
    }

    #[test]
    fn main_sections_are_the_first_four() {
        assert_eq!(&SkillSection::ALL[..4], &SkillSection::MAIN[..]);
    }
}
