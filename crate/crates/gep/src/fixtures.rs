//! Bundled sample objects: the UV-Vis running example used throughout the
//! guide, tests, and CLI demos. The JSON sources live under `fixtures/` at
//! the repository root so the CLI can exercise the same files.

use crate::objects::{parse_object, AnyObject, Gene, SkillPackage};

const UV_VIS_GENE_JSON: &str = include_str!("../../../fixtures/genes/uv_vis.json");
const UV_VIS_SKILL_JSON: &str = include_str!("../../../fixtures/skills/uv_vis_skill.json");

/// The UV-Vis peak-detection gene (raw form; canonicalize before hashing).
pub fn uv_vis_gene() -> Gene {
    match parse_object(UV_VIS_GENE_JSON) {
        Ok(AnyObject::Gene(g)) => g,
        other => unreachable!("bundled uv_vis gene fixture is valid: {other:?}"),
    }
}

/// The UV-Vis spectroscopy skill package (the ~2,500-token documentation
/// counterpart to the gene).
pub fn uv_vis_skill() -> SkillPackage {
    match parse_object(UV_VIS_SKILL_JSON) {
        Ok(AnyObject::Skill(s)) => s,
        other => unreachable!("bundled uv_vis skill fixture is valid: {other:?}"),
    }
}
