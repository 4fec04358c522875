//! Canonical form (Γ) and content-addressed identity.
//!
//! Canonical bytes are UTF-8 JSON with fields in fixed schema order (the
//! struct declaration order), LF newlines, and normalized strings:
//!
//! - keywords: lowercased, trimmed, inner whitespace runs collapsed;
//! - short strings (summaries, step texts, constraints, commands):
//!   trimmed with whitespace runs collapsed;
//! - document strings (skill sections, trace payloads, diffs): newlines
//!   normalized to LF and the whole string trimmed, inner layout preserved.
//!
//! The derived `asset_id` field is excluded from canonical bytes (it is the
//! SHA-256 of them, so including it would be circular). Canonicalization is
//! idempotent and independent of input field order and surrounding
//! whitespace; those are the properties the identity tests pin down.

use super::validate::{ValidationReport, Violation};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::ops::Deref;

/// Lowercase hex SHA-256 digest of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Collapses all whitespace runs (including newlines) to single spaces and
/// trims the ends. Idempotent.
pub fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Keyword normalization: collapse whitespace, then lowercase.
pub fn normalize_keyword(s: &str) -> String {
    collapse_whitespace(s).to_lowercase()
}

/// Document normalization: CRLF/CR to LF, trim the ends, keep inner layout
/// (indentation matters for scripts and examples).
pub fn normalize_document(s: &str) -> String {
    s.replace("\r\n", "\n").replace('\r', "\n").trim().to_string()
}

/// A validated content address: 64 lowercase hex characters.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AssetId(String);

/// Error for malformed asset id strings.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("malformed asset id {0:?}: expected 64 lowercase hex characters")]
pub struct InvalidAssetId(pub String);

impl AssetId {
    pub fn parse(s: &str) -> Result<AssetId, InvalidAssetId> {
        let ok = s.len() == 64
            && s.bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if ok {
            Ok(AssetId(s.to_string()))
        } else {
            Err(InvalidAssetId(s.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// First 12 hex chars, the short form used in derived identifiers.
    pub fn short(&self) -> &str {
        &self.0[..12]
    }
}

impl fmt::Display for AssetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for AssetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AssetId({})", self.0)
    }
}

impl Serialize for AssetId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for AssetId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        AssetId::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Content address of canonical bytes: lowercase hex SHA-256.
pub fn compute_asset_id(canonical_bytes: &[u8]) -> AssetId {
    AssetId(sha256_hex(canonical_bytes))
}

/// An object in canonical form, together with its canonical bytes and
/// content address. Constructed only by [`canonicalize`]; APIs that require
/// canonical inputs take `&Canonical<T>` so the requirement is enforced by
/// type rather than by convention.
#[derive(Clone, Debug, PartialEq)]
pub struct Canonical<T> {
    object: T,
    bytes: Vec<u8>,
    id: AssetId,
}

impl<T> Canonical<T> {
    pub fn object(&self) -> &T {
        &self.object
    }

    pub fn into_object(self) -> T {
        self.object
    }

    /// The canonical byte encoding (asset_id excluded).
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn asset_id(&self) -> &AssetId {
        &self.id
    }
}

impl<T> Deref for Canonical<T> {
    type Target = T;

    fn deref(&self) -> &T {
        &self.object
    }
}

/// Types that participate in canonicalization.
pub trait Canonize: Clone + Serialize {
    /// In-place string/order normalization. Must be idempotent.
    fn normalize(&mut self);
    /// Invariant checks on the normalized object.
    fn check_invariants(&self, report: &mut ValidationReport);
    /// Removes and returns a declared asset id, if the type carries one.
    fn take_asset_id(&mut self) -> Option<AssetId> {
        None
    }
    /// Installs the computed asset id, if the type carries one.
    fn put_asset_id(&mut self, _id: AssetId) {}
}

/// Normalizes, validates, encodes, and addresses an object.
///
/// Returns the canonical object (with its asset id installed where the type
/// carries one), the canonical bytes, and the computed id. A declared
/// asset id that disagrees with the computed one is a violation.
pub fn canonicalize<T: Canonize>(obj: &T) -> Result<Canonical<T>, ValidationReport> {
    let mut norm = obj.clone();
    let declared = norm.take_asset_id();
    norm.normalize();
    let mut report = ValidationReport::default();
    norm.check_invariants(&mut report);
    if !report.is_empty() {
        return Err(report);
    }
    let bytes = serde_json::to_vec(&norm).expect("canonical objects serialize infallibly");
    let id = compute_asset_id(&bytes);
    if let Some(declared) = declared {
        if declared != id {
            report.add(Violation::new(
                "asset_id",
                format!("declared asset_id {declared} does not match computed {id}"),
            ));
            return Err(report);
        }
    }
    norm.put_asset_id(id.clone());
    Ok(Canonical {
        object: norm,
        bytes,
        id,
    })
}

impl Canonize for super::Gene {
    fn normalize(&mut self) {
        self.normalize();
    }

    fn check_invariants(&self, report: &mut ValidationReport) {
        super::validate::gene_invariants(self, report);
    }

    fn take_asset_id(&mut self) -> Option<AssetId> {
        self.asset_id.take()
    }

    fn put_asset_id(&mut self, id: AssetId) {
        self.asset_id = Some(id);
    }
}

impl Canonize for super::SkillPackage {
    fn normalize(&mut self) {
        self.normalize();
    }

    fn check_invariants(&self, report: &mut ValidationReport) {
        super::validate::skill_invariants(self, report);
    }

    fn take_asset_id(&mut self) -> Option<AssetId> {
        self.asset_id.take()
    }

    fn put_asset_id(&mut self, id: AssetId) {
        self.asset_id = Some(id);
    }
}

impl Canonize for super::Capsule {
    fn normalize(&mut self) {
        self.normalize();
    }

    fn check_invariants(&self, report: &mut ValidationReport) {
        super::validate::capsule_invariants(self, report);
    }

    fn take_asset_id(&mut self) -> Option<AssetId> {
        self.asset_id.take()
    }

    fn put_asset_id(&mut self, id: AssetId) {
        self.asset_id = Some(id);
    }
}

impl Canonize for super::Event {
    fn normalize(&mut self) {
        self.normalize();
    }

    fn check_invariants(&self, report: &mut ValidationReport) {
        super::validate::event_invariants(self, report);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objects::{Gene, SourceTag, StepKind, StrategyStep, ValidationHook};

    // Digest pinned by an independent Python encoder over the same rules.
    const UV_VIS_ASSET_ID: &str =
        "472e727f224ed8ed1e25c94b1eec1c1d6d66fc68f5564857bb9dc6a0cf1c7fd4";
    const EDGE_ASSET_ID: &str =
        "128c05ad38d66f8203f4ea0ca6e62d0504ba38039e60d32aaf627f15d9848b05";
    const EDGE_CANONICAL: &str = "{\"object_type\":\"Gene\",\"schema_version\":\"1.0\",\
\"id\":\"gene_edge_case_01\",\"signals_match\":[\"mixed case\",\"naïve tokens\"],\
\"summary\":\"Say \\\"hello\\\" \\\\ world and collapse\",\"strategy\":[\
{\"kind\":\"DO\",\"text\":\"step one first\",\"rank\":1},\
{\"kind\":\"AVOID\",\"text\":\"step \\\"two\\\" later\",\"rank\":2}],\
\"constraints\":[\"keep it short\"],\"validation\":[{\"command\":\"pytest -q tests/x.py\",\
\"expected_exit\":0,\"description\":\"unit suite\"}],\"source_tag\":\"manual\"}";

    #[test]
    fn whitespace_rules() {
        assert_eq!(collapse_whitespace("  a \t b\n c  "), "a b c");
        assert_eq!(normalize_keyword(" UV-Vis "), "uv-vis");
        assert_eq!(normalize_document("a\r\nb\rc\n"), "a\nb\nc");
        // Inner indentation survives document normalization.
        assert_eq!(normalize_document("\nline\n  indented\n"), "line\n  indented");
    }

    #[test]
    fn empty_input_digest_is_the_published_constant() {
        assert_eq!(
            compute_asset_id(b"").as_str(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn asset_id_parsing() {
        assert!(AssetId::parse(UV_VIS_ASSET_ID).is_ok());
        assert!(AssetId::parse("abc").is_err());
        assert!(AssetId::parse(&UV_VIS_ASSET_ID.to_uppercase()).is_err());
    }

    #[test]
    fn uv_vis_fixture_matches_independent_digest() {
        let gene = crate::fixtures::uv_vis_gene();
        let canon = canonicalize(&gene).unwrap();
        assert_eq!(canon.asset_id().as_str(), UV_VIS_ASSET_ID);
        assert_eq!(canon.object().asset_id.as_ref().unwrap().as_str(), UV_VIS_ASSET_ID);
    }

    #[test]
    fn edge_case_gene_matches_independent_bytes_and_digest() {
        let gene = Gene {
            constraints: vec!["keep   it \n short".into()],
            validation: vec![ValidationHook {
                command: "pytest -q tests/x.py".into(),
                expected_exit: 0,
                description: "unit  suite".into(),
            }],
            ..Gene::new(
                "gene_edge_case_01",
                vec!["  Mixed\tCASE  ".into(), "naïve\n tokens".into()],
                "Say \"hello\" \\ world\tand   collapse",
                vec![
                    StrategyStep::new(StepKind::Avoid, "step \"two\" later", 2),
                    StrategyStep::new(StepKind::Do, "step  one\tfirst", 1),
                ],
                SourceTag::Manual,
            )
        };
        let canon = canonicalize(&gene).unwrap();
        assert_eq!(std::str::from_utf8(canon.bytes()).unwrap(), EDGE_CANONICAL);
        assert_eq!(canon.asset_id().as_str(), EDGE_ASSET_ID);
    }

    #[test]
    fn idempotence_and_declared_id_check() {
        let gene = crate::fixtures::uv_vis_gene();
        let once = canonicalize(&gene).unwrap();
        let twice = canonicalize(once.object()).unwrap();
        assert_eq!(once.bytes(), twice.bytes());
        assert_eq!(once.asset_id(), twice.asset_id());

        let mut tampered = once.object().clone();
        tampered.summary = "Something else".into();
        // Stale declared asset_id must be caught.
        let err = canonicalize(&tampered).unwrap_err();
        assert_eq!(err.violations().len(), 1);
        assert_eq!(err.violations()[0].path, "asset_id");
    }
}
