//! Protocol objects: genes, skill packages, capsules, and events.
//!
//! Objects enter the engine as JSON documents, are checked by
//! [`validate_object`], normalized and frozen by [`canonicalize`], and
//! addressed by the SHA-256 of their canonical bytes ([`compute_asset_id`]).
//! After canonicalization an object is immutable: any edit mints a new
//! object with a new asset id.

mod canonical;
mod capsule;
mod event;
mod gene;
mod geneblock;
mod skill;
mod validate;

pub use canonical::{
    canonicalize, collapse_whitespace, compute_asset_id, normalize_document, normalize_keyword,
    sha256_hex, AssetId, Canonical, Canonize,
};
pub use capsule::{
    task_signature, Capsule, CapsuleOutcome, CapsuleTag, OutcomeKind, TraceStep, ValidationCheck,
};
pub use event::{
    BlastRadius, Event, EventDraft, EventType, Intent, Objective, OrderingKey, Signal, SignalKind,
    ValidationResult,
};
pub use gene::{Gene, SourceTag, StepKind, StrategyStep, ValidationHook};
pub use geneblock::{derived_gene_id, parse_gene_block, GeneBlockError};
pub use skill::{SkillPackage, SkillSection};
pub use validate::{validate_object, validate_value, ParseError, ValidationReport, Violation};

use serde::Deserialize;

/// The schema version this engine accepts.
pub const SCHEMA_VERSION: &str = "1.0";

/// Declares a field type that serializes as one fixed string. Used for the
/// `object_type` tag so the trusted deserialization path also rejects
/// mislabeled documents.
macro_rules! literal_tag {
    ($name:ident, $tag:literal) => {
        #[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
        pub struct $name;

        impl $name {
            pub const TAG: &'static str = $tag;
        }

        impl serde::Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str($tag)
            }
        }

        impl<'de> serde::Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let got = String::deserialize(d)?;
                if got == $tag {
                    Ok($name)
                } else {
                    Err(serde::de::Error::custom(format!(
                        "expected object_type {:?}, got {:?}",
                        $tag, got
                    )))
                }
            }
        }
    };
}
pub(crate) use literal_tag;

/// Any protocol object, as dispatched from a document's `object_type` tag.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyObject {
    Gene(Gene),
    Skill(SkillPackage),
    Capsule(Capsule),
    Event(Event),
}

impl AnyObject {
    pub fn object_type(&self) -> &'static str {
        match self {
            AnyObject::Gene(_) => "Gene",
            AnyObject::Skill(_) => "SkillPackage",
            AnyObject::Capsule(_) => "Capsule",
            AnyObject::Event(_) => "Event",
        }
    }
}

/// Errors from strict document loading ([`parse_object`]).
#[derive(Debug, thiserror::Error)]
pub enum ObjectError {
    #[error("{0}")]
    Parse(#[from] ParseError),
    #[error("invalid object: {0}")]
    Invalid(ValidationReport),
}

/// Parses and fully validates a JSON document into a typed object.
///
/// This is the strict entry point: it surfaces syntax errors with byte
/// offsets and schema violations as a complete [`ValidationReport`].
pub fn parse_object(text: &str) -> Result<AnyObject, ObjectError> {
    let (report, obj) = validate::validate_text(text)?;
    match obj {
        Some(obj) if report.is_empty() => Ok(obj),
        _ => Err(ObjectError::Invalid(report)),
    }
}

/// Deserializes trusted canonical bytes (store contents) into a typed object.
///
/// Unlike [`parse_object`] this does not re-run invariant checks; it is meant
/// for bytes the engine itself produced.
pub fn from_canonical_bytes<'de, T: Deserialize<'de>>(
    bytes: &'de [u8],
) -> Result<T, serde_json::Error> {
    serde_json::from_slice(bytes)
}
