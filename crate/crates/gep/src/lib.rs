//! Engine for the gene evolution protocol (GEP).
//!
//! The protocol treats distilled experience as first-class, content-addressed
//! objects: compact strategic *genes*, documentation-style *skill packages*,
//! validated execution *capsules*, and an append-only ledger of evolution
//! *events*. This crate implements the full object lifecycle:
//!
//! - [`objects`] — the object schema, validation, canonicalization (Γ), and
//!   content-addressed identity.
//! - [`store`] — a file-backed, append-only asset store with an event ledger
//!   and lineage queries.
//! - [`selector`] — keyword-signal matching and selection policies.
//! - [`render`] — every control-prompt representation studied by the
//!   engine's evaluation harness, with deterministic token budgeting.
//! - [`perturb`] — structural and content mutation operators.
//! - [`gateway`] — a uniform text-generation client with replay, scripted,
//!   and live backends and strict control/task channel separation.
//! - [`sandbox`] — checkpoint evaluation of generated programs under process
//!   isolation and hard timeouts, with exact-rational metrics.
//! - [`evolution`] — the six-stage evolution loop (scan, signal, intent,
//!   mutate, validate, solidify) and gene distillation.
//!
//! Exactness and determinism are the engine's base commitments: pass rates
//! are rationals, canonical bytes are byte-stable across field order and
//! whitespace, renders are pure functions, and replay-backed experiment runs
//! reproduce reports byte for byte.

pub mod evolution;
pub mod fixtures;
pub mod gateway;
pub mod objects;
pub mod perturb;
pub mod rate;
pub mod render;
pub mod sandbox;
pub mod selector;
pub mod store;

pub use objects::{
    canonicalize, compute_asset_id, parse_gene_block, validate_object, AnyObject, AssetId,
    Canonical, Capsule, Event, Gene, SkillPackage,
};
pub use rate::Rate;
pub use store::Store;

/// Book chapters compiled as documentation tests.
///
/// Each module's doc text is a chapter of the guide under `book/`; running
/// `cargo test --doc` executes every fenced example, which keeps the book
/// and the API in sync.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/objects.md")]
    pub mod objects {}
    #[doc = include_str!("../../../book/src/store.md")]
    pub mod store {}
    #[doc = include_str!("../../../book/src/selection.md")]
    pub mod selection {}
    #[doc = include_str!("../../../book/src/rendering.md")]
    pub mod rendering {}
    #[doc = include_str!("../../../book/src/perturbation.md")]
    pub mod perturbation {}
    #[doc = include_str!("../../../book/src/gateway.md")]
    pub mod gateway {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/evolution.md")]
    pub mod evolution {}
}
