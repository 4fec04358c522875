//! Schema validation with complete violation reports.
//!
//! Strict typed deserialization stops at the first problem; reviewers need
//! all of them. Validation therefore runs in two layers:
//!
//! 1. a *shape* pass over the untyped JSON value that records every
//!    missing/unknown field and type mismatch with its field path, and
//! 2. once the shape is clean, a typed pass via [`canonicalize`] that
//!    records every semantic invariant violation (emptiness rules, rank
//!    contiguity, outcome coherence, declared-vs-computed asset id, …).
//!
//! The shape pass is exhaustive over everything that could make typed
//! deserialization fail, so a clean shape report guarantees the typed pass
//! actually runs and the final report lists every violation.

use super::canonical::{canonicalize, AssetId, Canonize};
use super::{AnyObject, Capsule, Event, Gene, SkillPackage};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};
use std::fmt;

pub(super) fn default_schema_version() -> String {
    super::SCHEMA_VERSION.to_string()
}

/// One schema or invariant violation, anchored at a field path such as
/// `"signals_match"` or `"strategy[1].rank"`. An empty path means the
/// violation concerns the document as a whole.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Violation {
        Violation {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "$: {}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

/// The full list of violations found in one document. Empty means valid.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn add(&mut self, violation: Violation) {
        self.violations.push(violation);
    }

    /// Merges another report, skipping exact duplicates.
    pub fn merge(&mut self, other: ValidationReport) {
        for v in other.violations {
            if !self.violations.contains(&v) {
                self.violations.push(v);
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    /// True iff some violation is anchored exactly at `path`.
    pub fn has_path(&self, path: &str) -> bool {
        self.violations.iter().any(|v| v.path == path)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "no violations");
        }
        write!(f, "{} violation(s)", self.violations.len())?;
        for v in &self.violations {
            write!(f, "; {v}")?;
        }
        Ok(())
    }
}

/// Syntax error in a document that does not parse at all. `offset` is the
/// byte offset of the error position within the input.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("parse error at line {line}, column {column} (byte offset {offset}): {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub offset: usize,
    pub message: String,
}

fn parse_error(text: &str, err: &serde_json::Error) -> ParseError {
    let line = err.line();
    let column = err.column();
    let mut message = err.to_string();
    if let Some(pos) = message.rfind(" at line ") {
        message.truncate(pos);
    }
    ParseError {
        line,
        column,
        offset: byte_offset(text, line, column),
        message,
    }
}

/// Byte offset of 1-based (line, column) in `text`. Column counts bytes on
/// the line, matching the JSON parser's accounting.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut start = 0;
    let mut remaining = line.saturating_sub(1);
    for (i, b) in text.bytes().enumerate() {
        if remaining == 0 {
            break;
        }
        if b == b'\n' {
            remaining -= 1;
            start = i + 1;
        }
    }
    (start + column.saturating_sub(1)).min(text.len())
}

/// Validates a JSON document, returning every schema and invariant
/// violation with a field path. An empty report means the document is a
/// valid protocol object.
///
/// # Errors
///
/// Input that is not parseable JSON at all yields a [`ParseError`] carrying
/// line, column, and byte offset.
pub fn validate_object(text: &str) -> Result<ValidationReport, ParseError> {
    validate_text(text).map(|(report, _)| report)
}

/// Validates an already-parsed JSON value. See [`validate_object`].
pub fn validate_value(value: &Value) -> ValidationReport {
    validate_value_inner(value).0
}

/// Shared implementation for [`validate_object`] and
/// [`super::parse_object`]: returns the report and, when valid, the typed
/// object in canonical form.
pub(super) fn validate_text(text: &str) -> Result<(ValidationReport, Option<AnyObject>), ParseError> {
    let value: Value = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
    Ok(validate_value_inner(&value))
}

fn validate_value_inner(value: &Value) -> (ValidationReport, Option<AnyObject>) {
    let mut report = ValidationReport::default();
    let Some(map) = value.as_object() else {
        report.add(Violation::new("", "document must be a JSON object"));
        return (report, None);
    };
    let tag = match map.get("object_type") {
        None => {
            report.add(Violation::new("object_type", "missing required field"));
            return (report, None);
        }
        Some(Value::String(s)) => s.as_str(),
        Some(_) => {
            report.add(Violation::new("object_type", "must be a string"));
            return (report, None);
        }
    };
    let object = match tag {
        "Gene" => {
            gene_shape(map, &mut report);
            finish::<Gene>(value, &mut report).map(AnyObject::Gene)
        }
        "SkillPackage" => {
            skill_shape(map, &mut report);
            finish::<SkillPackage>(value, &mut report).map(AnyObject::Skill)
        }
        "Capsule" => {
            capsule_shape(map, &mut report);
            finish::<Capsule>(value, &mut report).map(AnyObject::Capsule)
        }
        "Event" => {
            event_shape(map, &mut report);
            finish::<Event>(value, &mut report).map(AnyObject::Event)
        }
        other => {
            report.add(Violation::new(
                "object_type",
                format!(
                    "unknown object type {other:?} (expected \"Gene\", \"SkillPackage\", \
                     \"Capsule\", or \"Event\")"
                ),
            ));
            None
        }
    };
    (report, object)
}

/// Typed pass: deserialize and canonicalize, merging invariant violations.
/// Runs only when the shape pass found nothing, which guarantees
/// deserialization succeeds.
fn finish<T: Canonize + DeserializeOwned>(
    value: &Value,
    report: &mut ValidationReport,
) -> Option<T> {
    if !report.is_empty() {
        return None;
    }
    let object: T = match serde_json::from_value(value.clone()) {
        Ok(object) => object,
        Err(e) => {
            // Unreachable if the shape pass is exhaustive; kept as a guard
            // so a gap degrades to an imprecise violation, not a panic.
            report.add(Violation::new("", format!("document does not deserialize: {e}")));
            return None;
        }
    };
    match canonicalize(&object) {
        Ok(canonical) => Some(canonical.into_object()),
        Err(violations) => {
            report.merge(violations);
            None
        }
    }
}

// ---------------------------------------------------------------------------
// Shape pass: untyped field/type checks with exhaustive coverage.
// ---------------------------------------------------------------------------

fn unknown_fields(map: &Map<String, Value>, allowed: &[&str], report: &mut ValidationReport) {
    for key in map.keys() {
        if !allowed.contains(&key.as_str()) {
            report.add(Violation::new(key, "unknown field"));
        }
    }
}

fn require<'a>(
    map: &'a Map<String, Value>,
    name: &str,
    report: &mut ValidationReport,
) -> Option<&'a Value> {
    let v = map.get(name);
    if v.is_none() {
        report.add(Violation::new(name, "missing required field"));
    }
    v
}

fn check_string<'a>(v: &'a Value, path: &str, report: &mut ValidationReport) -> Option<&'a str> {
    let s = v.as_str();
    if s.is_none() {
        report.add(Violation::new(path, "must be a string"));
    }
    s
}

fn check_array<'a>(v: &'a Value, path: &str, report: &mut ValidationReport) -> Option<&'a [Value]> {
    let a = v.as_array();
    if a.is_none() {
        report.add(Violation::new(path, "must be an array"));
    }
    a.map(Vec::as_slice)
}

fn check_object<'a>(
    v: &'a Value,
    path: &str,
    report: &mut ValidationReport,
) -> Option<&'a Map<String, Value>> {
    let m = v.as_object();
    if m.is_none() {
        report.add(Violation::new(path, "must be an object"));
    }
    m
}

fn check_bool(v: &Value, path: &str, report: &mut ValidationReport) {
    if !v.is_boolean() {
        report.add(Violation::new(path, "must be a boolean"));
    }
}

fn check_enum(v: &Value, path: &str, allowed: &[&str], report: &mut ValidationReport) {
    let ok = v.as_str().is_some_and(|s| allowed.contains(&s));
    if !ok {
        let list = allowed
            .iter()
            .map(|s| format!("{s:?}"))
            .collect::<Vec<_>>()
            .join(", ");
        report.add(Violation::new(path, format!("must be one of {list}")));
    }
}

fn check_digest(v: &Value, path: &str, report: &mut ValidationReport) {
    let ok = v.as_str().is_some_and(|s| AssetId::parse(s).is_ok());
    if !ok {
        report.add(Violation::new(
            path,
            "must be a 64-character lowercase hex digest",
        ));
    }
}

fn check_string_array(map: &Map<String, Value>, name: &str, report: &mut ValidationReport) {
    if let Some(items) = map.get(name).and_then(|v| check_array(v, name, report)) {
        for (i, item) in items.iter().enumerate() {
            check_string(item, &format!("{name}[{i}]"), report);
        }
    }
}

fn check_schema_version(map: &Map<String, Value>, report: &mut ValidationReport) {
    if let Some(v) = map.get("schema_version") {
        check_string(v, "schema_version", report);
    }
}

fn gene_shape(map: &Map<String, Value>, report: &mut ValidationReport) {
    unknown_fields(
        map,
        &[
            "object_type",
            "schema_version",
            "id",
            "signals_match",
            "summary",
            "strategy",
            "constraints",
            "validation",
            "source_tag",
            "asset_id",
        ],
        report,
    );
    check_schema_version(map, report);
    if let Some(v) = require(map, "id", report) {
        check_string(v, "id", report);
    }
    if let Some(v) = require(map, "signals_match", report) {
        if let Some(items) = check_array(v, "signals_match", report) {
            for (i, item) in items.iter().enumerate() {
                check_string(item, &format!("signals_match[{i}]"), report);
            }
        }
    }
    if let Some(v) = require(map, "summary", report) {
        check_string(v, "summary", report);
    }
    if let Some(v) = require(map, "strategy", report) {
        if let Some(steps) = check_array(v, "strategy", report) {
            for (i, step) in steps.iter().enumerate() {
                let path = format!("strategy[{i}]");
                let Some(step) = check_object(step, &path, report) else {
                    continue;
                };
                unknown_fields_at(step, &path, &["kind", "text", "rank"], report);
                if let Some(v) = require_at(step, &path, "kind", report) {
                    check_enum(v, &format!("{path}.kind"), &["DO", "AVOID"], report);
                }
                if let Some(v) = require_at(step, &path, "text", report) {
                    check_string(v, &format!("{path}.text"), report);
                }
                if let Some(v) = require_at(step, &path, "rank", report) {
                    if v.as_u64().is_none_or(|n| n == 0 || n > u64::from(u32::MAX)) {
                        report.add(Violation::new(
                            format!("{path}.rank"),
                            "must be a positive integer",
                        ));
                    }
                }
            }
        }
    }
    check_string_array(map, "constraints", report);
    if let Some(v) = map.get("validation") {
        if let Some(hooks) = check_array(v, "validation", report) {
            for (i, hook) in hooks.iter().enumerate() {
                let path = format!("validation[{i}]");
                let Some(hook) = check_object(hook, &path, report) else {
                    continue;
                };
                unknown_fields_at(hook, &path, &["command", "expected_exit", "description"], report);
                if let Some(v) = require_at(hook, &path, "command", report) {
                    check_string(v, &format!("{path}.command"), report);
                }
                if let Some(v) = require_at(hook, &path, "expected_exit", report) {
                    if v.as_i64().is_none() {
                        report.add(Violation::new(
                            format!("{path}.expected_exit"),
                            "must be an integer",
                        ));
                    }
                }
                if let Some(v) = require_at(hook, &path, "description", report) {
                    check_string(v, &format!("{path}.description"), report);
                }
            }
        }
    }
    if let Some(v) = require(map, "source_tag", report) {
        check_enum(
            v,
            "source_tag",
            &[
                "run_experience",
                "builtin_topic_prior",
                "external_corpus",
                "manual",
            ],
            report,
        );
    }
    if let Some(v) = map.get("asset_id") {
        check_digest(v, "asset_id", report);
    }
}

fn unknown_fields_at(
    map: &Map<String, Value>,
    path: &str,
    allowed: &[&str],
    report: &mut ValidationReport,
) {
    for key in map.keys() {
        if !allowed.contains(&key.as_str()) {
            report.add(Violation::new(format!("{path}.{key}"), "unknown field"));
        }
    }
}

fn require_at<'a>(
    map: &'a Map<String, Value>,
    path: &str,
    name: &str,
    report: &mut ValidationReport,
) -> Option<&'a Value> {
    let v = map.get(name);
    if v.is_none() {
        report.add(Violation::new(
            format!("{path}.{name}"),
            "missing required field",
        ));
    }
    v
}

fn skill_shape(map: &Map<String, Value>, report: &mut ValidationReport) {
    unknown_fields(
        map,
        &[
            "object_type",
            "schema_version",
            "id",
            "overview",
            "workflow",
            "pitfalls",
            "error_handling",
            "api_notes",
            "examples",
            "scripts",
            "quickref",
            "asset_id",
        ],
        report,
    );
    check_schema_version(map, report);
    if let Some(v) = require(map, "id", report) {
        check_string(v, "id", report);
    }
    for name in [
        "overview",
        "workflow",
        "pitfalls",
        "error_handling",
        "api_notes",
        "examples",
        "scripts",
        "quickref",
    ] {
        if let Some(v) = map.get(name) {
            check_string(v, name, report);
        }
    }
    if let Some(v) = map.get("asset_id") {
        check_digest(v, "asset_id", report);
    }
}

fn capsule_shape(map: &Map<String, Value>, report: &mut ValidationReport) {
    unknown_fields(
        map,
        &[
            "object_type",
            "schema_version",
            "id",
            "task_signature",
            "gene_refs",
            "trace",
            "outcome",
            "validation_record",
            "lineage",
            "asset_id",
        ],
        report,
    );
    check_schema_version(map, report);
    if let Some(v) = require(map, "id", report) {
        check_string(v, "id", report);
    }
    if let Some(v) = require(map, "task_signature", report) {
        check_string(v, "task_signature", report);
    }
    if let Some(v) = require(map, "gene_refs", report) {
        if let Some(refs) = check_array(v, "gene_refs", report) {
            for (i, item) in refs.iter().enumerate() {
                check_digest(item, &format!("gene_refs[{i}]"), report);
            }
        }
    }
    if let Some(v) = map.get("trace") {
        if let Some(steps) = check_array(v, "trace", report) {
            for (i, step) in steps.iter().enumerate() {
                let path = format!("trace[{i}]");
                let Some(step) = check_object(step, &path, report) else {
                    continue;
                };
                unknown_fields_at(step, &path, &["stage", "payload"], report);
                if let Some(v) = require_at(step, &path, "stage", report) {
                    check_string(v, &format!("{path}.stage"), report);
                }
                if let Some(v) = require_at(step, &path, "payload", report) {
                    check_string(v, &format!("{path}.payload"), report);
                }
            }
        }
    }
    if let Some(v) = require(map, "outcome", report) {
        if let Some(outcome) = check_object(v, "outcome", report) {
            unknown_fields_at(outcome, "outcome", &["kind", "rate"], report);
            if let Some(v) = require_at(outcome, "outcome", "kind", report) {
                check_enum(v, "outcome.kind", &["pass", "partial", "fail"], report);
            }
            if let Some(v) = require_at(outcome, "outcome", "rate", report) {
                check_rate(v, "outcome.rate", report);
            }
        }
    }
    if let Some(v) = map.get("validation_record") {
        if let Some(checks) = check_array(v, "validation_record", report) {
            for (i, check) in checks.iter().enumerate() {
                let path = format!("validation_record[{i}]");
                let Some(check) = check_object(check, &path, report) else {
                    continue;
                };
                unknown_fields_at(check, &path, &["check", "passed", "detail"], report);
                if let Some(v) = require_at(check, &path, "check", report) {
                    check_string(v, &format!("{path}.check"), report);
                }
                if let Some(v) = require_at(check, &path, "passed", report) {
                    check_bool(v, &format!("{path}.passed"), report);
                }
                if let Some(v) = require_at(check, &path, "detail", report) {
                    check_string(v, &format!("{path}.detail"), report);
                }
            }
        }
    }
    if let Some(v) = map.get("lineage") {
        if !v.is_null() && v.as_u64().is_none() {
            report.add(Violation::new("lineage", "must be a non-negative integer"));
        }
    }
    if let Some(v) = map.get("asset_id") {
        check_digest(v, "asset_id", report);
    }
}

/// Rates are serialized as an exact `[numerator, denominator]` pair.
fn check_rate(v: &Value, path: &str, report: &mut ValidationReport) {
    let Some(pair) = v.as_array().filter(|a| a.len() == 2) else {
        report.add(Violation::new(
            path,
            "must be a two-element [numerator, denominator] integer array",
        ));
        return;
    };
    let (Some(num), Some(den)) = (pair[0].as_i64(), pair[1].as_i64()) else {
        report.add(Violation::new(
            path,
            "must be a two-element [numerator, denominator] integer array",
        ));
        return;
    };
    if let Err(e) = crate::rate::Rate::new(num, den) {
        report.add(Violation::new(path, e.to_string()));
    }
}

fn event_shape(map: &Map<String, Value>, report: &mut ValidationReport) {
    unknown_fields(
        map,
        &[
            "object_type",
            "event_type",
            "run_id",
            "src_asset",
            "dst_asset",
            "signal",
            "intent",
            "diff",
            "validation_result",
            "ordering",
        ],
        report,
    );
    if let Some(v) = require(map, "event_type", report) {
        check_enum(
            v,
            "event_type",
            &[
                "repair",
                "innovation",
                "validation_pass",
                "validation_fail",
                "solidify",
            ],
            report,
        );
    }
    if let Some(v) = require(map, "run_id", report) {
        check_string(v, "run_id", report);
    }
    for name in ["src_asset", "dst_asset"] {
        if let Some(v) = map.get(name) {
            if !v.is_null() {
                check_digest(v, name, report);
            }
        }
    }
    if let Some(v) = require(map, "signal", report) {
        if let Some(signal) = check_object(v, "signal", report) {
            unknown_fields_at(signal, "signal", &["kind", "evidence", "source_ref"], report);
            if let Some(v) = require_at(signal, "signal", "kind", report) {
                check_enum(
                    v,
                    "signal.kind",
                    &[
                        "error",
                        "exception",
                        "failed",
                        "unstable",
                        "user_feature_request",
                        "user_improvement_suggestion",
                        "perf_bottleneck",
                        "capability_gap",
                        "stable_success_plateau",
                    ],
                    report,
                );
            }
            if let Some(v) = require_at(signal, "signal", "evidence", report) {
                check_string(v, "signal.evidence", report);
            }
            if let Some(v) = require_at(signal, "signal", "source_ref", report) {
                check_string(v, "signal.source_ref", report);
            }
        }
    }
    if let Some(v) = require(map, "intent", report) {
        if let Some(intent) = check_object(v, "intent", report) {
            unknown_fields_at(
                intent,
                "intent",
                &["objective", "target_asset", "blast_radius", "rationale"],
                report,
            );
            if let Some(v) = require_at(intent, "intent", "objective", report) {
                check_enum(v, "intent.objective", &["repair", "optimize", "extend"], report);
            }
            if let Some(v) = require_at(intent, "intent", "target_asset", report) {
                check_digest(v, "intent.target_asset", report);
            }
            if let Some(v) = require_at(intent, "intent", "blast_radius", report) {
                check_enum(
                    v,
                    "intent.blast_radius",
                    &["local", "module", "system"],
                    report,
                );
            }
            if let Some(v) = require_at(intent, "intent", "rationale", report) {
                check_string(v, "intent.rationale", report);
            }
        }
    }
    if let Some(v) = require(map, "diff", report) {
        check_string(v, "diff", report);
    }
    if let Some(v) = require(map, "validation_result", report) {
        check_enum(v, "validation_result", &["pass", "fail", "skipped"], report);
    }
    if let Some(v) = require(map, "ordering", report) {
        if let Some(ordering) = check_object(v, "ordering", report) {
            unknown_fields_at(ordering, "ordering", &["seq", "at"], report);
            if let Some(v) = require_at(ordering, "ordering", "seq", report) {
                if v.as_u64().is_none() {
                    report.add(Violation::new(
                        "ordering.seq",
                        "must be a non-negative integer",
                    ));
                }
            }
            if let Some(v) = require_at(ordering, "ordering", "at", report) {
                check_string(v, "ordering.at", report);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Typed invariants, run on normalized objects by `canonicalize`.
// ---------------------------------------------------------------------------

fn check_version(version: &str, report: &mut ValidationReport) {
    if version != super::SCHEMA_VERSION {
        report.add(Violation::new(
            "schema_version",
            format!(
                "unsupported schema version {version:?} (engine accepts {:?})",
                super::SCHEMA_VERSION
            ),
        ));
    }
}

fn check_non_blank(value: &str, path: &str, report: &mut ValidationReport) {
    if value.is_empty() {
        report.add(Violation::new(path, "must not be blank"));
    }
}

pub(super) fn gene_invariants(g: &Gene, report: &mut ValidationReport) {
    check_version(&g.schema_version, report);
    if !Gene::id_is_valid(&g.id) {
        report.add(Violation::new("id", "must match gene_[a-z0-9_]+"));
    }
    if g.signals_match.is_empty() {
        report.add(Violation::new("signals_match", "must not be empty"));
    }
    for (i, keyword) in g.signals_match.iter().enumerate() {
        check_non_blank(keyword, &format!("signals_match[{i}]"), report);
    }
    check_non_blank(&g.summary, "summary", report);
    if g.strategy.is_empty() {
        report.add(Violation::new("strategy", "must have at least one step"));
    }
    for (i, step) in g.strategy.iter().enumerate() {
        check_non_blank(&step.text, &format!("strategy[{i}].text"), report);
    }
    let mut ranks: Vec<u32> = g.strategy.iter().map(|s| s.rank).collect();
    ranks.sort_unstable();
    let contiguous = ranks.iter().enumerate().all(|(i, &r)| r as usize == i + 1);
    if !g.strategy.is_empty() && !contiguous {
        report.add(Violation::new(
            "strategy",
            format!(
                "non-contiguous ranks {ranks:?} (expected a permutation of 1..={})",
                g.strategy.len()
            ),
        ));
    }
    for (i, constraint) in g.constraints.iter().enumerate() {
        check_non_blank(constraint, &format!("constraints[{i}]"), report);
    }
    for (i, hook) in g.validation.iter().enumerate() {
        check_non_blank(&hook.command, &format!("validation[{i}].command"), report);
    }
}

pub(super) fn skill_invariants(s: &SkillPackage, report: &mut ValidationReport) {
    check_version(&s.schema_version, report);
    check_non_blank(&s.id, "id", report);
    let any_main = super::SkillSection::MAIN
        .iter()
        .any(|&sec| !s.section(sec).is_empty());
    if !any_main {
        report.add(Violation::new(
            "",
            "at least one main section (overview, workflow, pitfalls, error_handling) \
             must be non-empty",
        ));
    }
}

pub(super) fn capsule_invariants(c: &Capsule, report: &mut ValidationReport) {
    check_version(&c.schema_version, report);
    check_non_blank(&c.id, "id", report);
    let sig_ok = c.task_signature.len() == 64
        && c.task_signature
            .bytes()
            .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
    if !sig_ok {
        report.add(Violation::new(
            "task_signature",
            "must be a 64-character lowercase hex digest",
        ));
    }
    for (i, step) in c.trace.iter().enumerate() {
        check_non_blank(&step.stage, &format!("trace[{i}].stage"), report);
    }
    if !c.outcome.is_coherent() {
        report.add(Violation::new(
            "outcome",
            format!(
                "kind {:?} is inconsistent with rate {}/{} (pass means 1, fail means 0, \
                 partial strictly between)",
                c.outcome.kind,
                c.outcome.rate.numer(),
                c.outcome.rate.denom()
            ),
        ));
    }
    for (i, check) in c.validation_record.iter().enumerate() {
        check_non_blank(&check.check, &format!("validation_record[{i}].check"), report);
    }
}

pub(super) fn event_invariants(e: &Event, report: &mut ValidationReport) {
    check_non_blank(&e.run_id, "run_id", report);
    if e.event_type == super::EventType::Solidify {
        if e.validation_result != super::ValidationResult::Pass {
            report.add(Violation::new(
                "validation_result",
                "solidify events require validation_result \"pass\"",
            ));
        }
        if e.dst_asset.is_none() {
            report.add(Violation::new(
                "dst_asset",
                "solidify events require a dst_asset",
            ));
        }
    }
    if chrono::DateTime::parse_from_rfc3339(&e.ordering.at).is_err() {
        report.add(Violation::new(
            "ordering.at",
            "must be an RFC 3339 timestamp",
        ));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const UV_VIS: &str = include_str!("../../../../fixtures/genes/uv_vis.json");

    fn gene_value() -> Value {
        serde_json::from_str(UV_VIS).unwrap()
    }

    #[test]
    fn valid_gene_fixture_produces_empty_report() {
        let report = validate_object(UV_VIS).unwrap();
        assert!(report.is_empty(), "{report}");
    }

    #[test]
    fn empty_signals_match_is_one_violation_at_that_path() {
        let mut v = gene_value();
        v["signals_match"] = serde_json::json!([]);
        let report = validate_value(&v);
        assert_eq!(report.len(), 1, "{report}");
        assert!(report.has_path("signals_match"));
    }

    #[test]
    fn gapped_ranks_are_one_noncontiguous_violation() {
        let mut v = gene_value();
        v["strategy"] = serde_json::json!([
            {"kind": "DO", "text": "first", "rank": 1},
            {"kind": "DO", "text": "third", "rank": 3},
        ]);
        let report = validate_value(&v);
        assert_eq!(report.len(), 1, "{report}");
        assert!(report.has_path("strategy"));
        assert!(report.violations()[0].message.contains("non-contiguous ranks"));
    }

    #[test]
    fn duplicate_ranks_are_rejected() {
        let mut v = gene_value();
        v["strategy"] = serde_json::json!([
            {"kind": "DO", "text": "a", "rank": 1},
            {"kind": "DO", "text": "b", "rank": 1},
        ]);
        let report = validate_value(&v);
        assert!(report.has_path("strategy"), "{report}");
    }

    #[test]
    fn every_violation_is_listed_not_just_the_first() {
        let mut v = gene_value();
        v["summary"] = serde_json::json!(17);
        v["source_tag"] = serde_json::json!("folklore");
        v["extra"] = serde_json::json!(true);
        let report = validate_value(&v);
        assert_eq!(report.len(), 3, "{report}");
        assert!(report.has_path("summary"));
        assert!(report.has_path("source_tag"));
        assert!(report.has_path("extra"));
    }

    #[test]
    fn nested_paths_name_the_offending_step_field() {
        let mut v = gene_value();
        v["strategy"][1]["rank"] = serde_json::json!(0);
        let report = validate_value(&v);
        assert!(report.has_path("strategy[1].rank"), "{report}");
    }

    #[test]
    fn bad_step_kind_is_reported() {
        let mut v = gene_value();
        v["strategy"][0]["kind"] = serde_json::json!("MAYBE");
        let report = validate_value(&v);
        assert!(report.has_path("strategy[0].kind"), "{report}");
    }

    #[test]
    fn declared_asset_id_must_match_computed() {
        let mut v = gene_value();
        v["asset_id"] = serde_json::json!(
            "0000000000000000000000000000000000000000000000000000000000000000"
        );
        let report = validate_value(&v);
        assert_eq!(report.len(), 1, "{report}");
        assert!(report.has_path("asset_id"));
    }

    #[test]
    fn unknown_object_type_is_reported() {
        let report = validate_object(r#"{"object_type": "Genome"}"#).unwrap();
        assert!(report.has_path("object_type"));
        assert!(report.violations()[0].message.contains("Genome"));
    }

    #[test]
    fn parse_error_carries_byte_offset() {
        // The stray `]` sits at byte offset 17 of line 2.
        let text = "{\n  \"object_type\"]: \"Gene\"\n}";
        let err = validate_object(text).unwrap_err();
        assert_eq!(err.line, 2);
        assert_eq!(&text[err.offset..=err.offset], "]");
    }

    #[test]
    fn parse_error_on_empty_input() {
        let err = validate_object("").unwrap_err();
        assert_eq!(err.offset, 0);
    }

    #[test]
    fn skill_without_main_sections_is_invalid() {
        let report = validate_object(
            r#"{"object_type": "SkillPackage", "id": "skill_x", "api_notes": "aux only"}"#,
        )
        .unwrap();
        assert_eq!(report.len(), 1, "{report}");
        assert!(report.violations()[0].message.contains("main section"));
    }

    #[test]
    fn capsule_outcome_must_cohere_with_rate() {
        let report = validate_object(
            r#"{
                "object_type": "Capsule",
                "id": "capsule_x",
                "task_signature": "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855",
                "gene_refs": [],
                "outcome": {"kind": "pass", "rate": [1, 2]}
            }"#,
        )
        .unwrap();
        assert_eq!(report.len(), 1, "{report}");
        assert!(report.has_path("outcome"));
    }

    #[test]
    fn capsule_rate_outside_unit_interval_is_rejected() {
        let report = validate_object(
            r#"{
                "object_type": "Capsule",
                "id": "capsule_x",
                "task_signature": "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855",
                "gene_refs": [],
                "outcome": {"kind": "pass", "rate": [3, 2]}
            }"#,
        )
        .unwrap();
        assert!(report.has_path("outcome.rate"), "{report}");
    }

    fn minimal_event(event_type: &str, validation_result: &str, dst: Option<&str>) -> String {
        let dst = match dst {
            Some(d) => format!("{d:?}"),
            None => "null".to_string(),
        };
        format!(
            r#"{{
                "object_type": "Event",
                "event_type": "{event_type}",
                "run_id": "run_demo_1",
                "src_asset": null,
                "dst_asset": {dst},
                "signal": {{"kind": "failed", "evidence": "checker exit 1", "source_ref": "capsule_x"}},
                "intent": {{
                    "objective": "repair",
                    "target_asset": "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855",
                    "blast_radius": "local",
                    "rationale": "fix the unit conversion"
                }},
                "diff": "",
                "validation_result": "{validation_result}",
                "ordering": {{"seq": 1, "at": "2024-05-01T00:00:00Z"}}
            }}"#
        )
    }

    #[test]
    fn solidify_requires_pass_and_dst() {
        let ok = minimal_event(
            "solidify",
            "pass",
            Some("e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"),
        );
        assert!(validate_object(&ok).unwrap().is_empty());

        let no_pass = minimal_event(
            "solidify",
            "fail",
            Some("e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"),
        );
        let report = validate_object(&no_pass).unwrap();
        assert!(report.has_path("validation_result"), "{report}");

        let no_dst = minimal_event("solidify", "pass", None);
        let report = validate_object(&no_dst).unwrap();
        assert!(report.has_path("dst_asset"), "{report}");
    }

    #[test]
    fn event_timestamp_must_be_rfc3339() {
        let mut v: Value = serde_json::from_str(&minimal_event("repair", "skipped", None)).unwrap();
        v["ordering"]["at"] = serde_json::json!("yesterday");
        let report = validate_value(&v);
        assert!(report.has_path("ordering.at"), "{report}");
    }

    #[test]
    fn report_display_lists_paths() {
        let mut report = ValidationReport::default();
        report.add(Violation::new("id", "must not be blank"));
        report.add(Violation::new("", "whole-document problem"));
        let text = report.to_string();
        assert!(text.contains("id: must not be blank"));
        assert!(text.contains("$: whole-document problem"));
    }
}
