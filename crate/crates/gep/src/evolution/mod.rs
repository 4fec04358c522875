//! The six-stage evolution loop: scan → signal → intent → mutate →
//! validate → solidify.
//!
//! A run starts from raw trace records, standardizes what it finds into
//! protocol signals, derives a mutation intent against one stored gene,
//! produces a candidate revision (mechanically or through a gateway
//! rewrite), validates it, and — only on a validation pass — solidifies the
//! candidate into the store. Every run appends its outcome to the event
//! ledger, so the gating rule ("no solidify without a same-run validation
//! pass") is checkable after the fact from the ledger alone; see
//! [`audit_gating`].

pub mod distill;

pub use distill::{distill_gene, DistillSource};

use crate::gateway::{Backend, GatewayError, GenerationRequest, InferenceConfig};
use crate::objects::{
    canonicalize, sha256_hex, AssetId, Canonical, Capsule, CapsuleOutcome, CapsuleTag, EventDraft,
    EventType, Gene, Intent, Objective, Signal, SignalKind, SourceTag, TraceStep, ValidationCheck,
    ValidationHook, ValidationResult, SCHEMA_VERSION,
};
use crate::objects::{parse_gene_block, task_signature, Event};
use crate::perturb::{self, Mutation, PerturbError, SubstitutionTable};
use crate::rate::Rate;
use crate::render::{gene_block_body, render_gene, ControlPrompt, Form, GeneFields, RenderError};
use crate::sandbox::{self, EvalError, Scenario, TrialContext, TrialStatus};
use crate::selector::{self, SelectionPolicy};
use crate::store::{AssetKind, Store, StoreError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

/// Fixed control-channel template for gateway gene rewrites. Versioned:
/// replacing the wording is a new template file, not an edit.
pub const MUTATION_PROMPT: &str = include_str!("../../../../fixtures/prompts/mutation_v1.txt");

/// Evolution failures.
#[derive(Debug, thiserror::Error)]
pub enum EvolveError {
    #[error("no signals: the trace scan produced nothing actionable")]
    NoSignals,
    #[error("no resolvable target: {0}")]
    NoTarget(String),
    #[error("mutate failure after {attempts} attempts: {detail}")]
    MutateFailed { attempts: u32, detail: String },
    #[error("distillation source is empty: at least one capsule is required")]
    EmptySource,
    #[error("distillation failed after {attempts} attempts: {detail}")]
    DistillFailed { attempts: u32, detail: String },
    #[error("distilled gene renders to {actual} tokens, over the {budget}-token budget")]
    OverBudget { budget: usize, actual: usize },
    #[error("evolution config error: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

// ---------------------------------------------------------------------------
// Traces and the scan stage
// ---------------------------------------------------------------------------

/// Recorded outcome of one traced attempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceOutcome {
    Pass,
    Fail,
}

/// One raw trace record, as read from an NDJSON traces file. `source_ref`
/// names where the observation came from (an asset id, a gene id, a log
/// path, ...); the remaining fields are whatever the producer captured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub source_ref: String,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<TraceOutcome>,
}

/// Reads an NDJSON traces file; blank lines are skipped.
pub fn read_traces(path: &Path) -> Result<Vec<TraceRecord>, EvolveError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EvolveError::Config(format!("cannot read traces {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line)
            .map_err(|e| EvolveError::Config(format!("traces line {}: {e}", i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

/// One pattern hit found during the scan, before standardization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    /// Rule label; [`standardize`] maps it onto the signal taxonomy.
    pub pattern: String,
    pub evidence: String,
    pub source_ref: String,
}

/// Keyword rules applied to trace text, in firing order. Each rule fires at
/// most once per record, on the first line containing any of its needles
/// (case-insensitive substring match).
const KEYWORD_RULES: &[(&str, &[&str])] = &[
    ("exception", &["exception"]),
    ("error", &["error"]),
    ("failed", &["failed", "failure"]),
    ("unstable", &["unstable", "flaky", "intermittent"]),
    ("user_feature_request", &["feature request"]),
    (
        "user_improvement_suggestion",
        &["improvement suggestion", "could be improved", "suggestion:"],
    ),
    (
        "perf_bottleneck",
        &["bottleneck", "too slow", "perf regression"],
    ),
    (
        "capability_gap",
        &["not implemented", "unsupported", "capability gap"],
    ),
];

/// Scans raw traces for observations. Keyword rules fire on text; a
/// recorded nonzero exit code or failing outcome each add one observation;
/// a streak of at least `plateau_threshold` consecutive passing outcomes
/// adds one plateau observation attributed to the streak's last record.
pub fn scan(traces: &[TraceRecord], config: &LoopConfig) -> Vec<Observation> {
    let mut out = Vec::new();
    let mut streak: usize = 0;
    let mut streak_ref = String::new();
    let flush_streak = |streak: &mut usize, streak_ref: &str, out: &mut Vec<Observation>| {
        if *streak >= config.plateau_threshold {
            out.push(Observation {
                pattern: "stable_success_plateau".into(),
                evidence: format!("{streak} consecutive passing outcomes"),
                source_ref: streak_ref.to_string(),
            });
        }
        *streak = 0;
    };
    for record in traces {
        if record.outcome == Some(TraceOutcome::Pass) {
            streak += 1;
            streak_ref = record.source_ref.clone();
        } else {
            flush_streak(&mut streak, &streak_ref, &mut out);
        }
        let lower = record.text.to_lowercase();
        for (pattern, needles) in KEYWORD_RULES {
            if !needles.iter().any(|n| lower.contains(n)) {
                continue;
            }
            let evidence = record
                .text
                .lines()
                .find(|line| {
                    let l = line.to_lowercase();
                    needles.iter().any(|n| l.contains(n))
                })
                .map(|line| line.trim().to_string())
                .unwrap_or_default();
            out.push(Observation {
                pattern: (*pattern).into(),
                evidence,
                source_ref: record.source_ref.clone(),
            });
        }
        if let Some(code) = record.exit_code {
            if code != 0 {
                out.push(Observation {
                    pattern: "nonzero_exit".into(),
                    evidence: format!("exit code {code}"),
                    source_ref: record.source_ref.clone(),
                });
            }
        }
        if record.outcome == Some(TraceOutcome::Fail) {
            out.push(Observation {
                pattern: "failed".into(),
                evidence: "recorded failing outcome".into(),
                source_ref: record.source_ref.clone(),
            });
        }
    }
    flush_streak(&mut streak, &streak_ref, &mut out);
    out
}

// ---------------------------------------------------------------------------
// The signal stage
// ---------------------------------------------------------------------------

/// An observation standardization rejected, with the reason.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedObservation {
    pub observation: Observation,
    pub reason: String,
}

/// Output of the signal stage: the standardized signals plus a log of what
/// was dropped and why.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Standardized {
    pub signals: Vec<Signal>,
    pub dropped: Vec<DroppedObservation>,
}

fn kind_for_pattern(pattern: &str) -> Option<SignalKind> {
    match pattern {
        "error" => Some(SignalKind::Error),
        "exception" => Some(SignalKind::Exception),
        "failed" | "nonzero_exit" => Some(SignalKind::Failed),
        "unstable" => Some(SignalKind::Unstable),
        "user_feature_request" => Some(SignalKind::UserFeatureRequest),
        "user_improvement_suggestion" => Some(SignalKind::UserImprovementSuggestion),
        "perf_bottleneck" => Some(SignalKind::PerfBottleneck),
        "capability_gap" => Some(SignalKind::CapabilityGap),
        "stable_success_plateau" => Some(SignalKind::StableSuccessPlateau),
        _ => None,
    }
}

/// Standardizes observations into signals. Each observation maps onto
/// exactly one signal kind or is dropped with a logged reason; duplicates
/// by `(kind, source_ref)` collapse to the first occurrence.
pub fn standardize(observations: &[Observation]) -> Standardized {
    let mut signals = Vec::new();
    let mut dropped = Vec::new();
    let mut seen: BTreeSet<(SignalKind, String)> = BTreeSet::new();
    for obs in observations {
        let Some(kind) = kind_for_pattern(&obs.pattern) else {
            dropped.push(DroppedObservation {
                observation: obs.clone(),
                reason: format!("pattern {:?} is not in the signal taxonomy", obs.pattern),
            });
            continue;
        };
        if obs.evidence.trim().is_empty() {
            dropped.push(DroppedObservation {
                observation: obs.clone(),
                reason: "empty evidence".into(),
            });
            continue;
        }
        if seen.insert((kind, obs.source_ref.clone())) {
            signals.push(Signal {
                kind,
                evidence: obs.evidence.clone(),
                source_ref: obs.source_ref.clone(),
            });
        }
    }
    Standardized { signals, dropped }
}

/// Picks the signal that drives the run: the first failure-class signal,
/// else the first capability gap or feature request, else the first signal.
pub fn driving_signal(signals: &[Signal]) -> Option<&Signal> {
    signals
        .iter()
        .find(|s| s.kind.is_failure_class())
        .or_else(|| {
            signals.iter().find(|s| {
                matches!(
                    s.kind,
                    SignalKind::CapabilityGap | SignalKind::UserFeatureRequest
                )
            })
        })
        .or_else(|| signals.first())
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Named knobs of the loop. Defaults: plateau at 10 consecutive passes,
/// module blast radius up to 3 capsule references, strict improvement
/// required at the scenario gate, 3 gateway attempts, 300-token distillation
/// budget, 30-second validation hook timeout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub plateau_threshold: usize,
    pub blast_module_max: usize,
    pub strict_improvement: bool,
    pub max_mutation_attempts: u32,
    pub distill_budget: usize,
    pub max_distill_attempts: u32,
    pub hook_timeout_seconds: u64,
}

impl Default for LoopConfig {
    fn default() -> LoopConfig {
        LoopConfig {
            plateau_threshold: 10,
            blast_module_max: 3,
            strict_improvement: true,
            max_mutation_attempts: 3,
            distill_budget: 300,
            max_distill_attempts: 3,
            hook_timeout_seconds: 30,
        }
    }
}

impl LoopConfig {
    /// Blast radius from the number of capsules referencing the target:
    /// 0 → local, 1..=`blast_module_max` → module, more → system.
    pub fn radius(&self, capsule_refs: usize) -> crate::objects::BlastRadius {
        use crate::objects::BlastRadius;
        if capsule_refs == 0 {
            BlastRadius::Local
        } else if capsule_refs <= self.blast_module_max {
            BlastRadius::Module
        } else {
            BlastRadius::System
        }
    }
}

// ---------------------------------------------------------------------------
// The intent stage
// ---------------------------------------------------------------------------

/// Derives the run's intent. Failure-class signals demand repair;
/// capability gaps and feature requests suggest extension; everything else
/// is optimization. The target gene comes from the first signal whose
/// `source_ref` resolves (an asset id of a gene, an asset id of a capsule —
/// its first gene reference — or a gene id in the index), falling back to
/// signal-match selection over the live gene pool.
pub fn derive_intent(
    signals: &[Signal],
    store: &Store,
    config: &LoopConfig,
) -> Result<Intent, EvolveError> {
    let driving = driving_signal(signals).ok_or(EvolveError::NoSignals)?;
    let objective = if signals.iter().any(|s| s.kind.is_failure_class()) {
        Objective::Repair
    } else if signals.iter().any(|s| {
        matches!(
            s.kind,
            SignalKind::CapabilityGap | SignalKind::UserFeatureRequest
        )
    }) {
        Objective::Extend
    } else {
        Objective::Optimize
    };
    let target_asset = resolve_target(store, driving, signals)?;
    let blast_radius = config.radius(capsule_refs(store, &target_asset));
    let rationale = format!(
        "{} in response to {} signal from {}",
        objective.as_str(),
        driving.kind.as_str(),
        driving.source_ref
    );
    Ok(Intent {
        objective,
        target_asset,
        blast_radius,
        rationale,
    })
}

/// Resolves one signal's `source_ref` to a target gene, if possible.
fn target_from_source_ref(store: &Store, source_ref: &str) -> Option<AssetId> {
    if let Ok(id) = AssetId::parse(source_ref) {
        if let Ok(asset) = store.get_asset(&id) {
            return match asset.kind {
                AssetKind::Gene => Some(id),
                AssetKind::Capsule => store
                    .get_capsule(&id)
                    .ok()
                    .and_then(|c| c.object().gene_refs.first().cloned()),
                AssetKind::Skill => None,
            };
        }
        return None;
    }
    if source_ref.starts_with("gene_") {
        return store.latest_gene(source_ref);
    }
    None
}

fn resolve_target(
    store: &Store,
    driving: &Signal,
    signals: &[Signal],
) -> Result<AssetId, EvolveError> {
    if let Some(id) = target_from_source_ref(store, &driving.source_ref) {
        return Ok(id);
    }
    for signal in signals {
        if let Some(id) = target_from_source_ref(store, &signal.source_ref) {
            return Ok(id);
        }
    }
    let pool: Vec<Canonical<Gene>> = store
        .gene_index()
        .values()
        .map(|id| store.get_gene(id))
        .collect::<Result<_, _>>()?;
    let evidence: Vec<&str> = signals.iter().map(|s| s.evidence.as_str()).collect();
    match selector::select(&pool, &evidence.join(" "), &SelectionPolicy::Single) {
        Ok(selected) => Ok(selected[0].asset_id().clone()),
        Err(_) => Err(EvolveError::NoTarget(
            "no source_ref resolves to a stored gene and the gene pool is empty".into(),
        )),
    }
}

/// Counts capsules in the store whose gene references include `target`.
pub fn capsule_refs(store: &Store, target: &AssetId) -> usize {
    store
        .list_assets(AssetKind::Capsule)
        .iter()
        .filter_map(|id| store.get_capsule(id).ok())
        .filter(|c| c.object().gene_refs.contains(target))
        .count()
}

// ---------------------------------------------------------------------------
// The mutate stage
// ---------------------------------------------------------------------------

/// Which mutation operator the run applies to the target gene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "operator", rename_all = "snake_case")]
pub enum MutationSpec {
    /// Reverse the ranked strategy order (mechanical).
    InvertPriority,
    /// Append constraints (mechanical).
    Overconstrain { constraints: Vec<String> },
    /// Substitute content from a table file (mechanical).
    Substitute {
        mode: perturb::MutationMode,
        table: PathBuf,
    },
    /// Ask the gateway backend to rewrite the gene under the fixed
    /// mutation template.
    Rewrite,
}

impl MutationSpec {
    pub fn operator_name(&self) -> &'static str {
        match self {
            MutationSpec::InvertPriority => "invert_priority",
            MutationSpec::Overconstrain { .. } => "overconstrain",
            MutationSpec::Substitute { .. } => "substitute_content",
            MutationSpec::Rewrite => "rewrite",
        }
    }
}

/// A loaded improvement gate: one scenario trial the candidate must beat.
#[derive(Debug)]
pub struct ScenarioGate {
    pub scenario: Scenario,
    /// Pass rate recorded before the mutation; the candidate must exceed it
    /// (or match it, when strict improvement is off). When absent, the gate
    /// measures it by running the original gene through the same scenario
    /// and backend before the candidate.
    pub pre_rate: Option<Rate>,
    /// Directory the gate trials run in.
    pub work_dir: PathBuf,
}

/// Everything one loop run needs besides the store, traces, and backend.
#[derive(Debug)]
pub struct LoopOptions {
    pub config: LoopConfig,
    pub mutation: MutationSpec,
    pub model_id: String,
    /// Validation hooks to run instead of the candidate's own.
    pub hooks_override: Option<Vec<ValidationHook>>,
    pub gate: Option<ScenarioGate>,
}

/// Produces the candidate mutation for the intent's target gene. Mechanical
/// operators never consult the backend; `Rewrite` sends the fixed template
/// with the current gene and retries up to `max_mutation_attempts` times
/// before reporting a mutate failure.
pub fn mutate_candidate(
    store: &Store,
    intent: &Intent,
    options: &LoopOptions,
    backend: &dyn Backend,
) -> Result<Mutation, EvolveError> {
    let original = store.get_gene(&intent.target_asset)?;
    match &options.mutation {
        MutationSpec::InvertPriority => Ok(perturb::invert_priority(&original)),
        MutationSpec::Overconstrain { constraints } => {
            Ok(perturb::overconstrain(&original, constraints)?)
        }
        MutationSpec::Substitute { mode, table } => {
            let table = SubstitutionTable::load(table)?;
            Ok(perturb::substitute_content(&original, &table, *mode)?)
        }
        MutationSpec::Rewrite => rewrite_gene(&original, intent, options, backend),
    }
}

fn rewrite_gene(
    original: &Canonical<Gene>,
    intent: &Intent,
    options: &LoopOptions,
    backend: &dyn Backend,
) -> Result<Mutation, EvolveError> {
    let control = ControlPrompt::new(MUTATION_PROMPT.to_string(), Form::None, Vec::new());
    let task = format!(
        "Objective: {}\nRationale: {}\n\n{}",
        intent.objective.as_str(),
        intent.rationale,
        gene_block_body(original.object(), GeneFields::FULL),
    );
    let mut last_error = String::from("no attempts made");
    for attempt in 1..=options.config.max_mutation_attempts.max(1) {
        let request = GenerationRequest::new(
            InferenceConfig::for_model(&options.model_id),
            control.clone(),
            task.clone(),
            format!("mutate/{}/attempt{attempt}", original.object().id),
        );
        let reply = match backend.generate(&request) {
            Ok(r) => r.text,
            Err(e) => {
                last_error = e.to_string();
                continue;
            }
        };
        let mut gene = match parse_gene_block(&reply) {
            Ok(g) => g,
            Err(e) => {
                last_error = e.to_string();
                continue;
            }
        };
        // The rewrite revises the same gene: it keeps the original id and is
        // tagged as run experience. Content addressing still mints a fresh
        // asset id for the revision.
        gene.id = original.object().id.clone();
        gene.source_tag = SourceTag::RunExperience;
        gene.asset_id = None;
        match canonicalize(&gene) {
            Ok(candidate) => {
                let diff = perturb::field_diff(original.object(), candidate.object());
                return Ok(Mutation {
                    gene: candidate,
                    operator: "rewrite",
                    diff,
                    warning: None,
                });
            }
            Err(report) => {
                last_error = report.to_string();
            }
        }
    }
    Err(EvolveError::MutateFailed {
        attempts: options.config.max_mutation_attempts.max(1),
        detail: last_error,
    })
}

// ---------------------------------------------------------------------------
// The validate stage
// ---------------------------------------------------------------------------

/// The gate trial a validation ran, when a scenario gate was configured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateTrial {
    pub scenario_id: String,
    pub task_signature: String,
    pub rate: Rate,
}

/// Result of validating one candidate: the verdict plus every check that
/// produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    pub result: ValidationResult,
    pub checks: Vec<ValidationCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_trial: Option<GateTrial>,
}

enum HookEnd {
    Exited(Option<i32>),
    TimedOut,
    Failed(String),
}

fn run_shell_hook(command: &str, timeout: Duration) -> HookEnd {
    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(command)
        .env_clear()
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null());
    for key in sandbox::ENV_WHITELIST {
        if let Ok(value) = std::env::var(key) {
            cmd.env(key, value);
        }
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => return HookEnd::Failed(format!("spawn failed: {e}")),
    };
    let pid = child.id() as i32;
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let _ = tx.send(child.wait());
    });
    match rx.recv_timeout(timeout) {
        Ok(Ok(status)) => HookEnd::Exited(status.code()),
        Ok(Err(e)) => HookEnd::Failed(format!("wait failed: {e}")),
        Err(_) => {
            #[cfg(unix)]
            unsafe {
                libc::kill(-pid, libc::SIGKILL);
            }
            let _ = rx.recv_timeout(Duration::from_secs(5));
            HookEnd::TimedOut
        }
    }
}

fn run_hook(hook: &ValidationHook, config: &LoopConfig) -> ValidationCheck {
    let check = if hook.description.trim().is_empty() {
        format!("hook: {}", hook.command)
    } else {
        hook.description.clone()
    };
    let timeout = Duration::from_secs(config.hook_timeout_seconds.max(1));
    let (passed, detail) = match run_shell_hook(&hook.command, timeout) {
        HookEnd::Exited(Some(code)) => (
            code == hook.expected_exit,
            format!("exit {code} (expected {})", hook.expected_exit),
        ),
        HookEnd::Exited(None) => (false, "terminated by signal".into()),
        HookEnd::TimedOut => (
            false,
            format!("timed out after {}s", config.hook_timeout_seconds),
        ),
        HookEnd::Failed(detail) => (false, detail),
    };
    ValidationCheck {
        check,
        passed,
        detail,
    }
}

/// Renders one gene, generates a program for the gate's scenario, and runs
/// one sandbox trial in `work_dir/<subdir>`. `Err` carries a render or
/// generation failure.
fn gate_generation(
    gene: &Canonical<Gene>,
    gate: &ScenarioGate,
    backend: &dyn Backend,
    model_id: &str,
    subdir: &str,
) -> Result<(Rate, TrialStatus), String> {
    let control =
        render_gene(gene, GeneFields::FULL).map_err(|e| format!("gene does not render: {e}"))?;
    let request = GenerationRequest::new(
        InferenceConfig::for_model(model_id),
        control,
        gate.scenario.task_text.clone(),
        format!("validate/{}/{subdir}/{}", gate.scenario.id, gene.asset_id()),
    );
    let program = backend
        .generate(&request)
        .map_err(|e| format!("generation failed: {e}"))?
        .text;
    let ctx = TrialContext {
        condition_id: "validation".into(),
        model_id: model_id.into(),
        trial_dir: gate.work_dir.join(subdir),
    };
    let trial = sandbox::run_trial(&gate.scenario, &program, &ctx);
    Ok((trial.r, trial.status))
}

fn run_gate(
    candidate: &Canonical<Gene>,
    original: Option<&Canonical<Gene>>,
    gate: &ScenarioGate,
    backend: &dyn Backend,
    model_id: &str,
    config: &LoopConfig,
) -> (ValidationCheck, Option<GateTrial>) {
    let check_name = format!("scenario {} improvement gate", gate.scenario.id);
    let failed = |detail: String| {
        (
            ValidationCheck {
                check: check_name.clone(),
                passed: false,
                detail,
            },
            None,
        )
    };
    let (pre_rate, pre_source) = match gate.pre_rate {
        Some(rate) => (rate, "recorded"),
        None => {
            let Some(original) = original else {
                return failed(
                    "no recorded pre-mutation rate and no original gene to measure".into(),
                );
            };
            match gate_generation(original, gate, backend, model_id, "pre") {
                Err(e) => {
                    return failed(format!("pre-mutation baseline could not be measured: {e}"))
                }
                Ok((rate, TrialStatus::Ok)) => (rate, "measured"),
                Ok((_, status)) => {
                    return failed(format!("pre-mutation baseline trial status {status:?}"))
                }
            }
        }
    };
    let (rate, status) = match gate_generation(candidate, gate, backend, model_id, "candidate") {
        Ok(outcome) => outcome,
        Err(e) => return failed(e),
    };
    let improved = if config.strict_improvement {
        rate > pre_rate
    } else {
        rate >= pre_rate
    };
    let passed = status == TrialStatus::Ok && improved;
    let detail = format!(
        "candidate rate {rate} vs pre-mutation {pre_rate} [{pre_source}] ({} improvement \
         required, trial status {status:?})",
        if config.strict_improvement {
            "strict"
        } else {
            "non-strict"
        },
    );
    (
        ValidationCheck {
            check: check_name,
            passed,
            detail,
        },
        Some(GateTrial {
            scenario_id: gate.scenario.id.clone(),
            task_signature: task_signature(&gate.scenario.id, &gate.scenario.task_text),
            rate,
        }),
    )
}

/// Validates a candidate gene. Runs the validation hooks (the candidate's
/// own, or `hooks_override` when given) in a scrubbed environment, then the
/// scenario gate when configured; a gate with no recorded pre-mutation rate
/// measures one from `original`. The verdict is pass only when every check
/// passed; with no hooks and no gate there is no evidence, and skipped
/// validation counts as fail.
pub fn validate_candidate(
    candidate: &Canonical<Gene>,
    original: Option<&Canonical<Gene>>,
    hooks_override: Option<&[ValidationHook]>,
    gate: Option<&ScenarioGate>,
    backend: &dyn Backend,
    model_id: &str,
    config: &LoopConfig,
) -> ValidationOutcome {
    let hooks = hooks_override.unwrap_or(&candidate.object().validation);
    let mut checks: Vec<ValidationCheck> = hooks.iter().map(|h| run_hook(h, config)).collect();
    let mut gate_trial = None;
    if let Some(gate) = gate {
        let (check, trial) = run_gate(candidate, original, gate, backend, model_id, config);
        checks.push(check);
        gate_trial = trial;
    }
    if checks.is_empty() {
        checks.push(ValidationCheck {
            check: "validation evidence".into(),
            passed: false,
            detail: "no hooks and no scenario gate: skipped validation counts as fail".into(),
        });
    }
    let result = if checks.iter().all(|c| c.passed) {
        ValidationResult::Pass
    } else {
        ValidationResult::Fail
    };
    ValidationOutcome {
        result,
        checks,
        gate_trial,
    }
}

// ---------------------------------------------------------------------------
// The solidify stage
// ---------------------------------------------------------------------------

/// One ledger append made by a run, in a report-friendly shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub seq: u64,
    pub event_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_asset: Option<AssetId>,
}

/// What the solidify stage did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolidifyOutcome {
    pub events: Vec<EventSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solidified: Option<AssetId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capsule: Option<AssetId>,
}

fn capsule_id_for(run_id: &str, seq: u64) -> String {
    let tail = run_id.strip_prefix("run_").unwrap_or(run_id);
    format!("capsule_{tail}_{seq}")
}

fn checks_summary(checks: &[ValidationCheck]) -> String {
    let passed = checks.iter().filter(|c| c.passed).count();
    let mut out = format!("{passed}/{} validation checks passed", checks.len());
    for check in checks {
        out.push_str(&format!(
            "\n{} {}: {}",
            if check.passed { "PASS" } else { "FAIL" },
            check.check,
            check.detail
        ));
    }
    out
}

/// Applies the validation verdict. On pass: stores the candidate, appends a
/// validation-pass event and a solidify event (source → new revision,
/// carrying the mutation diff), and — when the validation ran a scenario
/// gate — mints a capsule recording the gated trial, linked to the solidify
/// event's ledger position. On fail: appends a validation-fail event and
/// leaves the asset store untouched.
pub fn solidify(
    store: &Store,
    run_id: &str,
    signal: &Signal,
    intent: &Intent,
    mutation: &Mutation,
    outcome: &ValidationOutcome,
) -> Result<SolidifyOutcome, EvolveError> {
    let src = intent.target_asset.clone();
    if outcome.result != ValidationResult::Pass {
        let key = store.append_event(EventDraft {
            event_type: EventType::ValidationFail,
            run_id: run_id.to_string(),
            src_asset: Some(src),
            dst_asset: None,
            signal: signal.clone(),
            intent: intent.clone(),
            diff: checks_summary(&outcome.checks),
            validation_result: ValidationResult::Fail,
        })?;
        return Ok(SolidifyOutcome {
            events: vec![EventSummary {
                seq: key.seq,
                event_type: EventType::ValidationFail.as_str().into(),
                dst_asset: None,
            }],
            solidified: None,
            capsule: None,
        });
    }

    let new_id = store.put_gene(&mutation.gene)?;
    let pass_key = store.append_event(EventDraft {
        event_type: EventType::ValidationPass,
        run_id: run_id.to_string(),
        src_asset: Some(src.clone()),
        dst_asset: None,
        signal: signal.clone(),
        intent: intent.clone(),
        diff: checks_summary(&outcome.checks),
        validation_result: ValidationResult::Pass,
    })?;
    let solid_key = store.append_event(EventDraft {
        event_type: EventType::Solidify,
        run_id: run_id.to_string(),
        src_asset: Some(src),
        dst_asset: Some(new_id.clone()),
        signal: signal.clone(),
        intent: intent.clone(),
        diff: mutation.diff.clone(),
        validation_result: ValidationResult::Pass,
    })?;

    let mut capsule_id = None;
    if let Some(trial) = &outcome.gate_trial {
        let capsule = Capsule {
            object_type: CapsuleTag,
            schema_version: SCHEMA_VERSION.to_string(),
            id: capsule_id_for(run_id, solid_key.seq),
            task_signature: trial.task_signature.clone(),
            gene_refs: vec![new_id.clone()],
            trace: vec![TraceStep {
                stage: "validate".into(),
                payload: format!(
                    "scenario {} gated at rate {}",
                    trial.scenario_id, trial.rate
                ),
            }],
            outcome: CapsuleOutcome::from_rate(trial.rate),
            validation_record: outcome.checks.clone(),
            lineage: Some(solid_key.seq),
            asset_id: None,
        };
        let canonical = canonicalize(&capsule)
            .map_err(|r| EvolveError::Config(format!("minted capsule is invalid: {r}")))?;
        capsule_id = Some(store.put_capsule(&canonical)?);
    }

    Ok(SolidifyOutcome {
        events: vec![
            EventSummary {
                seq: pass_key.seq,
                event_type: EventType::ValidationPass.as_str().into(),
                dst_asset: None,
            },
            EventSummary {
                seq: solid_key.seq,
                event_type: EventType::Solidify.as_str().into(),
                dst_asset: Some(new_id.clone()),
            },
        ],
        solidified: Some(new_id),
        capsule: capsule_id,
    })
}

// ---------------------------------------------------------------------------
// The loop driver
// ---------------------------------------------------------------------------

/// Loop stages, in protocol order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Scan,
    Signal,
    Intent,
    Mutate,
    Validate,
    Solidify,
    Done,
    Aborted,
}

/// Tracks where a run is. Stage transitions are restricted to the declared
/// chain; any stage short of `Done` may abort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub run_id: String,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted_reason: Option<String>,
}

impl LoopState {
    pub fn new(run_id: String) -> LoopState {
        LoopState {
            run_id,
            stage: Stage::Scan,
            aborted_reason: None,
        }
    }

    /// Whether the chain permits moving from `from` to `to`.
    pub fn allowed(from: Stage, to: Stage) -> bool {
        matches!(
            (from, to),
            (Stage::Scan, Stage::Signal)
                | (Stage::Signal, Stage::Intent)
                | (Stage::Intent, Stage::Mutate)
                | (Stage::Mutate, Stage::Validate)
                | (Stage::Validate, Stage::Solidify)
                | (Stage::Solidify, Stage::Done)
        ) || (to == Stage::Aborted && !matches!(from, Stage::Done | Stage::Aborted))
    }

    /// Moves to the next stage; panics on a transition outside the chain
    /// (that is a driver bug, not an input error).
    pub fn advance(&mut self, next: Stage) {
        assert!(
            LoopState::allowed(self.stage, next),
            "illegal stage transition {:?} -> {next:?}",
            self.stage
        );
        self.stage = next;
    }

    pub fn abort(&mut self, reason: impl Into<String>) {
        self.advance(Stage::Aborted);
        self.aborted_reason = Some(reason.into());
    }
}

/// The run manifest: everything needed to audit one loop run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub run_id: String,
    /// Digest over the loop configuration, mutation spec, model id, hook
    /// override, and gate identity.
    pub config_digest: String,
    pub backend_tag: String,
    pub model_id: String,
    pub stage: Stage,
    pub signals: Vec<Signal>,
    /// Reasons observations were dropped during standardization.
    pub dropped: Vec<String>,
    pub intent: Intent,
    pub mutation_operator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mutation_warning: Option<String>,
    /// Digest of the fixed rewrite template, when the gateway was used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_digest: Option<String>,
    pub validation: ValidationOutcome,
    pub events: Vec<EventSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solidified: Option<AssetId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capsule: Option<AssetId>,
}

fn options_digest(options: &LoopOptions) -> String {
    let gate = options.gate.as_ref().map(|g| {
        let pre = g
            .pre_rate
            .map(|r| r.to_string())
            .unwrap_or_else(|| "measured".into());
        format!("{}:{pre}", g.scenario.id)
    });
    let payload = serde_json::json!({
        "config": options.config,
        "mutation": options.mutation,
        "model_id": options.model_id,
        "hooks_override": options.hooks_override,
        "gate": gate,
    });
    sha256_hex(payload.to_string().as_bytes())
}

fn compute_run_id(store: &Store, traces: &[TraceRecord], options: &LoopOptions) -> String {
    let traces_json = serde_json::to_string(traces).expect("traces serialize");
    let payload = format!("{}\n{traces_json}", options_digest(options));
    format!(
        "run_{}_{}",
        &sha256_hex(payload.as_bytes())[..12],
        store.event_count() + 1
    )
}

/// Drives one full run of the six-stage loop.
///
/// Ledger behavior: a run that reaches the mutate stage appends at least
/// one event. A successful mutation appends a repair or innovation event
/// (objective repair ⇒ repair, otherwise innovation) before validation; the
/// solidify stage then appends validation-pass + solidify on success or
/// validation-fail on failure. A mutate failure (the gateway never produced
/// a parseable gene block) appends a validation-fail event with an empty
/// diff and returns the error. Aborts before the mutate stage (no signals,
/// no resolvable target) append nothing: there is no asset the intent
/// record could point at.
pub fn run_loop(
    store: &Store,
    traces: &[TraceRecord],
    backend: &dyn Backend,
    options: &LoopOptions,
) -> Result<LoopReport, EvolveError> {
    let run_id = compute_run_id(store, traces, options);
    let mut state = LoopState::new(run_id.clone());

    let observations = scan(traces, &options.config);
    state.advance(Stage::Signal);
    let standardized = standardize(&observations);

    state.advance(Stage::Intent);
    let intent = match derive_intent(&standardized.signals, store, &options.config) {
        Ok(intent) => intent,
        Err(e) => {
            state.abort(e.to_string());
            return Err(e);
        }
    };
    let signal = driving_signal(&standardized.signals)
        .expect("derive_intent succeeded, so a driving signal exists")
        .clone();

    state.advance(Stage::Mutate);
    let mutation = match mutate_candidate(store, &intent, options, backend) {
        Ok(m) => m,
        Err(e) => {
            if matches!(e, EvolveError::MutateFailed { .. }) {
                store.append_event(EventDraft {
                    event_type: EventType::ValidationFail,
                    run_id: run_id.clone(),
                    src_asset: Some(intent.target_asset.clone()),
                    dst_asset: None,
                    signal: signal.clone(),
                    intent: intent.clone(),
                    diff: String::new(),
                    validation_result: ValidationResult::Fail,
                })?;
            }
            state.abort(e.to_string());
            return Err(e);
        }
    };
    let mutation_event_type = if intent.objective == Objective::Repair {
        EventType::Repair
    } else {
        EventType::Innovation
    };
    let mutation_key = store.append_event(EventDraft {
        event_type: mutation_event_type,
        run_id: run_id.clone(),
        src_asset: Some(intent.target_asset.clone()),
        dst_asset: None,
        signal: signal.clone(),
        intent: intent.clone(),
        diff: mutation.diff.clone(),
        validation_result: ValidationResult::Skipped,
    })?;

    state.advance(Stage::Validate);
    let original = store.get_gene(&intent.target_asset)?;
    let validation = validate_candidate(
        &mutation.gene,
        Some(&original),
        options.hooks_override.as_deref(),
        options.gate.as_ref(),
        backend,
        &options.model_id,
        &options.config,
    );

    state.advance(Stage::Solidify);
    let sol = solidify(store, &run_id, &signal, &intent, &mutation, &validation)?;

    state.advance(Stage::Done);
    let mut events = vec![EventSummary {
        seq: mutation_key.seq,
        event_type: mutation_event_type.as_str().into(),
        dst_asset: None,
    }];
    events.extend(sol.events);
    Ok(LoopReport {
        run_id,
        config_digest: options_digest(options),
        backend_tag: backend.tag().to_string(),
        model_id: options.model_id.clone(),
        stage: state.stage,
        signals: standardized.signals,
        dropped: standardized.dropped.iter().map(|d| d.reason.clone()).collect(),
        intent,
        mutation_operator: mutation.operator.to_string(),
        mutation_warning: mutation.warning,
        prompt_digest: matches!(options.mutation, MutationSpec::Rewrite)
            .then(|| sha256_hex(MUTATION_PROMPT.as_bytes())),
        validation,
        events,
        solidified: sol.solidified,
        capsule: sol.capsule,
    })
}

// ---------------------------------------------------------------------------
// Loop plan files
// ---------------------------------------------------------------------------

/// Gate description as written in a loop plan file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatePlan {
    /// Scenario pack directory.
    pub scenario: PathBuf,
    /// Recorded pre-mutation pass rate as `[numerator, denominator]`;
    /// omitted means the gate measures it from the original gene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_rate: Option<(i64, i64)>,
    /// Directory the gate trials run in.
    pub work_dir: PathBuf,
}

/// One evolution run described as a single versioned file: the store, the
/// backend serving the model, the mutation operator, and the loop knobs.
/// Relative paths resolve against the plan file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopPlan {
    pub store: PathBuf,
    pub model_id: String,
    pub backend: crate::gateway::BackendSpec,
    #[serde(default)]
    pub config: LoopConfig,
    pub mutation: MutationSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hooks_override: Option<Vec<ValidationHook>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GatePlan>,
}

fn resolve_plan_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl LoopPlan {
    /// Reads a plan from a JSON file.
    pub fn load(path: &Path) -> Result<LoopPlan, EvolveError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EvolveError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| EvolveError::Config(format!("{}: {e}", path.display())))
    }

    /// Opens the plan's store.
    pub fn open_store(&self, base_dir: &Path) -> Result<Store, EvolveError> {
        Ok(Store::open(resolve_plan_path(base_dir, &self.store))?)
    }

    /// Builds the plan's backend.
    pub fn build_backend(&self, base_dir: &Path) -> Result<Box<dyn Backend>, EvolveError> {
        Ok(self.backend.build(base_dir)?)
    }

    /// Assembles loop options, loading the gate's scenario pack if present.
    pub fn loop_options(&self, base_dir: &Path) -> Result<LoopOptions, EvolveError> {
        let gate = match &self.gate {
            None => None,
            Some(plan) => {
                let scenario = Scenario::load_pack(&resolve_plan_path(base_dir, &plan.scenario))?;
                let pre_rate = match plan.pre_rate {
                    None => None,
                    Some((numer, denom)) => Some(Rate::new(numer, denom).map_err(|e| {
                        EvolveError::Config(format!("gate pre_rate {numer}/{denom}: {e}"))
                    })?),
                };
                Some(ScenarioGate {
                    scenario,
                    pre_rate,
                    work_dir: resolve_plan_path(base_dir, &plan.work_dir),
                })
            }
        };
        Ok(LoopOptions {
            config: self.config.clone(),
            mutation: self.mutation.clone(),
            model_id: self.model_id.clone(),
            hooks_override: self.hooks_override.clone(),
            gate,
        })
    }
}

/// Checks the gating invariant over a ledger slice: every solidify event
/// must be preceded by a validation-pass event from the same run.
pub fn audit_gating(events: &[Event]) -> Result<(), String> {
    for (i, event) in events.iter().enumerate() {
        if event.event_type != EventType::Solidify {
            continue;
        }
        let gated = events[..i]
            .iter()
            .any(|p| p.run_id == event.run_id && p.event_type == EventType::ValidationPass);
        if !gated {
            return Err(format!(
                "solidify at seq {} has no preceding validation pass in run {}",
                event.ordering.seq, event.run_id
            ));
        }
    }
    Ok(())
}
