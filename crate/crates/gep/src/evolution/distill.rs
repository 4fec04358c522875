//! Distillation: compressing a long-form source — a full skill package or a
//! set of validated capsules — into one compact gene through the gateway.
//!
//! The control channel carries a fixed, versioned template; the task channel
//! carries the source material. The reply must be a single parseable
//! strategy-gene block, and the resulting gene must render within the token
//! budget. Budget enforcement is by rejection: an over-budget gene is an
//! error, never trimmed into a different gene.

use super::{EvolveError, LoopConfig};
use crate::gateway::{Backend, GenerationRequest, InferenceConfig};
use crate::objects::{
    canonicalize, parse_gene_block, Canonical, Capsule, Gene, OutcomeKind, SkillPackage, SourceTag,
};
use crate::render::{
    count_tokens, render_gene, render_skill, ControlPrompt, Form, GeneFields, SkillRequest,
};

/// Fixed control-channel template for distilling a skill package.
pub const DISTILL_SKILL_PROMPT: &str =
    include_str!("../../../../fixtures/prompts/distill_skill_v1.txt");

/// Fixed control-channel template for distilling capsule experience.
pub const DISTILL_CAPSULES_PROMPT: &str =
    include_str!("../../../../fixtures/prompts/distill_capsules_v1.txt");

/// What a distillation compresses.
#[derive(Clone, Copy, Debug)]
pub enum DistillSource<'a> {
    /// A full skill package; the distilled gene is tagged `manual`, like
    /// other curated content.
    Skill(&'a Canonical<SkillPackage>),
    /// Validated capsules; the distilled gene is tagged `run_experience`.
    Capsules(&'a [Canonical<Capsule>]),
}

impl DistillSource<'_> {
    fn template(&self) -> &'static str {
        match self {
            DistillSource::Skill(_) => DISTILL_SKILL_PROMPT,
            DistillSource::Capsules(_) => DISTILL_CAPSULES_PROMPT,
        }
    }

    fn source_tag(&self) -> SourceTag {
        match self {
            DistillSource::Skill(_) => SourceTag::Manual,
            DistillSource::Capsules(_) => SourceTag::RunExperience,
        }
    }

    fn label(&self) -> String {
        match self {
            DistillSource::Skill(s) => format!("skill/{}", s.object().id),
            DistillSource::Capsules(_) => "capsules".into(),
        }
    }

    /// Renders the source into task text. Empty capsule sets have nothing
    /// to distill and are a precondition error.
    fn task_text(&self) -> Result<String, EvolveError> {
        match self {
            DistillSource::Skill(skill) => {
                Ok(render_skill(skill, SkillRequest::All)?.text)
            }
            DistillSource::Capsules(capsules) => {
                if capsules.is_empty() {
                    return Err(EvolveError::EmptySource);
                }
                Ok(capsules_digest(capsules))
            }
        }
    }
}

fn outcome_name(kind: OutcomeKind) -> &'static str {
    match kind {
        OutcomeKind::Pass => "pass",
        OutcomeKind::Partial => "partial",
        OutcomeKind::Fail => "fail",
    }
}

/// Deterministic plain-text digest of a capsule set, one block per capsule
/// in the order given.
fn capsules_digest(capsules: &[Canonical<Capsule>]) -> String {
    let mut lines = Vec::new();
    for capsule in capsules {
        let c = capsule.object();
        let passed = c.validation_record.iter().filter(|v| v.passed).count();
        lines.push(format!(
            "Capsule {}: outcome {} ({}/{}), checks {passed}/{} passed, task {}",
            c.id,
            outcome_name(c.outcome.kind),
            c.outcome.rate.numer(),
            c.outcome.rate.denom(),
            c.validation_record.len(),
            &c.task_signature[..12.min(c.task_signature.len())],
        ));
        for step in &c.trace {
            lines.push(format!("  [{}] {}", step.stage, step.payload));
        }
        for check in &c.validation_record {
            lines.push(format!(
                "  check {:?}: {} ({})",
                check.check,
                if check.passed { "passed" } else { "failed" },
                check.detail
            ));
        }
    }
    lines.join("\n")
}

/// Distills the source into one canonical gene. The gateway reply must
/// parse as a single strategy-gene block (retried up to
/// `max_distill_attempts` times); the gene must then render within
/// `distill_budget` tokens in its full deployable form, or the distillation
/// fails without minting anything.
pub fn distill_gene(
    source: DistillSource<'_>,
    backend: &dyn Backend,
    model_id: &str,
    config: &LoopConfig,
) -> Result<Canonical<Gene>, EvolveError> {
    let task = source.task_text()?;
    let control = ControlPrompt::new(source.template().to_string(), Form::None, Vec::new());
    let mut last_error = String::from("no attempts made");
    for attempt in 1..=config.max_distill_attempts.max(1) {
        let request = GenerationRequest::new(
            InferenceConfig::for_model(model_id),
            control.clone(),
            task.clone(),
            format!("distill/{}/attempt{attempt}", source.label()),
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
        gene.source_tag = source.source_tag();
        gene.asset_id = None;
        let candidate = match canonicalize(&gene) {
            Ok(c) => c,
            Err(report) => {
                last_error = report.to_string();
                continue;
            }
        };
        let rendered = render_gene(&candidate, GeneFields::FULL)?;
        let actual = count_tokens(&rendered.text);
        if actual > config.distill_budget {
            return Err(EvolveError::OverBudget {
                budget: config.distill_budget,
                actual,
            });
        }
        return Ok(candidate);
    }
    Err(EvolveError::DistillFailed {
        attempts: config.max_distill_attempts.max(1),
        detail: last_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::gateway::ScriptedBackend;
    use crate::objects::{task_signature, CapsuleOutcome, CapsuleTag, TraceStep, SCHEMA_VERSION};
    use crate::rate::Rate;

    const DISTILLED_REPLY: &str = "\
Here is the distilled gene.

<strategy-gene>
Domain keywords: uv-vis, spectroscopy, peak detection
Summary: Smooth first, then pick peaks by prominence relative to noise.
Strategy:
  1. Smooth with Savitzky-Golay before peak picking.
  2. Calibrate prominence against the measured noise floor.
  3. AVOID: reporting wavelengths without unit checks.
</strategy-gene>";

    fn demo_capsules() -> Vec<Canonical<Capsule>> {
        ["alpha", "beta"]
            .iter()
            .map(|tag| {
                let capsule = Capsule {
                    object_type: CapsuleTag,
                    schema_version: SCHEMA_VERSION.to_string(),
                    id: format!("capsule_{tag}"),
                    task_signature: task_signature("s901", tag),
                    gene_refs: vec![],
                    trace: vec![TraceStep {
                        stage: "mutate".into(),
                        payload: format!("{tag} strategy applied"),
                    }],
                    outcome: CapsuleOutcome::from_rate(Rate::new(1, 2).unwrap()),
                    validation_record: vec![crate::objects::ValidationCheck {
                        check: "units".into(),
                        passed: true,
                        detail: "nm everywhere".into(),
                    }],
                    lineage: None,
                    asset_id: None,
                };
                canonicalize(&capsule).unwrap()
            })
            .collect()
    }

    #[test]
    fn skill_distillation_stays_in_budget_and_keeps_manual_tag() {
        let skill = canonicalize(&fixtures::uv_vis_skill()).unwrap();
        let backend = ScriptedBackend::new("distiller", |req: &GenerationRequest| {
            assert!(req.control.text.contains("distill documentation"));
            assert!(req.control.text.contains("Stay well under 300 tokens"));
            // The task channel carries the rendered skill package.
            assert!(req.task_text.contains("UV-Vis"));
            DISTILLED_REPLY.to_string()
        });
        let config = LoopConfig::default();
        let gene = distill_gene(DistillSource::Skill(&skill), &backend, "model-x", &config).unwrap();
        assert_eq!(gene.object().source_tag, SourceTag::Manual);
        assert!(gene.object().id.starts_with("gene_"));
        assert_eq!(gene.object().strategy.len(), 3);
        let rendered = render_gene(&gene, GeneFields::FULL).unwrap();
        assert!(rendered.token_count <= 300, "got {}", rendered.token_count);
    }

    #[test]
    fn capsule_distillation_digests_experience_and_tags_it() {
        let capsules = demo_capsules();
        let backend = ScriptedBackend::new("distiller", |req: &GenerationRequest| {
            assert!(req.control.text.contains("distill run experience"));
            assert!(req.task_text.contains("Capsule capsule_alpha"));
            assert!(req.task_text.contains("Capsule capsule_beta"));
            assert!(req.task_text.contains("outcome partial (1/2)"));
            assert!(req.task_text.contains("[mutate] alpha strategy applied"));
            assert!(req.task_text.contains("check \"units\": passed"));
            DISTILLED_REPLY.to_string()
        });
        let config = LoopConfig::default();
        let gene = distill_gene(
            DistillSource::Capsules(&capsules),
            &backend,
            "model-x",
            &config,
        )
        .unwrap();
        assert_eq!(gene.object().source_tag, SourceTag::RunExperience);
    }

    #[test]
    fn empty_capsule_set_is_a_precondition_error() {
        let backend = ScriptedBackend::new("unused", |_req: &GenerationRequest| {
            panic!("the backend must not be consulted for an empty source")
        });
        let err = distill_gene(
            DistillSource::Capsules(&[]),
            &backend,
            "model-x",
            &LoopConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, EvolveError::EmptySource));
    }

    #[test]
    fn unparseable_replies_exhaust_attempts() {
        let calls = std::sync::Arc::new(std::sync::atomic::AtomicU32::new(0));
        let seen = calls.clone();
        let backend = ScriptedBackend::new("garbage", move |_req: &GenerationRequest| {
            seen.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            "nothing useful".into()
        });
        let skill = canonicalize(&fixtures::uv_vis_skill()).unwrap();
        let err = distill_gene(
            DistillSource::Skill(&skill),
            &backend,
            "model-x",
            &LoopConfig::default(),
        )
        .unwrap_err();
        match err {
            EvolveError::DistillFailed { attempts, detail } => {
                assert_eq!(attempts, 3);
                assert!(!detail.is_empty());
            }
            other => panic!("expected DistillFailed, got {other:?}"),
        }
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 3);
    }

    #[test]
    fn over_budget_genes_are_rejected_not_trimmed() {
        let huge_steps: String = (1..=120)
            .map(|i| format!("  {i}. Consider alternative calibration pathway number {i} in detail.\n"))
            .collect();
        let huge_reply = format!(
            "<strategy-gene>\nDomain keywords: uv-vis, calibration\nSummary: Everything at once.\nStrategy:\n{huge_steps}</strategy-gene>"
        );
        let calls = std::sync::Arc::new(std::sync::atomic::AtomicU32::new(0));
        let seen = calls.clone();
        let backend = ScriptedBackend::new("verbose", move |_req: &GenerationRequest| {
            seen.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            huge_reply.clone()
        });
        let skill = canonicalize(&fixtures::uv_vis_skill()).unwrap();
        let err = distill_gene(
            DistillSource::Skill(&skill),
            &backend,
            "model-x",
            &LoopConfig::default(),
        )
        .unwrap_err();
        match err {
            EvolveError::OverBudget { budget, actual } => {
                assert_eq!(budget, 300);
                assert!(actual > 300, "got {actual}");
            }
            other => panic!("expected OverBudget, got {other:?}"),
        }
        // A well-formed but oversized reply is rejected immediately, not
        // retried into a different gene.
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 1);
    }
}
