//! Rendering of protocol objects into control prompts.
//!
//! A *control prompt* is the strategy- or documentation-bearing text that is
//! injected alongside a task. Controls and tasks travel on different
//! channels: no function in this module accepts task text, so a rendered
//! prompt can never leak it (the separation law).
//!
//! Every representational form the engine studies is produced here:
//! full and partial gene blocks, whole skill packages and single sections,
//! token-trimmed sections, gene-plus-documentation combinations, multi-gene
//! prompts, flattened prose, failure-history attachments in several
//! encodings, and the evolution-event wrapper. The gene block, skill
//! wrapper, and evolution wrapper formats are golden-file pinned
//! (bit-exact) under `fixtures/golden/`.

pub mod token;

pub use token::{count_tokens, trim_to_budget, trim_with, DefaultTokenizer, Tokenizer};

use crate::objects::{AssetId, Canonical, Gene, SkillPackage, SkillSection, StepKind};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Preamble above every gene block.
pub const GENE_PREAMBLE: &str = "You are given the following strategic gene to guide your approach.\n\
The gene describes a high-level strategy -- use it as directional guidance,\n\
not as implementation instructions.";

/// Preamble above a full skill package.
pub const SKILL_PREAMBLE: &str = "You are given the following skill package to guide your work.\n\
Follow its instructions carefully.";

const EVOLUTION_HEADER: &str = "This gene was evolved over multiple iterations.\n\
The following evolution event captures what was learned:";

const FAILURE_HEADER: &str = "Earlier attempts at this class of task:";

const WARNINGS_HEADER: &str = "Heed the following warnings distilled from earlier failures:";

/// What carries the strategy text when failure history is attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Carrier {
    Gene,
    Skill,
    Freeform,
}

impl Carrier {
    pub fn as_str(self) -> &'static str {
        match self {
            Carrier::Gene => "gene",
            Carrier::Skill => "skill",
            Carrier::Freeform => "freeform",
        }
    }
}

/// How failure history is combined with the carrier text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureEncoding {
    /// History block first, then the carrier.
    FailureFirst,
    /// Carrier first, then the history block.
    StrategyFirst,
    /// Carrier only; the history is dropped.
    StrategyOnly,
    /// Distilled warnings only; the carrier is dropped.
    FailureWarningsOnly,
    /// Carrier followed by bare attempt lines with no header (the naive
    /// attachment baseline).
    Append,
}

impl FailureEncoding {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureEncoding::FailureFirst => "failure_first",
            FailureEncoding::StrategyFirst => "strategy_first",
            FailureEncoding::StrategyOnly => "strategy_only",
            FailureEncoding::FailureWarningsOnly => "failure_warnings_only",
            FailureEncoding::Append => "append",
        }
    }

    pub fn from_name(name: &str) -> Option<FailureEncoding> {
        [
            FailureEncoding::FailureFirst,
            FailureEncoding::StrategyFirst,
            FailureEncoding::StrategyOnly,
            FailureEncoding::FailureWarningsOnly,
            FailureEncoding::Append,
        ]
        .into_iter()
        .find(|e| e.as_str() == name)
    }
}

/// The representational form of a rendered prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Form {
    None,
    GeneFull,
    GeneKeywords,
    GeneKeywordsSummary,
    SkillFull,
    SkillSection(SkillSection),
    SkillSectionShort(SkillSection),
    GenePlusDoc(SkillSection),
    MultiGene(usize),
    GeneFlattened,
    CarrierFailure(Carrier, FailureEncoding),
    EvolutionWrapped,
}

impl fmt::Display for Form {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Form::None => write!(f, "none"),
            Form::GeneFull => write!(f, "gene_full"),
            Form::GeneKeywords => write!(f, "gene_keywords"),
            Form::GeneKeywordsSummary => write!(f, "gene_keywords_summary"),
            Form::SkillFull => write!(f, "skill_full"),
            Form::SkillSection(s) => write!(f, "skill_section({})", s.name()),
            Form::SkillSectionShort(s) => write!(f, "skill_section_short({})", s.name()),
            Form::GenePlusDoc(s) => write!(f, "gene_plus_doc({})", s.name()),
            Form::MultiGene(n) => write!(f, "multi_gene({n})"),
            Form::GeneFlattened => write!(f, "gene_flattened"),
            Form::CarrierFailure(c, e) => {
                write!(f, "carrier_failure({}, {})", c.as_str(), e.as_str())
            }
            Form::EvolutionWrapped => write!(f, "evolution_wrapped"),
        }
    }
}

/// A rendered control prompt: the text, which form produced it, which
/// assets fed it, and its token count under the default tokenizer.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPrompt {
    pub text: String,
    pub form: Form,
    pub source_ids: Vec<AssetId>,
    pub token_count: usize,
}

impl ControlPrompt {
    /// Builds a prompt; `token_count` is always computed from `text`, so
    /// the count invariant holds by construction.
    pub fn new(text: String, form: Form, source_ids: Vec<AssetId>) -> ControlPrompt {
        let token_count = count_tokens(&text);
        ControlPrompt {
            text,
            form,
            source_ids,
            token_count,
        }
    }

    /// The empty prompt for no-control baselines.
    pub fn none() -> ControlPrompt {
        ControlPrompt::new(String::new(), Form::None, Vec::new())
    }
}

/// Outcome marker on one recorded attempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttemptOutcome {
    Failed,
    Passed,
}

impl AttemptOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            AttemptOutcome::Failed => "FAILED",
            AttemptOutcome::Passed => "PASSED",
        }
    }
}

/// One recorded attempt at a class of task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attempt {
    pub description: String,
    pub outcome: AttemptOutcome,
}

impl Attempt {
    pub fn failed(description: impl Into<String>) -> Attempt {
        Attempt {
            description: description.into(),
            outcome: AttemptOutcome::Failed,
        }
    }

    pub fn passed(description: impl Into<String>) -> Attempt {
        Attempt {
            description: description.into(),
            outcome: AttemptOutcome::Passed,
        }
    }
}

/// Ordered attempt history plus optional distilled warnings.
///
/// Invariant (checked wherever attempts are rendered): at most one attempt
/// is PASSED, and if present it is the final one.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FailureHistory {
    pub attempts: Vec<Attempt>,
    pub warnings: Vec<String>,
}

impl FailureHistory {
    pub fn new(attempts: Vec<Attempt>) -> FailureHistory {
        FailureHistory {
            attempts,
            warnings: Vec::new(),
        }
    }

    pub fn with_warnings(mut self, warnings: Vec<String>) -> FailureHistory {
        self.warnings = warnings;
        self
    }

    /// True iff the final attempt exists and is PASSED.
    pub fn ends_passed(&self) -> bool {
        self.attempts
            .last()
            .is_some_and(|a| a.outcome == AttemptOutcome::Passed)
    }

    fn check(&self) -> Result<(), RenderError> {
        let n = self.attempts.len();
        for (i, a) in self.attempts.iter().enumerate() {
            if a.outcome == AttemptOutcome::Passed && i + 1 != n {
                return Err(RenderError::MalformedHistory(
                    "a PASSED attempt must be the single final attempt".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// `Attempt {i}: {description} -> {OUTCOME}` lines, 1-indexed, each
    /// prefixed with `indent`.
    fn attempt_lines(&self, indent: &str) -> Vec<String> {
        self.attempts
            .iter()
            .enumerate()
            .map(|(i, a)| {
                format!(
                    "{indent}Attempt {}: {} -> {}",
                    i + 1,
                    a.description,
                    a.outcome.as_str()
                )
            })
            .collect()
    }
}

/// Metadata on the evolution-event wrapper.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvolutionMeta {
    /// Short objective label, e.g. `optimize`.
    pub intent: String,
    pub mutations_tried: u32,
    pub outcome: EvolutionOutcome,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvolutionOutcome {
    Success,
    Failure,
}

impl EvolutionOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            EvolutionOutcome::Success => "success",
            EvolutionOutcome::Failure => "failure",
        }
    }
}

/// Which gene fields a render includes. Only three combinations are
/// studied: keywords alone, keywords+summary, and all three.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneFields {
    pub keywords: bool,
    pub summary: bool,
    pub strategy: bool,
}

impl GeneFields {
    pub const FULL: GeneFields = GeneFields {
        keywords: true,
        summary: true,
        strategy: true,
    };
    pub const KEYWORDS: GeneFields = GeneFields {
        keywords: true,
        summary: false,
        strategy: false,
    };
    pub const KEYWORDS_SUMMARY: GeneFields = GeneFields {
        keywords: true,
        summary: true,
        strategy: false,
    };

    fn form(self) -> Option<Form> {
        match (self.keywords, self.summary, self.strategy) {
            (true, true, true) => Some(Form::GeneFull),
            (true, true, false) => Some(Form::GeneKeywordsSummary),
            (true, false, false) => Some(Form::GeneKeywords),
            _ => None,
        }
    }
}

/// A skill render request: the whole package or one named section.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkillRequest {
    All,
    Section(SkillSection),
}

/// Rendering configuration errors.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RenderError {
    #[error(
        "unsupported gene field subset; supported: keywords, keywords+summary, keywords+summary+strategy"
    )]
    UnsupportedFieldSubset,
    #[error("requested skill section {} is empty in this package", .0.name())]
    EmptySection(SkillSection),
    #[error("section {} cannot accompany a gene; allowed: api_notes, examples", .0.name())]
    SectionNotAllowed(SkillSection),
    #[error("multi-gene prompts cover 1 to 3 genes; got {0}")]
    TooManyGenes(usize),
    #[error("multi-gene prompts need at least one gene")]
    NoGenes,
    #[error("malformed failure history: {0}")]
    MalformedHistory(String),
    #[error("this encoding renders attempt history, but the history is empty")]
    EmptyHistory,
    #[error("declared outcome {declared} contradicts the attempt history")]
    OutcomeMismatch { declared: &'static str },
    #[error("failure_warnings_only requires at least one warning")]
    NoWarnings,
}

/// The bare `<strategy-gene>` block, restricted to the chosen fields.
pub(crate) fn gene_block_body(g: &Gene, fields: GeneFields) -> String {
    let mut lines = vec!["<strategy-gene>".to_string()];
    if fields.keywords {
        lines.push(format!("Domain keywords: {}", g.signals_match.join(", ")));
    }
    if fields.summary {
        lines.push(format!("Summary: {}", g.summary));
    }
    if fields.strategy {
        lines.push("Strategy:".to_string());
        for step in &g.strategy {
            let prefix = match step.kind {
                StepKind::Do => "",
                StepKind::Avoid => "AVOID: ",
            };
            lines.push(format!("  {}. {}{}", step.rank, prefix, step.text));
        }
    }
    lines.push("</strategy-gene>".to_string());
    lines.join("\n")
}

/// Renders a gene block under the standard preamble, restricted to the
/// chosen field subset.
pub fn render_gene(g: &Canonical<Gene>, fields: GeneFields) -> Result<ControlPrompt, RenderError> {
    let form = fields.form().ok_or(RenderError::UnsupportedFieldSubset)?;
    let text = format!("{GENE_PREAMBLE}\n\n{}", gene_block_body(g, fields));
    Ok(ControlPrompt::new(text, form, vec![g.asset_id().clone()]))
}

/// Renders a skill package: either every non-empty section in schema order
/// under the skill preamble, or one named section alone (no preamble).
pub fn render_skill(
    s: &Canonical<SkillPackage>,
    request: SkillRequest,
) -> Result<ControlPrompt, RenderError> {
    match request {
        SkillRequest::All => {
            let mut parts = vec![SKILL_PREAMBLE.to_string()];
            for sec in s.present_sections() {
                parts.push(format!("{}\n\n{}", sec.heading(), s.section(sec)));
            }
            Ok(ControlPrompt::new(
                parts.join("\n\n"),
                Form::SkillFull,
                vec![s.asset_id().clone()],
            ))
        }
        SkillRequest::Section(sec) => {
            let body = s.section(sec);
            if body.is_empty() {
                return Err(RenderError::EmptySection(sec));
            }
            Ok(ControlPrompt::new(
                format!("{}\n\n{}", sec.heading(), body),
                Form::SkillSection(sec),
                vec![s.asset_id().clone()],
            ))
        }
    }
}

/// Renders one skill section trimmed to a token budget (sentence-final cut
/// preferred).
pub fn render_skill_section_short(
    s: &Canonical<SkillPackage>,
    section: SkillSection,
    budget: usize,
) -> Result<ControlPrompt, RenderError> {
    let full = render_skill(s, SkillRequest::Section(section))?;
    let text = trim_to_budget(&full.text, budget);
    Ok(ControlPrompt::new(
        text,
        Form::SkillSectionShort(section),
        full.source_ids,
    ))
}

/// Renders a full gene block followed by one auxiliary documentation
/// section (`api_notes` or `examples`).
pub fn render_gene_plus_doc(
    g: &Canonical<Gene>,
    s: &Canonical<SkillPackage>,
    section: SkillSection,
) -> Result<ControlPrompt, RenderError> {
    if !matches!(section, SkillSection::ApiNotes | SkillSection::Examples) {
        return Err(RenderError::SectionNotAllowed(section));
    }
    let body = s.section(section);
    if body.is_empty() {
        return Err(RenderError::EmptySection(section));
    }
    let gene = render_gene(g, GeneFields::FULL)?;
    let text = format!("{}\n\n{}\n\n{}", gene.text, section.heading(), body);
    Ok(ControlPrompt::new(
        text,
        Form::GenePlusDoc(section),
        vec![g.asset_id().clone(), s.asset_id().clone()],
    ))
}

/// Renders one to three full gene blocks in caller order under a single
/// preamble. One gene is byte-identical to [`render_gene`] with all fields.
pub fn render_multi(genes: &[Canonical<Gene>]) -> Result<ControlPrompt, RenderError> {
    if genes.is_empty() {
        return Err(RenderError::NoGenes);
    }
    if genes.len() > 3 {
        return Err(RenderError::TooManyGenes(genes.len()));
    }
    let blocks: Vec<String> = genes
        .iter()
        .map(|g| gene_block_body(g, GeneFields::FULL))
        .collect();
    let text = format!("{GENE_PREAMBLE}\n\n{}", blocks.join("\n\n"));
    let ids = genes.iter().map(|g| g.asset_id().clone()).collect();
    Ok(ControlPrompt::new(text, Form::MultiGene(genes.len()), ids))
}

/// Ensures `text` reads as a finished sentence.
fn sentence(text: &str) -> String {
    if text.ends_with(['.', '!', '?']) {
        text.to_string()
    } else {
        format!("{text}.")
    }
}

fn lowercase_first(text: &str) -> String {
    let mut chars = text.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Flattens a gene into one prose paragraph: no tags, no numbering, no
/// field labels. The content words of the gene are preserved exactly
/// (case-insensitively); only fixed template sentences are added.
pub fn flatten_to_prose(g: &Canonical<Gene>) -> ControlPrompt {
    let mut sentences = vec![format!(
        "This strategy applies to work involving {}.",
        g.signals_match.join(", ")
    )];
    sentences.push(sentence(&g.summary));
    for step in &g.strategy {
        match step.kind {
            StepKind::Do => {
                sentences.push(sentence(&format!(
                    "Be sure to {}",
                    lowercase_first(&step.text)
                )));
            }
            StepKind::Avoid => {
                sentences.push("Take care to avoid the following pitfall.".to_string());
                sentences.push(sentence(&step.text));
            }
        }
    }
    ControlPrompt::new(
        sentences.join(" "),
        Form::GeneFlattened,
        vec![g.asset_id().clone()],
    )
}

/// The strategy-bearing payload that failure history attaches to.
#[derive(Clone, Copy, Debug)]
pub enum CarrierPayload<'a> {
    Gene(&'a Canonical<Gene>),
    Skill(&'a Canonical<SkillPackage>),
    Freeform(&'a str),
}

impl CarrierPayload<'_> {
    fn carrier(&self) -> Carrier {
        match self {
            CarrierPayload::Gene(_) => Carrier::Gene,
            CarrierPayload::Skill(_) => Carrier::Skill,
            CarrierPayload::Freeform(_) => Carrier::Freeform,
        }
    }

    fn render(&self) -> Result<(String, Vec<AssetId>), RenderError> {
        match self {
            CarrierPayload::Gene(g) => {
                let p = render_gene(g, GeneFields::FULL)?;
                Ok((p.text, p.source_ids))
            }
            CarrierPayload::Skill(s) => {
                let p = render_skill(s, SkillRequest::All)?;
                Ok((p.text, p.source_ids))
            }
            CarrierPayload::Freeform(text) => Ok((text.to_string(), Vec::new())),
        }
    }
}

/// Combines a carrier with failure history under the chosen encoding.
///
/// - `failure_first` / `strategy_first`: headed history block before/after
///   the carrier.
/// - `strategy_only`: the carrier alone (history dropped).
/// - `failure_warnings_only`: the distilled warnings alone (carrier
///   dropped; its assets do not appear in `source_ids`).
/// - `append`: carrier followed by bare attempt lines, no header.
pub fn attach_failure(
    payload: CarrierPayload<'_>,
    fh: &FailureHistory,
    encoding: FailureEncoding,
) -> Result<ControlPrompt, RenderError> {
    let form = Form::CarrierFailure(payload.carrier(), encoding);
    match encoding {
        FailureEncoding::StrategyOnly => {
            let (text, sources) = payload.render()?;
            Ok(ControlPrompt::new(text, form, sources))
        }
        FailureEncoding::FailureWarningsOnly => {
            if fh.warnings.is_empty() {
                return Err(RenderError::NoWarnings);
            }
            let lines: Vec<String> = fh.warnings.iter().map(|w| format!("- {w}")).collect();
            let text = format!("{WARNINGS_HEADER}\n{}", lines.join("\n"));
            Ok(ControlPrompt::new(text, form, Vec::new()))
        }
        FailureEncoding::FailureFirst
        | FailureEncoding::StrategyFirst
        | FailureEncoding::Append => {
            fh.check()?;
            if fh.attempts.is_empty() {
                return Err(RenderError::EmptyHistory);
            }
            let (carrier_text, sources) = payload.render()?;
            let lines = fh.attempt_lines("").join("\n");
            let text = match encoding {
                FailureEncoding::FailureFirst => {
                    format!("{FAILURE_HEADER}\n\n{lines}\n\n{carrier_text}")
                }
                FailureEncoding::StrategyFirst => {
                    format!("{carrier_text}\n\n{FAILURE_HEADER}\n\n{lines}")
                }
                FailureEncoding::Append => format!("{carrier_text}\n\n{lines}"),
                _ => unreachable!("other encodings handled above"),
            };
            Ok(ControlPrompt::new(text, form, sources))
        }
    }
}

/// Wraps a validated gene and its attempt history in the evolution-event
/// template. The declared outcome must agree with the history: `success`
/// if and only if the final attempt is PASSED.
pub fn wrap_evolution_event(
    g: &Canonical<Gene>,
    fh: &FailureHistory,
    meta: &EvolutionMeta,
) -> Result<ControlPrompt, RenderError> {
    fh.check()?;
    let declared_success = meta.outcome == EvolutionOutcome::Success;
    if fh.ends_passed() != declared_success {
        return Err(RenderError::OutcomeMismatch {
            declared: meta.outcome.as_str(),
        });
    }
    let gene = render_gene(g, GeneFields::FULL)?;
    let mut parts: Vec<String> = vec![
        EVOLUTION_HEADER.to_string(),
        String::new(),
        format!(
            "<evolution-event intent=\"{}\" mutations_tried=\"{}\" outcome=\"{}\">",
            meta.intent,
            meta.mutations_tried,
            meta.outcome.as_str()
        ),
        "  <history>".to_string(),
    ];
    parts.extend(fh.attempt_lines("    "));
    parts.push("  </history>".to_string());
    parts.push("  <validated-gene>".to_string());
    parts.push(gene.text);
    parts.push("  </validated-gene>".to_string());
    parts.push("</evolution-event>".to_string());
    Ok(ControlPrompt::new(
        parts.join("\n"),
        Form::EvolutionWrapped,
        vec![g.asset_id().clone()],
    ))
}
