//! Parsing `<strategy-gene>` blocks back into [`Gene`] objects.
//!
//! The textual block carries only the gene's content — keywords, summary,
//! and strategy steps — so the parser mints a deterministic identifier from
//! that content ([`derived_gene_id`]) and tags the result `manual`. A gene
//! built the same way round-trips through render and parse with identical
//! canonical bytes.

use super::canonical::{collapse_whitespace, normalize_keyword, sha256_hex};
use super::gene::{Gene, SourceTag, StepKind, StrategyStep};

/// Errors from [`parse_gene_block`]: either the block structure is wrong or
/// a required line is missing/empty.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum GeneBlockError {
    #[error("no <strategy-gene> block found")]
    MissingOpenTag,
    #[error("<strategy-gene> block is never closed with </strategy-gene>")]
    MissingCloseTag,
    #[error("found {0} <strategy-gene> blocks, expected exactly one")]
    MultipleBlocks(usize),
    #[error("missing required line {0:?}")]
    MissingLine(&'static str),
    #[error("required field {0:?} is empty")]
    EmptyField(String),
    #[error("strategy list has no steps")]
    NoSteps,
    #[error("malformed strategy step {line:?} (expected \"N. text\")")]
    MalformedStep { line: String },
    #[error("strategy steps must be numbered sequentially: expected {expected}, found {found}")]
    NonSequentialStep { expected: usize, found: usize },
}

const OPEN: &str = "<strategy-gene>";
const CLOSE: &str = "</strategy-gene>";

/// Deterministic identifier for a gene carried only as text: `gene_` plus
/// the first 12 hex chars of a digest over the normalized content.
pub fn derived_gene_id(keywords: &[String], summary: &str, strategy: &[StrategyStep]) -> String {
    let mut input = String::new();
    for k in keywords {
        input.push_str("k:");
        input.push_str(&normalize_keyword(k));
        input.push('\n');
    }
    input.push_str("s:");
    input.push_str(&collapse_whitespace(summary));
    input.push('\n');
    for step in strategy {
        input.push_str("t:");
        input.push_str(match step.kind {
            StepKind::Do => "DO ",
            StepKind::Avoid => "AVOID ",
        });
        input.push_str(&collapse_whitespace(&step.text));
        input.push('\n');
    }
    format!("gene_{}", &sha256_hex(input.as_bytes())[..12])
}

/// Parses the single `<strategy-gene>` block in `text` into a [`Gene`].
///
/// The block must contain, in order: a `Domain keywords:` line, a
/// `Summary:` line, a `Strategy:` line, and one or more numbered steps.
/// Steps whose text starts with `AVOID:` become `AVOID`-kind steps.
///
/// # Errors
///
/// Zero or multiple blocks are structure errors; a missing or empty
/// required line is a field error naming that line.
pub fn parse_gene_block(text: &str) -> Result<Gene, GeneBlockError> {
    let opens = text.matches(OPEN).count();
    if opens == 0 {
        return Err(GeneBlockError::MissingOpenTag);
    }
    if opens > 1 {
        return Err(GeneBlockError::MultipleBlocks(opens));
    }
    let start = text.find(OPEN).expect("counted above") + OPEN.len();
    let end = text[start..]
        .find(CLOSE)
        .ok_or(GeneBlockError::MissingCloseTag)?;
    let body = &text[start..start + end];

    let mut lines = body.lines().map(str::trim).filter(|l| !l.is_empty());

    let keywords_line = lines
        .next()
        .ok_or(GeneBlockError::MissingLine("Domain keywords:"))?;
    let keywords_raw = keywords_line
        .strip_prefix("Domain keywords:")
        .ok_or(GeneBlockError::MissingLine("Domain keywords:"))?;
    let keywords: Vec<String> = keywords_raw
        .split(',')
        .map(str::trim)
        .filter(|k| !k.is_empty())
        .map(str::to_string)
        .collect();
    if keywords.is_empty() {
        return Err(GeneBlockError::EmptyField("Domain keywords".to_string()));
    }

    let summary_line = lines.next().ok_or(GeneBlockError::MissingLine("Summary:"))?;
    let summary = summary_line
        .strip_prefix("Summary:")
        .ok_or(GeneBlockError::MissingLine("Summary:"))?
        .trim()
        .to_string();
    if summary.is_empty() {
        return Err(GeneBlockError::EmptyField("Summary".to_string()));
    }

    let strategy_line = lines.next().ok_or(GeneBlockError::MissingLine("Strategy:"))?;
    if strategy_line != "Strategy:" {
        return Err(GeneBlockError::MissingLine("Strategy:"));
    }

    let mut strategy = Vec::new();
    for line in lines {
        let (number, rest) = line
            .split_once(". ")
            .and_then(|(n, rest)| Some((n.parse::<usize>().ok()?, rest)))
            .ok_or_else(|| GeneBlockError::MalformedStep {
                line: line.to_string(),
            })?;
        let expected = strategy.len() + 1;
        if number != expected {
            return Err(GeneBlockError::NonSequentialStep {
                expected,
                found: number,
            });
        }
        let (kind, text) = match rest.strip_prefix("AVOID:") {
            Some(rest) => (StepKind::Avoid, rest.trim()),
            None => (StepKind::Do, rest.trim()),
        };
        if text.is_empty() {
            return Err(GeneBlockError::EmptyField(format!("step {number}")));
        }
        strategy.push(StrategyStep::new(kind, text, number as u32));
    }
    if strategy.is_empty() {
        return Err(GeneBlockError::NoSteps);
    }

    let id = derived_gene_id(&keywords, &summary, &strategy);
    Ok(Gene::new(id, keywords, summary, strategy, SourceTag::Manual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objects::canonicalize;

    const UV_VIS_BLOCK: &str = "\
<strategy-gene>
Domain keywords: uv-vis, peak detection, FWHM, unit conversion
Summary: Detect peaks and compute wavelength-domain peak properties correctly
Strategy:
  1. Detect peaks with prominence-based criteria
  2. Convert min_distance into sample-index units before peak detection
  3. AVOID: Report FWHM only after converting peak_widths outputs back to wavelength units
</strategy-gene>";

    #[test]
    fn parses_the_reference_block() {
        let gene = parse_gene_block(UV_VIS_BLOCK).unwrap();
        assert_eq!(gene.signals_match.len(), 4);
        assert_eq!(gene.signals_match[0], "uv-vis");
        assert_eq!(gene.strategy.len(), 3);
        assert_eq!(gene.strategy[2].kind, StepKind::Avoid);
        assert!(gene.strategy[2].text.starts_with("Report FWHM"));
        assert_eq!(gene.source_tag, SourceTag::Manual);
        assert!(Gene::id_is_valid(&gene.id));
        assert!(canonicalize(&gene).is_ok());
    }

    #[test]
    fn derived_id_is_stable_and_content_sensitive() {
        let a = parse_gene_block(UV_VIS_BLOCK).unwrap();
        let b = parse_gene_block(UV_VIS_BLOCK).unwrap();
        assert_eq!(a.id, b.id);
        let changed = UV_VIS_BLOCK.replace("prominence", "height");
        let c = parse_gene_block(&changed).unwrap();
        assert_ne!(a.id, c.id);
    }

    #[test]
    fn id_ignores_cosmetic_whitespace_and_case() {
        let shouted = UV_VIS_BLOCK.replace("uv-vis, peak detection", "UV-VIS,   Peak Detection");
        assert_eq!(
            parse_gene_block(UV_VIS_BLOCK).unwrap().id,
            parse_gene_block(&shouted).unwrap().id
        );
    }

    #[test]
    fn missing_close_tag_is_a_structure_error() {
        let open_only = UV_VIS_BLOCK.replace(CLOSE, "");
        assert_eq!(
            parse_gene_block(&open_only),
            Err(GeneBlockError::MissingCloseTag)
        );
    }

    #[test]
    fn zero_or_multiple_blocks_are_structure_errors() {
        assert_eq!(
            parse_gene_block("no block here"),
            Err(GeneBlockError::MissingOpenTag)
        );
        let twice = format!("{UV_VIS_BLOCK}\n{UV_VIS_BLOCK}");
        assert_eq!(
            parse_gene_block(&twice),
            Err(GeneBlockError::MultipleBlocks(2))
        );
    }

    #[test]
    fn missing_lines_are_named() {
        let no_summary = UV_VIS_BLOCK.replace("Summary: ", "Gist: ");
        assert_eq!(
            parse_gene_block(&no_summary),
            Err(GeneBlockError::MissingLine("Summary:"))
        );
        let no_keywords = UV_VIS_BLOCK.replace("Domain keywords:", "Keywords:");
        assert_eq!(
            parse_gene_block(&no_keywords),
            Err(GeneBlockError::MissingLine("Domain keywords:"))
        );
    }

    #[test]
    fn steps_must_be_sequential() {
        let gapped = UV_VIS_BLOCK.replace("  3. AVOID:", "  4. AVOID:");
        assert_eq!(
            parse_gene_block(&gapped),
            Err(GeneBlockError::NonSequentialStep {
                expected: 3,
                found: 4
            })
        );
    }

    #[test]
    fn surrounding_prose_is_ignored() {
        let wrapped = format!("preamble text\n\n{UV_VIS_BLOCK}\n\ntrailing text");
        assert!(parse_gene_block(&wrapped).is_ok());
    }
}
