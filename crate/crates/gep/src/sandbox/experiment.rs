//! The experiment runner: a declarative grid of conditions × scenarios ×
//! models × repeats, executed with a bounded worker pool and reported as
//! exact-rational tables.
//!
//! A run is deterministic end to end when its backends are deterministic
//! (replay or scripted): trials are sorted into a canonical order before
//! anything is written, artifact paths are stored relative to the output
//! directory, and no timestamps enter the outputs — so rerunning the same
//! configuration reproduces `trials.ndjson`, `report.csv`, `report.txt`,
//! and `manifest.json` byte for byte, regardless of worker count or the
//! order the grid was declared in.
//!
//! Every part of the configuration is validated — scenario packs loaded,
//! condition recipes resolved against the store, backends constructed —
//! before the first trial runs, so a misconfigured run fails fast instead
//! of half-executing.

use super::{
    aggregate, delta_vs_baseline, format_percent, ratio_opt_serde, ratio_serde, run_trial,
    ConditionSummary, EvalError, Scenario, TrialContext, TrialResult, TrialStatus,
};
use crate::gateway::{Backend, BackendSpec, GenerationRequest, InferenceConfig};
use crate::objects::{sha256_hex, AssetId, Canonical, Gene, SkillPackage, SkillSection};
use crate::rate::{format_delta_pp, Rate};
use crate::render::{
    attach_failure, flatten_to_prose, render_gene, render_gene_plus_doc, render_multi,
    render_skill, render_skill_section_short, wrap_evolution_event, Attempt, CarrierPayload,
    ControlPrompt, EvolutionMeta, EvolutionOutcome, FailureEncoding, FailureHistory, GeneFields,
    SkillRequest,
};
use crate::store::Store;
use num_rational::Rational64;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;

fn default_workers() -> u32 {
    4
}

/// One attempt line of a configured failure history.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttemptSpec {
    pub description: String,
    pub passed: bool,
}

impl AttemptSpec {
    fn to_attempt(&self) -> Attempt {
        if self.passed {
            Attempt::passed(&self.description)
        } else {
            Attempt::failed(&self.description)
        }
    }
}

/// Declarative description of how a condition's control prompt is built.
///
/// Gene references accept either a 64-hex asset id or a gene id (resolved to
/// the newest stored revision); skill references must be asset ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum RenderRecipe {
    /// No control prompt (the uninstructed baseline).
    None,
    GeneFull {
        gene: String,
    },
    GeneKeywords {
        gene: String,
    },
    GeneKeywordsSummary {
        gene: String,
    },
    SkillFull {
        skill: String,
    },
    SkillSection {
        skill: String,
        section: SkillSection,
    },
    SkillSectionShort {
        skill: String,
        section: SkillSection,
        budget: usize,
    },
    GenePlusDoc {
        gene: String,
        skill: String,
        section: SkillSection,
    },
    MultiGene {
        genes: Vec<String>,
    },
    GeneFlattened {
        gene: String,
    },
    CarrierFailure {
        gene: String,
        encoding: FailureEncoding,
        #[serde(default)]
        attempts: Vec<AttemptSpec>,
        #[serde(default)]
        warnings: Vec<String>,
    },
    EvolutionWrapped {
        gene: String,
        intent: String,
        #[serde(default)]
        attempts: Vec<AttemptSpec>,
    },
}

/// A model under evaluation and the backend that serves it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model_id: String,
    pub backend: BackendSpec,
}

/// A named experimental condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub id: String,
    pub recipe: RenderRecipe,
}

/// A full experiment: which store feeds the conditions, which scenario
/// packs and models make up the grid, and where results go.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Asset store directory (relative paths resolve against the config's
    /// base directory).
    pub store: PathBuf,
    /// Scenario pack directories.
    pub scenarios: Vec<PathBuf>,
    pub models: Vec<ModelSpec>,
    pub conditions: Vec<ConditionSpec>,
    /// Condition id deltas are measured against.
    pub baseline: String,
    pub trials_per_cell: u32,
    /// Worker threads; affects wall-clock time only, never results.
    #[serde(default = "default_workers")]
    pub workers: u32,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Reads a config from a JSON file.
    pub fn load(path: &Path) -> Result<ExperimentConfig, EvalError> {
        let text = fs::read_to_string(path)
            .map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))
    }

    /// Content digest identifying the experiment. Execution-only settings
    /// (`output_dir`, `workers`) are excluded, so the digest is stable
    /// across re-runs into different directories or at different
    /// parallelism.
    pub fn digest(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let obj = value.as_object_mut().expect("config is an object");
        obj.remove("output_dir");
        obj.remove("workers");
        sha256_hex(value.to_string().as_bytes())
    }
}

/// One row of the cross-model report table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition_id: String,
    /// Pass rate per model, in `table.model_ids` order.
    pub per_model: Vec<Rate>,
    /// Cross-model average pass rate, exact.
    #[serde(with = "ratio_serde")]
    pub avg: Rational64,
    /// Percentage points vs the baseline row's average; `None` on the
    /// baseline row.
    #[serde(default, with = "ratio_opt_serde")]
    pub delta_pp: Option<Rational64>,
}

/// The two-layer report: per-model pass rates and the cross-model average
/// with baseline deltas, rows sorted by ascending average.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportTable {
    pub model_ids: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// Everything a finished run reports, written to `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_digest: String,
    pub baseline: String,
    pub n_trials: u32,
    /// One summary per (condition, model) cell, sorted by condition then
    /// model.
    pub summaries: Vec<ConditionSummary>,
    pub table: ReportTable,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Looks up a gene by asset id or, failing that, by gene id (newest
/// revision).
pub fn lookup_gene(store: &Store, reference: &str) -> Result<Canonical<Gene>, EvalError> {
    if let Ok(id) = AssetId::parse(reference) {
        return Ok(store.get_gene(&id)?);
    }
    let id = store.latest_gene(reference).ok_or_else(|| {
        EvalError::Config(format!("no stored gene matches reference {reference:?}"))
    })?;
    Ok(store.get_gene(&id)?)
}

/// Looks up a skill package; only asset ids are accepted (skills have no
/// stable secondary name).
pub fn lookup_skill(store: &Store, reference: &str) -> Result<Canonical<SkillPackage>, EvalError> {
    let id = AssetId::parse(reference).map_err(|_| {
        EvalError::Config(format!(
            "skill reference {reference:?} is not a 64-hex asset id"
        ))
    })?;
    Ok(store.get_skill(&id)?)
}

/// Resolves a recipe into its control prompt against the store.
pub fn resolve_control(store: &Store, recipe: &RenderRecipe) -> Result<ControlPrompt, EvalError> {
    match recipe {
        RenderRecipe::None => Ok(ControlPrompt::none()),
        RenderRecipe::GeneFull { gene } => {
            Ok(render_gene(&lookup_gene(store, gene)?, GeneFields::FULL)?)
        }
        RenderRecipe::GeneKeywords { gene } => Ok(render_gene(
            &lookup_gene(store, gene)?,
            GeneFields::KEYWORDS,
        )?),
        RenderRecipe::GeneKeywordsSummary { gene } => Ok(render_gene(
            &lookup_gene(store, gene)?,
            GeneFields::KEYWORDS_SUMMARY,
        )?),
        RenderRecipe::SkillFull { skill } => {
            Ok(render_skill(&lookup_skill(store, skill)?, SkillRequest::All)?)
        }
        RenderRecipe::SkillSection { skill, section } => Ok(render_skill(
            &lookup_skill(store, skill)?,
            SkillRequest::Section(*section),
        )?),
        RenderRecipe::SkillSectionShort {
            skill,
            section,
            budget,
        } => Ok(render_skill_section_short(
            &lookup_skill(store, skill)?,
            *section,
            *budget,
        )?),
        RenderRecipe::GenePlusDoc {
            gene,
            skill,
            section,
        } => Ok(render_gene_plus_doc(
            &lookup_gene(store, gene)?,
            &lookup_skill(store, skill)?,
            *section,
        )?),
        RenderRecipe::MultiGene { genes } => {
            let resolved: Vec<Canonical<Gene>> = genes
                .iter()
                .map(|g| lookup_gene(store, g))
                .collect::<Result<_, _>>()?;
            Ok(render_multi(&resolved)?)
        }
        RenderRecipe::GeneFlattened { gene } => Ok(flatten_to_prose(&lookup_gene(store, gene)?)),
        RenderRecipe::CarrierFailure {
            gene,
            encoding,
            attempts,
            warnings,
        } => {
            let g = lookup_gene(store, gene)?;
            let history = FailureHistory::new(attempts.iter().map(AttemptSpec::to_attempt).collect())
                .with_warnings(warnings.clone());
            Ok(attach_failure(CarrierPayload::Gene(&g), &history, *encoding)?)
        }
        RenderRecipe::EvolutionWrapped {
            gene,
            intent,
            attempts,
        } => {
            let g = lookup_gene(store, gene)?;
            let history =
                FailureHistory::new(attempts.iter().map(AttemptSpec::to_attempt).collect());
            let outcome = if history.ends_passed() {
                EvolutionOutcome::Success
            } else {
                EvolutionOutcome::Failure
            };
            let meta = EvolutionMeta {
                intent: intent.clone(),
                mutations_tried: attempts.len() as u32,
                outcome,
            };
            Ok(wrap_evolution_event(&g, &history, &meta)?)
        }
    }
}

/// Replaces path characters that would change directory structure.
fn sanitize_component(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

struct Job {
    condition: usize,
    scenario: usize,
    model: usize,
    trial: u32,
}

fn validate_shape(config: &ExperimentConfig) -> Result<(), EvalError> {
    if config.name.is_empty() {
        return Err(EvalError::Config("experiment name must be non-empty".into()));
    }
    if config.trials_per_cell == 0 {
        return Err(EvalError::Config("trials_per_cell must be at least 1".into()));
    }
    if config.workers == 0 {
        return Err(EvalError::Config("workers must be at least 1".into()));
    }
    if config.scenarios.is_empty() {
        return Err(EvalError::Config("at least one scenario is required".into()));
    }
    if config.models.is_empty() {
        return Err(EvalError::Config("at least one model is required".into()));
    }
    if config.conditions.is_empty() {
        return Err(EvalError::Config("at least one condition is required".into()));
    }
    let mut ids = BTreeSet::new();
    for m in &config.models {
        if m.model_id.is_empty() {
            return Err(EvalError::Config("model_id must be non-empty".into()));
        }
        if !ids.insert(&m.model_id) {
            return Err(EvalError::Config(format!(
                "duplicate model_id {:?}",
                m.model_id
            )));
        }
    }
    let mut ids = BTreeSet::new();
    for c in &config.conditions {
        if c.id.is_empty() {
            return Err(EvalError::Config("condition id must be non-empty".into()));
        }
        if !ids.insert(&c.id) {
            return Err(EvalError::Config(format!("duplicate condition id {:?}", c.id)));
        }
    }
    if !config.conditions.iter().any(|c| c.id == config.baseline) {
        return Err(EvalError::Config(format!(
            "baseline {:?} is not a configured condition",
            config.baseline
        )));
    }
    Ok(())
}

/// Runs the full grid and writes `trials.ndjson`, `report.csv`,
/// `report.txt`, and `manifest.json` into the output directory. Relative
/// paths in the config resolve against `base_dir`.
pub fn run_experiment(
    config: &ExperimentConfig,
    base_dir: &Path,
) -> Result<RunManifest, EvalError> {
    // Validate everything before the first trial.
    validate_shape(config)?;
    let store = Store::open(resolve(base_dir, &config.store))?;
    let mut scenarios = Vec::new();
    let mut seen = BTreeSet::new();
    for pack in &config.scenarios {
        let s = Scenario::load_pack(&resolve(base_dir, pack))?;
        if !seen.insert(s.id.clone()) {
            return Err(EvalError::Config(format!("duplicate scenario id {:?}", s.id)));
        }
        scenarios.push(s);
    }
    let controls: Vec<ControlPrompt> = config
        .conditions
        .iter()
        .map(|c| resolve_control(&store, &c.recipe))
        .collect::<Result<_, _>>()?;
    let backends: Vec<Box<dyn Backend>> = config
        .models
        .iter()
        .map(|m| m.backend.build(base_dir).map_err(EvalError::from))
        .collect::<Result<_, _>>()?;

    let output_dir = resolve(base_dir, &config.output_dir);
    fs::create_dir_all(&output_dir)?;

    // Lay out the grid.
    let mut jobs = VecDeque::new();
    for (ci, _) in config.conditions.iter().enumerate() {
        for (si, _) in scenarios.iter().enumerate() {
            for (mi, _) in config.models.iter().enumerate() {
                for t in 0..config.trials_per_cell {
                    jobs.push_back(Job {
                        condition: ci,
                        scenario: si,
                        model: mi,
                        trial: t,
                    });
                }
            }
        }
    }
    let n_jobs = jobs.len();
    let n_workers = (config.workers as usize).min(n_jobs).max(1);

    let queue = Mutex::new(jobs);
    let results: Mutex<Vec<(u32, TrialResult)>> = Mutex::new(Vec::with_capacity(n_jobs));
    thread::scope(|scope| {
        for _ in 0..n_workers {
            scope.spawn(|| loop {
                let job = queue.lock().expect("queue lock").pop_front();
                let Some(job) = job else { break };
                let condition = &config.conditions[job.condition];
                let scenario = &scenarios[job.scenario];
                let model = &config.models[job.model];
                let trial_dir = output_dir
                    .join("trials")
                    .join(sanitize_component(&condition.id))
                    .join(sanitize_component(&scenario.id))
                    .join(sanitize_component(&model.model_id))
                    .join(format!("t{}", job.trial));
                let ctx = TrialContext {
                    condition_id: condition.id.clone(),
                    model_id: model.model_id.clone(),
                    trial_dir,
                };
                let request = GenerationRequest::new(
                    InferenceConfig::for_model(&model.model_id),
                    controls[job.condition].clone(),
                    scenario.task_text.clone(),
                    format!(
                        "{}/{}/{}/t{}",
                        condition.id, scenario.id, model.model_id, job.trial
                    ),
                );
                let result = match backends[job.model].generate(&request) {
                    Ok(generation) => run_trial(scenario, &generation.text, &ctx),
                    Err(err) => {
                        let _ = fs::create_dir_all(&ctx.trial_dir);
                        let _ = fs::write(
                            ctx.trial_dir.join("generation_error.log"),
                            format!("{err}\n"),
                        );
                        TrialResult::failed(scenario, &ctx, TrialStatus::GenerationError, None)
                    }
                };
                results.lock().expect("results lock").push((job.trial, result));
            });
        }
    });

    let mut trials = results.into_inner().expect("results lock");
    trials.sort_by(|(ta, a), (tb, b)| {
        (&a.scenario_id, &a.condition_id, &a.model_id, ta).cmp(&(
            &b.scenario_id,
            &b.condition_id,
            &b.model_id,
            tb,
        ))
    });
    let mut trials: Vec<TrialResult> = trials.into_iter().map(|(_, r)| r).collect();

    // Store artifact paths relative to the output directory so reruns into
    // different directories stay byte-identical.
    for trial in &mut trials {
        if let Some(a) = &mut trial.artifacts {
            for p in [&mut a.program, &mut a.stdout] {
                if let Ok(rel) = p.strip_prefix(&output_dir) {
                    *p = rel.to_path_buf();
                }
            }
            if let Some(report) = &mut a.checker_report {
                if let Ok(rel) = report.strip_prefix(&output_dir) {
                    *report = rel.to_path_buf();
                }
            }
        }
    }

    let manifest = build_manifest(config, &trials)?;
    write_outputs(&output_dir, &trials, &manifest)?;
    Ok(manifest)
}

/// Aggregates sorted trials into per-cell summaries and the report table.
fn build_manifest(
    config: &ExperimentConfig,
    trials: &[TrialResult],
) -> Result<RunManifest, EvalError> {
    let mut cells: BTreeMap<(String, String), Vec<TrialResult>> = BTreeMap::new();
    for t in trials {
        cells
            .entry((t.condition_id.clone(), t.model_id.clone()))
            .or_default()
            .push(t.clone());
    }
    let mut summaries: Vec<ConditionSummary> = cells
        .values()
        .map(|cell| aggregate(cell))
        .collect::<Result<_, _>>()?;

    // Per-model deltas against the baseline condition.
    let baseline_by_model: BTreeMap<String, ConditionSummary> = summaries
        .iter()
        .filter(|s| s.condition_id == config.baseline)
        .map(|s| (s.model_id.clone(), s.clone()))
        .collect();
    for s in &mut summaries {
        if s.condition_id == config.baseline {
            continue;
        }
        let base = baseline_by_model.get(&s.model_id).ok_or_else(|| {
            EvalError::Config(format!(
                "baseline {:?} has no trials for model {:?}",
                config.baseline, s.model_id
            ))
        })?;
        s.delta_pp = Some(delta_vs_baseline(s, base)?);
    }

    // Cross-model layer.
    let mut model_ids: Vec<String> = config.models.iter().map(|m| m.model_id.clone()).collect();
    model_ids.sort();
    let by_cell: BTreeMap<(String, String), &ConditionSummary> = summaries
        .iter()
        .map(|s| ((s.condition_id.clone(), s.model_id.clone()), s))
        .collect();
    let avg_for = |condition_id: &str| -> Result<(Vec<Rate>, Rational64), EvalError> {
        let mut per_model = Vec::new();
        let mut sum = Rational64::zero();
        for m in &model_ids {
            let s = by_cell
                .get(&(condition_id.to_string(), m.clone()))
                .ok_or_else(|| {
                    EvalError::Config(format!(
                        "condition {condition_id:?} has no trials for model {m:?}"
                    ))
                })?;
            per_model.push(s.pass_rate);
            sum += s.pass_rate.ratio();
        }
        Ok((
            per_model,
            sum / Rational64::from_integer(model_ids.len() as i64),
        ))
    };
    let (_, baseline_avg) = avg_for(&config.baseline)?;
    let mut rows = Vec::new();
    for c in &config.conditions {
        let (per_model, avg) = avg_for(&c.id)?;
        let delta_pp = if c.id == config.baseline {
            None
        } else {
            Some((avg - baseline_avg) * Rational64::from_integer(100))
        };
        rows.push(ReportRow {
            condition_id: c.id.clone(),
            per_model,
            avg,
            delta_pp,
        });
    }
    rows.sort_by(|a, b| a.avg.cmp(&b.avg).then_with(|| a.condition_id.cmp(&b.condition_id)));

    Ok(RunManifest {
        name: config.name.clone(),
        config_digest: config.digest(),
        baseline: config.baseline.clone(),
        n_trials: trials.len() as u32,
        summaries,
        table: ReportTable { model_ids, rows },
    })
}

fn write_outputs(
    output_dir: &Path,
    trials: &[TrialResult],
    manifest: &RunManifest,
) -> Result<(), EvalError> {
    let mut ndjson = String::new();
    for t in trials {
        ndjson.push_str(&serde_json::to_string(t).expect("trial serializes"));
        ndjson.push('\n');
    }
    fs::write(output_dir.join("trials.ndjson"), ndjson)?;

    fs::write(output_dir.join("report.csv"), render_csv(manifest)?)?;
    fs::write(output_dir.join("report.txt"), render_table(manifest))?;

    let mut manifest_json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    manifest_json.push('\n');
    fs::write(output_dir.join("manifest.json"), manifest_json)?;
    Ok(())
}

/// Long-form per-cell report: one row per (condition, model).
pub fn render_csv(manifest: &RunManifest) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "condition",
        "model",
        "n_trials",
        "pass_rate",
        "pass_rate_pct",
        "complete_pass_rate",
        "delta_pp",
    ])
    .map_err(|e| EvalError::Io(e.to_string()))?;
    for s in &manifest.summaries {
        w.write_record([
            s.condition_id.as_str(),
            s.model_id.as_str(),
            &s.n_trials.to_string(),
            &s.pass_rate.to_string(),
            &s.pass_rate.percent_1dp(),
            &s.complete_pass_rate.to_string(),
            &s.delta_pp.map(format_delta_pp).unwrap_or_default(),
        ])
        .map_err(|e| EvalError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| EvalError::Io(e.to_string()))
}

/// Human-readable two-layer table: per-model pass rates, cross-model
/// average, and baseline delta, rows in ascending average order.
pub fn render_table(manifest: &RunManifest) -> String {
    let headers: Vec<String> = ["condition"]
        .into_iter()
        .map(str::to_string)
        .chain(manifest.table.model_ids.iter().cloned())
        .chain(["avg".to_string(), "Δpp".to_string()])
        .collect();
    let mut rows: Vec<Vec<String>> = Vec::new();
    for row in &manifest.table.rows {
        let mut cells = vec![row.condition_id.clone()];
        for r in &row.per_model {
            cells.push(format!("{}%", r.percent_1dp()));
        }
        cells.push(format_percent(row.avg));
        cells.push(match row.delta_pp {
            Some(d) => format_delta_pp(d),
            None => "–".to_string(),
        });
        rows.push(cells);
    }
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = format!(
        "experiment: {}\nbaseline: {}\ntrials: {}\n\n",
        manifest.name, manifest.baseline, manifest.n_trials
    );
    let format_row = |cells: &[String]| -> String {
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            let pad = widths[i].saturating_sub(cell.chars().count());
            if i == 0 {
                // Left-align the condition column.
                line.push_str(cell);
                line.push_str(&" ".repeat(pad));
            } else {
                line.push_str(&" ".repeat(pad));
                line.push_str(cell);
            }
        }
        while line.ends_with(' ') {
            line.pop();
        }
        line
    };
    out.push_str(&format_row(&headers));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in &rows {
        out.push_str(&format_row(row));
        out.push('\n');
    }
    out
}
