//! `gep` — operator surface for the gene-evolution protocol engine.
//!
//! Subcommand families map onto the library modules; every error is
//! reported as a single `gep: ...` diagnostic line on stderr with an exit
//! code identifying the failing family (see `exit_code` below and the
//! exit-code table in the README). Commands never edit existing assets:
//! they are read-only, idempotent (`store put`, `gene canon`), or
//! explicitly append-only (`mutate`, `evolve`).

use clap::{Parser, Subcommand, ValueEnum};
use gep::evolution::{self, EvolveError, LoopPlan};
use gep::gateway::GatewayError;
use gep::objects::{
    canonicalize, parse_gene_block, parse_object, AnyObject, AssetId, GeneBlockError, ObjectError,
};
use gep::perturb::{self, MutationMode, PerturbError, SubstitutionTable};
use gep::render::{FailureEncoding, RenderError};
use gep::sandbox::experiment::{
    lookup_gene, render_csv, render_table, resolve_control, AttemptSpec, ExperimentConfig,
    RenderRecipe, RunManifest,
};
use gep::sandbox::EvalError;
use gep::store::{Store, StoreError};
use gep::objects::SkillSection;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "gep",
    version,
    about = "Gene-evolution protocol engine",
    long_about = "Operator surface for the gene-evolution protocol engine: protocol objects, \
                  the content-addressed asset store, prompt rendering, perturbation, \
                  checkpoint experiments, and the six-stage evolution loop."
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate, canonicalize, or parse protocol objects
    Gene {
        #[command(subcommand)]
        cmd: GeneCmd,
    },
    /// Read and append to an asset store
    Store {
        #[command(subcommand)]
        cmd: StoreCmd,
    },
    /// Render a control prompt to stdout
    Render(RenderArgs),
    /// Mint and store a mutated gene; prints the new asset id
    Mutate(MutateArgs),
    /// Execute an experiment config; writes report + manifest
    Run {
        /// Experiment config file (JSON)
        #[arg(long)]
        config: PathBuf,
    },
    /// Execute one evolution-loop run; prints an event summary
    Evolve {
        /// NDJSON trace records to scan
        #[arg(long)]
        traces: PathBuf,
        /// Loop plan file (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Write the full loop report here as JSON
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Re-emit report tables from a persisted run manifest
    Report {
        /// Run manifest file (manifest.json from a previous `gep run`)
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
        format: ReportFormat,
    },
}

#[derive(Subcommand)]
enum GeneCmd {
    /// Exit 0 iff the file is a valid protocol object
    Validate { file: PathBuf },
    /// Print the asset id of the canonicalized object (deterministic)
    Canon {
        file: PathBuf,
        /// Print the canonical JSON bytes instead of the asset id
        #[arg(long)]
        emit: bool,
    },
    /// Parse a strategy-gene block into gene JSON on stdout
    Parse { file: PathBuf },
}

#[derive(Subcommand)]
enum StoreCmd {
    /// Canonicalize and store an object file; prints its asset id (idempotent)
    Put {
        file: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
    /// Print an asset's exact canonical bytes
    Get {
        asset_id: String,
        #[arg(long)]
        store: PathBuf,
    },
    /// Print the event ledger as JSON lines
    Log {
        #[arg(long)]
        store: PathBuf,
        /// Only events from this run
        #[arg(long)]
        run: Option<String>,
    },
    /// Print an asset's lineage events as JSON lines, oldest first
    Lineage {
        asset_id: String,
        #[arg(long)]
        store: PathBuf,
    },
}

#[derive(clap::Args)]
struct RenderArgs {
    /// Asset store holding the referenced objects
    #[arg(long)]
    store: PathBuf,
    /// Representational form (a render-recipe name, e.g. gene_full)
    #[arg(long)]
    form: String,
    /// Gene reference: asset id or gene id (repeatable for multi_gene)
    #[arg(long = "gene")]
    genes: Vec<String>,
    /// Skill package asset id
    #[arg(long)]
    skill: Option<String>,
    /// Skill section (e.g. api_notes) for section forms
    #[arg(long)]
    section: Option<String>,
    /// Token budget for skill_section_short
    #[arg(long)]
    budget: Option<usize>,
    /// Failure-history encoding for carrier_failure
    #[arg(long)]
    encoding: Option<String>,
    /// NDJSON file of {"description", "passed"} attempt records
    #[arg(long)]
    attempts: Option<PathBuf>,
    /// Distilled warning line (repeatable)
    #[arg(long = "warning")]
    warnings: Vec<String>,
    /// Intent line for evolution_wrapped
    #[arg(long)]
    intent: Option<String>,
}

#[derive(clap::Args)]
struct MutateArgs {
    /// Asset store to read the gene from and write the mutant into
    #[arg(long)]
    store: PathBuf,
    /// Mutation operator
    #[arg(long, value_enum)]
    mode: MutateMode,
    /// Gene reference: asset id or gene id
    #[arg(long)]
    gene: String,
    /// Substitution table file (wrong_algorithm / wrong_domain / stale_paradigm)
    #[arg(long)]
    table: Option<PathBuf>,
    /// Constraint to append (repeatable; overconstrain only)
    #[arg(long = "constraint")]
    constraints: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MutateMode {
    InvertPriority,
    Overconstrain,
    WrongAlgorithm,
    WrongDomain,
    StaleParadigm,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Table,
}

/// CLI failure: one diagnostic line plus a family-identifying exit code.
#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Cli(String),
    #[error("{0}")]
    Object(#[from] ObjectError),
    #[error("{0}")]
    GeneBlock(#[from] GeneBlockError),
    #[error("{0}")]
    Store(#[from] StoreError),
    #[error("{0}")]
    Render(#[from] RenderError),
    #[error("{0}")]
    Perturb(#[from] PerturbError),
    #[error("{0}")]
    Gateway(#[from] GatewayError),
    #[error("{0}")]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Evolve(EvolveError),
}

impl From<EvolveError> for CliError {
    fn from(e: EvolveError) -> CliError {
        // Unwrap transparent wrappers so the exit code names the family
        // that actually failed.
        match e {
            EvolveError::Store(e) => CliError::Store(e),
            EvolveError::Gateway(e) => CliError::Gateway(e),
            EvolveError::Render(e) => CliError::Render(e),
            EvolveError::Perturb(e) => CliError::Perturb(e),
            EvolveError::Eval(e) => CliError::Eval(e),
            other => CliError::Evolve(other),
        }
    }
}

impl CliError {
    /// Exit-code table: 1 command-line/file plumbing, 2 usage (clap),
    /// 3 object validation, 4 store, 5 render, 6 perturbation, 7 gateway,
    /// 8 evaluation, 9 evolution.
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Cli(_) => 1,
            CliError::Object(_) | CliError::GeneBlock(_) => 3,
            CliError::Store(_) => 4,
            CliError::Render(_) => 5,
            CliError::Perturb(_) => 6,
            CliError::Gateway(_) => 7,
            CliError::Eval(_) => 8,
            CliError::Evolve(_) => 9,
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.command) {
        // One line, always: fold any multi-line detail into separators.
        let line = e.to_string().replace('\n', " | ");
        eprintln!("gep: {line}");
        std::process::exit(e.exit_code());
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Gene { cmd } => gene_cmd(cmd),
        Cmd::Store { cmd } => store_cmd(cmd),
        Cmd::Render(args) => render_cmd(args),
        Cmd::Mutate(args) => mutate_cmd(args),
        Cmd::Run { config } => run_cmd(&config),
        Cmd::Evolve {
            traces,
            config,
            manifest,
        } => evolve_cmd(&traces, &config, manifest.as_deref()),
        Cmd::Report { run, format } => report_cmd(&run, format),
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Cli(format!("cannot read {}: {e}", path.display())))
}

fn parse_asset_id(s: &str) -> Result<AssetId, CliError> {
    AssetId::parse(s).map_err(|e| CliError::Cli(format!("{s:?}: {e}")))
}

// -- gene -------------------------------------------------------------------

fn gene_cmd(cmd: GeneCmd) -> Result<(), CliError> {
    match cmd {
        GeneCmd::Validate { file } => {
            let obj = parse_object(&read_file(&file)?)?;
            println!("valid {}", obj.object_type());
            Ok(())
        }
        GeneCmd::Canon { file, emit } => {
            fn pair<T: gep::objects::Canonize>(obj: &T) -> Result<(AssetId, Vec<u8>), CliError> {
                let c = canonicalize(obj).map_err(StoreError::Invalid)?;
                Ok((c.asset_id().clone(), c.bytes().to_vec()))
            }
            let (id, bytes) = match parse_object(&read_file(&file)?)? {
                AnyObject::Gene(g) => pair(&g)?,
                AnyObject::Skill(s) => pair(&s)?,
                AnyObject::Capsule(c) => pair(&c)?,
                AnyObject::Event(e) => pair(&e)?,
            };
            if emit {
                std::io::stdout()
                    .write_all(&bytes)
                    .map_err(|e| CliError::Cli(format!("stdout: {e}")))?;
                println!();
            } else {
                println!("{id}");
            }
            Ok(())
        }
        GeneCmd::Parse { file } => {
            let gene = parse_gene_block(&read_file(&file)?)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&gene).expect("gene serializes")
            );
            Ok(())
        }
    }
}

// -- store ------------------------------------------------------------------

fn store_cmd(cmd: StoreCmd) -> Result<(), CliError> {
    match cmd {
        StoreCmd::Put { file, store } => {
            let store = Store::open(&store)?;
            let obj = parse_object(&read_file(&file)?)?;
            let (id, kind) = store.put_any(&obj)?;
            eprintln!("stored {kind}");
            println!("{id}");
            Ok(())
        }
        StoreCmd::Get { asset_id, store } => {
            let store = Store::open(&store)?;
            let asset = store.get_asset(&parse_asset_id(&asset_id)?)?;
            std::io::stdout()
                .write_all(&asset.bytes)
                .map_err(|e| CliError::Cli(format!("stdout: {e}")))?;
            println!();
            Ok(())
        }
        StoreCmd::Log { store, run } => {
            let store = Store::open(&store)?;
            let events = match run {
                Some(run_id) => store.events_for_run(&run_id),
                None => store.events(),
            };
            for event in events {
                println!(
                    "{}",
                    serde_json::to_string(&event).expect("event serializes")
                );
            }
            Ok(())
        }
        StoreCmd::Lineage { asset_id, store } => {
            let store = Store::open(&store)?;
            // Resolve first so a missing asset is an error, not empty output.
            let id = parse_asset_id(&asset_id)?;
            store.get_asset(&id)?;
            for event in store.lineage(&id) {
                println!(
                    "{}",
                    serde_json::to_string(&event).expect("event serializes")
                );
            }
            Ok(())
        }
    }
}

// -- render -------------------------------------------------------------------

/// Parses a serde-named enum value (snake_case) from a flag string.
fn named<T: serde::de::DeserializeOwned>(flag: &str, value: &str) -> Result<T, CliError> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|e| CliError::Cli(format!("--{flag} {value:?}: {e}")))
}

fn one_gene(args: &RenderArgs) -> Result<String, CliError> {
    match args.genes.as_slice() {
        [g] => Ok(g.clone()),
        _ => Err(CliError::Cli(format!(
            "form {:?} takes exactly one --gene",
            args.form
        ))),
    }
}

fn skill_ref(args: &RenderArgs) -> Result<String, CliError> {
    args.skill
        .clone()
        .ok_or_else(|| CliError::Cli(format!("form {:?} requires --skill", args.form)))
}

fn section(args: &RenderArgs) -> Result<SkillSection, CliError> {
    let value = args
        .section
        .as_deref()
        .ok_or_else(|| CliError::Cli(format!("form {:?} requires --section", args.form)))?;
    named("section", value)
}

fn load_attempts(path: Option<&Path>) -> Result<Vec<AttemptSpec>, CliError> {
    let Some(path) = path else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for (i, line) in read_file(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| {
            CliError::Cli(format!("attempts line {}: {e}", i + 1))
        })?);
    }
    Ok(out)
}

fn build_recipe(args: &RenderArgs) -> Result<RenderRecipe, CliError> {
    let recipe = match args.form.as_str() {
        "none" => RenderRecipe::None,
        "gene_full" => RenderRecipe::GeneFull {
            gene: one_gene(args)?,
        },
        "gene_keywords" => RenderRecipe::GeneKeywords {
            gene: one_gene(args)?,
        },
        "gene_keywords_summary" => RenderRecipe::GeneKeywordsSummary {
            gene: one_gene(args)?,
        },
        "skill_full" => RenderRecipe::SkillFull {
            skill: skill_ref(args)?,
        },
        "skill_section" => RenderRecipe::SkillSection {
            skill: skill_ref(args)?,
            section: section(args)?,
        },
        "skill_section_short" => RenderRecipe::SkillSectionShort {
            skill: skill_ref(args)?,
            section: section(args)?,
            budget: args.budget.ok_or_else(|| {
                CliError::Cli("form \"skill_section_short\" requires --budget".into())
            })?,
        },
        "gene_plus_doc" => RenderRecipe::GenePlusDoc {
            gene: one_gene(args)?,
            skill: skill_ref(args)?,
            section: section(args)?,
        },
        "multi_gene" => RenderRecipe::MultiGene {
            genes: args.genes.clone(),
        },
        "gene_flattened" => RenderRecipe::GeneFlattened {
            gene: one_gene(args)?,
        },
        "carrier_failure" => {
            let encoding: FailureEncoding = {
                let value = args.encoding.as_deref().ok_or_else(|| {
                    CliError::Cli("form \"carrier_failure\" requires --encoding".into())
                })?;
                named("encoding", value)?
            };
            RenderRecipe::CarrierFailure {
                gene: one_gene(args)?,
                encoding,
                attempts: load_attempts(args.attempts.as_deref())?,
                warnings: args.warnings.clone(),
            }
        }
        "evolution_wrapped" => RenderRecipe::EvolutionWrapped {
            gene: one_gene(args)?,
            intent: args
                .intent
                .clone()
                .ok_or_else(|| CliError::Cli("form \"evolution_wrapped\" requires --intent".into()))?,
            attempts: load_attempts(args.attempts.as_deref())?,
        },
        other => {
            return Err(CliError::Cli(format!(
                "unknown form {other:?}; expected one of none, gene_full, gene_keywords, \
                 gene_keywords_summary, skill_full, skill_section, skill_section_short, \
                 gene_plus_doc, multi_gene, gene_flattened, carrier_failure, evolution_wrapped"
            )))
        }
    };
    Ok(recipe)
}

fn render_cmd(args: RenderArgs) -> Result<(), CliError> {
    let store = Store::open(&args.store)?;
    let recipe = build_recipe(&args)?;
    let control = resolve_control(&store, &recipe)?;
    eprintln!(
        "form {} | {} tokens | sources: {}",
        control.form,
        control.token_count,
        if control.source_ids.is_empty() {
            "none".to_string()
        } else {
            control
                .source_ids
                .iter()
                .map(|id| id.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        }
    );
    println!("{}", control.text);
    Ok(())
}

// -- mutate -------------------------------------------------------------------

fn mutate_cmd(args: MutateArgs) -> Result<(), CliError> {
    let store = Store::open(&args.store)?;
    let original = lookup_gene(&store, &args.gene)?;
    let substitution = |mode: MutationMode| -> Result<perturb::Mutation, CliError> {
        let table_path = args.table.as_deref().ok_or_else(|| {
            CliError::Cli("this mode requires --table <substitution file>".into())
        })?;
        let table = SubstitutionTable::load(table_path)?;
        Ok(perturb::substitute_content(&original, &table, mode)?)
    };
    let mutation = match args.mode {
        MutateMode::InvertPriority => perturb::invert_priority(&original),
        MutateMode::Overconstrain => {
            if args.constraints.is_empty() {
                return Err(CliError::Cli(
                    "overconstrain requires at least one --constraint".into(),
                ));
            }
            perturb::overconstrain(&original, &args.constraints)?
        }
        MutateMode::WrongAlgorithm => substitution(MutationMode::WrongAlgorithm)?,
        MutateMode::WrongDomain => substitution(MutationMode::WrongDomain)?,
        MutateMode::StaleParadigm => substitution(MutationMode::StaleParadigm)?,
    };
    let new_id = store.put_gene(&mutation.gene)?;
    eprintln!("operator {}", mutation.operator);
    if let Some(warning) = &mutation.warning {
        eprintln!("warning: {warning}");
    }
    if mutation.diff.is_empty() {
        eprintln!("diff: (none)");
    } else {
        for line in mutation.diff.lines() {
            eprintln!("diff: {line}");
        }
    }
    println!("{new_id}");
    Ok(())
}

// -- run / report ---------------------------------------------------------------

fn base_dir(config: &Path) -> PathBuf {
    config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn run_cmd(config_path: &Path) -> Result<(), CliError> {
    let config = ExperimentConfig::load(config_path)?;
    let manifest = gep::sandbox::experiment::run_experiment(&config, &base_dir(config_path))?;
    eprintln!(
        "run {} | config digest {} | outputs in {}",
        manifest.name,
        manifest.config_digest,
        config.output_dir.display()
    );
    print!("{}", render_table(&manifest));
    Ok(())
}

fn report_cmd(manifest_path: &Path, format: ReportFormat) -> Result<(), CliError> {
    let manifest: RunManifest = serde_json::from_str(&read_file(manifest_path)?)
        .map_err(|e| CliError::Cli(format!("{}: {e}", manifest_path.display())))?;
    match format {
        ReportFormat::Csv => print!("{}", render_csv(&manifest)?),
        ReportFormat::Table => print!("{}", render_table(&manifest)),
    }
    Ok(())
}

// -- evolve -----------------------------------------------------------------------

fn evolve_cmd(
    traces_path: &Path,
    config_path: &Path,
    manifest_out: Option<&Path>,
) -> Result<(), CliError> {
    let plan = LoopPlan::load(config_path)?;
    let base = base_dir(config_path);
    let store = plan.open_store(&base)?;
    let backend = plan.build_backend(&base)?;
    let options = plan.loop_options(&base)?;
    let traces = evolution::read_traces(traces_path)?;

    let report = evolution::run_loop(&store, &traces, backend.as_ref(), &options)?;

    println!(
        "run {} | backend {} | model {}",
        report.run_id, report.backend_tag, report.model_id
    );
    println!(
        "intent: {} on {} ({:?} blast radius)",
        report.intent.objective.as_str(),
        report.intent.target_asset,
        report.intent.blast_radius
    );
    for event in &report.events {
        match &event.dst_asset {
            Some(dst) => println!("event {} {} -> {dst}", event.seq, event.event_type),
            None => println!("event {} {}", event.seq, event.event_type),
        }
    }
    match &report.solidified {
        Some(id) => println!("solidified {id}"),
        None => println!("solidified (nothing: validation {:?})", report.validation.result),
    }
    if let Some(capsule) = &report.capsule {
        println!("capsule {capsule}");
    }
    if let Some(path) = manifest_out {
        let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
        json.push('\n');
        std::fs::write(path, json)
            .map_err(|e| CliError::Cli(format!("cannot write {}: {e}", path.display())))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}
