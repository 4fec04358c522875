//! Checkpoint evaluation of generated programs under process isolation.
//!
//! A *scenario pack* is a directory holding a task description, a checker
//! executable, and a manifest declaring how many checkpoints the checker
//! scores. The engine hands a generated program to the checker inside a
//! fresh trial directory, with a scrubbed environment, its own process
//! group, and a hard wall-clock timeout; when the timeout fires the entire
//! process group is killed so stray grandchildren cannot outlive the trial.
//!
//! The checker communicates results over a one-line wire contract: the last
//! line of stdout that parses as `{"checkpoints":[{"id":…,"passed":…}]}`
//! is the authoritative summary. Everything else on stdout/stderr is noise
//! and is preserved in the trial log. When a valid summary is present the
//! checker's exit code is ignored.
//!
//! All scoring is exact: a trial's pass rate is the rational `p/n`, cell
//! means and baseline deltas stay rational, and rounding happens only in
//! display formatting.

pub mod experiment;

use crate::rate::{round_scaled_half_away, Rate};
use num_rational::Rational64;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

/// Seconds a killed process group is given to release its pipes before the
/// engine stops waiting for output.
const KILL_GRACE_SECONDS: u64 = 5;

/// Environment variables forwarded into checker processes; everything else
/// is scrubbed.
pub(crate) const ENV_WHITELIST: [&str; 4] = ["PATH", "HOME", "LANG", "TMPDIR"];

/// Errors from scenario loading, trial execution plumbing, and metric
/// aggregation.
#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    /// A scenario pack or experiment configuration is invalid.
    #[error("invalid evaluation configuration: {0}")]
    Config(String),
    /// An aggregate was requested over zero trials.
    #[error("cannot aggregate zero trials")]
    EmptyAggregation,
    /// Trials handed to one aggregate span more than one (condition, model)
    /// cell.
    #[error("trials span more than one (condition, model) cell: {0}")]
    MixedCell(String),
    /// A baseline delta was requested across different model scopes.
    #[error("baseline delta requires matching model scope: {left} vs {right}")]
    ModelScopeMismatch { left: String, right: String },
    /// A cross-model average saw the same model twice.
    #[error("duplicate model in cross-model average: {0}")]
    DuplicateModel(String),
    /// Filesystem failure outside any single trial (trial-local failures are
    /// folded into the trial's status instead).
    #[error("evaluation i/o failure: {0}")]
    Io(String),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Gateway(#[from] crate::gateway::GatewayError),
    #[error(transparent)]
    Render(#[from] crate::render::RenderError),
}

impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        EvalError::Io(e.to_string())
    }
}

fn default_timeout() -> u64 {
    120
}

/// On-disk manifest of a scenario pack (`meta.json`).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PackMeta {
    id: String,
    n_checkpoints: u32,
    #[serde(default = "default_timeout")]
    timeout_seconds: u64,
    checker: String,
}

/// A loaded, validated scenario: the task text shown to the model and the
/// checker that scores generated programs against `n_checkpoints` binary
/// checkpoints within `timeout_seconds` of wall clock.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub id: String,
    pub task_text: String,
    /// Absolute path to the checker executable.
    pub checker: PathBuf,
    pub n_checkpoints: u32,
    pub timeout_seconds: u64,
}

impl Scenario {
    /// Loads a scenario pack directory containing `meta.json`, `task.md`,
    /// and the checker executable named by the manifest.
    pub fn load_pack(dir: &Path) -> Result<Scenario, EvalError> {
        let meta_path = dir.join("meta.json");
        let meta_text = fs::read_to_string(&meta_path)
            .map_err(|e| EvalError::Config(format!("{}: {e}", meta_path.display())))?;
        let meta: PackMeta = serde_json::from_str(&meta_text)
            .map_err(|e| EvalError::Config(format!("{}: {e}", meta_path.display())))?;
        if meta.id.is_empty() {
            return Err(EvalError::Config(format!(
                "{}: scenario id must be non-empty",
                meta_path.display()
            )));
        }
        if meta.n_checkpoints == 0 {
            return Err(EvalError::Config(format!(
                "scenario {}: n_checkpoints must be at least 1",
                meta.id
            )));
        }
        if meta.timeout_seconds == 0 {
            return Err(EvalError::Config(format!(
                "scenario {}: timeout_seconds must be at least 1",
                meta.id
            )));
        }
        let task_path = dir.join("task.md");
        let task_text = fs::read_to_string(&task_path)
            .map_err(|e| EvalError::Config(format!("{}: {e}", task_path.display())))?;
        let checker = dir.join(&meta.checker);
        let checker = checker
            .canonicalize()
            .map_err(|e| EvalError::Config(format!("{}: {e}", checker.display())))?;
        let mode = fs::metadata(&checker)
            .map_err(|e| EvalError::Config(format!("{}: {e}", checker.display())))?
            .permissions()
            .mode();
        if mode & 0o111 == 0 {
            return Err(EvalError::Config(format!(
                "scenario {}: checker {} is not executable",
                meta.id,
                checker.display()
            )));
        }
        Ok(Scenario {
            id: meta.id,
            task_text,
            checker,
            n_checkpoints: meta.n_checkpoints,
            timeout_seconds: meta.timeout_seconds,
        })
    }
}

/// How a trial ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    /// The checker produced a valid summary covering every checkpoint.
    Ok,
    /// The checker exceeded the scenario time limit and its process group
    /// was killed.
    Timeout,
    /// The checker finished without a valid summary (unparseable output,
    /// wrong checkpoint count, or an engine-side trial failure).
    CheckerError,
    /// The backend failed to produce a program, so the checker never ran.
    GenerationError,
}

/// File artifacts preserved from a trial, relative to nothing in
/// particular — they are the absolute paths the engine wrote.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialArtifacts {
    /// The generated program handed to the checker.
    pub program: PathBuf,
    /// Combined checker stdout (and stderr, after a marker line).
    pub stdout: PathBuf,
    /// The parsed summary re-serialized as JSON, when one was found.
    pub checker_report: Option<PathBuf>,
}

/// Identity of the experiment cell a trial belongs to, plus where on disk
/// its artifacts go.
#[derive(Debug, Clone)]
pub struct TrialContext {
    pub condition_id: String,
    pub model_id: String,
    pub trial_dir: PathBuf,
}

/// One scored trial: `p` of `n` checkpoints passed, pass rate exactly
/// `r = p/n`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub scenario_id: String,
    pub condition_id: String,
    pub model_id: String,
    pub p: u32,
    pub n: u32,
    pub r: Rate,
    pub passed_all: bool,
    pub status: TrialStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifacts: Option<TrialArtifacts>,
}

impl TrialResult {
    /// A trial whose checker produced a valid summary with `p` passing
    /// checkpoints.
    pub fn scored(
        scenario: &Scenario,
        ctx: &TrialContext,
        p: u32,
        artifacts: Option<TrialArtifacts>,
    ) -> TrialResult {
        let n = scenario.n_checkpoints;
        assert!(p <= n, "scored {p} of {n} checkpoints");
        TrialResult {
            scenario_id: scenario.id.clone(),
            condition_id: ctx.condition_id.clone(),
            model_id: ctx.model_id.clone(),
            p,
            n,
            r: Rate::new(i64::from(p), i64::from(n)).expect("p <= n"),
            passed_all: p == n,
            status: TrialStatus::Ok,
            artifacts,
        }
    }

    /// A trial that produced no usable summary. Scores zero of `n`
    /// checkpoints; `status` says why.
    pub fn failed(
        scenario: &Scenario,
        ctx: &TrialContext,
        status: TrialStatus,
        artifacts: Option<TrialArtifacts>,
    ) -> TrialResult {
        assert!(
            status != TrialStatus::Ok,
            "failed trials must carry a failure status"
        );
        let n = scenario.n_checkpoints;
        TrialResult {
            scenario_id: scenario.id.clone(),
            condition_id: ctx.condition_id.clone(),
            model_id: ctx.model_id.clone(),
            p: 0,
            n,
            r: Rate::new(0, i64::from(n)).expect("n >= 1"),
            passed_all: false,
            status,
            artifacts,
        }
    }
}

/// One binary checkpoint verdict in a checker summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub id: String,
    pub passed: bool,
}

/// The checker wire contract: a single JSON line on stdout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckerReport {
    pub checkpoints: Vec<Checkpoint>,
}

impl CheckerReport {
    /// Extracts the authoritative summary from checker stdout: the *last*
    /// line that parses as a report. Earlier lines are treated as noise.
    pub fn parse_summary(stdout: &str) -> Option<CheckerReport> {
        stdout
            .lines()
            .rev()
            .find_map(|line| serde_json::from_str::<CheckerReport>(line.trim()).ok())
    }

    /// Number of passing checkpoints.
    pub fn passed_count(&self) -> u32 {
        self.checkpoints.iter().filter(|c| c.passed).count() as u32
    }
}

/// Runs one trial: writes the program into the trial directory, executes the
/// scenario checker on it in an isolated process group with a scrubbed
/// environment, enforces the wall-clock timeout, and scores the summary.
///
/// This function is infallible by design: engine-side failures (unwritable
/// trial directory, unspawnable checker) are folded into a
/// [`TrialStatus::CheckerError`] result with the failure appended to the
/// trial log when possible, so a long experiment run never aborts on one
/// bad trial.
pub fn run_trial(scenario: &Scenario, program_text: &str, ctx: &TrialContext) -> TrialResult {
    match run_trial_inner(scenario, program_text, ctx) {
        Ok(result) => result,
        Err(detail) => {
            let _ = fs::create_dir_all(&ctx.trial_dir);
            let _ = fs::write(
                ctx.trial_dir.join("engine_error.log"),
                format!("trial aborted by engine: {detail}\n"),
            );
            TrialResult::failed(scenario, ctx, TrialStatus::CheckerError, None)
        }
    }
}

fn run_trial_inner(
    scenario: &Scenario,
    program_text: &str,
    ctx: &TrialContext,
) -> Result<TrialResult, String> {
    fs::create_dir_all(&ctx.trial_dir).map_err(|e| format!("create trial dir: {e}"))?;
    let program_path = ctx.trial_dir.join("program.txt");
    fs::write(&program_path, program_text).map_err(|e| format!("write program: {e}"))?;
    let program_abs = program_path
        .canonicalize()
        .map_err(|e| format!("resolve program path: {e}"))?;

    let forwarded: Vec<(String, String)> = ENV_WHITELIST
        .iter()
        .filter_map(|k| std::env::var(k).ok().map(|v| (k.to_string(), v)))
        .collect();

    let mut cmd = Command::new(&scenario.checker);
    cmd.arg(&program_abs)
        .current_dir(&ctx.trial_dir)
        .env_clear()
        .envs(forwarded)
        .process_group(0)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    let child = cmd.spawn().map_err(|e| format!("spawn checker: {e}"))?;
    let pid = child.id() as i32;

    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let _ = tx.send(child.wait_with_output());
    });

    let mut timed_out = false;
    let waited = rx.recv_timeout(Duration::from_secs(scenario.timeout_seconds));
    let output = match waited {
        Ok(outcome) => Some(outcome.map_err(|e| format!("wait for checker: {e}"))?),
        Err(_) => {
            timed_out = true;
            // Kill the whole process group so grandchildren holding our
            // pipes die with the checker.
            unsafe {
                libc::kill(-pid, libc::SIGKILL);
            }
            match rx.recv_timeout(Duration::from_secs(KILL_GRACE_SECONDS)) {
                Ok(outcome) => outcome.ok(),
                Err(_) => None,
            }
        }
    };

    let (stdout_text, stderr_text) = match &output {
        Some(out) => (
            String::from_utf8_lossy(&out.stdout).into_owned(),
            String::from_utf8_lossy(&out.stderr).into_owned(),
        ),
        None => (String::new(), String::new()),
    };

    let stdout_path = ctx.trial_dir.join("stdout.log");
    let mut log = stdout_text.clone();
    if !stderr_text.is_empty() {
        log.push_str("\n--- stderr ---\n");
        log.push_str(&stderr_text);
    }
    if timed_out {
        log.push_str("\n--- engine ---\nprocess group killed after timeout\n");
    }
    fs::write(&stdout_path, log).map_err(|e| format!("write stdout log: {e}"))?;

    let mut artifacts = TrialArtifacts {
        program: program_path,
        stdout: stdout_path,
        checker_report: None,
    };

    if timed_out {
        return Ok(TrialResult::failed(
            scenario,
            ctx,
            TrialStatus::Timeout,
            Some(artifacts),
        ));
    }

    let summary = CheckerReport::parse_summary(&stdout_text);
    if let Some(report) = &summary {
        let report_path = ctx.trial_dir.join("checker_report.json");
        let json = serde_json::to_string_pretty(report).expect("report serializes");
        fs::write(&report_path, json).map_err(|e| format!("write checker report: {e}"))?;
        artifacts.checker_report = Some(report_path);
    }

    match summary {
        Some(report) if report.checkpoints.len() == scenario.n_checkpoints as usize => Ok(
            TrialResult::scored(scenario, ctx, report.passed_count(), Some(artifacts)),
        ),
        // Wrong checkpoint count or no parseable summary at all: the trial
        // is unscoreable regardless of the checker's exit code.
        _ => Ok(TrialResult::failed(
            scenario,
            ctx,
            TrialStatus::CheckerError,
            Some(artifacts),
        )),
    }
}

/// Serialization adapter for exact ratios as `[numer, denom]`.
pub(crate) mod ratio_serde {
    use num_rational::Rational64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(
        value: &Rational64,
        serializer: S,
    ) -> Result<S::Ok, S::Error> {
        (*value.numer(), *value.denom()).serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> Result<Rational64, D::Error> {
        let (n, d) = <(i64, i64)>::deserialize(deserializer)?;
        if d == 0 {
            return Err(serde::de::Error::custom("ratio denominator must be nonzero"));
        }
        Ok(Rational64::new(n, d))
    }
}

/// Serialization adapter for optional exact ratios as `[numer, denom]`.
pub(crate) mod ratio_opt_serde {
    use num_rational::Rational64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(
        value: &Option<Rational64>,
        serializer: S,
    ) -> Result<S::Ok, S::Error> {
        value
            .map(|r| (*r.numer(), *r.denom()))
            .serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> Result<Option<Rational64>, D::Error> {
        let pair = Option::<(i64, i64)>::deserialize(deserializer)?;
        match pair {
            Some((_, 0)) => Err(serde::de::Error::custom("ratio denominator must be nonzero")),
            Some((n, d)) => Ok(Some(Rational64::new(n, d))),
            None => Ok(None),
        }
    }
}

/// Exact metrics for one (condition, model) cell of an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition_id: String,
    pub model_id: String,
    pub n_trials: u32,
    /// Mean of per-trial pass rates, exact.
    pub pass_rate: Rate,
    /// Fraction of trials that passed every checkpoint, exact.
    pub complete_pass_rate: Rate,
    /// Percentage-point delta of `pass_rate` against the baseline condition
    /// in the same model scope; `None` until computed (and for the baseline
    /// row itself).
    #[serde(default, with = "ratio_opt_serde")]
    pub delta_pp: Option<Rational64>,
}

/// Aggregates trials of one (condition, model) cell into exact means.
///
/// Every trial must carry the same condition and model; the scenario may
/// vary (a condition's rate is its mean across scenarios and repeats).
pub fn aggregate(trials: &[TrialResult]) -> Result<ConditionSummary, EvalError> {
    let first = trials.first().ok_or(EvalError::EmptyAggregation)?;
    for t in trials {
        if t.condition_id != first.condition_id || t.model_id != first.model_id {
            return Err(EvalError::MixedCell(format!(
                "({}, {}) vs ({}, {})",
                first.condition_id, first.model_id, t.condition_id, t.model_id
            )));
        }
    }
    let n = trials.len() as i64;
    let sum: Rational64 = trials.iter().map(|t| t.r.ratio()).sum();
    let complete = trials.iter().filter(|t| t.passed_all).count() as i64;
    Ok(ConditionSummary {
        condition_id: first.condition_id.clone(),
        model_id: first.model_id.clone(),
        n_trials: trials.len() as u32,
        pass_rate: Rate::from_ratio(sum / Rational64::from_integer(n)),
        complete_pass_rate: Rate::new(complete, n).expect("count <= n"),
        delta_pp: None,
    })
}

/// Percentage-point difference `(condition − baseline) × 100`, exact.
///
/// Both summaries must describe the same model scope (the same model, or
/// the same cross-model label).
pub fn delta_vs_baseline(
    condition: &ConditionSummary,
    baseline: &ConditionSummary,
) -> Result<Rational64, EvalError> {
    if condition.model_id != baseline.model_id {
        return Err(EvalError::ModelScopeMismatch {
            left: condition.model_id.clone(),
            right: baseline.model_id.clone(),
        });
    }
    Ok((condition.pass_rate.ratio() - baseline.pass_rate.ratio()) * Rational64::from_integer(100))
}

/// Exact mean of one condition's pass rate across distinct models.
pub fn cross_model_avg(summaries: &[ConditionSummary]) -> Result<Rational64, EvalError> {
    let first = summaries.first().ok_or(EvalError::EmptyAggregation)?;
    let mut seen = BTreeSet::new();
    let mut sum = Rational64::zero();
    for s in summaries {
        if s.condition_id != first.condition_id {
            return Err(EvalError::MixedCell(format!(
                "conditions {} vs {} in one cross-model average",
                first.condition_id, s.condition_id
            )));
        }
        if !seen.insert(s.model_id.clone()) {
            return Err(EvalError::DuplicateModel(s.model_id.clone()));
        }
        sum += s.pass_rate.ratio();
    }
    Ok(sum / Rational64::from_integer(summaries.len() as i64))
}

/// Formats a ratio in `[0, 1]` as a percentage with one decimal, e.g.
/// `"49.9%"`. Rounding is half away from zero and happens only here.
pub fn format_percent(ratio: Rational64) -> String {
    let tenths = round_scaled_half_away(ratio, 1000);
    format!("{}.{}%", tenths / 10, tenths % 10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rate::format_delta_pp;
    use std::time::Instant;

    /// Writes a throwaway scenario pack whose checker is the given shell
    /// body, and loads it.
    fn write_pack(
        dir: &Path,
        id: &str,
        n_checkpoints: u32,
        timeout_seconds: u64,
        checker_body: &str,
    ) -> Scenario {
        fs::create_dir_all(dir).unwrap();
        let meta = serde_json::json!({
            "id": id,
            "n_checkpoints": n_checkpoints,
            "timeout_seconds": timeout_seconds,
            "checker": "check.sh",
        });
        fs::write(dir.join("meta.json"), meta.to_string()).unwrap();
        fs::write(dir.join("task.md"), format!("# Task for {id}\n")).unwrap();
        let script = format!("#!/bin/sh\n{checker_body}\n");
        let script_path = dir.join("check.sh");
        fs::write(&script_path, script).unwrap();
        let mut perms = fs::metadata(&script_path).unwrap().permissions();
        perms.set_mode(0o755);
        fs::set_permissions(&script_path, perms).unwrap();
        Scenario::load_pack(dir).unwrap()
    }

    fn ctx(dir: &Path, name: &str) -> TrialContext {
        TrialContext {
            condition_id: "cond".into(),
            model_id: "model-a".into(),
            trial_dir: dir.join(name),
        }
    }

    /// Builds a one-line summary with the first `pass` of `n` checkpoints
    /// passing, as a shell printf command.
    fn summary_line(n: u32, pass: u32) -> String {
        let checkpoints: Vec<serde_json::Value> = (0..n)
            .map(|i| serde_json::json!({"id": format!("c{i}"), "passed": i < pass}))
            .collect();
        let report = serde_json::json!({ "checkpoints": checkpoints });
        format!("printf '%s\\n' '{report}'")
    }

    fn synthetic_trial(condition: &str, model: &str, p: i64, n: i64) -> TrialResult {
        TrialResult {
            scenario_id: "syn".into(),
            condition_id: condition.into(),
            model_id: model.into(),
            p: p as u32,
            n: n as u32,
            r: Rate::new(p, n).unwrap(),
            passed_all: p == n,
            status: TrialStatus::Ok,
            artifacts: None,
        }
    }

    fn summary(condition: &str, model: &str, num: i64, den: i64) -> ConditionSummary {
        ConditionSummary {
            condition_id: condition.into(),
            model_id: model.into(),
            n_trials: 1,
            pass_rate: Rate::new(num, den).unwrap(),
            complete_pass_rate: Rate::zero(),
            delta_pp: None,
        }
    }

    #[test]
    fn fixture_packs_load() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/scenarios");
        let s1 = Scenario::load_pack(&root.join("s001_units")).unwrap();
        assert_eq!(s1.id, "s001_units");
        assert_eq!(s1.n_checkpoints, 3);
        assert_eq!(s1.timeout_seconds, 120);
        assert!(s1.task_text.contains("fwhm_nm"));
        for pack in ["s002_grid", "s003_report", "s004_sleeper"] {
            Scenario::load_pack(&root.join(pack)).unwrap();
        }
    }

    #[test]
    fn pack_validation_rejects_bad_manifests() {
        let tmp = tempfile::tempdir().unwrap();

        // Non-executable checker.
        let dir = tmp.path().join("noexec");
        fs::create_dir_all(&dir).unwrap();
        fs::write(
            dir.join("meta.json"),
            r#"{"id":"x","n_checkpoints":1,"checker":"check.sh"}"#,
        )
        .unwrap();
        fs::write(dir.join("task.md"), "t").unwrap();
        fs::write(dir.join("check.sh"), "#!/bin/sh\n").unwrap();
        let mut perms = fs::metadata(dir.join("check.sh")).unwrap().permissions();
        perms.set_mode(0o644);
        fs::set_permissions(dir.join("check.sh"), perms).unwrap();
        let err = Scenario::load_pack(&dir).unwrap_err();
        assert!(matches!(err, EvalError::Config(ref m) if m.contains("not executable")));

        // Zero checkpoints.
        let dir = tmp.path().join("zero");
        fs::create_dir_all(&dir).unwrap();
        fs::write(
            dir.join("meta.json"),
            r#"{"id":"x","n_checkpoints":0,"checker":"check.sh"}"#,
        )
        .unwrap();
        let err = Scenario::load_pack(&dir).unwrap_err();
        assert!(matches!(err, EvalError::Config(ref m) if m.contains("n_checkpoints")));

        // Missing checker file.
        let dir = tmp.path().join("ghost");
        fs::create_dir_all(&dir).unwrap();
        fs::write(
            dir.join("meta.json"),
            r#"{"id":"x","n_checkpoints":1,"checker":"nope.sh"}"#,
        )
        .unwrap();
        fs::write(dir.join("task.md"), "t").unwrap();
        assert!(matches!(
            Scenario::load_pack(&dir),
            Err(EvalError::Config(_))
        ));

        // Unknown manifest field.
        let dir = tmp.path().join("extra");
        fs::create_dir_all(&dir).unwrap();
        fs::write(
            dir.join("meta.json"),
            r#"{"id":"x","n_checkpoints":1,"checker":"c","surprise":true}"#,
        )
        .unwrap();
        assert!(matches!(
            Scenario::load_pack(&dir),
            Err(EvalError::Config(_))
        ));
    }

    #[test]
    fn timeout_defaults_when_omitted() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("dft");
        fs::create_dir_all(&dir).unwrap();
        fs::write(
            dir.join("meta.json"),
            r#"{"id":"dft","n_checkpoints":2,"checker":"check.sh"}"#,
        )
        .unwrap();
        fs::write(dir.join("task.md"), "t").unwrap();
        let script = dir.join("check.sh");
        fs::write(&script, "#!/bin/sh\n").unwrap();
        let mut perms = fs::metadata(&script).unwrap().permissions();
        perms.set_mode(0o755);
        fs::set_permissions(&script, perms).unwrap();
        let s = Scenario::load_pack(&dir).unwrap();
        assert_eq!(s.timeout_seconds, 120);
    }

    #[test]
    fn seven_of_fourteen_scores_exactly_one_half() {
        let tmp = tempfile::tempdir().unwrap();
        let scenario = write_pack(
            &tmp.path().join("pack"),
            "half",
            14,
            30,
            &summary_line(14, 7),
        );
        let ctx = ctx(tmp.path(), "t0");
        let result = run_trial(&scenario, "the program", &ctx);
        assert_eq!(result.status, TrialStatus::Ok);
        assert_eq!((result.p, result.n), (7, 14));
        assert_eq!(result.r, Rate::new(1, 2).unwrap());
        assert!(!result.passed_all);
        let artifacts = result.artifacts.unwrap();
        assert_eq!(fs::read_to_string(artifacts.program).unwrap(), "the program");
        let report: CheckerReport = serde_json::from_str(
            &fs::read_to_string(artifacts.checker_report.unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(report.checkpoints.len(), 14);
    }

    #[test]
    fn all_pass_sets_passed_all() {
        let tmp = tempfile::tempdir().unwrap();
        let scenario = write_pack(&tmp.path().join("pack"), "ap", 3, 30, &summary_line(3, 3));
        let result = run_trial(&scenario, "p", &ctx(tmp.path(), "t0"));
        assert_eq!(result.status, TrialStatus::Ok);
        assert!(result.passed_all);
        assert_eq!(result.r, Rate::one());
    }

    #[test]
    fn noise_and_stderr_do_not_disturb_the_summary() {
        let tmp = tempfile::tempdir().unwrap();
        let body = format!(
            "echo 'looking at things'\necho 'warning: loud' >&2\necho 'not json {{'\n{}",
            summary_line(2, 1)
        );
        let scenario = write_pack(&tmp.path().join("pack"), "noisy", 2, 30, &body);
        let result = run_trial(&scenario, "p", &ctx(tmp.path(), "t0"));
        assert_eq!(result.status, TrialStatus::Ok);
        assert_eq!((result.p, result.n), (1, 2));
        let log = fs::read_to_string(result.artifacts.unwrap().stdout).unwrap();
        assert!(log.contains("looking at things"));
        assert!(log.contains("--- stderr ---"));
        assert!(log.contains("warning: loud"));
    }

    #[test]
    fn last_parseable_line_wins() {
        let tmp = tempfile::tempdir().unwrap();
        let body = format!("{}\n{}", summary_line(2, 0), summary_line(2, 2));
        let scenario = write_pack(&tmp.path().join("pack"), "last", 2, 30, &body);
        let result = run_trial(&scenario, "p", &ctx(tmp.path(), "t0"));
        assert_eq!(result.status, TrialStatus::Ok);
        assert_eq!(result.p, 2);
    }

    #[test]
    fn unscoreable_outputs_become_checker_errors() {
        let tmp = tempfile::tempdir().unwrap();

        // No summary at all, nonzero exit.
        let scenario = write_pack(
            &tmp.path().join("p1"),
            "none",
            2,
            30,
            "echo 'it all went wrong'\nexit 3",
        );
        let result = run_trial(&scenario, "p", &ctx(tmp.path(), "t1"));
        assert_eq!(result.status, TrialStatus::CheckerError);
        assert_eq!((result.p, result.r), (0, Rate::zero()));
        assert!(!result.passed_all);

        // Summary with the wrong checkpoint count.
        let scenario = write_pack(
            &tmp.path().join("p2"),
            "short",
            3,
            30,
            &summary_line(2, 2),
        );
        let result = run_trial(&scenario, "p", &ctx(tmp.path(), "t2"));
        assert_eq!(result.status, TrialStatus::CheckerError);

        // Zero exit but garbage output is still unscoreable.
        let scenario = write_pack(&tmp.path().join("p3"), "junk", 1, 30, "echo '[1,2,3]'");
        let result = run_trial(&scenario, "p", &ctx(tmp.path(), "t3"));
        assert_eq!(result.status, TrialStatus::CheckerError);
    }

    #[test]
    fn exit_code_is_ignored_when_summary_is_valid() {
        let tmp = tempfile::tempdir().unwrap();
        let body = format!("{}\nexit 17", summary_line(2, 2));
        let scenario = write_pack(&tmp.path().join("pack"), "exitcode", 2, 30, &body);
        let result = run_trial(&scenario, "p", &ctx(tmp.path(), "t0"));
        assert_eq!(result.status, TrialStatus::Ok);
        assert!(result.passed_all);
    }

    #[test]
    fn timeout_kills_the_whole_process_group_quickly() {
        let tmp = tempfile::tempdir().unwrap();
        // The checker parks a background child on our stdout pipe and then
        // sleeps itself. Only a group kill releases the pipe promptly; a
        // single-process kill would leave the engine waiting out the grace
        // window on the inherited pipe.
        let scenario = write_pack(
            &tmp.path().join("pack"),
            "sleeper",
            1,
            1,
            "sleep 30 &\nsleep 30",
        );
        let started = Instant::now();
        let result = run_trial(&scenario, "p", &ctx(tmp.path(), "t0"));
        let elapsed = started.elapsed();
        assert_eq!(result.status, TrialStatus::Timeout);
        assert_eq!((result.p, result.r), (0, Rate::zero()));
        assert!(
            elapsed < Duration::from_secs(4),
            "group kill should finish well inside the grace window, took {elapsed:?}"
        );
        let log = fs::read_to_string(result.artifacts.unwrap().stdout).unwrap();
        assert!(log.contains("process group killed after timeout"));
    }

    #[test]
    fn engine_side_failures_fold_into_checker_error() {
        let tmp = tempfile::tempdir().unwrap();
        let scenario = write_pack(&tmp.path().join("pack"), "eng", 2, 30, &summary_line(2, 2));
        // A trial directory path that collides with an existing *file*
        // cannot be created.
        let blocker = tmp.path().join("blocked");
        fs::write(&blocker, "occupied").unwrap();
        let ctx = TrialContext {
            condition_id: "cond".into(),
            model_id: "model-a".into(),
            trial_dir: blocker.join("t0"),
        };
        let result = run_trial(&scenario, "p", &ctx);
        assert_eq!(result.status, TrialStatus::CheckerError);
        assert!(result.artifacts.is_none());
    }

    #[test]
    fn trial_results_round_trip_as_ndjson() {
        let t = synthetic_trial("cond", "model-a", 3, 4);
        let line = serde_json::to_string(&t).unwrap();
        assert!(!line.contains('\n'));
        assert!(!line.contains("artifacts"));
        let back: TrialResult = serde_json::from_str(&line).unwrap();
        assert_eq!(back.r, t.r);
        assert_eq!(back.status, TrialStatus::Ok);
    }

    #[test]
    fn aggregate_means_are_exact() {
        // {1, 1/2} -> 3/4
        let trials = vec![
            synthetic_trial("c", "m", 2, 2),
            synthetic_trial("c", "m", 1, 2),
        ];
        let s = aggregate(&trials).unwrap();
        assert_eq!(s.pass_rate, Rate::new(3, 4).unwrap());
        assert_eq!(s.complete_pass_rate, Rate::new(1, 2).unwrap());
        assert_eq!(s.n_trials, 2);
        assert_eq!(s.delta_pp, None);

        // {7/14, 12/12, 0/11} -> exactly 1/2, not a float near it.
        let trials = vec![
            synthetic_trial("c", "m", 7, 14),
            synthetic_trial("c", "m", 12, 12),
            synthetic_trial("c", "m", 0, 11),
        ];
        let s = aggregate(&trials).unwrap();
        assert_eq!(s.pass_rate, Rate::new(1, 2).unwrap());
        assert_eq!(s.complete_pass_rate, Rate::new(1, 3).unwrap());

        // Single trial: identity.
        let trials = vec![synthetic_trial("c", "m", 5, 9)];
        assert_eq!(aggregate(&trials).unwrap().pass_rate, Rate::new(5, 9).unwrap());
    }

    #[test]
    fn aggregate_rejects_empty_and_mixed_cells() {
        assert!(matches!(aggregate(&[]), Err(EvalError::EmptyAggregation)));
        let mixed = vec![
            synthetic_trial("c1", "m", 1, 2),
            synthetic_trial("c2", "m", 1, 2),
        ];
        assert!(matches!(aggregate(&mixed), Err(EvalError::MixedCell(_))));
        let mixed = vec![
            synthetic_trial("c", "m1", 1, 2),
            synthetic_trial("c", "m2", 1, 2),
        ];
        assert!(matches!(aggregate(&mixed), Err(EvalError::MixedCell(_))));
    }

    #[test]
    fn baseline_deltas_are_exact_percentage_points() {
        let base = summary("baseline", "m", 510, 1000);
        let cond = summary("treat", "m", 499, 1000);
        let d = delta_vs_baseline(&cond, &base).unwrap();
        assert_eq!(d, Rational64::new(-11, 10));
        assert_eq!(format_delta_pp(d), "-1.1");

        let base = summary("baseline", "m", 1, 2);
        let cond = summary("treat", "m", 53, 100);
        let d = delta_vs_baseline(&cond, &base).unwrap();
        assert_eq!(d, Rational64::from_integer(3));
        assert_eq!(format_delta_pp(d), "+3.0");

        let d = delta_vs_baseline(&base, &base).unwrap();
        assert_eq!(format_delta_pp(d), "+0.0");

        let other = summary("treat", "other-model", 1, 2);
        assert!(matches!(
            delta_vs_baseline(&other, &base),
            Err(EvalError::ModelScopeMismatch { .. })
        ));
    }

    #[test]
    fn cross_model_average_is_exact() {
        let s = vec![
            summary("c", "m1", 507, 1000),
            summary("c", "m2", 490, 1000),
        ];
        let avg = cross_model_avg(&s).unwrap();
        assert_eq!(avg, Rational64::new(997, 2000));
        assert_eq!(format_percent(avg), "49.9%");

        let s = vec![
            summary("c", "m1", 601, 1000),
            summary("c", "m2", 418, 1000),
        ];
        let avg = cross_model_avg(&s).unwrap();
        assert_eq!(avg, Rational64::new(1019, 2000));
        assert_eq!(format_percent(avg), "51.0%");

        let s = vec![summary("c", "m1", 5, 9)];
        assert_eq!(cross_model_avg(&s).unwrap(), Rational64::new(5, 9));

        let s = vec![summary("c", "m1", 1, 2), summary("c", "m1", 1, 3)];
        assert!(matches!(
            cross_model_avg(&s),
            Err(EvalError::DuplicateModel(_))
        ));

        let s = vec![summary("c1", "m1", 1, 2), summary("c2", "m2", 1, 3)];
        assert!(matches!(cross_model_avg(&s), Err(EvalError::MixedCell(_))));

        assert!(matches!(
            cross_model_avg(&[]),
            Err(EvalError::EmptyAggregation)
        ));
    }

    #[test]
    fn condition_summary_serializes_ratios_exactly() {
        let mut s = summary("c", "m", 1, 3);
        s.delta_pp = Some(Rational64::new(-11, 10));
        let json = serde_json::to_string(&s).unwrap();
        let back: ConditionSummary = serde_json::from_str(&json).unwrap();
        assert_eq!(back.pass_rate, Rate::new(1, 3).unwrap());
        assert_eq!(back.delta_pp, Some(Rational64::new(-11, 10)));
        assert!(json.contains("[-11,10]"));
    }
}
