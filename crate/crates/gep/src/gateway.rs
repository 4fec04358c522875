//! Text-generation backends behind one client contract.
//!
//! Every backend receives a [`GenerationRequest`] whose control prompt and
//! task text are separate fields, and must keep them on separate channels
//! all the way to the wire: the control text travels on the
//! system-instruction channel and the task text on the user-content
//! channel, never concatenated. Three backend families are provided:
//!
//! - **replay** — answers from a recorded cassette keyed by
//!   `(model_id, digest(control text), digest(task text))`; fully
//!   deterministic, the workhorse for tests and reproducible runs;
//! - **scripted** — applies a caller-supplied deterministic function (the
//!   bundled `echo` script returns the SHA-256 digest of the task text,
//!   a handy pipeline smoke value);
//! - **live** — HTTP POST against a configured endpoint with bounded
//!   retries, exponential backoff, and a concurrency cap. The API
//!   credential is read from an environment variable at request time;
//!   only the variable's *name* is ever stored, serialized, or logged,
//!   never its value.

use crate::objects::sha256_hex;
use crate::render::ControlPrompt;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

/// The fixed channel carrying control (strategy/documentation) text.
pub const CONTROL_CHANNEL: &str = "system_instruction";
/// The fixed channel carrying task text.
pub const TASK_CHANNEL: &str = "user_content";

fn default_temperature() -> f64 {
    0.05
}
fn default_max_output_tokens() -> u32 {
    16384
}
fn default_control_channel() -> String {
    CONTROL_CHANNEL.to_string()
}
fn default_task_channel() -> String {
    TASK_CHANNEL.to_string()
}

/// Inference configuration. Defaults: temperature 0.05 (low-temperature
/// decoding), 16384 max output tokens. The channel assignments are fixed
/// literals; configs naming any other channel are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub model_id: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_control_channel")]
    pub control_channel: String,
    #[serde(default = "default_task_channel")]
    pub task_channel: String,
}

impl InferenceConfig {
    pub fn for_model(model_id: impl Into<String>) -> InferenceConfig {
        InferenceConfig {
            model_id: model_id.into(),
            temperature: default_temperature(),
            max_output_tokens: default_max_output_tokens(),
            control_channel: default_control_channel(),
            task_channel: default_task_channel(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.model_id.trim().is_empty() {
            return Err(GatewayError::Config("model_id must be non-empty".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::Config(format!(
                "temperature must be a finite number >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_output_tokens < 1 {
            return Err(GatewayError::Config(
                "max_output_tokens must be >= 1".into(),
            ));
        }
        if self.control_channel != CONTROL_CHANNEL {
            return Err(GatewayError::Config(format!(
                "control_channel is fixed to {CONTROL_CHANNEL:?}, got {:?}",
                self.control_channel
            )));
        }
        if self.task_channel != TASK_CHANNEL {
            return Err(GatewayError::Config(format!(
                "task_channel is fixed to {TASK_CHANNEL:?}, got {:?}",
                self.task_channel
            )));
        }
        Ok(())
    }
}

/// One generation request: configuration, the control prompt, and the task
/// text, kept apart.
#[derive(Clone, Debug)]
pub struct GenerationRequest {
    pub config: InferenceConfig,
    pub control: ControlPrompt,
    pub task_text: String,
    pub request_id: String,
}

impl GenerationRequest {
    pub fn new(
        config: InferenceConfig,
        control: ControlPrompt,
        task_text: impl Into<String>,
        request_id: impl Into<String>,
    ) -> GenerationRequest {
        GenerationRequest {
            config,
            control,
            task_text: task_text.into(),
            request_id: request_id.into(),
        }
    }
}

/// One generation result.
#[derive(Clone, Debug)]
pub struct GenerationResult {
    pub text: String,
    pub backend_tag: String,
    pub latency: Duration,
    pub raw_metadata: serde_json::Value,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("invalid inference config: {0}")]
    Config(String),
    #[error(
        "cassette miss: model {model_id}, control digest {control_digest}, task digest {task_digest}"
    )]
    CassetteMiss {
        model_id: String,
        control_digest: String,
        task_digest: String,
    },
    #[error("cassette integrity: key {key} recorded with two different payloads")]
    CassetteConflict { key: String },
    #[error("cassette unreadable: {0}")]
    CassetteUnreadable(String),
    #[error("credential environment variable {0} is not set")]
    MissingCredential(String),
    #[error("transport failed after {attempts} attempt(s): {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("backend response has no text at pointer {pointer}: {detail}")]
    MalformedResponse { pointer: String, detail: String },
}

/// A text-generation backend. Implementations must accept concurrent
/// calls.
pub trait Backend: Send + Sync {
    fn tag(&self) -> &str;
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, GatewayError>;
}

/// Cassette key: model plus content digests of both channels, so trial
/// parallelism or reordering cannot desynchronize replay.
pub type CassetteKey = (String, String, String);

/// The replay key for a request.
pub fn request_key(req: &GenerationRequest) -> CassetteKey {
    (
        req.config.model_id.clone(),
        sha256_hex(req.control.text.as_bytes()),
        sha256_hex(req.task_text.as_bytes()),
    )
}

fn key_label(key: &CassetteKey) -> String {
    format!("({}, {}, {})", key.0, key.1, key.2)
}

/// One recorded exchange (newline-delimited JSON on disk).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CassetteRecord {
    pub model_id: String,
    pub control_digest: String,
    pub task_digest: String,
    pub text: String,
}

impl CassetteRecord {
    pub fn key(&self) -> CassetteKey {
        (
            self.model_id.clone(),
            self.control_digest.clone(),
            self.task_digest.clone(),
        )
    }
}

/// An in-memory cassette: key → response text.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Cassette {
    entries: BTreeMap<CassetteKey, String>,
}

impl Cassette {
    /// Parses newline-delimited records, rejecting conflicting duplicates
    /// (identical duplicates are tolerated: re-recording is idempotent).
    pub fn from_text(text: &str) -> Result<Cassette, GatewayError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: CassetteRecord = serde_json::from_str(line).map_err(|e| {
                GatewayError::CassetteUnreadable(format!("line {}: {e}", i + 1))
            })?;
            let key = record.key();
            if let Some(existing) = entries.get(&key) {
                if *existing != record.text {
                    return Err(GatewayError::CassetteConflict {
                        key: key_label(&key),
                    });
                }
            } else {
                entries.insert(key, record.text);
            }
        }
        Ok(Cassette { entries })
    }

    pub fn load(path: &Path) -> Result<Cassette, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            GatewayError::CassetteUnreadable(format!("{}: {e}", path.display()))
        })?;
        Cassette::from_text(&text)
    }

    pub fn get(&self, key: &CassetteKey) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Appends exchanges to a cassette file. Identical re-records are skipped;
/// conflicting re-records are integrity errors. Existing records are
/// loaded on open, so recording can resume across restarts.
pub struct CassetteRecorder {
    path: PathBuf,
    seen: Mutex<BTreeMap<CassetteKey, String>>,
}

impl CassetteRecorder {
    pub fn open(path: impl Into<PathBuf>) -> Result<CassetteRecorder, GatewayError> {
        let path = path.into();
        let seen = if path.exists() {
            Cassette::load(&path)?.entries
        } else {
            BTreeMap::new()
        };
        Ok(CassetteRecorder {
            path,
            seen: Mutex::new(seen),
        })
    }

    /// Records one exchange, returning the entry written (or already
    /// present).
    pub fn record(
        &self,
        req: &GenerationRequest,
        result_text: &str,
    ) -> Result<CassetteRecord, GatewayError> {
        let key = request_key(req);
        let record = CassetteRecord {
            model_id: key.0.clone(),
            control_digest: key.1.clone(),
            task_digest: key.2.clone(),
            text: result_text.to_string(),
        };
        let mut seen = self.seen.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(existing) = seen.get(&key) {
            if *existing != result_text {
                return Err(GatewayError::CassetteConflict {
                    key: key_label(&key),
                });
            }
            return Ok(record);
        }
        let line = serde_json::to_string(&record)
            .map_err(|e| GatewayError::CassetteUnreadable(e.to_string()))?;
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| {
                GatewayError::CassetteUnreadable(format!("{}: {e}", self.path.display()))
            })?;
        writeln!(file, "{line}").map_err(|e| {
            GatewayError::CassetteUnreadable(format!("{}: {e}", self.path.display()))
        })?;
        seen.insert(key, result_text.to_string());
        Ok(record)
    }
}

/// Records an exchange through a recorder (op-level convenience).
pub fn record_cassette(
    recorder: &CassetteRecorder,
    req: &GenerationRequest,
    result: &GenerationResult,
) -> Result<CassetteRecord, GatewayError> {
    recorder.record(req, &result.text)
}

/// Deterministic replay from a cassette.
pub struct ReplayBackend {
    cassette: Cassette,
}

impl ReplayBackend {
    pub fn new(cassette: Cassette) -> ReplayBackend {
        ReplayBackend { cassette }
    }
}

/// Loads a cassette file into a replay backend.
pub fn load_cassette(path: &Path) -> Result<ReplayBackend, GatewayError> {
    Ok(ReplayBackend::new(Cassette::load(path)?))
}

impl Backend for ReplayBackend {
    fn tag(&self) -> &str {
        "replay"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        req.config.validate()?;
        let start = Instant::now();
        let key = request_key(req);
        match self.cassette.get(&key) {
            Some(text) => Ok(GenerationResult {
                text: text.to_string(),
                backend_tag: "replay".to_string(),
                latency: start.elapsed(),
                raw_metadata: serde_json::json!({
                    "control_digest": key.1,
                    "task_digest": key.2,
                }),
            }),
            None => Err(GatewayError::CassetteMiss {
                model_id: key.0,
                control_digest: key.1,
                task_digest: key.2,
            }),
        }
    }
}

/// Applies a caller-supplied deterministic function to the request.
pub struct ScriptedBackend {
    tag: String,
    script: Arc<dyn Fn(&GenerationRequest) -> String + Send + Sync>,
}

impl ScriptedBackend {
    pub fn new(
        tag: impl Into<String>,
        script: impl Fn(&GenerationRequest) -> String + Send + Sync + 'static,
    ) -> ScriptedBackend {
        ScriptedBackend {
            tag: tag.into(),
            script: Arc::new(script),
        }
    }

    /// The digest-echo script: returns the SHA-256 hex digest of the task
    /// text. Useful as a deterministic end-to-end smoke value.
    pub fn echo() -> ScriptedBackend {
        ScriptedBackend::new("echo", |req: &GenerationRequest| {
            sha256_hex(req.task_text.as_bytes())
        })
    }
}

impl Backend for ScriptedBackend {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        req.config.validate()?;
        let start = Instant::now();
        let text = (self.script)(req);
        Ok(GenerationResult {
            text,
            backend_tag: self.tag.clone(),
            latency: start.elapsed(),
            raw_metadata: serde_json::json!({ "scripted": self.tag }),
        })
    }
}

fn default_api_key_env() -> String {
    "GEP_API_KEY".to_string()
}
fn default_control_field() -> String {
    "systemInstruction".to_string()
}
fn default_task_field() -> String {
    "contents".to_string()
}
fn default_auth_header() -> String {
    "authorization".to_string()
}
fn default_response_pointer() -> String {
    "/text".to_string()
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_max_in_flight() -> u32 {
    4
}

/// Live backend configuration. Field names are configurable per provider;
/// the defaults put control text in `systemInstruction` and task text in
/// `contents`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiveConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the API credential. Only
    /// this *name* appears in configs, logs, and errors; the value is
    /// read when a request is sent and goes nowhere but the auth header.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_control_field")]
    pub control_field: String,
    #[serde(default = "default_task_field")]
    pub task_field: String,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    /// JSON pointer to the generated text within the response body.
    #[serde(default = "default_response_pointer")]
    pub response_text_pointer: String,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: u32,
}

/// Minimal HTTP POST surface so the live backend can be exercised without
/// a network.
pub trait HttpTransport: Send + Sync {
    /// Returns `(status, body)` for a JSON POST, or a transport-level
    /// error string.
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &serde_json::Value,
    ) -> Result<(u16, String), String>;
}

/// Production transport over ureq.
pub struct UreqTransport;

impl HttpTransport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &serde_json::Value,
    ) -> Result<(u16, String), String> {
        let mut req = ureq::post(url);
        for (name, value) in headers {
            req = req.set(name, value);
        }
        match req.send_json(body.clone()) {
            Ok(resp) => {
                let status = resp.status();
                let text = resp.into_string().map_err(|e| e.to_string())?;
                Ok((status, text))
            }
            Err(ureq::Error::Status(status, resp)) => {
                Ok((status, resp.into_string().unwrap_or_default()))
            }
            Err(e) => Err(e.to_string()),
        }
    }
}

/// Counting semaphore bounding in-flight live requests.
struct Slots {
    state: Mutex<u32>,
    freed: Condvar,
}

impl Slots {
    fn new(count: u32) -> Slots {
        Slots {
            state: Mutex::new(count.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.state.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.freed.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard { slots: self }
    }
}

struct SlotGuard<'a> {
    slots: &'a Slots,
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        let mut free = self.slots.state.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.slots.freed.notify_one();
    }
}

/// HTTP backend with bounded retries, exponential backoff, and an
/// in-flight cap.
pub struct LiveBackend {
    config: LiveConfig,
    transport: Box<dyn HttpTransport>,
    slots: Slots,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> LiveBackend {
        LiveBackend::with_transport(config, Box::new(UreqTransport))
    }

    pub fn with_transport(config: LiveConfig, transport: Box<dyn HttpTransport>) -> LiveBackend {
        let slots = Slots::new(config.max_in_flight);
        LiveBackend {
            config,
            transport,
            slots,
        }
    }

    fn backoff(&self, attempt: u32) {
        if self.config.backoff_ms == 0 {
            return;
        }
        let factor = 1u64 << (attempt.min(16) - 1).min(16);
        std::thread::sleep(Duration::from_millis(self.config.backoff_ms * factor));
    }
}

fn retryable_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

impl Backend for LiveBackend {
    fn tag(&self) -> &str {
        "live"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        req.config.validate()?;
        let credential = std::env::var(&self.config.api_key_env)
            .map_err(|_| GatewayError::MissingCredential(self.config.api_key_env.clone()))?;
        let body = serde_json::json!({
            "model": req.config.model_id,
            &self.config.control_field: req.control.text,
            &self.config.task_field: req.task_text,
            "temperature": req.config.temperature,
            "maxOutputTokens": req.config.max_output_tokens,
        });
        let headers = vec![(
            self.config.auth_header.clone(),
            format!("Bearer {credential}"),
        )];
        let _slot = self.slots.acquire();
        let start = Instant::now();
        let max_attempts = self.config.max_retries + 1;
        let mut last_detail = String::new();
        for attempt in 1..=max_attempts {
            if attempt > 1 {
                self.backoff(attempt - 1);
            }
            match self
                .transport
                .post_json(&self.config.endpoint, &headers, &body)
            {
                Ok((status, text)) if (200..300).contains(&status) => {
                    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
                        GatewayError::MalformedResponse {
                            pointer: self.config.response_text_pointer.clone(),
                            detail: format!("response is not JSON: {e}"),
                        }
                    })?;
                    let out = value
                        .pointer(&self.config.response_text_pointer)
                        .and_then(|v| v.as_str())
                        .ok_or_else(|| GatewayError::MalformedResponse {
                            pointer: self.config.response_text_pointer.clone(),
                            detail: "no string at pointer".to_string(),
                        })?;
                    return Ok(GenerationResult {
                        text: out.to_string(),
                        backend_tag: "live".to_string(),
                        latency: start.elapsed(),
                        raw_metadata: serde_json::json!({
                            "attempts": attempt,
                            "status": status,
                        }),
                    });
                }
                Ok((status, text)) if retryable_status(status) => {
                    last_detail = format!("status {status}: {}", text.chars().take(200).collect::<String>());
                }
                Ok((status, text)) => {
                    return Err(GatewayError::Transport {
                        attempts: attempt,
                        detail: format!(
                            "non-retryable status {status}: {}",
                            text.chars().take(200).collect::<String>()
                        ),
                    });
                }
                Err(e) => {
                    last_detail = e;
                }
            }
        }
        Err(GatewayError::Transport {
            attempts: max_attempts,
            detail: last_detail,
        })
    }
}

/// Config-file-expressible backend choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    /// Replay from a recorded cassette file.
    Replay { cassette: PathBuf },
    /// The deterministic digest-echo script.
    Echo,
    /// A live HTTP endpoint.
    Live { config: LiveConfig },
}

impl BackendSpec {
    /// Builds the backend; `base_dir` anchors relative cassette paths.
    pub fn build(&self, base_dir: &Path) -> Result<Box<dyn Backend>, GatewayError> {
        match self {
            BackendSpec::Replay { cassette } => {
                let path = if cassette.is_absolute() {
                    cassette.clone()
                } else {
                    base_dir.join(cassette)
                };
                Ok(Box::new(load_cassette(&path)?))
            }
            BackendSpec::Echo => Ok(Box::new(ScriptedBackend::echo())),
            BackendSpec::Live { config } => Ok(Box::new(LiveBackend::new(config.clone()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::Form;
    use sha2::{Digest, Sha256};
    use std::collections::VecDeque;

    fn control(text: &str) -> ControlPrompt {
        ControlPrompt::new(text.to_string(), Form::GeneFull, Vec::new())
    }

    fn request(control_text: &str, task: &str) -> GenerationRequest {
        GenerationRequest::new(
            InferenceConfig::for_model("demo-model"),
            control(control_text),
            task,
            "req-1",
        )
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = InferenceConfig::for_model("m");
        assert_eq!(c.temperature, 0.05);
        assert_eq!(c.max_output_tokens, 16384);
        assert_eq!(c.control_channel, "system_instruction");
        assert_eq!(c.task_channel, "user_content");
        assert!(c.validate().is_ok());

        let parsed: InferenceConfig =
            serde_json::from_str(r#"{"model_id": "m"}"#).unwrap();
        assert_eq!(parsed, c);

        let mut bad = c.clone();
        bad.temperature = -0.1;
        assert!(matches!(bad.validate(), Err(GatewayError::Config(_))));
        let mut bad = c.clone();
        bad.max_output_tokens = 0;
        assert!(matches!(bad.validate(), Err(GatewayError::Config(_))));
        let mut bad = c.clone();
        bad.control_channel = "user_content".to_string();
        assert!(matches!(bad.validate(), Err(GatewayError::Config(_))));
        let mut bad = c;
        bad.model_id = "  ".to_string();
        assert!(matches!(bad.validate(), Err(GatewayError::Config(_))));
    }

    #[test]
    fn echo_backend_returns_the_task_digest() {
        let backend = ScriptedBackend::echo();
        let task = "compute peak widths for run 7";
        let result = backend.generate(&request("some guidance", task)).unwrap();
        let expected = hex::encode(Sha256::digest(task.as_bytes()));
        assert_eq!(result.text, expected);
        assert_eq!(result.backend_tag, "echo");
        // The digest depends on the task channel only.
        let again = backend.generate(&request("other guidance", task)).unwrap();
        assert_eq!(again.text, expected);
    }

    #[test]
    fn record_then_replay_round_trips_and_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exchanges.ndjson");
        let req_a = request("guidance A", "task A");
        let req_b = request("guidance B", "task B");

        {
            let recorder = CassetteRecorder::open(&path).unwrap();
            recorder.record(&req_a, "answer A").unwrap();
            recorder.record(&req_b, "answer B").unwrap();
            // Identical re-record: idempotent, no new line.
            recorder.record(&req_a, "answer A").unwrap();
        }
        let lines = std::fs::read_to_string(&path).unwrap();
        assert_eq!(lines.lines().count(), 2);

        let backend = load_cassette(&path).unwrap();
        let first = backend.generate(&req_a).unwrap();
        let second = backend.generate(&req_a).unwrap();
        assert_eq!(first.text, "answer A");
        assert_eq!(first.text, second.text);
        assert_eq!(backend.generate(&req_b).unwrap().text, "answer B");

        // A reopened recorder sees the old entries.
        let recorder = CassetteRecorder::open(&path).unwrap();
        recorder.record(&req_b, "answer B").unwrap();
        assert_eq!(
            recorder.record(&req_b, "different").unwrap_err(),
            GatewayError::CassetteConflict {
                key: key_label(&request_key(&req_b))
            }
        );

        let miss = backend.generate(&request("guidance A", "unseen task"));
        match miss.unwrap_err() {
            GatewayError::CassetteMiss {
                model_id,
                task_digest,
                ..
            } => {
                assert_eq!(model_id, "demo-model");
                assert_eq!(
                    task_digest,
                    hex::encode(Sha256::digest("unseen task".as_bytes()))
                );
            }
            other => panic!("expected miss, got {other:?}"),
        }
    }

    #[test]
    fn conflicting_cassette_lines_are_rejected_at_load() {
        let a = CassetteRecord {
            model_id: "m".into(),
            control_digest: "c".repeat(4),
            task_digest: "t".repeat(4),
            text: "one".into(),
        };
        let mut b = a.clone();
        b.text = "two".into();
        let text = format!(
            "{}\n{}\n",
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert!(matches!(
            Cassette::from_text(&text).unwrap_err(),
            GatewayError::CassetteConflict { .. }
        ));

        // Identical duplicate lines are fine.
        let dup = format!(
            "{}\n{}\n",
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&a).unwrap()
        );
        assert_eq!(Cassette::from_text(&dup).unwrap().len(), 1);

        let err = Cassette::from_text("not json\n").unwrap_err();
        match err {
            GatewayError::CassetteUnreadable(msg) => assert!(msg.contains("line 1")),
            other => panic!("expected unreadable, got {other:?}"),
        }
    }

    #[test]
    fn replay_is_deterministic_under_concurrency() {
        let req = request("shared guidance", "shared task");
        let mut cassette_text = String::new();
        let key = request_key(&req);
        let record = CassetteRecord {
            model_id: key.0,
            control_digest: key.1,
            task_digest: key.2,
            text: "stable answer".into(),
        };
        cassette_text.push_str(&serde_json::to_string(&record).unwrap());
        cassette_text.push('\n');
        let backend =
            std::sync::Arc::new(ReplayBackend::new(Cassette::from_text(&cassette_text).unwrap()));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let backend = backend.clone();
                let req = req.clone();
                std::thread::spawn(move || backend.generate(&req).unwrap().text)
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), "stable answer");
        }
    }

    /// Captures request bodies; pops scripted responses.
    struct MockTransport {
        calls: Mutex<Vec<serde_json::Value>>,
        responses: Mutex<VecDeque<Result<(u16, String), String>>>,
    }

    impl MockTransport {
        fn new(responses: Vec<Result<(u16, String), String>>) -> Arc<MockTransport> {
            Arc::new(MockTransport {
                calls: Mutex::new(Vec::new()),
                responses: Mutex::new(responses.into()),
            })
        }
    }

    impl HttpTransport for Arc<MockTransport> {
        fn post_json(
            &self,
            _url: &str,
            _headers: &[(String, String)],
            body: &serde_json::Value,
        ) -> Result<(u16, String), String> {
            self.calls.lock().unwrap().push(body.clone());
            self.responses
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or(Err("mock exhausted".to_string()))
        }
    }

    fn live_config(env: &str) -> LiveConfig {
        LiveConfig {
            endpoint: "https://example.invalid/generate".to_string(),
            api_key_env: env.to_string(),
            control_field: default_control_field(),
            task_field: default_task_field(),
            auth_header: default_auth_header(),
            response_text_pointer: default_response_pointer(),
            max_retries: 2,
            backoff_ms: 0,
            max_in_flight: 2,
        }
    }

    #[test]
    fn live_backend_keeps_channels_separate_and_sends_config() {
        let env = "GEP_TEST_KEY_CHANNELS";
        std::env::set_var(env, "secret-value-xyz");
        let transport = MockTransport::new(vec![Ok((
            200,
            r#"{"text": "generated output"}"#.to_string(),
        ))]);
        let backend =
            LiveBackend::with_transport(live_config(env), Box::new(transport.clone()));

        let control_sentinel = "CTRL_SENTINEL_314";
        let task_sentinel = "TASK_SENTINEL_159";
        let result = backend
            .generate(&request(control_sentinel, task_sentinel))
            .unwrap();
        assert_eq!(result.text, "generated output");
        assert_eq!(result.raw_metadata["attempts"], 1);

        let calls = transport.calls.lock().unwrap();
        assert_eq!(calls.len(), 1);
        let body = &calls[0];
        assert_eq!(body["systemInstruction"], control_sentinel);
        assert_eq!(body["contents"], task_sentinel);
        assert_eq!(body["temperature"], 0.05);
        assert_eq!(body["maxOutputTokens"], 16384);
        assert_eq!(body["model"], "demo-model");
        // Channel separation: each sentinel appears in exactly one field.
        for (field, value) in body.as_object().unwrap() {
            let text = value.to_string();
            if field == "systemInstruction" {
                assert!(!text.contains(task_sentinel));
            } else {
                assert!(!text.contains(control_sentinel), "leak into {field}");
            }
        }
        // The credential value never reaches the body or metadata.
        assert!(!body.to_string().contains("secret-value-xyz"));
        assert!(!result.raw_metadata.to_string().contains("secret-value-xyz"));
    }

    #[test]
    fn live_backend_retries_then_succeeds_and_counts_attempts() {
        let env = "GEP_TEST_KEY_RETRY";
        std::env::set_var(env, "k");
        let transport = MockTransport::new(vec![
            Err("connection reset".to_string()),
            Ok((503, "overloaded".to_string())),
            Ok((200, r#"{"text": "third time lucky"}"#.to_string())),
        ]);
        let backend =
            LiveBackend::with_transport(live_config(env), Box::new(transport.clone()));
        let result = backend.generate(&request("c", "t")).unwrap();
        assert_eq!(result.text, "third time lucky");
        assert_eq!(result.raw_metadata["attempts"], 3);

        // Exhausted retries surface the attempt count.
        let transport = MockTransport::new(vec![
            Err("down".to_string()),
            Err("down".to_string()),
            Err("down".to_string()),
        ]);
        let backend = LiveBackend::with_transport(live_config(env), Box::new(transport));
        match backend.generate(&request("c", "t")).unwrap_err() {
            GatewayError::Transport { attempts, detail } => {
                assert_eq!(attempts, 3);
                assert!(detail.contains("down"));
            }
            other => panic!("expected transport error, got {other:?}"),
        }

        // Non-retryable statuses fail immediately.
        let transport = MockTransport::new(vec![Ok((400, "bad request".to_string()))]);
        let backend = LiveBackend::with_transport(live_config(env), Box::new(transport.clone()));
        match backend.generate(&request("c", "t")).unwrap_err() {
            GatewayError::Transport { attempts, .. } => assert_eq!(attempts, 1),
            other => panic!("expected transport error, got {other:?}"),
        }
        assert_eq!(transport.calls.lock().unwrap().len(), 1);
    }

    #[test]
    fn missing_credential_names_only_the_variable() {
        let env = "GEP_TEST_KEY_ABSENT";
        std::env::remove_var(env);
        let transport = MockTransport::new(vec![]);
        let backend = LiveBackend::with_transport(live_config(env), Box::new(transport));
        let err = backend.generate(&request("c", "t")).unwrap_err();
        assert_eq!(err, GatewayError::MissingCredential(env.to_string()));
    }

    #[test]
    fn backend_spec_builds_from_config_documents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ndjson");
        let recorder = CassetteRecorder::open(&path).unwrap();
        let req = request("g", "t");
        recorder.record(&req, "hi").unwrap();

        let spec: BackendSpec = serde_json::from_str(
            r#"{"kind": "replay", "cassette": "c.ndjson"}"#,
        )
        .unwrap();
        let backend = spec.build(dir.path()).unwrap();
        assert_eq!(backend.generate(&req).unwrap().text, "hi");
        assert_eq!(backend.tag(), "replay");

        let spec: BackendSpec = serde_json::from_str(r#"{"kind": "echo"}"#).unwrap();
        assert_eq!(spec.build(dir.path()).unwrap().tag(), "echo");

        let spec: BackendSpec = serde_json::from_str(
            r#"{"kind": "live", "config": {"endpoint": "https://example.invalid/x"}}"#,
        )
        .unwrap();
        let backend = spec.build(dir.path()).unwrap();
        assert_eq!(backend.tag(), "live");

        // Serialized specs show only the env var name, never a secret.
        let round = serde_json::to_string(&spec).unwrap();
        assert!(round.contains("GEP_API_KEY"));
    }

    #[test]
    fn in_flight_cap_bounds_concurrency() {
        use std::sync::atomic::{AtomicU32, Ordering};

        struct SlowTransport {
            active: AtomicU32,
            peak: AtomicU32,
        }
        impl HttpTransport for Arc<SlowTransport> {
            fn post_json(
                &self,
                _url: &str,
                _headers: &[(String, String)],
                _body: &serde_json::Value,
            ) -> Result<(u16, String), String> {
                let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(20));
                self.active.fetch_sub(1, Ordering::SeqCst);
                Ok((200, r#"{"text": "ok"}"#.to_string()))
            }
        }

        let env = "GEP_TEST_KEY_CAP";
        std::env::set_var(env, "k");
        let transport = Arc::new(SlowTransport {
            active: AtomicU32::new(0),
            peak: AtomicU32::new(0),
        });
        let backend = Arc::new(LiveBackend::with_transport(
            live_config(env),
            Box::new(transport.clone()),
        ));
        let handles: Vec<_> = (0..6)
            .map(|_| {
                let backend = backend.clone();
                std::thread::spawn(move || {
                    backend.generate(&request("c", "t")).unwrap();
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(
            transport.peak.load(Ordering::SeqCst) <= 2,
            "peak {} exceeded the in-flight cap",
            transport.peak.load(Ordering::SeqCst)
        );
    }

    #[test]
    fn empty_control_channel_is_a_valid_baseline() {
        let backend = ScriptedBackend::echo();
        let req = GenerationRequest::new(
            InferenceConfig::for_model("demo-model"),
            ControlPrompt::none(),
            "bare task",
            "req-baseline",
        );
        assert!(req.control.text.is_empty());
        let result = backend.generate(&req).unwrap();
        assert_eq!(
            result.text,
            hex::encode(Sha256::digest("bare task".as_bytes()))
        );
    }
}
