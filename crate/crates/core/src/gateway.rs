//! Uniform interface to text-generation backends.
//!
//! Three backends share one request/response shape: a remote chat-completion
//! HTTP endpoint, a scripted mock that plays back canned responses, and an
//! oracle mock that answers correctly iff a sentinel substring reached the
//! prompt. The mocks keep the whole pipeline testable with zero network access.

use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend unavailable after {attempts} attempt(s): {detail}")]
    BackendUnavailable { attempts: u32, detail: String },
    #[error(
        "scripted backend exhausted for role {role:?} (unmatched prompt head: {prompt_head:?})"
    )]
    ScriptExhausted { role: RoleTag, prompt_head: String },
    #[error("backend configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Actor,
    Reflector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenRequest {
    pub role_tag: RoleTag,
    pub prompt: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub stop_sequences: Vec<String>,
}

impl GenRequest {
    /// Deterministic single-line completion request.
    pub fn actor(prompt: String) -> Self {
        GenRequest {
            role_tag: RoleTag::Actor,
            prompt,
            max_new_tokens: 128,
            temperature: 0.0,
            stop_sequences: vec!["\n".to_string()],
        }
    }

    /// Deterministic feedback request; reflections run longer than completions.
    pub fn reflector(prompt: String) -> Self {
        GenRequest {
            role_tag: RoleTag::Reflector,
            prompt,
            max_new_tokens: 512,
            temperature: 0.0,
            stop_sequences: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenResponse {
    pub text: String,
    pub backend_id: String,
    pub latency_ms: u64,
    pub token_usage: Option<TokenUsage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    Scripted,
    Oracle,
}

/// Backend wiring; secrets stay in the environment, only the variable name is held here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    pub model_name: Option<String>,
    pub api_key_env: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Initial backoff; doubles per retry.
    pub retry_backoff: Duration,
    pub max_concurrent_requests: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::HttpChat,
            endpoint_url: None,
            model_name: None,
            api_key_env: None,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            retry_backoff: Duration::from_secs(1),
            max_concurrent_requests: 4,
        }
    }
}

/// One canned response; `when` must appear in the prompt for the entry to match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub role: RoleTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<String>,
    pub text: String,
}

pub enum Backend {
    HttpChat(HttpChatBackend),
    Scripted(ScriptedBackend),
    Oracle(OracleBackend),
}

impl Backend {
    pub fn generate(&self, req: &GenRequest) -> Result<GenResponse, GatewayError> {
        match self {
            Backend::HttpChat(b) => b.generate(req),
            Backend::Scripted(b) => b.generate(req),
            Backend::Oracle(b) => b.generate(req),
        }
    }

    pub fn id(&self) -> String {
        match self {
            Backend::HttpChat(b) => format!("http:{}", b.model),
            Backend::Scripted(_) => "scripted".to_string(),
            Backend::Oracle(_) => "oracle".to_string(),
        }
    }
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.id())
    }
}

// ---------------------------------------------------------------------------
// HTTP chat-completions backend
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    stop: &'a [String],
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: AssistantMessage,
}

#[derive(Deserialize)]
struct AssistantMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

#[derive(Debug)]
pub struct HttpChatBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    max_retries: u32,
    retry_backoff: Duration,
    limiter: Semaphore,
    /// When set, request/response bodies go to stderr (key redacted).
    pub log_wire: bool,
}

impl HttpChatBackend {
    /// Resolves the API key from the environment up front so a missing key
    /// fails before any network call.
    pub fn from_config(config: &BackendConfig) -> Result<Self, GatewayError> {
        let endpoint = config.endpoint_url.clone().ok_or_else(|| {
            GatewayError::Config("http_chat backend requires endpoint_url".into())
        })?;
        let model = config
            .model_name
            .clone()
            .ok_or_else(|| GatewayError::Config("http_chat backend requires model_name".into()))?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                GatewayError::Config(format!("API key environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpChatBackend {
            agent,
            endpoint,
            model,
            api_key,
            max_retries: config.max_retries,
            retry_backoff: config.retry_backoff,
            limiter: Semaphore::new(config.max_concurrent_requests.max(1)),
            log_wire: false,
        })
    }

    pub fn generate(&self, req: &GenRequest) -> Result<GenResponse, GatewayError> {
        let body = ChatRequest {
            model: &self.model,
            messages: [ChatMessage {
                role: "user",
                content: &req.prompt,
            }],
            temperature: req.temperature,
            max_tokens: req.max_new_tokens,
            stop: &req.stop_sequences,
        };
        if self.log_wire {
            eprintln!(
                "[gateway] POST {} body={}",
                self.endpoint,
                serde_json::to_string(&body).unwrap_or_default()
            );
        }

        let started = Instant::now();
        let attempts = self.max_retries + 1;
        for attempt in 0..attempts {
            let _permit = self.limiter.acquire();
            let mut builder = self.agent.post(&self.endpoint);
            if let Some(key) = &self.api_key {
                builder = builder.header("Authorization", &format!("Bearer {key}"));
            }
            let outcome = builder.send_json(&body);
            let transient_detail = match outcome {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        let parsed: ChatResponse = resp.body_mut().read_json().map_err(|e| {
                            GatewayError::BackendUnavailable {
                                attempts: attempt + 1,
                                detail: format!("malformed response body: {e}"),
                            }
                        })?;
                        let text = parsed
                            .choices
                            .first()
                            .and_then(|c| c.message.content.clone())
                            .unwrap_or_default();
                        if self.log_wire {
                            eprintln!("[gateway] {} -> {status} text={text:?}", self.endpoint);
                        }
                        return Ok(GenResponse {
                            text,
                            backend_id: format!("http:{}", self.model),
                            latency_ms: started.elapsed().as_millis() as u64,
                            token_usage: parsed.usage.map(|u| TokenUsage {
                                prompt_tokens: u.prompt_tokens,
                                completion_tokens: u.completion_tokens,
                            }),
                        });
                    }
                    if status == 429 || status >= 500 {
                        format!("HTTP {status}")
                    } else {
                        // Client errors will not heal on retry.
                        return Err(GatewayError::BackendUnavailable {
                            attempts: attempt + 1,
                            detail: format!("HTTP {status}"),
                        });
                    }
                }
                Err(e) => e.to_string(),
            };
            if attempt + 1 == attempts {
                return Err(GatewayError::BackendUnavailable {
                    attempts,
                    detail: transient_detail,
                });
            }
            std::thread::sleep(self.retry_backoff * 2u32.pow(attempt));
        }
        unreachable!("retry loop always returns");
    }
}

// ---------------------------------------------------------------------------
// Scripted playback backend
// ---------------------------------------------------------------------------

/// Plays back canned responses in order. Single-consumer: one backend
/// instance per task.
pub struct ScriptedBackend {
    entries: Mutex<Vec<Option<ScriptEntry>>>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        ScriptedBackend {
            entries: Mutex::new(entries.into_iter().map(Some).collect()),
        }
    }

    /// How many canned entries remain unconsumed.
    pub fn remaining(&self) -> usize {
        self.entries
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.is_some())
            .count()
    }

    pub fn generate(&self, req: &GenRequest) -> Result<GenResponse, GatewayError> {
        let mut entries = self.entries.lock().unwrap();
        for slot in entries.iter_mut() {
            let matches = match slot {
                Some(entry) => {
                    entry.role == req.role_tag
                        && entry
                            .when
                            .as_ref()
                            .is_none_or(|needle| req.prompt.contains(needle))
                }
                None => false,
            };
            if matches {
                let entry = slot.take().expect("matched slot is occupied");
                return Ok(GenResponse {
                    text: entry.text,
                    backend_id: "scripted".to_string(),
                    latency_ms: 0,
                    token_usage: None,
                });
            }
        }
        Err(GatewayError::ScriptExhausted {
            role: req.role_tag,
            prompt_head: req.prompt.chars().take(80).collect(),
        })
    }
}

/// Loads a script from a JSONL file, one entry per line.
pub fn load_script(path: &Path) -> Result<Vec<ScriptEntry>, GatewayError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| GatewayError::Config(format!("cannot read script {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ScriptEntry = serde_json::from_str(line).map_err(|e| {
            GatewayError::Config(format!("script {} line {}: {e}", path.display(), i + 1))
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Oracle backend
// ---------------------------------------------------------------------------

/// Answers with the known-correct line iff the sentinel substring made it into
/// the prompt; otherwise returns a fixed wrong line. The default wrong line is
/// a comment so it can never equal an eligible ground-truth line.
pub struct OracleBackend {
    sentinel: String,
    truth: String,
    wrong_line: String,
}

pub const DEFAULT_ORACLE_WRONG_LINE: &str = "# oracle-miss";

impl OracleBackend {
    pub fn new(sentinel: String, truth: String, wrong_line: Option<String>) -> Self {
        OracleBackend {
            sentinel,
            truth,
            wrong_line: wrong_line.unwrap_or_else(|| DEFAULT_ORACLE_WRONG_LINE.to_string()),
        }
    }

    pub fn generate(&self, req: &GenRequest) -> Result<GenResponse, GatewayError> {
        let text = if req.prompt.contains(&self.sentinel) {
            self.truth.clone()
        } else {
            self.wrong_line.clone()
        };
        Ok(GenResponse {
            text,
            backend_id: "oracle".to_string(),
            latency_ms: 0,
            token_usage: None,
        })
    }
}

// ---------------------------------------------------------------------------
// Concurrent-request limiter
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct Semaphore {
    state: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            state: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut available = self.state.lock().unwrap();
        while *available == 0 {
            available = self.cv.wait(available).unwrap();
        }
        *available -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.state.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}
