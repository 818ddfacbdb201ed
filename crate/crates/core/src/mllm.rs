//! Few-shot prompting of a multimodal chat-completions endpoint.
//!
//! A prompt is an interleaved sequence of images and label texts — `[img,
//! label] × K` followed by the query image and a task-specific instruction —
//! sent as one user message. The reply is expected to be (mostly) a bare
//! number; [`parse_prediction`] pulls out the first decimal it can find and
//! clamps it to the task's label range.
//!
//! Images are never decoded here: an [`ImageRef`] is an id plus a path that
//! the endpoint resolves. A [`StubServer`] speaking the same JSON shape backs
//! the tests, so everything up to (but excluding) the actual model is
//! exercised over a real socket.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::env::{Scorer, TaskSpec};
use crate::store::EmbeddingStore;

/// Generation cap appended to every request.
pub const MAX_NEW_TOKENS: u32 = 20;

#[derive(Debug)]
pub enum MllmError {
    /// No instruction template registered under this task name.
    UnknownTask(String),
    /// Connection/transport failure after all retries.
    Transport { detail: String },
    /// The endpoint answered, but not with the expected JSON shape.
    BadResponse { detail: String },
    /// Configuration rejected (zero timeout, empty endpoint, ...).
    Config { detail: String },
}

impl std::fmt::Display for MllmError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MllmError::UnknownTask(name) => write!(f, "no instruction template for task {name:?}"),
            MllmError::Transport { detail } => write!(f, "transport failure: {detail}"),
            MllmError::BadResponse { detail } => write!(f, "malformed service response: {detail}"),
            MllmError::Config { detail } => write!(f, "bad service config: {detail}"),
        }
    }
}

impl std::error::Error for MllmError {}

// ---------------------------------------------------------------------------
// Prompt construction
// ---------------------------------------------------------------------------

/// The four supported prompt tasks and their fixed instruction strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTask {
    Age,
    Aesthetic,
    Beauty,
    Quality,
}

impl PromptTask {
    pub fn from_name(name: &str) -> Result<Self, MllmError> {
        match name {
            "age" => Ok(PromptTask::Age),
            "aesthetic" => Ok(PromptTask::Aesthetic),
            "beauty" => Ok(PromptTask::Beauty),
            "quality" => Ok(PromptTask::Quality),
            other => Err(MllmError::UnknownTask(other.to_string())),
        }
    }

    /// The instruction appended after the query image.
    pub fn instruction(self) -> &'static str {
        match self {
            PromptTask::Age => {
                "What is the age of the person in the last image? \
                 Only output the estimated age as a number."
            }
            PromptTask::Aesthetic => {
                "What is the aesthetic score of the last image on a scale from 0 to 10? \
                 Only output the score as a floating number."
            }
            PromptTask::Beauty => {
                "What is the facial beauty score of the last image on a scale from 0 to 5? \
                 Only output the score as a floating number."
            }
            PromptTask::Quality => {
                "What is the image quality score of the last image on a scale from 0 to 5? \
                 Only output the score as a floating number."
            }
        }
    }

    /// Render a demonstration label: ages as integers, scores with one
    /// decimal place.
    pub fn format_label(self, y: f32) -> String {
        match self {
            PromptTask::Age => format!("Age: {}", y.round() as i64),
            _ => format!("Score: {y:.1}"),
        }
    }
}

/// Opaque handle to an image the endpoint can resolve.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: u32,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PromptPart {
    Image { path: String },
    Text { text: String },
}

/// A fully rendered prompt: `[img, label] × K`, query image, instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPlan {
    pub parts: Vec<PromptPart>,
    pub max_new_tokens: u32,
}

/// Build the interleaved prompt. Pure: identical inputs yield byte-identical
/// plans. `demos` appear in the order given (selection order).
pub fn build_prompt(task: PromptTask, demos: &[(ImageRef, f32)], query: &ImageRef) -> PromptPlan {
    let mut parts = Vec::with_capacity(2 * demos.len() + 2);
    for (image, label) in demos {
        parts.push(PromptPart::Image { path: image.path.clone() });
        parts.push(PromptPart::Text { text: task.format_label(*label) });
    }
    parts.push(PromptPart::Image { path: query.path.clone() });
    parts.push(PromptPart::Text { text: task.instruction().to_string() });
    PromptPlan { parts, max_new_tokens: MAX_NEW_TOKENS }
}

/// Canonical one-line-per-part text rendering, used by snapshot tests and
/// `--dump-prompt` style debugging.
pub fn render_plan_text(plan: &PromptPlan) -> String {
    let mut out = String::new();
    for part in &plan.parts {
        match part {
            PromptPart::Image { path } => {
                out.push_str("IMG ");
                out.push_str(path);
            }
            PromptPart::Text { text } => {
                out.push_str("TXT ");
                out.push_str(text);
            }
        }
        out.push('\n');
    }
    out.push_str(&format!("MAX_TOKENS {}\n", plan.max_new_tokens));
    out
}

// ---------------------------------------------------------------------------
// Response parsing
// ---------------------------------------------------------------------------

/// Scan for the first decimal number in free text (`27`, `3.5`, `-0.5`,
/// `.5`, or embedded as in `"Age: 27"` / `"7 out of 10"`).
fn first_number(text: &str) -> Option<f64> {
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if !b.is_ascii_digit() {
            continue;
        }
        let mut start = i;
        if start > 0 && bytes[start - 1] == b'.' {
            start -= 1;
        }
        if start > 0 && bytes[start - 1] == b'-' {
            start -= 1;
        }
        let mut end = i + 1;
        while end < bytes.len() && bytes[end].is_ascii_digit() {
            end += 1;
        }
        if bytes.get(end) == Some(&b'.') {
            let mut frac = end + 1;
            while frac < bytes.len() && bytes[frac].is_ascii_digit() {
                frac += 1;
            }
            if frac > end + 1 {
                end = frac;
            }
        }
        return text[start..end].parse().ok();
    }
    None
}

/// Extract the model's numeric prediction, clamped to the task label range.
/// `None` when the reply contains no number at all.
pub fn parse_prediction(text: &str, task: &TaskSpec) -> Option<f32> {
    let value = first_number(text)?;
    Some(value.clamp(task.label_lo as f64, task.label_hi as f64) as f32)
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<PromptPart>,
}

/// Request body of the chat-completions-style endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
}

/// Response body: the generated text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
}

impl ChatRequest {
    pub fn from_plan(model: &str, plan: &PromptPlan) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages: vec![ChatMessage { role: "user".to_string(), content: plan.parts.clone() }],
            max_tokens: plan.max_new_tokens,
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP client
// ---------------------------------------------------------------------------

/// Endpoint connection settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: u64,
    /// Additional attempts after the first failure.
    pub retries: u32,
    /// Environment variable holding the bearer token ("" = anonymous).
    pub api_key_env: String,
    /// Maximum concurrent in-flight requests per client.
    pub max_in_flight: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            endpoint: "http://127.0.0.1:8085/v1/chat".to_string(),
            model: "gemma-3-4b-it".to_string(),
            timeout_secs: 60,
            retries: 2,
            api_key_env: String::new(),
            max_in_flight: 4,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), MllmError> {
        if self.endpoint.is_empty() {
            return Err(MllmError::Config { detail: "endpoint must not be empty".to_string() });
        }
        if self.timeout_secs == 0 {
            return Err(MllmError::Config { detail: "timeout must be positive".to_string() });
        }
        if self.max_in_flight == 0 {
            return Err(MllmError::Config { detail: "max_in_flight must be positive".to_string() });
        }
        Ok(())
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    slots: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) {
        let mut free = self.slots.lock().unwrap();
        while *free == 0 {
            free = self.freed.wait(free).unwrap();
        }
        *free -= 1;
    }

    fn release(&self) {
        *self.slots.lock().unwrap() += 1;
        self.freed.notify_one();
    }
}

/// Thread-safe, cloneable endpoint client. Clones share the in-flight cap.
#[derive(Clone)]
pub struct MllmClient {
    config: ServiceConfig,
    agent: ureq::Agent,
    in_flight: Arc<InFlight>,
}

impl MllmClient {
    pub fn new(config: ServiceConfig) -> Result<Self, MllmError> {
        config.validate()?;
        let agent = ureq::Agent::new_with_config(
            ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
                .build(),
        );
        let in_flight =
            Arc::new(InFlight { slots: Mutex::new(config.max_in_flight), freed: Condvar::new() });
        Ok(MllmClient { config, agent, in_flight })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// POST the plan and return the raw generated text. Transport errors and
    /// HTTP error statuses are retried `retries` times with linear backoff.
    pub fn send(&self, plan: &PromptPlan) -> Result<String, MllmError> {
        let body = ChatRequest::from_plan(&self.config.model, plan);
        let api_key = if self.config.api_key_env.is_empty() {
            None
        } else {
            std::env::var(&self.config.api_key_env).ok()
        };

        self.in_flight.acquire();
        let result = self.send_with_retries(&body, api_key.as_deref());
        self.in_flight.release();
        result
    }

    fn send_with_retries(
        &self,
        body: &ChatRequest,
        api_key: Option<&str>,
    ) -> Result<String, MllmError> {
        let mut last_err = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 * attempt as u64));
            }
            let mut request = self.agent.post(&self.config.endpoint);
            if let Some(key) = api_key {
                request = request.header("Authorization", &format!("Bearer {key}"));
            }
            match request.send_json(body) {
                Ok(mut response) => {
                    let parsed: ChatResponse = response
                        .body_mut()
                        .read_json()
                        .map_err(|e| MllmError::BadResponse { detail: e.to_string() })?;
                    return Ok(parsed.text);
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(MllmError::Transport { detail: last_err })
    }
}

// ---------------------------------------------------------------------------
// Scorer adapter
// ---------------------------------------------------------------------------

/// Adapts the remote model into the environment's [`Scorer`] interface.
/// Every failure mode (transport, bad JSON, numberless reply) degrades to
/// `None`, which the environment maps to its penalty path — an outage can
/// never crash an episode.
pub struct ServiceScorer {
    client: MllmClient,
    task: TaskSpec,
    prompt_task: PromptTask,
}

impl ServiceScorer {
    pub fn new(client: MllmClient, task: TaskSpec) -> Result<Self, MllmError> {
        let prompt_task = PromptTask::from_name(&task.name)?;
        Ok(ServiceScorer { client, task, prompt_task })
    }

    fn image_ref(&self, store: &EmbeddingStore, id: u32) -> ImageRef {
        let path = store
            .manifest()
            .image_paths
            .as_ref()
            .and_then(|paths| paths.get(id as usize).cloned())
            .unwrap_or_else(|| format!("img://{id}"));
        ImageRef { id, path }
    }
}

impl Scorer for ServiceScorer {
    fn predict(&self, store: &EmbeddingStore, query_id: u32, demos: &[u32]) -> Option<f32> {
        let shots: Vec<(ImageRef, f32)> =
            demos.iter().map(|&d| (self.image_ref(store, d), store.label(d))).collect();
        let query = self.image_ref(store, query_id);
        let plan = build_prompt(self.prompt_task, &shots, &query);
        let text = self.client.send(&plan).ok()?;
        parse_prediction(&text, &self.task)
    }
}

// ---------------------------------------------------------------------------
// Stub server
// ---------------------------------------------------------------------------

/// What the stub answers with.
#[derive(Debug, Clone)]
pub enum StubBehavior {
    /// Echo the first text part of the prompt (i.e. the first demo's label).
    EchoFirstLabel,
    /// Always answer this exact string.
    Constant(String),
    /// Answer prose containing no number.
    Garbage,
    /// Respond HTTP 500 to the first `n` requests, then echo.
    ServerErrorThenEcho(u32),
}

/// Minimal single-threaded HTTP server speaking the chat JSON shape on
/// 127.0.0.1. Shuts down (and joins its thread) on drop.
pub struct StubServer {
    addr: String,
    requests: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl StubServer {
    /// Spawn on an ephemeral loopback port.
    pub fn spawn(behavior: StubBehavior) -> std::io::Result<Self> {
        StubServer::spawn_on("127.0.0.1:0", behavior)
    }

    /// Spawn on a specific `host:port`.
    pub fn spawn_on(bind: &str, behavior: StubBehavior) -> std::io::Result<Self> {
        let listener = TcpListener::bind(bind)?;
        let addr = format!("http://{}/v1/chat", listener.local_addr()?);
        let requests = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let thread_requests = Arc::clone(&requests);
        let thread_stop = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if thread_stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { break };
                let n = thread_requests.fetch_add(1, Ordering::SeqCst);
                handle_connection(stream, &behavior, n as u32);
            }
        });
        Ok(StubServer { addr, requests, stop, handle: Some(handle) })
    }

    /// Full endpoint URL (`http://127.0.0.1:<port>/v1/chat`).
    pub fn endpoint(&self) -> &str {
        &self.addr
    }

    pub fn requests_served(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Client config pointed at this stub (short timeout, no retries unless
    /// overridden by the caller).
    pub fn client_config(&self) -> ServiceConfig {
        ServiceConfig {
            endpoint: self.addr.clone(),
            timeout_secs: 5,
            retries: 0,
            ..ServiceConfig::default()
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock the accept loop with one last throwaway connection.
        if let Some(hostport) = self.addr.strip_prefix("http://") {
            if let Some(hostport) = hostport.strip_suffix("/v1/chat") {
                let _ = TcpStream::connect(hostport);
            }
        }
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(stream: TcpStream, behavior: &StubBehavior, request_index: u32) {
    let _ = serve_one(stream, behavior, request_index);
}

fn serve_one(
    mut stream: TcpStream,
    behavior: &StubBehavior,
    request_index: u32,
) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut reader = BufReader::new(stream.try_clone()?);

    // Headers: only Content-Length matters.
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Ok(()); // connection closed (e.g. the drop-time wakeup)
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some(value) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = value.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    if let StubBehavior::ServerErrorThenEcho(n) = behavior {
        if request_index < *n {
            return write_response(&mut stream, 500, "{\"error\":\"transient\"}");
        }
    }

    let text = match behavior {
        StubBehavior::Constant(s) => s.clone(),
        StubBehavior::Garbage => "I cannot determine this.".to_string(),
        StubBehavior::EchoFirstLabel | StubBehavior::ServerErrorThenEcho(_) => {
            match serde_json::from_slice::<ChatRequest>(&body) {
                Ok(request) => request
                    .messages
                    .first()
                    .and_then(|m| {
                        m.content.iter().find_map(|p| match p {
                            PromptPart::Text { text } => Some(text.clone()),
                            PromptPart::Image { .. } => None,
                        })
                    })
                    .unwrap_or_default(),
                Err(e) => return write_response(&mut stream, 400, &format!("{{\"error\":{e:?}}}")),
            }
        }
    };
    let payload = serde_json::to_string(&ChatResponse { text }).expect("response serializes");
    write_response(&mut stream, 200, &payload)
}

fn write_response(stream: &mut TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = if status == 200 { "OK" } else { "Error" };
    write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}
