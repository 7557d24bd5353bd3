//! Model backends. Every backend speaks one interface, [`ChatBackend`]: a
//! chat request (turns with optional images plus a structured context) in,
//! text out. The HTTP client talks to chat-completions endpoints; the mocks
//! answer in-process from slide ground truth or fixed rules.

mod chaos;
pub mod context;
mod decisions;
mod http;
pub mod mock;
pub mod prompts;

pub use chaos::{ChaosPolicy, FlakyBackend};
pub use decisions::{
    Decision, DifferentialDecision, ExplorerDecision, InitDecision, PlanDecision, ReportDecision, ReviewDecision,
    TaskProposal,
};
pub use http::{HttpChatBackend, API_KEY_VAR};
pub use mock::{MockCaptioner, MockPolicy, SweepSettings};

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::anyres::{plan_grid, GridPlan, ImageTokenPlan, MAX_GRID_EDGE};
use crate::protocol::{Actor, EventBody, ImageLog, Recorder, RepairPayload, RequestLog, RetryPayload, RoiRecord};
use crate::raster::{digest, RasterImage};
use context::DifferentialContext;

/// What a request is for. Mocks dispatch on this; HTTP backends only log it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Caption,
    Differential,
    SupervisorInit,
    SupervisorPlan,
    SupervisorReview,
    SupervisorReport,
    ExplorerStep,
}

impl Purpose {
    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::Caption => "caption",
            Purpose::Differential => "differential",
            Purpose::SupervisorInit => "supervisor_init",
            Purpose::SupervisorPlan => "supervisor_plan",
            Purpose::SupervisorReview => "supervisor_review",
            Purpose::SupervisorReport => "supervisor_report",
            Purpose::ExplorerStep => "explorer_step",
        }
    }

    /// Whether the reply must be a JSON decision.
    pub fn is_structured(self) -> bool {
        self != Purpose::Caption
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug)]
pub struct ChatImage {
    pub image: Arc<RasterImage>,
    pub plan: GridPlan,
}

impl ChatImage {
    pub fn new(image: Arc<RasterImage>) -> Self {
        let plan = plan_grid(image.width(), image.height());
        Self { image, plan }
    }
}

/// One chat turn. Construct through the role helpers so images can only sit
/// on user turns.
#[derive(Clone, Debug)]
pub struct ChatTurn {
    role: Role,
    text: String,
    images: Vec<ChatImage>,
}

impl ChatTurn {
    pub fn system(text: impl Into<String>) -> Self {
        Self { role: Role::System, text: text.into(), images: Vec::new() }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self { role: Role::User, text: text.into(), images: Vec::new() }
    }

    pub fn user_with_images(text: impl Into<String>, images: Vec<ChatImage>) -> Self {
        Self { role: Role::User, text: text.into(), images }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self { role: Role::Assistant, text: text.into(), images: Vec::new() }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn images(&self) -> &[ChatImage] {
        &self.images
    }
}

#[derive(Clone, Debug)]
pub struct ChatRequest {
    pub purpose: Purpose,
    pub turns: Vec<ChatTurn>,
    /// Machine-readable copy of what the prompt text describes.
    pub context: Value,
    /// 0 for a first attempt, 1 after a repair reprompt.
    pub repair_round: u32,
}

impl ChatRequest {
    pub fn new(purpose: Purpose, turns: Vec<ChatTurn>, context: Value) -> Self {
        Self { purpose, turns, context, repair_round: 0 }
    }

    pub fn images(&self) -> impl Iterator<Item = &ChatImage> {
        self.turns.iter().flat_map(|t| t.images.iter())
    }

    /// Placeholder layout of all images in request order.
    pub fn token_plan(&self) -> ImageTokenPlan {
        ImageTokenPlan::for_sizes(self.images().map(|i| (i.image.width(), i.image.height())))
    }

    /// All turn texts, in order, as sent.
    pub fn prompt_text(&self) -> String {
        self.turns
            .iter()
            .map(|t| {
                format!("[{}]\n{}", serde_json::to_value(t.role).unwrap_or_default().as_str().unwrap_or(""), t.text)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("request to {endpoint} timed out")]
    Timeout { endpoint: String },
    #[error("{endpoint} returned HTTP {status}: {body}")]
    Http { endpoint: String, status: u16, body: String },
    #[error("cannot reach {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("malformed response from {endpoint}: {message}")]
    Malformed { endpoint: String, message: String },
    #[error("{backend} does not handle {purpose} requests")]
    Unsupported { backend: String, purpose: String },
    #[error("injected failure: {0}")]
    Injected(String),
}

/// A chat model. Implementations must be safe to call from many threads.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;

    /// Endpoint or mock name, for logs and error messages.
    fn describe(&self) -> String;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// Connection settings for one backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub retry_base_delay_ms: u64,
    pub temperature: f64,
    /// Seed for mock and randomized backends.
    pub seed: u64,
    pub max_concurrent_requests: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            timeout_secs: 120.0,
            max_retries: 3,
            retry_base_delay_ms: 500,
            temperature: 0.0,
            seed: 0,
            max_concurrent_requests: 4,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_secs > 0.0) {
            return Err("timeout must be positive".into());
        }
        if self.max_concurrent_requests == 0 {
            return Err("max_concurrent_requests must be at least 1".into());
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy { max_retries: self.max_retries, base_delay: Duration::from_millis(self.retry_base_delay_ms) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub base_delay: Duration,
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        Self { max_retries, base_delay: Duration::ZERO }
    }

    fn delay(&self, retry: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << retry.min(16))
    }
}

/// A call that still failed after all retries.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("{purpose} call failed after {attempts} attempt(s): {last}")]
pub struct CallError {
    pub purpose: Purpose,
    pub attempts: u32,
    pub last: BackendError,
}

/// Sends `request`, retrying with exponential backoff. Each retry is
/// recorded, so a call that fails `f` times records `min(f, max_retries)`
/// retry events. `accept` rejects replies that should count as failures.
pub fn call_with_retry(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    policy: RetryPolicy,
    recorder: &mut dyn Recorder,
    accept: impl Fn(&str) -> Result<(), String>,
) -> Result<(String, u32), CallError> {
    let mut attempt = 0u32;
    loop {
        let result = backend.complete(request).and_then(|text| {
            accept(&text)
                .map(|_| text)
                .map_err(|message| BackendError::Malformed { endpoint: backend.describe(), message })
        });
        match result {
            Ok(text) => return Ok((text, attempt + 1)),
            Err(e) if attempt < policy.max_retries => {
                attempt += 1;
                log::warn!("{} call to {} failed ({e}); retry {attempt}", request.purpose, backend.describe());
                recorder.record(
                    Actor::Backend,
                    EventBody::Retry(RetryPayload {
                        call: request.purpose.as_str().into(),
                        attempt,
                        error: e.to_string(),
                    }),
                );
                std::thread::sleep(policy.delay(attempt - 1));
            }
            Err(last) => return Err(CallError { purpose: request.purpose, attempts: attempt + 1, last }),
        }
    }
}

/// Trace form of a request: prompt text in full, images by digest.
pub fn request_log(backend: &dyn ChatBackend, request: &ChatRequest, attempts: u32) -> RequestLog {
    RequestLog {
        purpose: request.purpose.as_str().into(),
        backend: backend.describe(),
        prompt: request.prompt_text(),
        images: request
            .images()
            .map(|i| ImageLog {
                digest: digest(&i.image),
                width: i.image.width(),
                height: i.image.height(),
                tokens: i.plan.token_count(),
            })
            .collect(),
        token_plan: request.token_plan(),
        attempts,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CaptionError {
    #[error("caption input is {width}x{height}; both edges must be at most {MAX_GRID_EDGE}")]
    ImageTooLarge { width: u32, height: u32 },
    #[error(transparent)]
    Call(#[from] CallError),
}

/// Captions one view. The caption must be non-empty; empty replies count as
/// failed attempts.
pub fn caption_region(
    backend: &dyn ChatBackend,
    image: Arc<RasterImage>,
    prompt: &str,
    context: Value,
    policy: RetryPolicy,
    recorder: &mut dyn Recorder,
) -> Result<(String, RequestLog), CaptionError> {
    if image.width() > MAX_GRID_EDGE || image.height() > MAX_GRID_EDGE {
        return Err(CaptionError::ImageTooLarge { width: image.width(), height: image.height() });
    }
    let request = ChatRequest::new(
        Purpose::Caption,
        vec![
            ChatTurn::system(prompts::CAPTION_SYSTEM.trim()),
            ChatTurn::user_with_images(prompt, vec![ChatImage::new(image)]),
        ],
        context,
    );
    let (text, attempts) = call_with_retry(backend, &request, policy, recorder, |t| {
        if t.trim().is_empty() {
            Err("empty caption".into())
        } else {
            Ok(())
        }
    })?;
    Ok((text.trim().to_string(), request_log(backend, &request, attempts)))
}

#[derive(Debug, thiserror::Error)]
pub enum DecisionError {
    #[error(transparent)]
    Call(#[from] CallError),
    #[error("invalid {purpose} decision after repair: {reason}")]
    Invalid { purpose: Purpose, reason: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
}

/// Pulls the JSON object out of a reply that may wrap it in prose or a code
/// fence.
pub fn extract_json(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

/// Parses a reply as `D`; unknown fields are ignored.
pub fn parse_decision<D: Decision>(text: &str) -> Result<D, String> {
    let json = extract_json(text).ok_or_else(|| "reply contains no JSON object".to_string())?;
    let decision: D = serde_json::from_str(json).map_err(|e| e.to_string())?;
    decision.check()?;
    Ok(decision)
}

/// Asks for a structured decision. A reply that fails to parse or validate
/// gets one repair reprompt (recorded as a `repair` event); a second bad
/// reply is an error. `extra_check` adds caller-side validation.
pub fn decide<D: Decision>(
    backend: &dyn ChatBackend,
    mut request: ChatRequest,
    policy: RetryPolicy,
    recorder: &mut dyn Recorder,
    actor: &Actor,
    extra_check: impl Fn(&D) -> Result<(), String>,
) -> Result<(D, RequestLog), DecisionError> {
    let mut total_attempts = 0;
    loop {
        let (text, attempts) = call_with_retry(backend, &request, policy, recorder, |_| Ok(()))?;
        total_attempts += attempts;
        let reason = match parse_decision::<D>(&text) {
            Ok(d) => match extra_check(&d) {
                Ok(()) => return Ok((d, request_log(backend, &request, total_attempts))),
                Err(reason) => reason,
            },
            Err(reason) => reason,
        };
        if request.repair_round >= 1 {
            return Err(DecisionError::Invalid { purpose: request.purpose, reason });
        }
        recorder.record(
            actor.clone(),
            EventBody::Repair(RepairPayload { call: request.purpose.as_str().into(), reason: reason.clone() }),
        );
        request.turns.push(ChatTurn::assistant(text));
        request.turns.push(ChatTurn::user(prompts::render(
            prompts::REPAIR,
            &[("reason", reason.as_str()), ("schema", D::SCHEMA)],
        )));
        request.repair_round += 1;
    }
}

/// One ROI image handed to the differential call.
#[derive(Clone, Debug)]
pub struct RoiImage {
    pub roi: RoiRecord,
    pub image: Arc<RasterImage>,
}

/// Sends all ROIs in one multi-image request and returns the ranked
/// diagnoses: primary first, then two differentials.
pub fn differential_diagnosis(
    backend: &dyn ChatBackend,
    rois: &[RoiImage],
    clinical_context: &str,
    policy: RetryPolicy,
    recorder: &mut dyn Recorder,
    actor: &Actor,
) -> Result<(DifferentialDecision, RequestLog), DecisionError> {
    if rois.is_empty() || rois.len() > crate::protocol::MAX_CITED_ROIS {
        return Err(DecisionError::Precondition(format!(
            "differential needs 1 to {} ROIs, got {}",
            crate::protocol::MAX_CITED_ROIS,
            rois.len()
        )));
    }
    let listing = rois
        .iter()
        .enumerate()
        .map(|(i, r)| format!("image {} = ROI {}: {}", i + 1, r.roi.roi_id, r.roi.caption))
        .collect::<Vec<_>>()
        .join("\n");
    let text = prompts::render(
        prompts::DIFFERENTIAL_USER,
        &[("context", clinical_context), ("rois", listing.as_str()), ("schema", DifferentialDecision::SCHEMA)],
    );
    let request = ChatRequest::new(
        Purpose::Differential,
        vec![
            ChatTurn::system(prompts::DIFFERENTIAL_SYSTEM.trim()),
            ChatTurn::user_with_images(text, rois.iter().map(|r| ChatImage::new(r.image.clone())).collect()),
        ],
        serde_json::to_value(DifferentialContext {
            clinical_context: clinical_context.to_string(),
            rois: rois.iter().map(|r| r.roi.clone()).collect(),
        })
        .expect("plain data"),
    );
    decide(backend, request, policy, recorder, actor, |_| Ok(()))
}
