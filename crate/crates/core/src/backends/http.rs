use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{BackendConfig, BackendError, ChatBackend, ChatRequest, Role};
use crate::raster::encode_png;

/// Environment variable holding the bearer token, if the endpoint needs one.
pub const API_KEY_VAR: &str = "PATHLLM_API_KEY";

/// Counting semaphore capping in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("gate lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate lock") += 1;
        self.0.cv.notify_one();
    }
}

/// Chat-completions client. Images travel as base64 PNG data URLs, each
/// followed by a newline text part so image boundaries are explicit.
pub struct HttpChatBackend {
    config: BackendConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    gate: Gate,
}

impl HttpChatBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate().map_err(|message| BackendError::Transport { endpoint: config.endpoint.clone(), message })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport { endpoint: config.endpoint.clone(), message: e.to_string() })?;
        let api_key = std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty());
        let gate = Gate::new(config.max_concurrent_requests);
        Ok(Self { config, api_key, client, gate })
    }

    /// JSON body sent for `request`.
    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let messages: Vec<Value> = request
            .turns
            .iter()
            .map(|turn| {
                let role = match turn.role() {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                if turn.images().is_empty() {
                    return json!({"role": role, "content": turn.text()});
                }
                let mut parts = vec![json!({"type": "text", "text": turn.text()})];
                for (i, img) in turn.images().iter().enumerate() {
                    if i > 0 {
                        parts.push(json!({"type": "text", "text": "\n"}));
                    }
                    let png = encode_png(&img.image).expect("in-memory PNG encoding");
                    let b64 = base64::engine::general_purpose::STANDARD.encode(png);
                    parts.push(
                        json!({"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}}),
                    );
                }
                json!({"role": role, "content": parts})
            })
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": messages,
        });
        if request.purpose.is_structured() {
            body["response_format"] = json!({"type": "json_object"});
        }
        body
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let endpoint = self.config.endpoint.clone();
        let body = self.request_body(request);
        let _permit = self.gate.acquire();
        let mut builder = self.client.post(&endpoint).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout { endpoint: endpoint.clone() }
            } else {
                BackendError::Transport { endpoint: endpoint.clone(), message: e.to_string() }
            }
        })?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| BackendError::Transport { endpoint: endpoint.clone(), message: e.to_string() })?;
        if !status.is_success() {
            let body: String = text.chars().take(500).collect();
            return Err(BackendError::Http { endpoint, status: status.as_u16(), body });
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::Malformed { endpoint: endpoint.clone(), message: e.to_string() })?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Malformed { endpoint, message: "no choices[0].message.content".into() })
    }

    fn describe(&self) -> String {
        format!("{} ({})", self.config.endpoint, self.config.model)
    }
}
