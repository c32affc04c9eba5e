//! Blocking OpenAI-compatible chat-completions client.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;
use tracing::{debug, warn};

use super::{ChatBackend, Completion, FinishReason, LlmError, ModelEndpoint};

const DEFAULT_BACKOFF_BASE: Duration = Duration::from_millis(500);

/// Counting semaphore bounding in-flight requests per endpoint.
#[derive(Debug)]
struct Gate {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn acquire(self: &Arc<Self>) -> GatePermit {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.freed.wait(p).unwrap();
        }
        *p -= 1;
        GatePermit(Arc::clone(self))
    }
}

struct GatePermit(Arc<Gate>);

impl Drop for GatePermit {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    backoff_base: Duration,
    gates: Mutex<HashMap<String, Arc<Gate>>>,
}

impl Default for HttpBackend {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: Option<u32>,
    completion_tokens: Option<u32>,
}

enum Failure {
    Retryable(String),
    Fatal(LlmError),
}

impl HttpBackend {
    pub fn new() -> Self {
        Self {
            backoff_base: DEFAULT_BACKOFF_BASE,
            gates: Mutex::new(HashMap::new()),
        }
    }

    /// Delay before the first retry; doubles on each subsequent one.
    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn gate(&self, endpoint: &ModelEndpoint) -> Arc<Gate> {
        let mut gates = self.gates.lock().unwrap();
        Arc::clone(
            gates
                .entry(endpoint.name.clone())
                .or_insert_with(|| Arc::new(Gate::new(endpoint.max_concurrency.max(1)))),
        )
    }

    fn attempt(
        &self,
        endpoint: &ModelEndpoint,
        url: &str,
        token: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<Completion, Failure> {
        let agent = ureq::AgentBuilder::new().timeout(endpoint.timeout).build();
        let mut req = agent.post(url).set("Content-Type", "application/json");
        if let Some(t) = token {
            req = req.set("Authorization", &format!("Bearer {t}"));
        }
        let started = Instant::now();
        let resp = match req.send_json(body.clone()) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                let text = r.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {}", text.chars().take(300).collect::<String>());
                return Err(if code == 429 || code >= 500 {
                    Failure::Retryable(msg)
                } else {
                    Failure::Fatal(LlmError::BadResponse(msg))
                });
            }
            Err(ureq::Error::Transport(t)) => return Err(Failure::Retryable(t.to_string())),
        };
        let raw = resp
            .into_string()
            .map_err(|e| Failure::Retryable(e.to_string()))?;
        let latency = started.elapsed();
        let parsed: ChatResponse = serde_json::from_str(&raw)
            .map_err(|e| Failure::Fatal(LlmError::BadResponse(e.to_string())))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Failure::Fatal(LlmError::BadResponse("no choices".into())))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("stop") | None => FinishReason::Stop,
            Some(_) => FinishReason::Error,
        };
        Ok(Completion {
            text: choice.message.content.unwrap_or_default(),
            finish_reason,
            latency,
            prompt_tokens: parsed.usage.as_ref().and_then(|u| u.prompt_tokens),
            completion_tokens: parsed.usage.as_ref().and_then(|u| u.completion_tokens),
        })
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, endpoint: &ModelEndpoint, prompt: &str) -> Result<Completion, LlmError> {
        if prompt.is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let token = match &endpoint.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .ok()
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| LlmError::AuthMissing(var.clone()))?,
            ),
            None => None,
        };
        let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));
        let body = json!({
            "model": endpoint.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": endpoint.temperature,
            "max_tokens": endpoint.max_tokens,
        });

        let _permit = self.gate(endpoint).acquire();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(endpoint, &url, token.as_deref(), &body) {
                Ok(c) => {
                    debug!(endpoint = %endpoint.name, attempts, "completion ok");
                    return Ok(c);
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(message)) => {
                    if attempts > endpoint.max_retries {
                        return Err(LlmError::Transport { attempts, message });
                    }
                    let delay = self.backoff_base * 2u32.saturating_pow(attempts - 1);
                    warn!(endpoint = %endpoint.name, attempts, %message, ?delay, "retrying");
                    thread::sleep(delay);
                }
            }
        }
    }
}
