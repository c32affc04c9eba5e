//! Chat-completion backends and per-component model routing.

mod http;
mod mock;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use mock::{MockBackend, MockFixture, MockReply, MockRule, RequestRecord};

pub const MAX_RETRIES_LIMIT: u32 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("environment variable {0} holding the API key is not set")]
    AuthMissing(String),
    #[error("unparseable response: {0}")]
    BadResponse(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("invalid endpoint {name}: {reason}")]
    InvalidEndpoint { name: String, reason: String },
}

/// One model served behind an OpenAI-compatible chat-completions API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub name: String,
    pub base_url: String,
    pub model_id: String,
    /// Name of the environment variable holding the bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout", with = "secs")]
    pub timeout: Duration,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// In-flight request cap for this endpoint.
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
}

fn default_max_tokens() -> u32 {
    1024
}
fn default_timeout() -> Duration {
    Duration::from_secs(120)
}
fn default_max_retries() -> u32 {
    2
}
fn default_max_concurrency() -> usize {
    4
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl ModelEndpoint {
    /// An endpoint that only makes sense against a [`MockBackend`].
    pub fn mock(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            base_url: "mock://".to_owned(),
            model_id: name.to_owned(),
            api_key_env: None,
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            timeout: default_timeout(),
            max_retries: 0,
            max_concurrency: default_max_concurrency(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        let bad = |reason: &str| {
            Err(LlmError::InvalidEndpoint {
                name: self.name.clone(),
                reason: reason.to_owned(),
            })
        };
        if !self.temperature.is_finite() || !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must be finite and within [0, 2]");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1");
        }
        if self.max_retries > MAX_RETRIES_LIMIT {
            return bad("max_retries must be at most 5");
        }
        if self.max_concurrency == 0 {
            return bad("max_concurrency must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
    #[serde(with = "secs")]
    pub latency: Duration,
    pub prompt_tokens: Option<u32>,
    pub completion_tokens: Option<u32>,
}

/// Anything that can answer a single-turn chat prompt on behalf of an endpoint.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, endpoint: &ModelEndpoint, prompt: &str) -> Result<Completion, LlmError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn complete(&self, endpoint: &ModelEndpoint, prompt: &str) -> Result<Completion, LlmError> {
        (**self).complete(endpoint, prompt)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, endpoint: &ModelEndpoint, prompt: &str) -> Result<Completion, LlmError> {
        (**self).complete(endpoint, prompt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Linking,
    Admin,
    Generation,
    Debugging,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Linking,
        Component::Admin,
        Component::Generation,
        Component::Debugging,
    ];
}

/// Which endpoint serves which pipeline component. Slots may alias one model
/// (single-LLM mode) or each name a different one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub linking: ModelEndpoint,
    pub admin: ModelEndpoint,
    pub generation: ModelEndpoint,
    pub debugging: ModelEndpoint,
}

impl RoutingConfig {
    pub fn single(endpoint: ModelEndpoint) -> Self {
        Self {
            linking: endpoint.clone(),
            admin: endpoint.clone(),
            generation: endpoint.clone(),
            debugging: endpoint,
        }
    }

    pub fn route(&self, component: Component) -> &ModelEndpoint {
        match component {
            Component::Linking => &self.linking,
            Component::Admin => &self.admin,
            Component::Generation => &self.generation,
            Component::Debugging => &self.debugging,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        Component::ALL
            .iter()
            .try_for_each(|c| self.route(*c).validate())
    }
}
