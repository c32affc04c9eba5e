//! Run configuration file (TOML).
//!
//! ```toml
//! [defaults]
//! num_shuffles = 5
//! exec_timeout_secs = 30
//! jobs = 4
//!
//! [endpoints.codeqwen]
//! base_url = "http://localhost:8000/v1"
//! model_id = "CodeQwen1.5-7B-Chat"
//! api_key_env = "XSQL_API_KEY"   # optional
//! temperature = 0.0
//! max_tokens = 1024
//! timeout = 120
//! max_retries = 2
//! max_concurrency = 4
//!
//! [routing]
//! linking = "codeqwen"
//! admin = "codeqwen"
//! generation = "codeqwen"
//! debugging = "deepseek"
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{LlmError, ModelEndpoint, RoutingConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("routing slot {slot} names unknown endpoint {name:?}")]
    UnknownEndpoint { slot: &'static str, name: String },
    #[error(transparent)]
    Endpoint(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defaults {
    #[serde(default = "five")]
    pub num_shuffles: usize,
    #[serde(default = "thirty")]
    pub exec_timeout_secs: f64,
    #[serde(default = "four")]
    pub jobs: usize,
    /// Debugging prompt gets all foreign keys rather than the filtered set.
    #[serde(default = "yes")]
    pub debug_uses_all_foreign_keys: bool,
}

fn five() -> usize {
    5
}
fn thirty() -> f64 {
    30.0
}
fn four() -> usize {
    4
}
fn yes() -> bool {
    true
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            num_shuffles: five(),
            exec_timeout_secs: thirty(),
            jobs: four(),
            debug_uses_all_foreign_keys: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEndpoint {
    base_url: String,
    model_id: String,
    #[serde(default)]
    api_key_env: Option<String>,
    #[serde(default)]
    temperature: Option<f64>,
    #[serde(default)]
    max_tokens: Option<u32>,
    #[serde(default)]
    timeout: Option<f64>,
    #[serde(default)]
    max_retries: Option<u32>,
    #[serde(default)]
    max_concurrency: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRouting {
    linking: String,
    admin: String,
    generation: String,
    debugging: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    defaults: Defaults,
    endpoints: BTreeMap<String, RawEndpoint>,
    routing: RawRouting,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub defaults: Defaults,
    pub routing: RoutingConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let endpoint = |slot: &'static str, name: &str| -> Result<ModelEndpoint, ConfigError> {
            let r = raw
                .endpoints
                .get(name)
                .ok_or_else(|| ConfigError::UnknownEndpoint {
                    slot,
                    name: name.to_owned(),
                })?;
            let base = ModelEndpoint::mock(name);
            let ep = ModelEndpoint {
                name: name.to_owned(),
                base_url: r.base_url.clone(),
                model_id: r.model_id.clone(),
                api_key_env: r.api_key_env.clone(),
                temperature: r.temperature.unwrap_or(0.0),
                max_tokens: r.max_tokens.unwrap_or(base.max_tokens),
                timeout: match r.timeout {
                    Some(s) => std::time::Duration::try_from_secs_f64(s)
                        .map_err(|e| ConfigError::Parse(format!("endpoint {name}: timeout: {e}")))?,
                    None => base.timeout,
                },
                max_retries: r.max_retries.unwrap_or(2),
                max_concurrency: r.max_concurrency.unwrap_or(base.max_concurrency),
            };
            ep.validate()?;
            Ok(ep)
        };
        let routing = RoutingConfig {
            linking: endpoint("linking", &raw.routing.linking)?,
            admin: endpoint("admin", &raw.routing.admin)?,
            generation: endpoint("generation", &raw.routing.generation)?,
            debugging: endpoint("debugging", &raw.routing.debugging)?,
        };
        if raw.defaults.num_shuffles == 0 {
            return Err(ConfigError::Parse("defaults.num_shuffles must be >= 1".into()));
        }
        Ok(Self {
            defaults: raw.defaults,
            routing,
        })
    }

    /// Configuration used with `--mock` when no file is given: one mock
    /// endpoint per component, named after the component.
    pub fn mock() -> Self {
        Self {
            defaults: Defaults::default(),
            routing: RoutingConfig {
                linking: ModelEndpoint::mock("linking"),
                admin: ModelEndpoint::mock("admin"),
                generation: ModelEndpoint::mock("generation"),
                debugging: ModelEndpoint::mock("debugging"),
            },
        }
    }
}
