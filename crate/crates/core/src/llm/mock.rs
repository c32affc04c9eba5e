//! Deterministic scripted backend for tests and offline runs.
//!
//! Rules are tried in order. A rule matches on the exact prompt or on a regex
//! over the prompt, optionally restricted to one endpoint name. Each rule owns
//! a reply sequence; every match advances it and the last reply repeats.

use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{ChatBackend, Completion, FinishReason, LlmError, ModelEndpoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    Text(String),
    Error { error: String },
    Truncated { text: String, finish_reason: FinishReason },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Exact prompt match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    /// Regex searched in the prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub responses: Vec<MockReply>,
}

/// On-disk form of a mock backend (`--mock <file>`).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockFixture {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Reply when no rule matches; without it an unmatched prompt is an error.
    #[serde(default)]
    pub default: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub endpoint: String,
    pub prompt: String,
}

#[derive(Debug)]
struct CompiledRule {
    endpoint: Option<String>,
    prompt: Option<String>,
    pattern: Option<Regex>,
    responses: Vec<MockReply>,
}

impl CompiledRule {
    fn matches(&self, endpoint: &str, prompt: &str) -> bool {
        self.endpoint.as_deref().is_none_or(|e| e == endpoint)
            && self.prompt.as_deref().is_none_or(|p| p == prompt)
            && self.pattern.as_ref().is_none_or(|r| r.is_match(prompt))
    }
}

#[derive(Debug)]
pub struct MockBackend {
    rules: Vec<CompiledRule>,
    default: Option<String>,
    state: Mutex<MockState>,
}

#[derive(Debug, Default)]
struct MockState {
    cursors: Vec<usize>,
    log: Vec<RequestRecord>,
}

impl MockBackend {
    pub fn from_fixture(fixture: MockFixture) -> Result<Self, regex::Error> {
        let rules = fixture
            .rules
            .into_iter()
            .map(|r| {
                Ok(CompiledRule {
                    endpoint: r.endpoint,
                    prompt: r.prompt,
                    pattern: r.pattern.as_deref().map(Regex::new).transpose()?,
                    responses: r.responses,
                })
            })
            .collect::<Result<Vec<_>, regex::Error>>()?;
        let cursors = vec![0; rules.len()];
        Ok(Self {
            rules,
            default: fixture.default,
            state: Mutex::new(MockState {
                cursors,
                log: Vec::new(),
            }),
        })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)?;
        let fixture: MockFixture = serde_json::from_str(&text)?;
        Ok(Self::from_fixture(fixture)?)
    }

    /// Exact prompt → reply map.
    pub fn canned<I, P, R>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (P, R)>,
        P: Into<String>,
        R: Into<String>,
    {
        let rules = pairs
            .into_iter()
            .map(|(p, r)| MockRule {
                prompt: Some(p.into()),
                responses: vec![MockReply::Text(r.into())],
                ..Default::default()
            })
            .collect();
        Self::from_fixture(MockFixture {
            rules,
            default: None,
        })
        .expect("no patterns")
    }

    /// Replies from `replies` in order regardless of prompt; the last repeats.
    pub fn sequence<I: IntoIterator<Item = MockReply>>(replies: I) -> Self {
        Self::from_fixture(MockFixture {
            rules: vec![MockRule {
                responses: replies.into_iter().collect(),
                ..Default::default()
            }],
            default: None,
        })
        .expect("no patterns")
    }

    pub fn requests(&self) -> Vec<RequestRecord> {
        self.state.lock().unwrap().log.clone()
    }

    pub fn request_count(&self) -> usize {
        self.state.lock().unwrap().log.len()
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, endpoint: &ModelEndpoint, prompt: &str) -> Result<Completion, LlmError> {
        if prompt.is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let mut state = self.state.lock().unwrap();
        state.log.push(RequestRecord {
            endpoint: endpoint.name.clone(),
            prompt: prompt.to_owned(),
        });
        let reply = match self
            .rules
            .iter()
            .position(|r| r.matches(&endpoint.name, prompt))
        {
            Some(idx) => {
                let rule = &self.rules[idx];
                let cursor = state.cursors[idx];
                state.cursors[idx] += 1;
                rule.responses
                    .get(cursor.min(rule.responses.len().saturating_sub(1)))
                    .cloned()
                    .unwrap_or(MockReply::Text(String::new()))
            }
            None => match &self.default {
                Some(d) => MockReply::Text(d.clone()),
                None => {
                    return Err(LlmError::Transport {
                        attempts: 1,
                        message: format!("mock has no reply for endpoint {}", endpoint.name),
                    })
                }
            },
        };
        match reply {
            MockReply::Text(text) => Ok(Completion {
                text,
                finish_reason: FinishReason::Stop,
                latency: Duration::ZERO,
                prompt_tokens: None,
                completion_tokens: None,
            }),
            MockReply::Truncated {
                text,
                finish_reason,
            } => Ok(Completion {
                text,
                finish_reason,
                latency: Duration::ZERO,
                prompt_tokens: None,
                completion_tokens: None,
            }),
            MockReply::Error { error } => Err(LlmError::Transport {
                attempts: 1,
                message: error,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canned_map_echo() {
        let mock = MockBackend::canned([("P1", "Staff")]);
        let c = mock.complete(&ModelEndpoint::mock("m"), "P1").unwrap();
        assert_eq!(c.text, "Staff");
        assert_eq!(c.finish_reason, FinishReason::Stop);
        assert!(mock.complete(&ModelEndpoint::mock("m"), "P2").is_err());
    }

    #[test]
    fn same_prompt_same_text() {
        let mock = MockBackend::canned([("P1", "Staff")]);
        let ep = ModelEndpoint::mock("m");
        let a = mock.complete(&ep, "P1").unwrap().text;
        let b = mock.complete(&ep, "P1").unwrap().text;
        assert_eq!(a, b);
    }

    #[test]
    fn sequences_advance_then_repeat_last() {
        let mock = MockBackend::sequence([
            MockReply::Error {
                error: "reset".into(),
            },
            MockReply::Text("ok".into()),
        ]);
        let ep = ModelEndpoint::mock("m");
        assert!(matches!(
            mock.complete(&ep, "x"),
            Err(LlmError::Transport { .. })
        ));
        assert_eq!(mock.complete(&ep, "x").unwrap().text, "ok");
        assert_eq!(mock.complete(&ep, "x").unwrap().text, "ok");
        assert_eq!(mock.request_count(), 3);
    }

    #[test]
    fn fixture_json_with_regex_and_endpoint_scope() {
        let fixture: MockFixture = serde_json::from_str(
            r#"{"rules": [
                {"endpoint": "gen", "pattern": "(?i)janessa", "responses": ["SELECT 1"]},
                {"pattern": "(?i)janessa", "responses": [{"error": "boom"}]},
                {"pattern": "cut", "responses": [{"text": "SEL", "finish_reason": "length"}]}
            ], "default": "fallback"}"#,
        )
        .unwrap();
        let mock = MockBackend::from_fixture(fixture).unwrap();
        let gen = ModelEndpoint::mock("gen");
        let other = ModelEndpoint::mock("link");
        assert_eq!(mock.complete(&gen, "about Janessa").unwrap().text, "SELECT 1");
        assert!(mock.complete(&other, "about Janessa").is_err());
        assert_eq!(
            mock.complete(&other, "cut here").unwrap().finish_reason,
            FinishReason::Length
        );
        assert_eq!(mock.complete(&other, "nothing").unwrap().text, "fallback");
        let log = mock.requests();
        assert_eq!(log[0].endpoint, "gen");
        assert_eq!(log[1].endpoint, "link");
    }
}
