//! External-LLM extraction backend: a JSON chat-completion request over
//! HTTPS with retries, parsed back through the recovery-mode graph parser.
//! Offline operation is the default; this backend only runs when a
//! configuration names an endpoint.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::kg::{parse_graph, KnowledgeGraph, ParseMode, SkippedLine};

use super::{build_remote_prompt, Instruction, IntentError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Chat-completion endpoint URL; empty means unconfigured.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer credential.
    pub credential_env: String,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: String::new(),
            model: "gpt-4o".into(),
            credential_env: "TADARAG_API_KEY".into(),
            max_attempts: 3,
            initial_backoff_ms: 200,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteReply {
    pub graph: KnowledgeGraph,
    pub skipped: Vec<SkippedLine>,
    pub raw: String,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

/// Sends the verbose extraction prompt and parses the reply in recovery
/// mode. Transport failures and 5xx responses retry with exponential
/// backoff up to `max_attempts`; configuration problems fail before any
/// network activity.
pub fn remote_extract(i: &Instruction, cfg: &RemoteConfig) -> Result<RemoteReply, IntentError> {
    if cfg.endpoint.is_empty() {
        return Err(IntentError::Config("endpoint is not set".into()));
    }
    if cfg.max_attempts == 0 {
        return Err(IntentError::Config("max_attempts must be at least 1".into()));
    }
    let credential = std::env::var(&cfg.credential_env).map_err(|_| {
        IntentError::Config(format!(
            "credential environment variable {:?} is not set",
            cfg.credential_env
        ))
    })?;
    let body = json!({
        "model": cfg.model,
        "messages": [{"role": "user", "content": build_remote_prompt(i)}],
    });
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(cfg.timeout_secs))
        .build()
        .map_err(|e| IntentError::Config(e.to_string()))?;

    let mut last = String::new();
    for attempt in 0..cfg.max_attempts {
        if attempt > 0 {
            let backoff = cfg.initial_backoff_ms.saturating_mul(1 << (attempt - 1));
            std::thread::sleep(Duration::from_millis(backoff));
        }
        let sent = client
            .post(&cfg.endpoint)
            .bearer_auth(&credential)
            .json(&body)
            .send();
        match sent {
            Err(e) => last = e.to_string(),
            Ok(resp) => {
                let status = resp.status();
                if status.is_server_error() {
                    last = format!("server returned {status}");
                    continue;
                }
                if !status.is_success() {
                    return Err(IntentError::Remote {
                        attempts: attempt + 1,
                        last: format!("server returned {status}"),
                    });
                }
                let parsed: ChatResponse = match resp.json() {
                    Ok(p) => p,
                    Err(e) => {
                        last = format!("malformed response body: {e}");
                        continue;
                    }
                };
                let content = parsed
                    .choices
                    .first()
                    .map(|c| c.message.content.clone())
                    .unwrap_or_default();
                let report = parse_graph(&content, ParseMode::Recovery)
                    .expect("recovery mode is total");
                let mut graph = report.graph;
                graph.domain = i.template.domain.label().to_string();
                return Ok(RemoteReply {
                    graph,
                    skipped: report.skipped,
                    raw: content,
                });
            }
        }
    }
    Err(IntentError::Remote {
        attempts: cfg.max_attempts,
        last,
    })
}
