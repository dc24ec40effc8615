//! Chat-completion client used for remote corpus generation.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::SynthError;
use crate::lexicon::BehaviorLexicon;

use super::prompt::{build_prompt, build_user_message, PromptSpec};

/// Anything that turns a (system, user) message pair into completion text.
pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        system: &str,
        user: &str,
        temperature: f64,
        max_tokens: u32,
    ) -> Result<String, SynthError>;

    /// Provenance recorded in generated corpora.
    fn model_name(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token. `None` sends no
    /// Authorization header.
    pub api_key_env: Option<String>,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub timeout_secs: u64,
}

impl EndpointConfig {
    pub fn new(base_url: &str, model: &str) -> Self {
        EndpointConfig {
            base_url: base_url.to_string(),
            model: model.to_string(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            max_attempts: 3,
            backoff_base_ms: 500,
            timeout_secs: 120,
        }
    }
}

pub struct HttpChatClient {
    config: EndpointConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(config: EndpointConfig) -> Result<Self, SynthError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| SynthError::MissingApiKey(var.clone()))?,
            ),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Ok(HttpChatClient {
            config,
            api_key,
            agent,
        })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &serde_json::Value) -> Attempt {
        let mut req = self.agent.post(&self.url());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if (200..300).contains(&status) {
            Attempt::Done(extract_content(&text))
        } else if status == 429 || status >= 500 {
            Attempt::Retry(format!("status {status}: {}", excerpt(&text)))
        } else {
            Attempt::Done(Err(SynthError::Status {
                status,
                body: excerpt(&text),
            }))
        }
    }
}

enum Attempt {
    Done(Result<String, SynthError>),
    Retry(String),
}

fn excerpt(body: &str) -> String {
    const MAX: usize = 200;
    match body.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}...", &body[..i]),
        None => body.to_string(),
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

fn extract_content(body: &str) -> Result<String, SynthError> {
    let parsed: CompletionResponse =
        serde_json::from_str(body).map_err(|e| SynthError::Response(e.to_string()))?;
    let content = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .unwrap_or_default();
    if content.trim().is_empty() {
        Err(SynthError::EmptyCompletion)
    } else {
        Ok(content)
    }
}

impl ChatBackend for HttpChatClient {
    fn complete(
        &self,
        system: &str,
        user: &str,
        temperature: f64,
        max_tokens: u32,
    ) -> Result<String, SynthError> {
        let body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": temperature,
            "max_tokens": max_tokens,
        });
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.config.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(&body) {
                Attempt::Done(r) => return r,
                Attempt::Retry(msg) => last = msg,
            }
        }
        Err(SynthError::Transport {
            attempts,
            message: last,
        })
    }

    fn model_name(&self) -> &str {
        &self.config.model
    }
}

/// One chat-completion request; returns the message text verbatim.
pub fn generate_remote(
    spec: &PromptSpec,
    lex: &BehaviorLexicon,
    backend: &dyn ChatBackend,
) -> Result<String, SynthError> {
    let system = build_prompt(spec, lex);
    let user = build_user_message(spec);
    backend.complete(&system, &user, spec.temperature, spec.max_tokens)
}
