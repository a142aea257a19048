//! OpenAI-compatible chat-completions backend.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendConfig, BackendError, ClientError, Completion};
use crate::prompt::PromptRequest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Request body: `{"model", "temperature": 0, "messages": [system, user]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequestBody {
    pub model: String,
    pub temperature: u8,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequestBody {
    pub fn from_prompt(model: &str, req: &PromptRequest) -> Self {
        Self {
            model: model.to_string(),
            temperature: 0,
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: req.system_text.clone(),
                },
                ChatMessage {
                    role: "user".into(),
                    content: req.user_text.clone(),
                },
            ],
        }
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChatMessage,
}

#[derive(Debug)]
pub struct HttpBackend {
    http: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    token: Option<String>,
    max_retries: u32,
    backoff_base: Duration,
}

enum Failure {
    Transient { status: Option<u16>, message: String },
    Terminal(BackendError),
}

impl HttpBackend {
    /// Reads the bearer token from the environment variable named in the config.
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, ClientError> {
        let endpoint = cfg
            .endpoint
            .clone()
            .ok_or_else(|| ClientError::InvalidConfig("http backend requires an endpoint".into()))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| ClientError::InvalidConfig(format!("http client: {e}")))?;
        Ok(Self {
            http,
            endpoint,
            model: cfg.model_name(),
            token: std::env::var(&cfg.token_env).ok().filter(|t| !t.is_empty()),
            max_retries: cfg.max_retries,
            backoff_base: Duration::from_millis(cfg.backoff_base_ms),
        })
    }

    fn attempt(&self, body: &ChatRequestBody) -> Result<String, Failure> {
        let mut req = self.http.post(&self.endpoint).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| Failure::Transient {
            status: e.status().map(|s| s.as_u16()),
            message: e.to_string(),
        })?;
        let status = resp.status();
        if status.is_success() {
            let text = resp.text().map_err(|e| Failure::Transient {
                status: Some(status.as_u16()),
                message: e.to_string(),
            })?;
            let parsed: ChatResponse =
                serde_json::from_str(&text).map_err(|e| Failure::Terminal(BackendError::Protocol(e.to_string())))?;
            return parsed
                .choices
                .into_iter()
                .next()
                .map(|c| c.message.content)
                .ok_or_else(|| Failure::Terminal(BackendError::Protocol("response has no choices".into())));
        }
        let code = status.as_u16();
        let message = resp.text().unwrap_or_default();
        if code == 429 || status.is_server_error() {
            Err(Failure::Transient {
                status: Some(code),
                message,
            })
        } else {
            Err(Failure::Terminal(BackendError::Status { status: code, message }))
        }
    }
}

impl Backend for HttpBackend {
    fn complete(&self, req: &PromptRequest) -> Result<Completion, BackendError> {
        let body = ChatRequestBody::from_prompt(&self.model, req);
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match self.attempt(&body) {
                Ok(text) => return Ok(Completion { text, attempt }),
                Err(Failure::Terminal(e)) => return Err(e),
                Err(Failure::Transient { status, message }) => {
                    if attempt > self.max_retries {
                        return Err(BackendError::Exhausted {
                            attempts: attempt,
                            status,
                            message,
                        });
                    }
                    log::debug!("attempt {attempt} failed ({status:?}): {message}; retrying");
                    std::thread::sleep(self.backoff_base * 2u32.pow(attempt - 1));
                }
            }
        }
    }
}
