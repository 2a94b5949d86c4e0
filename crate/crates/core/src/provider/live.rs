use std::env;
use std::thread;
use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::header::RETRY_AFTER;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ChatProvider, ChatRequest, ChatResponse, ProviderError, TokenUsage};

pub const API_BASE_ENV: &str = "EVOLOOP_API_BASE";
pub const API_KEY_ENV: &str = "EVOLOOP_API_KEY";

/// Capped exponential backoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts including the first one.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    /// Upper bound on a server-requested `Retry-After` wait.
    pub max_rate_limit_wait: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
            max_rate_limit_wait: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1` (attempts count from 0).
    pub fn delay(&self, attempt: u32, err: &ProviderError) -> Duration {
        if let ProviderError::RateLimited {
            retry_after: Some(wait),
            ..
        } = err
        {
            return (*wait).min(self.max_rate_limit_wait);
        }
        let factor = 2u32.saturating_pow(attempt);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Base URL; requests go to `<base>/chat/completions`.
    pub api_base: String,
    pub api_key: String,
    pub request_timeout: Duration,
    pub retry: RetryPolicy,
}

impl LiveConfig {
    /// Reads `EVOLOOP_API_BASE` and `EVOLOOP_API_KEY`.
    pub fn from_env() -> Result<Self, ProviderError> {
        let api_base =
            env::var(API_BASE_ENV).map_err(|_| ProviderError::InvalidRequest(format!("{API_BASE_ENV} is not set")))?;
        let api_key = env::var(API_KEY_ENV).map_err(|_| ProviderError::Auth(format!("{API_KEY_ENV} is not set")))?;
        Ok(LiveConfig {
            api_base,
            api_key,
            request_timeout: Duration::from_secs(300),
            retry: RetryPolicy::default(),
        })
    }
}

/// Client for chat-completion-compatible JSON endpoints.
#[derive(Debug)]
pub struct LiveProvider {
    client: Client,
    config: LiveConfig,
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl LiveProvider {
    pub fn new(config: LiveConfig) -> Result<Self, ProviderError> {
        let client = Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(LiveProvider { client, config })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.api_base.trim_end_matches('/'))
    }

    fn attempt(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let mut messages = Vec::new();
        if !req.system_text.is_empty() {
            messages.push(json!({"role": "system", "content": req.system_text}));
        }
        messages.push(json!({"role": "user", "content": req.user_text}));
        let body = json!({
            "model": req.model_name,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });

        let started = Instant::now();
        let resp = self
            .client
            .post(self.endpoint())
            .bearer_auth(&self.config.api_key)
            .json(&body)
            .send()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status();
        let retry_after = resp
            .headers()
            .get(RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|s| s.is_finite() && *s >= 0.0)
            .map(Duration::from_secs_f64);
        let text = resp.text().map_err(|e| ProviderError::Transport(e.to_string()))?;

        match status {
            s if s.is_success() => {}
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => return Err(ProviderError::Auth(snippet(&text))),
            StatusCode::TOO_MANY_REQUESTS => {
                return Err(ProviderError::RateLimited {
                    retry_after,
                    message: snippet(&text),
                })
            }
            s if s.is_server_error() || s == StatusCode::REQUEST_TIMEOUT => {
                return Err(ProviderError::Transport(format!("HTTP {s}: {}", snippet(&text))))
            }
            s => return Err(ProviderError::InvalidRequest(format!("HTTP {s}: {}", snippet(&text)))),
        }

        let parsed: CompletionBody =
            serde_json::from_str(&text).map_err(|e| ProviderError::InvalidResponse(e.to_string()))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::InvalidResponse("no message content in first choice".into()))?;
        let usage = parsed.usage.map_or(TokenUsage::default(), |u| TokenUsage {
            prompt: u.prompt_tokens,
            completion: u.completion_tokens,
        });
        Ok(ChatResponse {
            text: content,
            token_usage: usage,
            provider_latency: started.elapsed(),
        })
    }
}

fn snippet(body: &str) -> String {
    body.chars().take(300).collect()
}

impl ChatProvider for LiveProvider {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        req.validate()?;
        let policy = &self.config.retry;
        let mut attempt = 0;
        loop {
            match self.attempt(req) {
                Ok(resp) => return Ok(resp),
                Err(err) if err.is_retryable() && attempt + 1 < policy.max_attempts => {
                    let wait = policy.delay(attempt, &err);
                    tracing::warn!(attempt, ?wait, error = %err, "retrying chat completion");
                    thread::sleep(wait);
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }
}
