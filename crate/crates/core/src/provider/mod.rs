//! Chat-completion backends.
//!
//! Agents talk to a model through [`ChatProvider`]. [`LiveProvider`] calls a
//! chat-completion-compatible HTTP endpoint; [`ScriptedProvider`] answers from
//! a [`Script`] so runs can be replayed offline. [`RecordingProvider`] wraps
//! either one and captures every exchange as a script.

mod live;
mod scripted;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{RenderedPrompt, TemplateId};

pub use live::{LiveConfig, LiveProvider, RetryPolicy, API_BASE_ENV, API_KEY_ENV};
pub use scripted::{MatchKey, RecordingProvider, Script, ScriptEntry, ScriptError, ScriptedProvider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub model_name: String,
    pub temperature: f32,
    pub max_output_tokens: u32,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            model_name: "gpt-4o-mini".into(),
            temperature: 0.0,
            max_output_tokens: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub model_name: String,
    pub temperature: f32,
    pub max_output_tokens: u32,
    /// Template the prompt was rendered from, if any.
    pub template_id: Option<TemplateId>,
    /// Placeholder bindings used for rendering; part of the request digest.
    pub bindings: BTreeMap<String, String>,
}

impl ChatRequest {
    pub fn from_prompt(prompt: &RenderedPrompt, settings: &ModelSettings) -> Self {
        ChatRequest {
            system_text: prompt.system_text.clone(),
            user_text: prompt.user_text.clone(),
            model_name: settings.model_name.clone(),
            temperature: settings.temperature,
            max_output_tokens: settings.max_output_tokens,
            template_id: Some(prompt.template_id),
            bindings: prompt.placeholder_bindings.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.user_text.is_empty() {
            return Err(ProviderError::InvalidRequest("user text is empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ProviderError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(ProviderError::InvalidRequest(
                "max_output_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Stable SHA-256 over the template id and the bindings in key order.
    /// Requests without a template hash their system and user text instead.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut field = |bytes: &[u8]| {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        field(b"evoloop-request-v1");
        match self.template_id {
            Some(id) => {
                field(id.as_str().as_bytes());
                for (k, v) in &self.bindings {
                    field(k.as_bytes());
                    field(v.as_bytes());
                }
            }
            None => {
                field(b"");
                field(self.system_text.as_bytes());
                field(self.user_text.as_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u64,
    pub completion: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub token_usage: TokenUsage,
    pub provider_latency: Duration,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited: {message}")]
    RateLimited {
        retry_after: Option<Duration>,
        message: String,
    },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned an unusable response: {0}")]
    InvalidResponse(String),
    #[error("request rejected: {0}")]
    InvalidRequest(String),
    #[error("no scripted response for request {digest} (call #{index})")]
    ScriptMiss { digest: String, index: u64 },
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ProviderError::RateLimited { .. } | ProviderError::Transport(_) | ProviderError::InvalidResponse(_)
        )
    }
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError>;

    /// Whether callers may issue requests from several threads at once
    /// without changing the answers they get.
    fn supports_concurrency(&self) -> bool {
        true
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for &P {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).complete(req)
    }

    fn supports_concurrency(&self) -> bool {
        (**self).supports_concurrency()
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for Box<P> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).complete(req)
    }

    fn supports_concurrency(&self) -> bool {
        (**self).supports_concurrency()
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for Arc<P> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).complete(req)
    }

    fn supports_concurrency(&self) -> bool {
        (**self).supports_concurrency()
    }
}
