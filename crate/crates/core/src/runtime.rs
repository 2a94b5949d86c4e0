//! One LLM call per agent step, with format repair.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{ParseError, RenderError, TaskSpec, TemplateId, TemplateSet, DEFAULT_TEST_PREFIX};
use crate::graph::{TieBreak, DEFAULT_MAX_NODES};
use crate::provider::{ChatProvider, ChatRequest, ModelSettings, ProviderError};

/// Binding that carries the previous attempt's parse error on a repair call.
pub const REPAIR_BINDING: &str = "repair_note";

/// Knobs shared by every agent call in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeSettings {
    pub model: ModelSettings,
    /// Extra attempts after a reply that does not parse.
    pub max_repair_retries: u32,
    /// Upper bound on concurrent agent calls within one forward pass.
    pub parallelism: usize,
    /// Tail of each predecessor's reply shown to a node.
    pub predecessor_budget: usize,
    /// Content budget of the workspace listing bound to `{codes}`.
    pub listing_budget: usize,
    pub max_nodes: usize,
    pub test_prefix: String,
    /// Bound to the coding organizer's `{ideas}`.
    pub ideas: String,
    /// Bound to the coding agent's `{additional_note}`.
    pub additional_note: String,
}

impl Default for RuntimeSettings {
    fn default() -> Self {
        RuntimeSettings {
            model: ModelSettings::default(),
            max_repair_retries: 2,
            parallelism: 4,
            predecessor_budget: 8 * 1024,
            listing_budget: 48 * 1024,
            max_nodes: DEFAULT_MAX_NODES,
            test_prefix: DEFAULT_TEST_PREFIX.to_string(),
            ideas: String::new(),
            additional_note: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentCallError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("unusable reply after {attempts} attempts: {last}")]
    Parse { attempts: u32, last: ParseError },
}

/// A parsed reply plus what it took to get it.
#[derive(Debug, Clone, PartialEq)]
pub struct CallOutcome<T> {
    pub value: T,
    pub reply: String,
    pub prompt_digest: String,
    pub reply_digest: String,
    /// Repair attempts used (0 when the first reply parsed).
    pub retries: u32,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Provider, templates and settings for a run.
pub struct AgentRuntime<'p> {
    provider: &'p dyn ChatProvider,
    templates: TemplateSet,
    settings: RuntimeSettings,
    /// Sibling order used by forward passes. Tests flip it to check that
    /// results do not depend on it.
    pub tie_break: TieBreak,
}

impl std::fmt::Debug for AgentRuntime<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentRuntime")
            .field("settings", &self.settings)
            .field("tie_break", &self.tie_break)
            .finish_non_exhaustive()
    }
}

impl<'p> AgentRuntime<'p> {
    pub fn new(provider: &'p dyn ChatProvider, settings: RuntimeSettings) -> Self {
        Self::with_templates(provider, TemplateSet::builtin(), settings)
    }

    pub fn with_templates(provider: &'p dyn ChatProvider, templates: TemplateSet, settings: RuntimeSettings) -> Self {
        AgentRuntime {
            provider,
            templates,
            settings,
            tie_break: TieBreak::Canonical,
        }
    }

    pub fn settings(&self) -> &RuntimeSettings {
        &self.settings
    }

    pub fn provider(&self) -> &dyn ChatProvider {
        self.provider
    }

    /// Renders `id`, asks the model, and parses the reply. A reply that fails
    /// to parse is retried up to `max_repair_retries` times with the error
    /// appended to the prompt. `extra` is appended to the user text of every
    /// attempt; `context` must already contain it as a binding if it should
    /// influence the request digest.
    pub fn call<T>(
        &self,
        id: TemplateId,
        task: &TaskSpec,
        context: &BTreeMap<String, String>,
        extra: &str,
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<CallOutcome<T>, AgentCallError> {
        let mut ctx = context.clone();
        let mut attempt = 0;
        loop {
            let prompt = self.templates.render(id, task, &ctx)?;
            let mut req = ChatRequest::from_prompt(&prompt, &self.settings.model);
            req.user_text.push_str(extra);
            if let Some(note) = ctx.get(REPAIR_BINDING) {
                req.user_text.push_str("\n\n");
                req.user_text.push_str(note);
            }
            let prompt_digest = req.digest();
            let resp = self.provider.complete(&req)?;
            match parse(&resp.text) {
                Ok(value) => {
                    return Ok(CallOutcome {
                        value,
                        reply_digest: sha256_hex(resp.text.as_bytes()),
                        reply: resp.text,
                        prompt_digest,
                        retries: attempt,
                    })
                }
                Err(err) if err.is_retryable() && attempt < self.settings.max_repair_retries => {
                    tracing::warn!(template = %id, attempt, error = %err, "reply did not parse, asking again");
                    attempt += 1;
                    ctx.insert(
                        REPAIR_BINDING.to_string(),
                        format!(
                            "Your previous reply could not be used ({err}). Answer again and follow the required format exactly."
                        ),
                    );
                }
                Err(err) => {
                    return Err(AgentCallError::Parse {
                        attempts: attempt + 1,
                        last: err,
                    })
                }
            }
        }
    }
}
