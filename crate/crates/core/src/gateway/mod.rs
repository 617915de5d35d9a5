//! One interface for the three model roles (group profiles, novel-category
//! generation, relevance scoring), prompt templates, and two backends: a
//! deterministic simulated one built on the small trainable models, and a
//! chat-completion HTTP client.

mod http;
mod simulated;
mod templates;

pub use http::{parse_candidates, parse_score, HttpBackend};
pub use simulated::{SimState, SimulatedBackend};
pub use templates::{render_profile_prompt, render_prompt, PromptRole, Templates};

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::GroupCsid;
use crate::training::PairContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Simulated,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewayConfig {
    pub backend: BackendKind,
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_concurrency: usize,
    pub templates_dir: Option<PathBuf>,
    pub temperature: f64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Simulated,
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "qwen2.5-7b-instruct".into(),
            api_key_env: "COEA_API_KEY".into(),
            timeout_secs: 60.0,
            retries: 3,
            backoff_ms: 500,
            max_concurrency: 4,
            templates_dir: None,
            temperature: 0.7,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_concurrency == 0 {
            return Err(Error::Config("gateway.max_concurrency must be at least 1".into()));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Config("gateway.timeout_secs must be positive".into()));
        }
        if self.backend == BackendKind::Http && self.endpoint.is_empty() {
            return Err(Error::Config("gateway.endpoint is required for the http backend".into()));
        }
        Ok(())
    }
}

/// Structured inputs behind a rendered prompt, kept alongside the text so
/// the simulated backend can featurize without parsing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptContext {
    pub group: Option<GroupCsid>,
    /// Categories shown in the prompt.
    pub window: Vec<String>,
    /// The full deduplicated short-window category list.
    pub short_categories: Vec<String>,
    pub candidate: Option<String>,
    pub sequences: Vec<Vec<String>>,
}

impl PromptContext {
    pub fn pair_context(&self) -> PairContext {
        PairContext {
            group: self.group.clone(),
            window: self.window.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub role: PromptRole,
    pub text: String,
    pub slots: BTreeMap<String, String>,
    pub context: PromptContext,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub categories: Vec<String>,
    /// Fewer than the requested number of categories were available.
    pub truncated: bool,
}

pub trait LlmBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn generate_profile(&self, prompt: &RenderedPrompt) -> Result<String>;

    fn generate_candidates(&self, prompt: &RenderedPrompt, m_cand: usize) -> Result<CandidateSet>;

    fn score_candidate(&self, prompt: &RenderedPrompt) -> Result<f64>;

    /// The simulated backend, whose models can be fine-tuned in process.
    fn simulated(&self) -> Option<&SimulatedBackend> {
        None
    }
}

fn expect_role(prompt: &RenderedPrompt, role: PromptRole) -> Result<()> {
    if prompt.role != role {
        return Err(Error::InvalidPrompt(format!(
            "expected a {} prompt, got {}",
            role.as_str(),
            prompt.role.as_str()
        )));
    }
    Ok(())
}

/// Profile text for a group from its representatives' category sequences.
pub fn generate_profile(
    backend: &dyn LlmBackend,
    templates: &Templates,
    group: Option<&GroupCsid>,
    sequences: &[Vec<String>],
) -> Result<String> {
    if sequences.iter().all(Vec::is_empty) {
        return Err(Error::InvalidPrompt("profile generation needs at least one non-empty sequence".into()));
    }
    let prompt = render_profile_prompt(templates, group, sequences)?;
    let text = backend.generate_profile(&prompt)?;
    if text.trim().is_empty() {
        return Err(Error::backend("backend returned an empty profile", false));
    }
    Ok(text.trim().to_string())
}

pub fn generate_candidates(backend: &dyn LlmBackend, prompt: &RenderedPrompt, m_cand: usize) -> Result<CandidateSet> {
    expect_role(prompt, PromptRole::NoveltyInfer)?;
    if m_cand == 0 {
        return Err(Error::Config("candidate count must be positive".into()));
    }
    let set = backend.generate_candidates(prompt, m_cand)?;
    if set.truncated {
        log::debug!(
            "only {} of {m_cand} candidates available for {:?}",
            set.categories.len(),
            prompt.context.group
        );
    }
    Ok(set)
}

pub fn score_candidate(backend: &dyn LlmBackend, prompt: &RenderedPrompt) -> Result<f64> {
    expect_role(prompt, PromptRole::RelevanceInfer)?;
    let s = backend.score_candidate(prompt)?;
    if !s.is_finite() {
        return Err(Error::NonFinite("relevance score".into()));
    }
    Ok(s)
}
