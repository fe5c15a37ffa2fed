//! The chat-completion abstraction shared by the reward model and the
//! exploration agent.

mod remote;
mod scripted;
pub mod wire;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::ImagePayload;

pub use remote::RemoteBackend;
pub use scripted::{RequestClass, Rule, Script, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    Image(ImagePayload),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        ChatMessage {
            role,
            parts: vec![Part::Text(text.into())],
        }
    }

    pub fn images(&self) -> impl Iterator<Item = &ImagePayload> {
        self.parts.iter().filter_map(|p| match p {
            Part::Image(img) => Some(img),
            Part::Text(_) => None,
        })
    }

    pub fn text_content(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image(_) => None,
            })
            .collect()
    }
}

/// All text in a request, in order, with synthetic image labels inlined.
pub fn request_text(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for m in messages {
        for p in &m.parts {
            match p {
                Part::Text(t) => out.push_str(t),
                Part::Image(img) => {
                    if let Some(label) = img.synthetic_label() {
                        out.push_str("<image ");
                        out.push_str(label);
                        out.push('>');
                    } else {
                        out.push_str("<image>");
                    }
                }
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    /// Transport-level retries spent on this call.
    pub retries: u32,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion> {
        (**self).complete(messages)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion> {
        (**self).complete(messages)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub max_retries: u32,
    pub timeout_s: f64,
    pub max_in_flight: usize,
    pub backoff_base_ms: u64,
    pub max_tokens: Option<u32>,
    pub image_detail: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-2024-08-06".into(),
            temperature: 0.5,
            api_key_env: "OPENAI_API_KEY".into(),
            max_retries: 5,
            timeout_s: 120.0,
            max_in_flight: 4,
            backoff_base_ms: 1000,
            max_tokens: None,
            image_detail: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::InvalidConfig(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_in_flight == 0 {
            return Err(Error::InvalidConfig(
                "max_in_flight must be at least 1".into(),
            ));
        }
        if self.timeout_s.is_nan() || self.timeout_s <= 0.0 {
            return Err(Error::InvalidConfig("timeout must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_range() {
        let mut c = BackendConfig::default();
        assert_eq!(c.temperature, 0.5);
        c.validate().unwrap();
        c.temperature = 2.5;
        assert!(c.validate().is_err());
    }
}
