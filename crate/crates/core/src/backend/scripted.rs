use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{request_text, ChatBackend, ChatMessage, Completion};
use crate::error::{Error, Result};
use crate::prompt::markers;

/// What a request asks the model to do, recovered from its fixed markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RequestClass {
    #[serde(rename = "reward-round-1")]
    RewardFirst,
    #[serde(rename = "reward-followup")]
    RewardFollowup,
    #[serde(rename = "explore")]
    Explore,
    #[serde(rename = "explore-frames")]
    ExploreFrames,
}

impl RequestClass {
    pub fn of(messages: &[ChatMessage]) -> Option<RequestClass> {
        Self::of_text(&request_text(messages))
    }

    pub fn of_text(text: &str) -> Option<RequestClass> {
        if text.contains(markers::FRAMES_FORMAT) {
            Some(RequestClass::ExploreFrames)
        } else if text.contains(markers::REWARD_FORMAT) {
            if text.contains(markers::HISTORY_HEADER) {
                Some(RequestClass::RewardFollowup)
            } else {
                Some(RequestClass::RewardFirst)
            }
        } else if text.contains(markers::ANSWER) {
            Some(RequestClass::Explore)
        } else {
            None
        }
    }

    pub fn is_reward(self) -> bool {
        matches!(
            self,
            RequestClass::RewardFirst | RequestClass::RewardFollowup
        )
    }
}

impl fmt::Display for RequestClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RequestClass::RewardFirst => "reward-round-1",
            RequestClass::RewardFollowup => "reward-followup",
            RequestClass::Explore => "explore",
            RequestClass::ExploreFrames => "explore-frames",
        })
    }
}

/// One row of a decision table: when every `contains` string and no `absent`
/// string occurs in a request of `class`, reply with `response`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    #[serde(default)]
    pub class: Option<RequestClass>,
    #[serde(default)]
    pub contains: Vec<String>,
    #[serde(default)]
    pub absent: Vec<String>,
    pub response: String,
}

impl Rule {
    pub fn new(class: RequestClass, response: impl Into<String>) -> Self {
        Rule {
            class: Some(class),
            contains: Vec::new(),
            absent: Vec::new(),
            response: response.into(),
        }
    }

    pub fn when(mut self, needle: impl Into<String>) -> Self {
        self.contains.push(needle.into());
        self
    }

    pub fn unless(mut self, needle: impl Into<String>) -> Self {
        self.absent.push(needle.into());
        self
    }

    fn matches(&self, class: Option<RequestClass>, text: &str) -> bool {
        (self.class.is_none() || self.class == class)
            && self.contains.iter().all(|c| text.contains(c.as_str()))
            && !self.absent.iter().any(|a| text.contains(a.as_str()))
    }
}

/// Ordered decision table; the first matching rule wins.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default, rename = "rule")]
    pub rules: Vec<Rule>,
}

impl Script {
    pub fn new(rules: Vec<Rule>) -> Self {
        Script { rules }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("script: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("script serializes")
    }
}

/// Backend whose replies are a pure function of the request content.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    script: Script,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        ScriptedBackend { script }
    }

    pub fn script(&self) -> &Script {
        &self.script
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion> {
        let text = request_text(messages);
        let class = RequestClass::of_text(&text);
        self.script
            .rules
            .iter()
            .find(|r| r.matches(class, &text))
            .map(|r| Completion {
                text: r.response.clone(),
                retries: 0,
            })
            .ok_or_else(|| Error::ScriptMiss {
                class: class.map_or_else(|| "unclassified".to_string(), |c| c.to_string()),
            })
    }
}
