//! Prompt templates with named placeholders that expand to text or to
//! interleaved text and image parts.
//!
//! Templates are plain text files; `{name}` marks a placeholder and `{{` /
//! `}}` escape literal braces. The reply-format instructions are rendered by
//! code rather than by the templates, because the response parsers and the
//! scripted backends depend on their exact wording.

use std::path::Path;

use crate::backend::{ChatMessage, Part, Role};
use crate::error::{Error, Result};

pub mod markers {
    pub const REWARD_FORMAT: &str = "Segment <k>: <explanation> | Score: <0-100>";
    pub const HISTORY_HEADER: &str = "Previously scored segments:";
    pub const ANSWER: &str = "ANSWER:";
    pub const EXPLORE: &str = "EXPLORE:";
    pub const FRAMES: &str = "FRAMES:";
    pub const FRAMES_FORMAT: &str = "FRAMES: <index>, <index>";
    pub const FORCE_ANSWER: &str = "You must answer now.";
    pub const FORMAT_REMINDER: &str = "Your previous reply could not be used.";
}

pub const SYSTEM_PROMPT: &str = "You are a careful assistant that reasons about video frames and follows the requested reply format exactly.";

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Lit(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut lit = String::new();
        let mut chars = text.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            match c {
                '{' if matches!(chars.peek(), Some((_, '{'))) => {
                    chars.next();
                    lit.push('{');
                }
                '}' if matches!(chars.peek(), Some((_, '}'))) => {
                    chars.next();
                    lit.push('}');
                }
                '{' => {
                    let rest = &text[i + 1..];
                    let close = rest.find('}').ok_or_else(|| {
                        Error::InvalidConfig(format!("unclosed placeholder at byte {i}"))
                    })?;
                    let name = &rest[..close];
                    if name.is_empty()
                        || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                    {
                        return Err(Error::InvalidConfig(format!("bad placeholder {{{name}}}")));
                    }
                    if !lit.is_empty() {
                        pieces.push(Piece::Lit(std::mem::take(&mut lit)));
                    }
                    pieces.push(Piece::Slot(name.to_string()));
                    for _ in 0..=close {
                        chars.next();
                    }
                }
                c => lit.push(c),
            }
        }
        if !lit.is_empty() {
            pieces.push(Piece::Lit(lit));
        }
        Ok(PromptTemplate { pieces })
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Slot(s) => Some(s.as_str()),
            Piece::Lit(_) => None,
        })
    }

    fn require(&self, name: &str, required: &[&str]) -> Result<()> {
        for r in required {
            if !self.placeholders().any(|p| p == *r) {
                return Err(Error::InvalidConfig(format!(
                    "template {name} lacks {{{r}}}"
                )));
            }
        }
        Ok(())
    }

    /// Expands every placeholder; adjacent text is merged into one part.
    pub fn render(&self, values: &[(&str, Vec<Part>)]) -> Result<Vec<Part>> {
        let mut out = PartsBuilder::default();
        for piece in &self.pieces {
            match piece {
                Piece::Lit(s) => out.text(s),
                Piece::Slot(name) => {
                    let (_, parts) = values.iter().find(|(n, _)| n == name).ok_or_else(|| {
                        Error::InvalidConfig(format!("no value for placeholder {{{name}}}"))
                    })?;
                    for p in parts {
                        out.part(p.clone());
                    }
                }
            }
        }
        Ok(out.finish())
    }
}

/// Accumulates parts, merging consecutive text.
#[derive(Debug, Default)]
pub struct PartsBuilder {
    parts: Vec<Part>,
}

impl PartsBuilder {
    pub fn text(&mut self, s: &str) {
        if s.is_empty() {
            return;
        }
        if let Some(Part::Text(t)) = self.parts.last_mut() {
            t.push_str(s);
        } else {
            self.parts.push(Part::Text(s.to_string()));
        }
    }

    pub fn part(&mut self, p: Part) {
        match p {
            Part::Text(t) => self.text(&t),
            img => self.parts.push(img),
        }
    }

    pub fn finish(self) -> Vec<Part> {
        self.parts
    }
}

pub fn text(s: impl Into<String>) -> Vec<Part> {
    vec![Part::Text(s.into())]
}

/// The four prompt templates an episode uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub reward_first: PromptTemplate,
    pub reward_followup: PromptTemplate,
    pub explore: PromptTemplate,
    pub explore_frames: PromptTemplate,
}

impl Default for Templates {
    fn default() -> Self {
        Templates::from_sources(
            include_str!("../templates/reward_first.txt"),
            include_str!("../templates/reward_followup.txt"),
            include_str!("../templates/explore.txt"),
            include_str!("../templates/explore_frames.txt"),
        )
        .expect("bundled templates are valid")
    }
}

impl Templates {
    pub fn from_sources(
        reward_first: &str,
        reward_followup: &str,
        explore: &str,
        explore_frames: &str,
    ) -> Result<Self> {
        let t = Templates {
            reward_first: PromptTemplate::parse(reward_first)?,
            reward_followup: PromptTemplate::parse(reward_followup)?,
            explore: PromptTemplate::parse(explore)?,
            explore_frames: PromptTemplate::parse(explore_frames)?,
        };
        t.reward_first.require(
            "reward_first",
            &["query", "candidates", "format_instructions"],
        )?;
        t.reward_followup.require(
            "reward_followup",
            &["query", "candidates", "history", "format_instructions"],
        )?;
        t.explore.require(
            "explore",
            &["query", "candidates", "memory", "format_instructions"],
        )?;
        t.explore_frames.require(
            "explore_frames",
            &["query", "candidates", "memory", "format_instructions"],
        )?;
        Ok(t)
    }

    /// Loads `<name>.txt` overrides from `dir`, falling back to the bundled text.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str, fallback: &str| -> Result<String> {
            let p = dir.join(format!("{name}.txt"));
            if p.is_file() {
                Ok(std::fs::read_to_string(p)?)
            } else {
                Ok(fallback.to_string())
            }
        };
        Templates::from_sources(
            &read(
                "reward_first",
                include_str!("../templates/reward_first.txt"),
            )?,
            &read(
                "reward_followup",
                include_str!("../templates/reward_followup.txt"),
            )?,
            &read("explore", include_str!("../templates/explore.txt"))?,
            &read(
                "explore_frames",
                include_str!("../templates/explore_frames.txt"),
            )?,
        )
    }
}

pub(crate) fn conversation(user: Vec<Part>) -> Vec<ChatMessage> {
    vec![
        ChatMessage::text(Role::System, SYSTEM_PROMPT),
        ChatMessage {
            role: Role::User,
            parts: user,
        },
    ]
}

/// Appends the rejected reply and a format reminder for a second attempt.
pub(crate) fn with_reminder(
    mut messages: Vec<ChatMessage>,
    reply: &str,
    problem: &str,
    format: &str,
) -> Vec<ChatMessage> {
    messages.push(ChatMessage::text(Role::Assistant, reply));
    messages.push(ChatMessage::text(
        Role::User,
        format!("{} {problem}\n{format}", markers::FORMAT_REMINDER),
    ));
    messages
}

pub(crate) fn secs(t: f64) -> String {
    format!("{t:.1}s")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::ImagePayload;

    #[test]
    fn parse_and_render() {
        let t = PromptTemplate::parse("Q: {query} {{literal}}\n{images}!").unwrap();
        assert_eq!(
            t.placeholders().collect::<Vec<_>>(),
            vec!["query", "images"]
        );
        let img = Part::Image(ImagePayload::new("image/jpeg", vec![0u8]));
        let parts = t
            .render(&[
                ("query", text("why?")),
                ("images", vec![Part::Text("a".into()), img.clone()]),
            ])
            .unwrap();
        assert_eq!(
            parts,
            vec![
                Part::Text("Q: why? {literal}\na".into()),
                img,
                Part::Text("!".into())
            ]
        );
    }

    #[test]
    fn missing_value_and_bad_syntax() {
        let t = PromptTemplate::parse("{query}").unwrap();
        assert!(t.render(&[]).is_err());
        assert!(PromptTemplate::parse("{unclosed").is_err());
        assert!(PromptTemplate::parse("{bad name}").is_err());
    }

    #[test]
    fn bundled_templates_load() {
        let t = Templates::default();
        assert!(t.reward_followup.placeholders().any(|p| p == "history"));
    }

    #[test]
    fn overrides_must_keep_placeholders() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("explore.txt"),
            "Question: {query}\n{format_instructions}",
        )
        .unwrap();
        assert!(Templates::load_dir(dir.path()).is_err());
        std::fs::write(
            dir.path().join("explore.txt"),
            "{query}\n{candidates}\n{memory}\n{format_instructions}",
        )
        .unwrap();
        let t = Templates::load_dir(dir.path()).unwrap();
        assert_ne!(t.explore, Templates::default().explore);
        assert_eq!(t.reward_first, Templates::default().reward_first);
    }
}
