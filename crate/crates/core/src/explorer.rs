//! The exploration agent: answer now, or name one frontier segment to expand.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{ChatBackend, ChatMessage, Part};
use crate::error::{Error, Result};
use crate::memory::MemoryBuffer;
use crate::prompt::{self, markers, PartsBuilder, Templates};
use crate::segment::{CandidateSet, SegmentId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Answer {
        text: String,
    },
    Explore {
        segment: SegmentId,
    },
    /// Absolute frame indices, requested when exploring without the tree.
    Frames {
        indices: Vec<u64>,
    },
}

impl Decision {
    pub fn render(&self) -> String {
        match self {
            Decision::Answer { text } => format!("{} {text}", markers::ANSWER),
            Decision::Explore { segment } => format!("{} {segment}", markers::EXPLORE),
            Decision::Frames { indices } => {
                let list: Vec<String> = indices.iter().map(u64::to_string).collect();
                format!("{} {}", markers::FRAMES, list.join(", "))
            }
        }
    }
}

static MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(answer|explore|frames)\b\**\s*:([^\n]*)").unwrap());
static SEGMENT_REF: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^[\s*`\[#]*(?:segment|candidate)?\s*#?\s*\[?\s*(\d+)\b").unwrap()
});
static INTEGER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"-?\d+").unwrap());

/// Parses `ANSWER: <payload>`, `EXPLORE: <id>` or `FRAMES: <i>, <j>, ...`.
/// Surrounding prose is ignored; when several markers appear the last wins.
pub fn parse_decision(text: &str) -> Result<Decision> {
    let cap = MARKER
        .captures_iter(text)
        .last()
        .ok_or_else(|| Error::MalformedDecision("no ANSWER or EXPLORE line".into()))?;
    let payload = cap[2]
        .trim()
        .trim_matches(|c: char| c == '*' || c == '`' || c.is_whitespace());
    match cap[1].to_ascii_lowercase().as_str() {
        "answer" => {
            if payload.is_empty() {
                Err(Error::MalformedDecision("empty answer".into()))
            } else {
                Ok(Decision::Answer {
                    text: payload.to_string(),
                })
            }
        }
        "explore" => SEGMENT_REF
            .captures(payload)
            .and_then(|c| c[1].parse().ok())
            .map(|segment| Decision::Explore { segment })
            .ok_or_else(|| {
                Error::MalformedDecision(format!("explore target {payload:?} is not a segment id"))
            }),
        _ => {
            let indices = INTEGER
                .find_iter(payload)
                .map(|m| m.as_str().parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::MalformedDecision(format!("bad frame list {payload:?}")))?;
            if indices.is_empty() {
                return Err(Error::MalformedDecision("empty frame list".into()));
            }
            Ok(Decision::Frames { indices })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExploreOptions {
    pub show_scores: bool,
    pub forced: bool,
    pub frame_rate: f64,
}

fn render_memory(memory: &MemoryBuffer, frame_rate: f64) -> Vec<Part> {
    let mut b = PartsBuilder::default();
    if memory.is_empty() {
        b.text("(no frames yet)\n");
    }
    for f in memory.frames() {
        b.text(&format!(
            "Frame {} ({}):\n",
            f.frame_index,
            prompt::secs(f.frame_index as f64 / frame_rate)
        ));
        b.part(Part::Image(f.image.clone()));
        b.text("\n");
    }
    b.finish()
}

fn render_candidates(
    frontier: &CandidateSet,
    opts: &ExploreOptions,
    selectable_only: bool,
) -> String {
    let mut out = String::new();
    let entries = frontier
        .entries()
        .iter()
        .filter(|e| !selectable_only || e.selectable());
    for e in entries {
        let s = &e.segment;
        out.push_str(&format!(
            "[{}] frames [{}, {}) ({} - {})",
            s.id,
            s.start,
            s.end,
            prompt::secs(s.start as f64 / opts.frame_rate),
            prompt::secs(s.end as f64 / opts.frame_rate)
        ));
        if opts.show_scores {
            if let Some(score) = e.score {
                out.push_str(&format!(" | Score: {score}"));
            }
            if !e.explanation.is_empty() {
                out.push_str(&format!(" | {}", e.explanation));
            }
        }
        out.push('\n');
    }
    out
}

fn explore_format(forced: bool) -> String {
    if forced {
        format!(
            "{} End your reply with a line\n{} <your answer>\n",
            markers::FORCE_ANSWER,
            markers::ANSWER
        )
    } else {
        format!(
            "If the frames in memory are enough to answer, end your reply with a line\n{} <your answer>\n\
             Otherwise end your reply with a line\n{} <candidate id>\nnaming exactly one candidate from the list.\n",
            markers::ANSWER,
            markers::EXPLORE
        )
    }
}

fn frames_format(forced: bool, n: usize, total_frames: u64) -> String {
    if forced {
        return explore_format(true);
    }
    format!(
        "If the frames in memory are enough to answer, end your reply with a line\n{} <your answer>\n\
         Otherwise end your reply with a line\n{}, ...\nlisting up to {n} frame indices between 0 and {}.\n",
        markers::ANSWER,
        markers::FRAMES_FORMAT,
        total_frames - 1
    )
}

/// Candidates are listed in timeline order, never sorted by score.
pub fn build_explore_prompt(
    templates: &Templates,
    query: &str,
    frontier: &CandidateSet,
    memory: &MemoryBuffer,
    opts: &ExploreOptions,
) -> Vec<ChatMessage> {
    let user = templates
        .explore
        .render(&[
            ("query", prompt::text(query)),
            (
                "candidates",
                prompt::text(render_candidates(frontier, opts, true)),
            ),
            ("memory", render_memory(memory, opts.frame_rate)),
            (
                "format_instructions",
                prompt::text(explore_format(opts.forced)),
            ),
        ])
        .expect("templates are validated on load");
    prompt::conversation(user)
}

pub fn build_frames_prompt(
    templates: &Templates,
    query: &str,
    latest: &CandidateSet,
    memory: &MemoryBuffer,
    n_sample: usize,
    opts: &ExploreOptions,
) -> Vec<ChatMessage> {
    let total = latest.root_span().1;
    let user = templates
        .explore_frames
        .render(&[
            ("query", prompt::text(query)),
            (
                "frame_range",
                prompt::text(format!("{total} frames, numbered 0 to {}", total - 1)),
            ),
            ("n_sample", prompt::text(n_sample.to_string())),
            (
                "candidates",
                prompt::text(render_candidates(latest, opts, false)),
            ),
            ("memory", render_memory(memory, opts.frame_rate)),
            (
                "format_instructions",
                prompt::text(frames_format(opts.forced, n_sample, total)),
            ),
        ])
        .expect("templates are validated on load");
    prompt::conversation(user)
}

/// Sends `messages`, validating the reply; one reminder retry on failure.
fn ask(
    backend: &dyn ChatBackend,
    messages: Vec<ChatMessage>,
    format: &str,
    validate: impl Fn(Decision) -> Result<Decision>,
) -> Result<(Decision, u32)> {
    let first = backend.complete(&messages)?;
    let mut retries = first.retries;
    match parse_decision(&first.text).and_then(&validate) {
        Ok(d) => Ok((d, retries)),
        Err(e) => {
            let again = prompt::with_reminder(messages, &first.text, &e.to_string(), format);
            let second = backend.complete(&again)?;
            retries += second.retries;
            let d = parse_decision(&second.text).and_then(&validate)?;
            Ok((d, retries))
        }
    }
}

fn forced_check(d: Decision) -> Result<Decision> {
    match d {
        Decision::Answer { .. } => Ok(d),
        _ => Err(Error::BudgetExhausted),
    }
}

/// One decision of the exploration agent over the tree frontier.
pub fn decide(
    backend: &dyn ChatBackend,
    templates: &Templates,
    query: &str,
    frontier: &CandidateSet,
    memory: &MemoryBuffer,
    opts: &ExploreOptions,
) -> Result<(Decision, u32)> {
    let messages = build_explore_prompt(templates, query, frontier, memory, opts);
    let format = explore_format(opts.forced);
    if opts.forced {
        return ask(backend, messages, &format, forced_check);
    }
    ask(backend, messages, &format, |d| match d {
        Decision::Explore { segment } => match frontier.get(segment) {
            Some(e) if e.selectable() => Ok(d),
            _ => Err(Error::UnknownSegment(segment)),
        },
        Decision::Answer { .. } => Ok(d),
        Decision::Frames { .. } => Err(Error::MalformedDecision(
            "expected a candidate id, got frame indices".into(),
        )),
    })
}

/// One decision when exploring by absolute frame indices.
///
/// Requested indices are de-duplicated, sorted, and truncated to `n_sample`.
pub fn choose_frames(
    backend: &dyn ChatBackend,
    templates: &Templates,
    query: &str,
    latest: &CandidateSet,
    memory: &MemoryBuffer,
    n_sample: usize,
    opts: &ExploreOptions,
) -> Result<(Decision, u32)> {
    let total = latest.root_span().1;
    let messages = build_frames_prompt(templates, query, latest, memory, n_sample, opts);
    let format = frames_format(opts.forced, n_sample, total);
    if opts.forced {
        return ask(backend, messages, &format, forced_check);
    }
    ask(backend, messages, &format, |d| match d {
        Decision::Frames { mut indices } => {
            if let Some(bad) = indices.iter().find(|&&i| i >= total) {
                return Err(Error::MalformedDecision(format!(
                    "frame {bad} is outside 0..{total}"
                )));
            }
            let mut seen = std::collections::HashSet::new();
            indices.retain(|i| seen.insert(*i));
            indices.truncate(n_sample);
            indices.sort_unstable();
            Ok(Decision::Frames { indices })
        }
        Decision::Answer { .. } => Ok(d),
        Decision::Explore { .. } => Err(Error::MalformedDecision(
            "expected frame indices, got a segment id".into(),
        )),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{request_text, RequestClass, Rule, Script, ScriptedBackend};
    use crate::frames::VideoHandle;
    use crate::memory::{EvictionPolicy, FrameRecord};
    use crate::segment::{RewardedSegment, Score, SegmentTree};

    const OPTS: ExploreOptions = ExploreOptions {
        show_scores: true,
        forced: false,
        frame_rate: 1.0,
    };

    #[test]
    fn parse_examples() {
        assert_eq!(
            parse_decision("The kitchen scenes look promising, therefore EXPLORE: 4").unwrap(),
            Decision::Explore { segment: 4 }
        );
        assert_eq!(
            parse_decision("ANSWER: Option 2").unwrap(),
            Decision::Answer {
                text: "Option 2".into()
            }
        );
        assert!(matches!(
            parse_decision("I need more information"),
            Err(Error::MalformedDecision(_))
        ));
    }

    #[test]
    fn last_marker_wins_and_tolerance() {
        assert_eq!(
            parse_decision("explore: 3 ... actually\n**Answer:** B").unwrap(),
            Decision::Answer { text: "B".into() }
        );
        assert_eq!(
            parse_decision("ANSWER: C\nno wait, EXPLORE: segment 7").unwrap(),
            Decision::Explore { segment: 7 }
        );
        assert_eq!(
            parse_decision("Explore : [12]").unwrap(),
            Decision::Explore { segment: 12 }
        );
        assert_eq!(
            parse_decision("FRAMES: 100, 500 900").unwrap(),
            Decision::Frames {
                indices: vec![100, 500, 900]
            }
        );
        assert!(parse_decision("EXPLORE: the middle one").is_err());
        assert!(parse_decision("ANSWER:   ").is_err());
        assert!(parse_decision("FRAMES: -3").is_err());
    }

    fn world() -> (CandidateSet, MemoryBuffer) {
        let mut tree = SegmentTree::new(1000);
        let kids = tree.split(0, &[200, 400, 600, 800]).unwrap();
        let mut s = CandidateSet::new(1000);
        let entries = kids
            .into_iter()
            .map(|segment| RewardedSegment {
                score: Score::new(if segment.start == 400 { 95 } else { 10 }),
                explanation: format!("about {}", segment.start),
                segment,
                round: 1,
            })
            .collect();
        s.replace(tree.root(), entries).unwrap();
        let video = VideoHandle::synthetic("v", 1000, vec![]).unwrap();
        let mut m = MemoryBuffer::new(8, EvictionPolicy::LowestScore);
        let idx: Vec<u64> = (1..=8).map(|i| i * 100).collect();
        let imgs = video.fetch_frames(&idx).unwrap();
        m.update(
            idx.iter()
                .zip(imgs)
                .map(|(&i, image)| FrameRecord {
                    frame_index: i,
                    image,
                    score: Score::new(50).unwrap(),
                    acquired_round: 1,
                })
                .collect(),
        );
        (s, m)
    }

    #[test]
    fn prompt_lists_candidates_and_frames() {
        let (s, m) = world();
        let msgs = build_explore_prompt(&Templates::default(), "q?", &s, &m, &OPTS);
        let text = request_text(&msgs);
        assert_eq!(text.lines().filter(|l| l.starts_with('[')).count(), 5);
        assert_eq!(msgs.iter().map(|m| m.images().count()).sum::<usize>(), 8);
        assert!(text.contains("[3] frames [400, 600) (400.0s - 600.0s) | Score: 95 | about 400"));
        assert_eq!(RequestClass::of(&msgs), Some(RequestClass::Explore));
        // timeline order, not score order
        let first = text.find("[1] frames").unwrap();
        assert!(first < text.find("[3] frames").unwrap());
    }

    #[test]
    fn no_scores_when_hidden() {
        let (s, m) = world();
        let opts = ExploreOptions {
            show_scores: false,
            ..OPTS
        };
        let text = request_text(&build_explore_prompt(
            &Templates::default(),
            "q?",
            &s,
            &m,
            &opts,
        ));
        assert!(!text.contains("Score:"));
    }

    #[test]
    fn decide_maps_and_validates() {
        let (s, m) = world();
        let t = Templates::default();
        let b = ScriptedBackend::new(Script::new(vec![Rule::new(
            RequestClass::Explore,
            "EXPLORE: 3",
        )]));
        assert_eq!(
            decide(&b, &t, "q", &s, &m, &OPTS).unwrap().0,
            Decision::Explore { segment: 3 }
        );

        let b = ScriptedBackend::new(Script::new(vec![Rule::new(
            RequestClass::Explore,
            "ANSWER: B",
        )]));
        assert_eq!(
            decide(&b, &t, "q", &s, &m, &OPTS).unwrap().0,
            Decision::Answer { text: "B".into() }
        );

        let b = ScriptedBackend::new(Script::new(vec![Rule::new(
            RequestClass::Explore,
            "EXPLORE: 99",
        )]));
        assert!(matches!(
            decide(&b, &t, "q", &s, &m, &OPTS),
            Err(Error::UnknownSegment(99))
        ));

        // corrected after the reminder
        let b = ScriptedBackend::new(Script::new(vec![
            Rule::new(RequestClass::Explore, "EXPLORE: 2").when(markers::FORMAT_REMINDER),
            Rule::new(RequestClass::Explore, "hmm"),
        ]));
        assert_eq!(
            decide(&b, &t, "q", &s, &m, &OPTS).unwrap().0,
            Decision::Explore { segment: 2 }
        );
    }

    #[test]
    fn second_best_choice_is_not_coerced() {
        let (s, m) = world();
        let b = ScriptedBackend::new(Script::new(vec![Rule::new(
            RequestClass::Explore,
            "EXPLORE: 1",
        )]));
        let (d, _) = decide(&b, &Templates::default(), "q", &s, &m, &OPTS).unwrap();
        assert_eq!(d, Decision::Explore { segment: 1 });
    }

    #[test]
    fn frames_dedup_and_range() {
        let (s, m) = world();
        let t = Templates::default();
        let b = ScriptedBackend::new(Script::new(vec![Rule::new(
            RequestClass::ExploreFrames,
            "FRAMES: 900, 100, 100",
        )]));
        let (d, _) = choose_frames(&b, &t, "q", &s, &m, 4, &OPTS).unwrap();
        assert_eq!(
            d,
            Decision::Frames {
                indices: vec![100, 900]
            }
        );

        let b = ScriptedBackend::new(Script::new(vec![Rule::new(
            RequestClass::ExploreFrames,
            "FRAMES: 100, 5000",
        )]));
        assert!(matches!(
            choose_frames(&b, &t, "q", &s, &m, 4, &OPTS),
            Err(Error::MalformedDecision(_))
        ));
    }
}
