//! The reward model: per-sub-segment explanations and relevance scores,
//! plus the reward history that keeps scores consistent across rounds.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{ChatBackend, ChatMessage, Part};
use crate::error::{Error, Result};
use crate::frames::ImagePayload;
use crate::prompt::{self, markers, PartsBuilder, Templates};
use crate::segment::{Score, Segment, SegmentId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictItem {
    pub explanation: String,
    pub score: Score,
}

/// One `(explanation, score)` per sub-segment, in temporal order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardVerdict {
    pub items: Vec<VerdictItem>,
}

impl RewardVerdict {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn scores(&self) -> Vec<Score> {
        self.items.iter().map(|i| i.score).collect()
    }

    /// Retention score of each boundary frame: the larger score of the two
    /// sub-segments it separates.
    pub fn frame_scores(&self) -> Vec<Score> {
        self.items
            .windows(2)
            .map(|w| w[0].score.max(w[1].score))
            .collect()
    }

    /// Index of the highest-scored sub-segment, earliest on ties.
    pub fn argmax(&self) -> Option<usize> {
        let best = self.items.iter().map(|i| i.score).max()?;
        self.items.iter().position(|i| i.score == best)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: u32,
    pub segment_id: SegmentId,
    pub start: u64,
    pub end: u64,
    pub explanation: String,
    pub score: Score,
}

/// Append-only record of every scored sub-segment in an episode.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardHistory {
    entries: Vec<HistoryEntry>,
}

impl RewardHistory {
    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, round: u32, subsegments: &[Segment], verdict: &RewardVerdict) {
        debug_assert_eq!(subsegments.len(), verdict.len());
        self.entries.extend(
            subsegments
                .iter()
                .zip(&verdict.items)
                .map(|(s, v)| HistoryEntry {
                    round,
                    segment_id: s.id,
                    start: s.start,
                    end: s.end,
                    explanation: v.explanation.clone(),
                    score: v.score,
                }),
        );
    }

    pub fn render(&self, frame_rate: f64) -> String {
        let mut out = String::from(markers::HISTORY_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "- round {}, segment #{} frames [{}, {}) ({} - {}): {} | Score: {}\n",
                e.round,
                e.segment_id,
                e.start,
                e.end,
                prompt::secs(e.start as f64 / frame_rate),
                prompt::secs(e.end as f64 / frame_rate),
                e.explanation,
                e.score
            ));
        }
        out
    }
}

pub fn format_instructions(n: usize) -> String {
    format!(
        "Reply with exactly {n} line(s), one per segment in order, each of the form\n{}\n",
        markers::REWARD_FORMAT
    )
}

/// Candidate block: segment labels with each boundary frame interleaved
/// between the two segments it separates.
fn render_candidates(
    subsegments: &[Segment],
    frames: &[ImagePayload],
    frame_rate: f64,
) -> Vec<Part> {
    let mut b = PartsBuilder::default();
    for (i, s) in subsegments.iter().enumerate() {
        b.text(&format!(
            "Segment {}: frames [{}, {}) ({} - {})\n",
            i + 1,
            s.start,
            s.end,
            prompt::secs(s.start as f64 / frame_rate),
            prompt::secs(s.end as f64 / frame_rate)
        ));
        if let Some(img) = frames.get(i) {
            b.text(&format!(
                "Boundary frame {} ({}), between segments {} and {}:\n",
                s.end,
                prompt::secs(s.end as f64 / frame_rate),
                i + 1,
                i + 2
            ));
            b.part(Part::Image(img.clone()));
            b.text("\n");
        }
    }
    b.finish()
}

pub fn build_reward_prompt(
    templates: &Templates,
    round: u32,
    query: &str,
    subsegments: &[Segment],
    frames: &[ImagePayload],
    history: &RewardHistory,
    frame_rate: f64,
) -> Vec<ChatMessage> {
    let candidates = render_candidates(subsegments, frames, frame_rate);
    let format = prompt::text(format_instructions(subsegments.len()));
    let user = if round <= 1 || history.is_empty() {
        templates.reward_first.render(&[
            ("query", prompt::text(query)),
            ("candidates", candidates),
            ("format_instructions", format),
        ])
    } else {
        templates.reward_followup.render(&[
            ("query", prompt::text(query)),
            ("history", prompt::text(history.render(frame_rate))),
            ("candidates", candidates),
            ("format_instructions", format),
        ])
    }
    .expect("templates are validated on load");
    prompt::conversation(user)
}

static REWARD_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?im)^[\s>*#-]*segment\s*#?\s*(\d+)\s*\**\s*[:.)-][\s*]*(.*)\|\s*\**\s*score\s*\**\s*:\s*\**\s*([^\s*]+)\**\s*$")
        .unwrap()
});

/// Extracts `n` items from lines of the form `Segment <k>: <explanation> | Score: <s>`.
pub fn parse_reward_response(text: &str, n: usize) -> Result<RewardVerdict> {
    let mut slots: Vec<Option<VerdictItem>> = vec![None; n];
    for cap in REWARD_LINE.captures_iter(text) {
        let k: usize = cap[1]
            .parse()
            .map_err(|_| Error::MalformedResponse(format!("bad segment label {}", &cap[1])))?;
        if k == 0 || k > n {
            return Err(Error::MalformedResponse(format!(
                "segment {k} outside 1..={n}"
            )));
        }
        let raw = cap[3].trim_end_matches('%');
        let value: u32 = raw.parse().map_err(|_| {
            Error::MalformedResponse(format!(
                "segment {k}: score {:?} is not an integer",
                &cap[3]
            ))
        })?;
        let score = Score::new(value).ok_or_else(|| {
            Error::MalformedResponse(format!("segment {k}: score {value} outside [0, 100]"))
        })?;
        if slots[k - 1].is_some() {
            return Err(Error::MalformedResponse(format!(
                "segment {k} scored twice"
            )));
        }
        slots[k - 1] = Some(VerdictItem {
            explanation: cap[2].trim().to_string(),
            score,
        });
    }
    let items = slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.ok_or_else(|| Error::MalformedResponse(format!("segment {} has no score", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RewardVerdict { items })
}

/// Canonical reply text for a verdict; [`parse_reward_response`] inverts it.
pub fn render_reward_response(verdict: &RewardVerdict) -> String {
    verdict
        .items
        .iter()
        .enumerate()
        .map(|(i, v)| {
            format!(
                "Segment {}: {} | Score: {}\n",
                i + 1,
                v.explanation,
                v.score
            )
        })
        .collect()
}

/// Scores `subsegments` with the backend and appends them to `history`.
///
/// Returns the verdict and the number of transport retries spent. A reply that
/// cannot be parsed is answered once with a format reminder before failing.
#[allow(clippy::too_many_arguments)]
pub fn score_segments(
    backend: &dyn ChatBackend,
    templates: &Templates,
    round: u32,
    query: &str,
    subsegments: &[Segment],
    frames: &[ImagePayload],
    history: &mut RewardHistory,
    frame_rate: f64,
) -> Result<(RewardVerdict, u32)> {
    let n = subsegments.len();
    let messages = build_reward_prompt(
        templates,
        round,
        query,
        subsegments,
        frames,
        history,
        frame_rate,
    );
    let first = backend.complete(&messages)?;
    let mut retries = first.retries;
    let verdict = match parse_reward_response(&first.text, n) {
        Ok(v) => v,
        Err(e) => {
            let again = prompt::with_reminder(
                messages,
                &first.text,
                &e.to_string(),
                &format_instructions(n),
            );
            let second = backend.complete(&again)?;
            retries += second.retries;
            parse_reward_response(&second.text, n)?
        }
    };
    history.extend(round, subsegments, &verdict);
    Ok((verdict, retries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{RequestClass, Role, Rule, Script, ScriptedBackend};
    use crate::frames::VideoHandle;
    use crate::segment::SegmentTree;

    fn item(e: &str, s: u32) -> VerdictItem {
        VerdictItem {
            explanation: e.into(),
            score: Score::new(s).unwrap(),
        }
    }

    fn user_parts(m: &[ChatMessage]) -> &[Part] {
        &m.iter().find(|m| m.role == Role::User).unwrap().parts
    }

    fn count_images(m: &[ChatMessage]) -> usize {
        m.iter().map(|m| m.images().count()).sum()
    }

    #[test]
    fn parses_well_formed_reply() {
        let text = "Thinking about it...\n\
            Segment 1: a kitchen | Score: 10\n\
            Segment 2: someone opens a fridge | Score: 35\n\
            Segment 3: the cup is filled | Score: 95\n\
            Segment 4: walking outside | Score: 0\n\
            Segment 5: credits | Score: 100\n\
            That's all.";
        let v = parse_reward_response(text, 5).unwrap();
        assert_eq!(
            v.scores().iter().map(|s| s.value()).collect::<Vec<_>>(),
            vec![10, 35, 95, 0, 100]
        );
        assert_eq!(v.items[2].explanation, "the cup is filled");
    }

    #[test]
    fn reorders_by_label() {
        let text = "Segment 3: c | Score: 30\nSegment 1: a | Score: 10\nSegment 2: b | Score: 20\n";
        let v = parse_reward_response(text, 3).unwrap();
        let mut expected = [(3, "c", 30), (1, "a", 10), (2, "b", 20)];
        expected.sort_by_key(|e| e.0);
        assert_eq!(
            v.items,
            expected
                .iter()
                .map(|&(_, e, s)| item(e, s))
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn tolerates_markdown_and_percent() {
        let text = "- **Segment 2:** people talk | **Score:** 40%\n* Segment 1: intro | Score: 5";
        let v = parse_reward_response(text, 2).unwrap();
        assert_eq!(v.items, vec![item("intro", 5), item("people talk", 40)]);
    }

    #[test]
    fn rejects_malformed() {
        let cases = [
            "Segment 1: a | Score: 150\nSegment 2: b | Score: 1",
            "Segment 1: a | Score: 5",
            "Segment 1: a | Score: 5\nSegment 1: b | Score: 6",
            "Segment 1: a | Score: high\nSegment 2: b | Score: 1",
            "Segment 1: a | Score: 9.5\nSegment 2: b | Score: 1",
            "Segment 1: a | Score: -3\nSegment 2: b | Score: 1",
            "Segment 1: a | Score: 3\nSegment 2: b | Score: 1\nSegment 3: c | Score: 1",
            "no structure at all",
        ];
        for c in cases {
            assert!(
                matches!(
                    parse_reward_response(c, 2),
                    Err(Error::MalformedResponse(_))
                ),
                "{c}"
            );
        }
    }

    #[test]
    fn frame_scores_take_max_of_neighbours() {
        let v = RewardVerdict {
            items: vec![item("", 10), item("", 95), item("", 10), item("", 40)],
        };
        let fs: Vec<u32> = v.frame_scores().iter().map(|s| s.value()).collect();
        assert_eq!(fs, vec![95, 95, 40]);
        assert_eq!(v.argmax(), Some(1));
    }

    fn fixture(n_frames: usize) -> (Vec<Segment>, Vec<ImagePayload>) {
        let mut tree = SegmentTree::new(1000);
        let root = *tree.root();
        let positions = crate::frames::uniform_sample(&root, n_frames);
        let subs = tree.split(0, &positions).unwrap();
        let video = VideoHandle::synthetic("v", 1000, vec![]).unwrap();
        (subs, video.fetch_frames(&positions).unwrap())
    }

    #[test]
    fn first_round_prompt_counts() {
        let (subs, frames) = fixture(4);
        let m = build_reward_prompt(
            &Templates::default(),
            1,
            "what?",
            &subs,
            &frames,
            &RewardHistory::default(),
            1.0,
        );
        let text = crate::backend::request_text(&m);
        assert_eq!(
            text.lines()
                .filter(|l| l.starts_with("Segment ") && l.contains(": frames ["))
                .count(),
            5
        );
        assert_eq!(count_images(&m), 4);
        assert!(!text.contains(markers::HISTORY_HEADER));
        assert_eq!(RequestClass::of(&m), Some(RequestClass::RewardFirst));
        // boundary frame sits between the labels of its two segments
        let parts = user_parts(&m);
        let img_pos = parts
            .iter()
            .position(|p| matches!(p, Part::Image(_)))
            .unwrap();
        match (&parts[img_pos - 1], &parts[img_pos + 1]) {
            (Part::Text(before), Part::Text(after)) => {
                assert!(before.contains("Segment 1: frames [0, 200)"));
                assert!(after.contains("Segment 2: frames [200, 400)"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn followup_prompt_embeds_history() {
        let (subs, frames) = fixture(4);
        let mut h = RewardHistory::default();
        let v = RewardVerdict {
            items: (0..5).map(|i| item("x", i * 10)).collect(),
        };
        h.extend(1, &subs, &v);
        let m = build_reward_prompt(&Templates::default(), 2, "what?", &subs, &frames, &h, 1.0);
        let text = crate::backend::request_text(&m);
        assert_eq!(
            text.lines().filter(|l| l.starts_with("- round ")).count(),
            5
        );
        assert!(
            text.find(markers::HISTORY_HEADER).unwrap() < text.find("Segment 1: frames").unwrap()
        );
        assert_eq!(RequestClass::of(&m), Some(RequestClass::RewardFollowup));
    }

    #[test]
    fn terminal_leaf_prompt() {
        let (subs, frames) = fixture(0);
        let m = build_reward_prompt(
            &Templates::default(),
            1,
            "q",
            &subs,
            &frames,
            &RewardHistory::default(),
            1.0,
        );
        assert_eq!(subs.len(), 1);
        assert_eq!(count_images(&m), 0);
    }

    #[test]
    fn prompt_is_deterministic() {
        let (subs, frames) = fixture(4);
        let a = build_reward_prompt(
            &Templates::default(),
            1,
            "q",
            &subs,
            &frames,
            &RewardHistory::default(),
            2.0,
        );
        let b = build_reward_prompt(
            &Templates::default(),
            1,
            "q",
            &subs,
            &frames,
            &RewardHistory::default(),
            2.0,
        );
        assert_eq!(a, b);
    }

    #[test]
    fn score_with_retry() {
        let (subs, frames) = fixture(4);
        let good = "Segment 1: a | Score: 10\nSegment 2: b | Score: 10\nSegment 3: key | Score: 95\nSegment 4: d | Score: 10\nSegment 5: e | Score: 10";
        let partial = "Segment 1: a | Score: 10\nSegment 2: b | Score: 10\nSegment 3: key | Score: 95\nSegment 4: d | Score: 10";
        let script = Script::new(vec![
            Rule::new(RequestClass::RewardFirst, good).when(markers::FORMAT_REMINDER),
            Rule::new(RequestClass::RewardFirst, partial),
        ]);
        let backend = ScriptedBackend::new(script);
        let mut h = RewardHistory::default();
        let (v, _) = score_segments(
            &backend,
            &Templates::default(),
            1,
            "q",
            &subs,
            &frames,
            &mut h,
            1.0,
        )
        .unwrap();
        assert_eq!(
            v.scores().iter().map(|s| s.value()).collect::<Vec<_>>(),
            vec![10, 10, 95, 10, 10]
        );
        assert_eq!(h.len(), 5);

        let stubborn = ScriptedBackend::new(Script::new(vec![Rule::new(
            RequestClass::RewardFirst,
            partial,
        )]));
        let mut h = RewardHistory::default();
        let err = score_segments(
            &stubborn,
            &Templates::default(),
            1,
            "q",
            &subs,
            &frames,
            &mut h,
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::MalformedResponse(_)));
        assert!(h.is_empty());
    }

    #[test]
    fn single_leaf_verdict() {
        let (subs, frames) = fixture(0);
        let backend = ScriptedBackend::new(Script::new(vec![Rule::new(
            RequestClass::RewardFirst,
            "Segment 1: nothing new | Score: 20",
        )]));
        let mut h = RewardHistory::default();
        let (v, _) = score_segments(
            &backend,
            &Templates::default(),
            1,
            "q",
            &subs,
            &frames,
            &mut h,
            1.0,
        )
        .unwrap();
        assert_eq!(v.len(), 1);
    }
}
