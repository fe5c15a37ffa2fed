//! Synthetic videos with planted key events and a deterministic oracle that
//! plays both the reward model and the exploration agent.
//!
//! Frames are text labels (`frame-512 KEY-0`). The oracle knows where the key
//! and distractor intervals are; it scores segments from that knowledge,
//! optionally corrupted by seeded noise, and answers once every key frame is
//! visible in memory. Every reply is a pure function of the request content
//! and the seed, so episodes replay exactly and runs under different
//! configurations stay paired.

use std::sync::LazyLock;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::DistanceReport;
use crate::backend::{request_text, ChatBackend, ChatMessage, Completion, RequestClass};
use crate::error::{Error, Result};
use crate::explorer::Decision;
use crate::frames::VideoHandle;
use crate::orchestrator::{Agent, EpisodeConfig, Mode};
use crate::prompt::{markers, Templates};
use crate::reward::{render_reward_response, RewardVerdict, VerdictItem};
use crate::segment::Score;
use crate::trace::EpisodeTrace;

pub const KEY_SCORE: u32 = 95;
pub const DISTRACTOR_SCORE: u32 = 40;
pub const BACKGROUND_SCORE: u32 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub total_frames: u64,
    pub key_width: u64,
    pub key_count: usize,
    /// Explicit key intervals; drawn from the seed when absent.
    pub key_intervals: Option<Vec<(u64, u64)>>,
    /// Fraction of the video covered by distractor intervals (key width each).
    pub distractor_density: f64,
    /// Probability that a reward reply moves the top score to a random sibling.
    pub reward_noise: f64,
    /// Probability that the agent heads for a key region regardless of scores.
    pub agent_insight: f64,
    /// Probability that a requested frame index falls inside the targeted
    /// stretch rather than anywhere in the video (frame-index mode).
    pub frame_focus: f64,
    pub options: usize,
    /// Correct option letter; drawn from the seed when absent.
    pub answer: Option<char>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            total_frames: 1000,
            key_width: 5,
            key_count: 1,
            key_intervals: None,
            distractor_density: 0.02,
            reward_noise: 0.0,
            agent_insight: 0.25,
            frame_focus: 0.5,
            options: 4,
            answer: None,
            seed: 0,
        }
    }
}

fn probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{name} must lie in [0, 1], got {p}"
        )))
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        probability("distractor_density", self.distractor_density)?;
        probability("reward_noise", self.reward_noise)?;
        probability("agent_insight", self.agent_insight)?;
        probability("frame_focus", self.frame_focus)?;
        if !(2..=26).contains(&self.options) {
            return Err(Error::InvalidConfig(
                "options must be between 2 and 26".into(),
            ));
        }
        if let Some(a) = self.answer {
            if !a.is_ascii_uppercase() || (a as u8 - b'A') as usize >= self.options {
                return Err(Error::InvalidConfig(format!(
                    "answer {a:?} is not one of the options"
                )));
            }
        }
        match &self.key_intervals {
            Some(keys) => {
                if keys.is_empty() {
                    return Err(Error::InvalidConfig("key_intervals is empty".into()));
                }
                for &(s, e) in keys {
                    if s >= e || e > self.total_frames {
                        return Err(Error::InvalidConfig(format!("bad key interval [{s}, {e})")));
                    }
                }
            }
            None => {
                if self.key_width == 0 || self.key_count == 0 {
                    return Err(Error::InvalidConfig(
                        "key_width and key_count must be positive".into(),
                    ));
                }
                if self.key_width * self.key_count as u64 * 2 > self.total_frames {
                    return Err(Error::InvalidConfig("keys do not fit in the video".into()));
                }
            }
        }
        Ok(())
    }
}

/// Seeded generator for one labelled purpose.
fn rng_for(seed: u64, tag: &str, content: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(content.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

fn overlaps(a: (u64, u64), b: (u64, u64)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

/// Draws `count` non-overlapping intervals of `width` that avoid `taken`.
fn place(
    rng: &mut ChaCha8Rng,
    total: u64,
    width: u64,
    count: usize,
    taken: &[(u64, u64)],
) -> Vec<(u64, u64)> {
    let mut out: Vec<(u64, u64)> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 10_000 {
        attempts += 1;
        let s = rng.random_range(0..=total - width);
        let iv = (s, s + width);
        if !taken.iter().chain(&out).any(|&t| overlaps(t, iv)) {
            out.push(iv);
        }
    }
    out.sort_unstable();
    out
}

/// A synthetic episode: the video, its question, and the oracle that knows
/// the answer.
#[derive(Debug, Clone)]
pub struct SimEnv {
    pub video: VideoHandle,
    pub oracle: SimOracle,
    pub query: String,
    pub answer: String,
    /// Span covering all key intervals, in seconds.
    pub gt_interval: (f64, f64),
}

impl SimEnv {
    pub fn gt_frames(&self) -> (u64, u64) {
        let keys = &self.oracle.keys;
        (keys[0].0, keys.iter().map(|k| k.1).max().unwrap())
    }
}

pub fn make_env(spec: &SyntheticSpec) -> Result<SimEnv> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, "layout", "");
    let keys = match &spec.key_intervals {
        Some(k) => {
            let mut k = k.clone();
            k.sort_unstable();
            k
        }
        None => place(
            &mut rng,
            spec.total_frames,
            spec.key_width,
            spec.key_count,
            &[],
        ),
    };
    let width = keys[0].1 - keys[0].0;
    let n_distractors =
        (spec.distractor_density * spec.total_frames as f64 / width as f64).round() as usize;
    let distractors = place(&mut rng, spec.total_frames, width, n_distractors, &keys);
    let answer = spec
        .answer
        .unwrap_or_else(|| (b'A' + rng.random_range(0..spec.options) as u8) as char);

    let options: Vec<String> = (0..spec.options)
        .map(|i| format!("({}) scene {}", (b'A' + i as u8) as char, i + 1))
        .collect();
    let query = format!(
        "Which scene contains the marked event? Options: {}",
        options.join(" ")
    );
    let id = format!("sim-{:016x}", spec.seed);
    let video = VideoHandle::synthetic(&id, spec.total_frames, keys.clone())?;
    let gt = (
        keys[0].0 as f64,
        keys.iter().map(|k| k.1).max().unwrap() as f64,
    );
    Ok(SimEnv {
        video,
        oracle: SimOracle {
            keys,
            distractors,
            answer,
            options: spec.options,
            reward_noise: spec.reward_noise,
            agent_insight: spec.agent_insight,
            frame_focus: spec.frame_focus,
            seed: spec.seed,
        },
        query,
        answer: answer.to_string(),
        gt_interval: gt,
    })
}

static REWARD_SEGMENT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^Segment (\d+): frames \[(\d+), (\d+)\)").unwrap());
static CANDIDATE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?m)^\[(\d+)\] frames \[(\d+), (\d+)\)[^|\n]*(?:\| Score: (\d+))?").unwrap()
});
static KEY_LABEL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"KEY-(\d+)").unwrap());
static FRAME_RANGE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"numbered 0 to (\d+)").unwrap());
static FRAME_BUDGET: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"up to (\d+) frame indices").unwrap());

#[derive(Debug, Clone, Copy)]
struct Candidate {
    id: u32,
    start: u64,
    end: u64,
    score: Option<u32>,
}

fn candidates(text: &str) -> Vec<Candidate> {
    CANDIDATE
        .captures_iter(text)
        .map(|c| Candidate {
            id: c[1].parse().unwrap(),
            start: c[2].parse().unwrap(),
            end: c[3].parse().unwrap(),
            score: c.get(4).map(|m| m.as_str().parse().unwrap()),
        })
        .collect()
}

fn earliest_max(cands: &[Candidate]) -> Option<Candidate> {
    let best = cands.iter().filter_map(|c| c.score).max()?;
    cands.iter().find(|c| c.score == Some(best)).copied()
}

/// Plays the reward model and the exploration agent over a synthetic video.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOracle {
    pub keys: Vec<(u64, u64)>,
    pub distractors: Vec<(u64, u64)>,
    pub answer: char,
    pub options: usize,
    pub reward_noise: f64,
    pub agent_insight: f64,
    pub frame_focus: f64,
    pub seed: u64,
}

impl SimOracle {
    fn true_score(&self, seg: (u64, u64)) -> (u32, &'static str) {
        if self.keys.iter().any(|&k| overlaps(k, seg)) {
            (KEY_SCORE, "the marked event appears to take place here")
        } else if self.distractors.iter().any(|&d| overlaps(d, seg)) {
            (DISTRACTOR_SCORE, "a scene resembling the marked event")
        } else {
            (
                BACKGROUND_SCORE,
                "ordinary footage unrelated to the question",
            )
        }
    }

    fn reward(&self, text: &str) -> String {
        let segs: Vec<(u64, u64)> = REWARD_SEGMENT
            .captures_iter(text)
            .map(|c| (c[2].parse().unwrap(), c[3].parse().unwrap()))
            .collect();
        let mut items: Vec<(u32, &str)> = segs.iter().map(|&s| self.true_score(s)).collect();
        let layout: String = segs.iter().map(|s| format!("{}-{};", s.0, s.1)).collect();
        let mut rng = rng_for(self.seed, "reward", &layout);
        if items.len() > 1 && rng.random_bool(self.reward_noise) {
            let top = (0..items.len())
                .max_by_key(|&i| (items[i].0, std::cmp::Reverse(i)))
                .unwrap();
            let mut other = rng.random_range(0..items.len() - 1);
            if other >= top {
                other += 1;
            }
            let (a, b) = (items[top].0, items[other].0);
            items[top].0 = b;
            items[other].0 = a;
        }
        render_reward_response(&RewardVerdict {
            items: items
                .into_iter()
                .map(|(s, e)| VerdictItem {
                    explanation: e.to_string(),
                    score: Score::new(s).unwrap(),
                })
                .collect(),
        })
    }

    fn keys_seen(&self, messages: &[ChatMessage]) -> Vec<bool> {
        let mut seen = vec![false; self.keys.len()];
        for img in messages.iter().flat_map(|m| m.images()) {
            for c in KEY_LABEL.captures_iter(img.synthetic_label().unwrap_or_default()) {
                if let Some(s) = c[1].parse::<usize>().ok().and_then(|j| seen.get_mut(j)) {
                    *s = true;
                }
            }
        }
        seen
    }

    fn guess(&self) -> char {
        let mut rng = rng_for(self.seed, "guess", "");
        (b'A' + rng.random_range(0..self.options) as u8) as char
    }

    fn answer_line(&self, c: char) -> String {
        Decision::Answer {
            text: c.to_string(),
        }
        .render()
    }

    /// First candidate overlapping a key that memory does not show yet.
    fn toward_unseen_key(&self, cands: &[Candidate], seen: &[bool]) -> Option<Candidate> {
        cands.iter().copied().find(|c| {
            self.keys
                .iter()
                .zip(seen)
                .any(|(&k, &s)| !s && overlaps(k, (c.start, c.end)))
        })
    }

    fn explore(&self, text: &str, messages: &[ChatMessage]) -> String {
        let seen = self.keys_seen(messages);
        if seen.iter().all(|&s| s) {
            return self.answer_line(self.answer);
        }
        if text.contains(markers::FORCE_ANSWER) {
            return self.answer_line(self.guess());
        }
        let cands = candidates(text);
        let layout: String = cands
            .iter()
            .map(|c| format!("{}:{}-{};", c.id, c.start, c.end))
            .collect();
        let mut rng = rng_for(self.seed, "explore", &layout);
        let insight = rng.random_bool(self.agent_insight);
        let pick = insight
            .then(|| self.toward_unseen_key(&cands, &seen))
            .flatten()
            .or_else(|| earliest_max(&cands))
            .or_else(|| cands.choose(&mut rng).copied());
        match pick {
            Some(c) => Decision::Explore { segment: c.id }.render(),
            None => self.answer_line(self.guess()),
        }
    }

    fn explore_frames(&self, text: &str, messages: &[ChatMessage]) -> String {
        let seen = self.keys_seen(messages);
        if seen.iter().all(|&s| s) {
            return self.answer_line(self.answer);
        }
        if text.contains(markers::FORCE_ANSWER) {
            return self.answer_line(self.guess());
        }
        let last = FRAME_RANGE
            .captures(text)
            .and_then(|c| c[1].parse::<u64>().ok())
            .unwrap_or(0);
        let n = FRAME_BUDGET
            .captures(text)
            .and_then(|c| c[1].parse::<usize>().ok())
            .unwrap_or(1)
            .max(1);
        let cands = candidates(text);
        let layout: String = cands
            .iter()
            .map(|c| format!("{}-{};", c.start, c.end))
            .collect();
        let mut rng = rng_for(self.seed, "frames", &layout);
        let insight = rng.random_bool(self.agent_insight);
        let target = insight
            .then(|| self.toward_unseen_key(&cands, &seen))
            .flatten()
            .or_else(|| earliest_max(&cands))
            .map(|c| (c.start, c.end))
            .unwrap_or((0, last + 1));
        let indices = (0..n)
            .map(|_| {
                if rng.random_bool(self.frame_focus) {
                    rng.random_range(target.0..target.1)
                } else {
                    rng.random_range(0..=last)
                }
            })
            .collect();
        Decision::Frames { indices }.render()
    }
}

impl ChatBackend for SimOracle {
    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion> {
        let text = request_text(messages);
        let reply = match RequestClass::of_text(&text) {
            Some(RequestClass::RewardFirst | RequestClass::RewardFollowup) => self.reward(&text),
            Some(RequestClass::Explore) => self.explore(&text, messages),
            Some(RequestClass::ExploreFrames) => self.explore_frames(&text, messages),
            None => {
                return Err(Error::ScriptMiss {
                    class: "unclassified".into(),
                })
            }
        };
        Ok(Completion {
            text: reply,
            retries: 0,
        })
    }
}

/// Result of one synthetic episode.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub seed: u64,
    pub correct: bool,
    pub trace: Option<EpisodeTrace>,
    pub error: Option<String>,
    pub gt_frames: (u64, u64),
}

/// Runs one episode on the environment drawn from `spec`.
pub fn run_trial(
    spec: &SyntheticSpec,
    cfg: &EpisodeConfig,
    templates: &Templates,
) -> Result<TrialResult> {
    let env = make_env(spec)?;
    let mut cfg = cfg.clone();
    if cfg.mode == Mode::GtReward {
        cfg.gt_interval = Some(env.gt_interval);
    }
    let gt_frames = env.gt_frames();
    Ok(
        match Agent::new(&env.oracle, templates).run(&env.video, &env.query, &cfg) {
            Ok(out) => TrialResult {
                seed: spec.seed,
                correct: out.answer.trim().eq_ignore_ascii_case(&env.answer),
                trace: Some(out.trace),
                error: None,
                gt_frames,
            },
            Err(e) => TrialResult {
                seed: spec.seed,
                correct: false,
                trace: None,
                error: Some(e.to_string()),
                gt_frames,
            },
        },
    )
}

/// Environment family swept over; trial `t` uses seed `base_seed + t`, so the
/// same trial index sees the same video in every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub env: SyntheticSpec,
    pub reward_noise: Vec<f64>,
    pub trials: u64,
    pub base_seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            env: SyntheticSpec::default(),
            reward_noise: vec![0.0, 0.2],
            trials: 100,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigGrid {
    pub modes: Vec<Mode>,
    pub capacities: Vec<usize>,
    pub n_sample: usize,
    pub max_rounds: u32,
}

impl Default for ConfigGrid {
    fn default() -> Self {
        ConfigGrid {
            modes: vec![Mode::Full, Mode::NoReward, Mode::NoTree, Mode::GtReward],
            capacities: vec![8],
            n_sample: 4,
            max_rounds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub capacity: usize,
    pub reward_noise: f64,
    pub trials: u64,
    pub correct: u64,
    pub errors: u64,
    pub accuracy: f64,
    pub mean_rounds: f64,
    pub mean_unique_frames: f64,
    pub mean_agent_distance: Option<f64>,
    pub base_seed: u64,
}

impl SweepRow {
    pub const TSV_HEADER: &'static str =
        "mode\tcapacity\treward_noise\ttrials\tcorrect\terrors\taccuracy\tmean_rounds\tmean_unique_frames\tmean_agent_distance";

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.3}\t{:.3}\t{}",
            self.mode,
            self.capacity,
            self.reward_noise,
            self.trials,
            self.correct,
            self.errors,
            self.accuracy,
            self.mean_rounds,
            self.mean_unique_frames,
            self.mean_agent_distance
                .map_or_else(|| "-".to_string(), |d| format!("{d:.3}"))
        )
    }
}

/// Runs `trials` episodes of one configuration in parallel.
pub fn run_cell(
    env: &SyntheticSpec,
    cfg: &EpisodeConfig,
    trials: u64,
    base_seed: u64,
) -> Result<(SweepRow, Vec<TrialResult>)> {
    // gt_reward gets its interval per trial; validate everything else now
    let mut probe = cfg.clone();
    probe.gt_interval.get_or_insert((0.0, 1.0));
    probe.validate()?;
    let templates = Templates::default();
    let results = (0..trials)
        .into_par_iter()
        .map(|t| {
            let spec = SyntheticSpec {
                seed: base_seed.wrapping_add(t),
                ..env.clone()
            };
            run_trial(&spec, cfg, &templates)
        })
        .collect::<Result<Vec<_>>>()?;

    let finished: Vec<&EpisodeTrace> = results.iter().filter_map(|r| r.trace.as_ref()).collect();
    let mean = |f: &dyn Fn(&EpisodeTrace) -> f64| {
        if finished.is_empty() {
            0.0
        } else {
            finished.iter().map(|t| f(t)).sum::<f64>() / finished.len() as f64
        }
    };
    let distance = DistanceReport::build(results.iter().filter_map(|r| {
        r.trace
            .as_ref()
            .map(|t| (format!("seed-{}", r.seed), t, r.gt_frames))
    }));
    let correct = results.iter().filter(|r| r.correct).count() as u64;
    let row = SweepRow {
        mode: cfg.mode,
        capacity: cfg.buffer_capacity,
        reward_noise: env.reward_noise,
        trials,
        correct,
        errors: results.iter().filter(|r| r.error.is_some()).count() as u64,
        accuracy: if trials == 0 {
            0.0
        } else {
            correct as f64 / trials as f64
        },
        mean_rounds: mean(&|t| t.rounds.len() as f64),
        mean_unique_frames: mean(&|t| t.total_unique_frames as f64),
        mean_agent_distance: distance.agent_mean,
        base_seed,
    };
    Ok((row, results))
}

/// One row per (noise level, capacity, mode).
pub fn sweep(spec: &SweepSpec, grid: &ConfigGrid) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &noise in &spec.reward_noise {
        let env = SyntheticSpec {
            reward_noise: noise,
            ..spec.env.clone()
        };
        for &capacity in &grid.capacities {
            for &mode in &grid.modes {
                let cfg = EpisodeConfig {
                    n_sample: grid.n_sample,
                    buffer_capacity: capacity,
                    max_rounds: grid.max_rounds,
                    mode,
                    gt_interval: None,
                };
                rows.push(run_cell(&env, &cfg, spec.trials, spec.base_seed)?.0);
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Part, Role};
    use crate::frames::ImagePayload;

    fn spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn layout_is_seeded() {
        let a = make_env(&spec(3)).unwrap();
        let b = make_env(&spec(3)).unwrap();
        assert_eq!(a.oracle, b.oracle);
        assert_eq!(a.oracle.keys.len(), 1);
        assert_eq!(a.oracle.keys[0].1 - a.oracle.keys[0].0, 5);
        assert_eq!(a.oracle.distractors.len(), 4);
        for d in &a.oracle.distractors {
            assert!(!overlaps(*d, a.oracle.keys[0]));
        }
        assert_ne!(make_env(&spec(4)).unwrap().oracle.keys, a.oracle.keys);
    }

    #[test]
    fn explicit_keys_and_answer() {
        let env = make_env(&SyntheticSpec {
            key_intervals: Some(vec![(510, 515)]),
            answer: Some('C'),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(env.gt_frames(), (510, 515));
        assert_eq!(env.answer, "C");
        assert_eq!(env.gt_interval, (510.0, 515.0));
    }

    #[test]
    fn rejects_bad_specs() {
        for s in [
            SyntheticSpec {
                reward_noise: 1.5,
                ..Default::default()
            },
            SyntheticSpec {
                options: 1,
                ..Default::default()
            },
            SyntheticSpec {
                answer: Some('Z'),
                ..Default::default()
            },
            SyntheticSpec {
                key_intervals: Some(vec![(5, 5)]),
                ..Default::default()
            },
        ] {
            assert!(make_env(&s).is_err(), "{s:?}");
        }
    }

    #[test]
    fn answers_once_key_is_in_memory() {
        let env = make_env(&SyntheticSpec {
            key_intervals: Some(vec![(510, 515)]),
            answer: Some('B'),
            ..Default::default()
        })
        .unwrap();
        let msg = |label: &str| {
            vec![ChatMessage {
                role: Role::User,
                parts: vec![
                    Part::Text(format!(
                        "[1] frames [0, 10) | Score: 5\n{}\n",
                        markers::ANSWER
                    )),
                    Part::Image(ImagePayload::new(
                        crate::frames::SYNTHETIC_MEDIA_TYPE,
                        label.as_bytes().to_vec(),
                    )),
                ],
            }]
        };
        assert_eq!(
            env.oracle.complete(&msg("frame-512 KEY-0")).unwrap().text,
            "ANSWER: B"
        );
        assert_eq!(
            env.oracle.complete(&msg("frame-3")).unwrap().text,
            "EXPLORE: 1"
        );
    }

    #[test]
    fn noise_free_episode_finds_key() {
        let r = run_trial(&spec(11), &EpisodeConfig::default(), &Templates::default()).unwrap();
        assert!(r.correct, "{:?}", r.error);
        assert!(r.trace.unwrap().rounds.len() <= 5);
    }
}
