//! Dataset runs, sweeps, distance analysis and replay, as used by the `vca`
//! command-line tool.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock};

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::analysis::DistanceReport;
use crate::backend::{BackendConfig, ChatBackend, RemoteBackend, Script, ScriptedBackend};
use crate::error::{Error, Result};
use crate::frames::{DecoderConfig, VideoHandle};
use crate::orchestrator::{Agent, EpisodeConfig, Mode, Outcome};
use crate::prompt::Templates;
use crate::simenv::{self, ConfigGrid, SimEnv, SweepRow, SweepSpec, SyntheticSpec};
use crate::trace::EpisodeTrace;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Holds `<video_id>/` frame directories, `<video_id>.sim.toml` synthetic
    /// specs, or video files handed to the decoder.
    pub video_root: PathBuf,
    /// Directory of prompt template overrides.
    pub templates: Option<PathBuf>,
    /// Frame rate assumed for frame directories.
    pub frame_rate: Option<f64>,
    pub decoder: Option<DecoderConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub backend: BackendConfig,
    /// Separate model for segment scoring; `backend` is used when absent.
    pub reward_backend: Option<BackendConfig>,
    pub episode: EpisodeConfig,
    pub paths: PathsConfig,
    /// Concurrent episodes; defaults to the backend's in-flight limit.
    pub workers: Option<usize>,
}

impl HarnessConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn workers(&self) -> usize {
        self.workers.unwrap_or(self.backend.max_in_flight).max(1)
    }

    pub fn templates(&self) -> Result<Templates> {
        match &self.paths.templates {
            Some(dir) => Templates::load_dir(dir),
            None => Ok(Templates::default()),
        }
    }
}

/// Which backend serves the episodes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum BackendChoice {
    #[default]
    Remote,
    Scripted(PathBuf),
    /// The synthetic oracle of each record's `.sim.toml` video.
    Sim,
}

impl std::str::FromStr for BackendChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "remote" => Ok(BackendChoice::Remote),
            "sim" => Ok(BackendChoice::Sim),
            _ => match s.strip_prefix("scripted:") {
                Some(p) if !p.is_empty() => Ok(BackendChoice::Scripted(PathBuf::from(p))),
                _ => Err(Error::InvalidConfig(format!(
                    "unknown backend {s:?}; expected remote, sim or scripted:<path>"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    #[serde(default)]
    pub id: Option<String>,
    pub video_id: String,
    pub question: String,
    #[serde(default)]
    pub options: Option<Vec<String>>,
    pub answer_key: String,
    #[serde(default)]
    pub gt_interval: Option<(f64, f64)>,
    #[serde(default)]
    pub duration_s: Option<f64>,
}

fn letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

impl QaRecord {
    /// File stem for this record's trace.
    pub fn key(&self, line: usize) -> String {
        let raw = match &self.id {
            Some(id) => id.clone(),
            None => format!("{line:05}-{}", self.video_id),
        };
        raw.chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(opts) = &self.options {
            if opts.is_empty() || opts.len() > 26 {
                return Err(Error::InvalidConfig(
                    "options must hold 1 to 26 entries".into(),
                ));
            }
            if !matches!(canonical(&self.answer_key, Some(opts)), Canonical::Index(i) if i < opts.len())
            {
                return Err(Error::InvalidConfig(format!(
                    "answer_key {:?} is not one of the options",
                    self.answer_key
                )));
            }
        }
        if let Some((s, e)) = self.gt_interval {
            if !(s >= 0.0 && e > s) {
                return Err(Error::InvalidConfig(format!("bad gt_interval ({s}, {e})")));
            }
        }
        Ok(())
    }

    /// Question text as shown to the agent, options lettered.
    pub fn query(&self) -> String {
        match &self.options {
            Some(opts) => {
                let mut q = self.question.trim_end().to_string();
                q.push_str("\nOptions:");
                for (i, o) in opts.iter().enumerate() {
                    q.push_str(&format!("\n({}) {o}", letter(i)));
                }
                q
            }
            None => self.question.clone(),
        }
    }

    pub fn is_correct(&self, prediction: &str) -> bool {
        let opts = self.options.as_deref();
        match (
            canonical(prediction, opts),
            canonical(&self.answer_key, opts),
        ) {
            (Canonical::Index(a), Canonical::Index(b)) => a == b,
            (Canonical::Text(a), Canonical::Text(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
enum Canonical {
    /// Zero-based option index.
    Index(usize),
    Text(String),
}

static LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^(?:option\s*)?\(?([a-z])\)?(?:[.:)]|\s|$)").unwrap());
static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^(?:option\s*)?\(?(\d+)\)?(?:[.:)]|\s|$)").unwrap());

fn squash(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Normalizes an answer to an option index where possible: `B`, `(B)`,
/// `B. text`, `2`, `Option 2` and the option text itself all name an option.
fn canonical(answer: &str, options: Option<&[String]>) -> Canonical {
    let a = answer
        .trim()
        .trim_matches(|c: char| c == '*' || c == '"' || c == '\'' || c == '`');
    if let Some(opts) = options {
        if let Some(i) = opts.iter().position(|o| squash(o) == squash(a)) {
            return Canonical::Index(i);
        }
    }
    if let Some(c) = NUMBER.captures(a) {
        if let Ok(n) = c[1].parse::<usize>() {
            if n >= 1 {
                return Canonical::Index(n - 1);
            }
        }
    }
    let single_letter = a.chars().filter(|c| c.is_alphanumeric()).count() == 1;
    if options.is_some() || single_letter {
        if let Some(c) = LETTER.captures(a) {
            let ch = c[1].to_ascii_uppercase().as_bytes()[0];
            return Canonical::Index((ch - b'A') as usize);
        }
    }
    Canonical::Text(squash(a))
}

/// One dataset line: the parsed record or why it could not be read.
pub fn read_dataset(path: &Path) -> Result<Vec<(usize, std::result::Result<QaRecord, String>)>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            (
                n + 1,
                serde_json::from_str(l).map_err(|e| format!("line {}: {e}", n + 1)),
            )
        })
        .collect())
}

/// A resolved video, with its synthetic environment when it has one.
pub struct ResolvedVideo {
    pub video: VideoHandle,
    pub sim: Option<SimEnv>,
}

pub fn resolve_video(paths: &PathsConfig, video_id: &str) -> Result<ResolvedVideo> {
    let root = &paths.video_root;
    if root.join(video_id).is_dir() {
        let fps = paths.frame_rate.unwrap_or(1.0);
        return Ok(ResolvedVideo {
            video: VideoHandle::image_dir(root, video_id, fps)?,
            sim: None,
        });
    }
    let sim_path = root.join(format!("{video_id}.sim.toml"));
    if sim_path.is_file() {
        let spec: SyntheticSpec = toml::from_str(&fs::read_to_string(&sim_path)?)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", sim_path.display())))?;
        let env = simenv::make_env(&spec)?;
        let video = VideoHandle::synthetic(video_id, spec.total_frames, env.oracle.keys.clone())?;
        return Ok(ResolvedVideo {
            video,
            sim: Some(env),
        });
    }
    if let Some(decoder) = &paths.decoder {
        if let Some(file) = find_video_file(root, video_id)? {
            return Ok(ResolvedVideo {
                video: VideoHandle::decoder(&file, video_id, None, decoder.clone())?,
                sim: None,
            });
        }
    }
    Err(Error::DecoderFailure(format!(
        "video {video_id} not found under {}",
        root.display()
    )))
}

fn find_video_file(root: &Path, video_id: &str) -> Result<Option<PathBuf>> {
    if !root.is_dir() {
        return Ok(None);
    }
    let mut hits: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_stem().is_some_and(|s| s == video_id))
        .collect();
    hits.sort();
    Ok(hits.into_iter().next())
}

type Shared = Arc<dyn ChatBackend>;

/// Backends shared by all episodes of a run.
pub struct Backends {
    choice: BackendChoice,
    main: Option<Shared>,
    reward: Option<Shared>,
}

impl Backends {
    pub fn new(choice: &BackendChoice, config: &HarnessConfig) -> Result<Self> {
        let (main, reward): (Option<Shared>, Option<Shared>) = match choice {
            BackendChoice::Remote => {
                let main: Shared = Arc::new(RemoteBackend::new(config.backend.clone())?);
                let reward = match &config.reward_backend {
                    Some(cfg) => Some(Arc::new(RemoteBackend::new(cfg.clone())?) as Shared),
                    None => None,
                };
                (Some(main), reward)
            }
            BackendChoice::Scripted(path) => (
                Some(Arc::new(ScriptedBackend::new(Script::load(path)?))),
                None,
            ),
            BackendChoice::Sim => (None, None),
        };
        Ok(Backends {
            choice: choice.clone(),
            main,
            reward,
        })
    }

    /// Runs one episode on `video` with the configured backends.
    pub fn run(
        &self,
        templates: &Templates,
        video: &ResolvedVideo,
        query: &str,
        cfg: &EpisodeConfig,
    ) -> Result<Outcome> {
        let main: &dyn ChatBackend = match (&self.choice, &self.main, &video.sim) {
            (BackendChoice::Sim, _, Some(env)) => &env.oracle,
            (BackendChoice::Sim, _, None) => {
                return Err(Error::InvalidConfig(format!(
                    "sim backend needs a synthetic video, {} is not one",
                    video.video.id
                )))
            }
            (_, Some(b), _) => b.as_ref(),
            (_, None, _) => unreachable!("non-sim backends are built up front"),
        };
        let mut agent = Agent::new(main, templates);
        if let Some(r) = &self.reward {
            agent = agent.with_reward_backend(r.as_ref());
        }
        agent.run(&video.video, query, cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordResult {
    pub key: String,
    pub video_id: Option<String>,
    pub prediction: Option<String>,
    pub answer_key: Option<String>,
    pub correct: bool,
    pub rounds: Option<u32>,
    pub unique_frames: Option<u64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub records: usize,
    pub completed: usize,
    pub correct: usize,
    pub error_count: usize,
    /// Correct over records that finished without error.
    pub accuracy: f64,
    pub mean_unique_frames: f64,
    pub mean_rounds: f64,
}

impl RunSummary {
    pub fn from_results(mode: Mode, results: &[RecordResult]) -> Self {
        let done: Vec<&RecordResult> = results.iter().filter(|r| r.error.is_none()).collect();
        let mean = |f: &dyn Fn(&RecordResult) -> f64| {
            if done.is_empty() {
                0.0
            } else {
                done.iter().map(|r| f(r)).sum::<f64>() / done.len() as f64
            }
        };
        let correct = done.iter().filter(|r| r.correct).count();
        RunSummary {
            mode,
            records: results.len(),
            completed: done.len(),
            correct,
            error_count: results.len() - done.len(),
            accuracy: if done.is_empty() {
                0.0
            } else {
                correct as f64 / done.len() as f64
            },
            mean_unique_frames: mean(&|r| r.unique_frames.unwrap_or(0) as f64),
            mean_rounds: mean(&|r| r.rounds.unwrap_or(0) as f64),
        }
    }
}

pub struct RunOptions {
    pub backend: BackendChoice,
    pub mode: Option<Mode>,
}

fn episode_config(
    base: &EpisodeConfig,
    mode: Option<Mode>,
    gt: Option<(f64, f64)>,
) -> EpisodeConfig {
    EpisodeConfig {
        mode: mode.unwrap_or(base.mode),
        gt_interval: gt,
        ..base.clone()
    }
}

fn run_record(
    line: usize,
    parsed: &std::result::Result<QaRecord, String>,
    config: &HarnessConfig,
    opts: &RunOptions,
    backends: &Backends,
    templates: &Templates,
    trace_dir: &Path,
) -> RecordResult {
    let rec = match parsed {
        Ok(r) => r,
        Err(e) => {
            return RecordResult {
                key: format!("line-{line:05}"),
                video_id: None,
                prediction: None,
                answer_key: None,
                correct: false,
                rounds: None,
                unique_frames: None,
                error: Some(e.clone()),
            }
        }
    };
    let key = rec.key(line);
    let outcome = rec.validate().and_then(|()| {
        let video = resolve_video(&config.paths, &rec.video_id)?;
        let gt = rec
            .gt_interval
            .or(video.sim.as_ref().map(|s| s.gt_interval));
        let cfg = episode_config(&config.episode, opts.mode, gt);
        let out = backends.run(templates, &video, &rec.query(), &cfg)?;
        out.trace.write(&trace_dir.join(format!("{key}.jsonl")))?;
        Ok(out)
    });
    match outcome {
        Ok(out) => RecordResult {
            correct: rec.is_correct(&out.answer),
            key,
            video_id: Some(rec.video_id.clone()),
            prediction: Some(out.answer),
            answer_key: Some(rec.answer_key.clone()),
            rounds: Some(out.trace.rounds.len() as u32),
            unique_frames: Some(out.trace.total_unique_frames),
            error: None,
        },
        Err(e) => {
            warn!(%key, error = %e, "record failed");
            RecordResult {
                key,
                video_id: Some(rec.video_id.clone()),
                prediction: None,
                answer_key: Some(rec.answer_key.clone()),
                correct: false,
                rounds: None,
                unique_frames: None,
                error: Some(e.to_string()),
            }
        }
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Runs every dataset record as an episode. Writes `traces/<key>.jsonl`,
/// `results.jsonl` and `summary.json` under `out`. Record failures are
/// counted, never fatal.
pub fn cmd_run(
    dataset: &Path,
    config: &HarnessConfig,
    opts: &RunOptions,
    out: &Path,
) -> Result<RunSummary> {
    // gt_interval comes from each record; check the rest before starting
    episode_config(&config.episode, opts.mode, Some((0.0, 1.0))).validate()?;
    let records = read_dataset(dataset)?;
    let templates = config.templates()?;
    let backends = Backends::new(&opts.backend, config)?;
    let trace_dir = out.join("traces");
    fs::create_dir_all(&trace_dir)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers())
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let results: Vec<RecordResult> = pool.install(|| {
        records
            .par_iter()
            .map(|(line, parsed)| {
                run_record(
                    *line, parsed, config, opts, &backends, &templates, &trace_dir,
                )
            })
            .collect()
    });

    let summary = RunSummary::from_results(opts.mode.unwrap_or(config.episode.mode), &results);
    write_jsonl(&out.join("results.jsonl"), &results)?;
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    info!(
        accuracy = summary.accuracy,
        errors = summary.error_count,
        "run complete"
    );
    Ok(summary)
}

/// Converts a ground-truth span in seconds to frames, clipped to the video.
pub fn gt_to_frames((s, e): (f64, f64), frame_rate: f64, total_frames: u64) -> Option<(u64, u64)> {
    let start = (s * frame_rate).floor() as u64;
    let end = ((e * frame_rate).ceil() as u64).min(total_frames);
    (start < end).then_some((start, end))
}

/// Distance report over the traces of a run; the dataset supplies the
/// ground-truth intervals.
pub fn cmd_analyze_distance(trace_dir: &Path, dataset: &Path) -> Result<DistanceReport> {
    let mut traces: BTreeMap<String, (EpisodeTrace, (u64, u64))> = BTreeMap::new();
    let mut missing = Vec::new();
    for (line, parsed) in read_dataset(dataset)? {
        let Ok(rec) = parsed else { continue };
        let Some(gt) = rec.gt_interval else { continue };
        let key = rec.key(line);
        let path = trace_dir.join(format!("{key}.jsonl"));
        if !path.is_file() {
            missing.push(key);
            continue;
        }
        let trace = EpisodeTrace::read(&path)?;
        match gt_to_frames(gt, trace.header.frame_rate, trace.header.total_frames) {
            Some(f) => {
                traces.insert(key, (trace, f));
            }
            None => missing.push(key),
        }
    }
    if traces.is_empty() {
        return Ok(DistanceReport::empty(if missing.is_empty() {
            "dataset has no records with gt_interval".to_string()
        } else {
            format!(
                "no traces found for {} records with gt_interval",
                missing.len()
            )
        }));
    }
    let mut report = DistanceReport::build(traces.iter().map(|(k, (t, gt))| (k.clone(), t, *gt)));
    if !missing.is_empty() {
        report.status = format!("ok; {} records had no usable trace", missing.len());
    }
    Ok(report)
}

/// Sweep definition file: a [`SweepSpec`] plus its `[grid]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationPlan {
    #[serde(flatten)]
    pub sweep: SweepSpec,
    pub grid: ConfigGrid,
}

impl SimulationPlan {
    pub fn load(path: &Path) -> Result<Self> {
        toml::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

/// Runs a sweep and writes `sweep.tsv` and `sweep.jsonl` under `out`.
pub fn cmd_simulate(plan: &SimulationPlan, out: &Path) -> Result<Vec<SweepRow>> {
    let rows = simenv::sweep(&plan.sweep, &plan.grid)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("sweep.tsv"), sweep_table(&rows))?;
    write_jsonl(&out.join("sweep.jsonl"), &rows)?;
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from(SweepRow::TSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.tsv());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub video_id: String,
    pub mode: Mode,
    pub answer: String,
    pub rounds: u32,
    pub total_unique_frames: u64,
    /// `Some(true)` when a re-run reproduced the trace byte for byte.
    pub reproduced: Option<bool>,
}

/// Summarizes a trace; with a backend, re-runs the episode from the trace
/// header and compares the result byte for byte.
pub fn cmd_replay(
    trace_path: &Path,
    verify: Option<(&HarnessConfig, &BackendChoice)>,
) -> Result<ReplayReport> {
    let original = fs::read_to_string(trace_path)?;
    let trace = EpisodeTrace::from_jsonl(&original)?;
    let h = &trace.header;
    let reproduced = match verify {
        None => None,
        Some((config, choice)) => {
            let video = resolve_video(&config.paths, &h.video_id)?;
            let cfg = EpisodeConfig {
                n_sample: h.n_sample,
                buffer_capacity: h.buffer_capacity,
                max_rounds: h.max_rounds,
                mode: h.mode,
                gt_interval: h.gt_interval,
            };
            let backends = Backends::new(choice, config)?;
            let rerun = backends.run(&config.templates()?, &video, &h.query, &cfg)?;
            Some(rerun.trace.to_jsonl() == original)
        }
    };
    Ok(ReplayReport {
        video_id: h.video_id.clone(),
        mode: h.mode,
        answer: trace.final_answer.clone(),
        rounds: trace.rounds.len() as u32,
        total_unique_frames: trace.total_unique_frames,
        reproduced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(options: Option<Vec<&str>>, key: &str) -> QaRecord {
        QaRecord {
            id: None,
            video_id: "v".into(),
            question: "What happens?".into(),
            options: options.map(|o| o.into_iter().map(String::from).collect()),
            answer_key: key.into(),
            gt_interval: None,
            duration_s: None,
        }
    }

    #[test]
    fn number_normalization() {
        let r = record(None, "2");
        assert!(r.is_correct("Option 2"));
        assert!(r.is_correct("2."));
        assert!(!r.is_correct("3"));
    }

    #[test]
    fn letter_and_text_normalization() {
        let r = record(Some(vec!["a red car", "a blue bus", "a dog"]), "a blue bus");
        r.validate().unwrap();
        for p in [
            "B",
            "(B)",
            "b) a blue bus",
            "A blue bus.",
            "Option 2",
            "**B**",
        ] {
            assert!(r.is_correct(p), "{p}");
        }
        for p in ["A", "a dog", "3"] {
            assert!(!r.is_correct(p), "{p}");
        }
        let by_letter = record(Some(vec!["x", "y"]), "B");
        assert!(by_letter.is_correct("y"));
    }

    #[test]
    fn free_text_answers() {
        let r = record(None, "Paris");
        assert!(r.is_correct("paris"));
        assert!(!r.is_correct("Lyon"));
    }

    #[test]
    fn answer_key_must_be_an_option() {
        assert!(record(Some(vec!["x", "y"]), "z").validate().is_err());
        assert!(record(Some(vec!["x", "y"]), "C").validate().is_err());
    }

    #[test]
    fn query_letters_options() {
        let q = record(Some(vec!["x", "y"]), "x").query();
        assert_eq!(q, "What happens?\nOptions:\n(A) x\n(B) y");
    }

    #[test]
    fn keys_are_file_safe() {
        let mut r = record(None, "x");
        assert_eq!(r.key(7), "00007-v");
        r.id = Some("a/b c".into());
        assert_eq!(r.key(7), "a_b_c");
    }

    #[test]
    fn backend_choice_parsing() {
        assert_eq!(
            "remote".parse::<BackendChoice>().unwrap(),
            BackendChoice::Remote
        );
        assert_eq!(
            "scripted:x.toml".parse::<BackendChoice>().unwrap(),
            BackendChoice::Scripted("x.toml".into())
        );
        assert!("scripted:".parse::<BackendChoice>().is_err());
        assert!("local".parse::<BackendChoice>().is_err());
    }

    #[test]
    fn gt_conversion() {
        assert_eq!(gt_to_frames((1.5, 2.2), 10.0, 100), Some((15, 22)));
        assert_eq!(gt_to_frames((20.0, 30.0), 1.0, 10), None);
    }
}
