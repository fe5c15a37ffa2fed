//! Frame access by index and the per-round sampling rule.
//!
//! Three backends share one handle type: a directory of pre-extracted images,
//! an external decoder command with an on-disk cache, and synthetic labelled
//! frames used by the simulation environment.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::Segment;

pub const SYNTHETIC_MEDIA_TYPE: &str = "image/x-synthetic";

/// Evenly spaced interior indices of `seg`.
///
/// Returns `min(n, len - 1)` strictly increasing indices at
/// `start + round(i * len / (k + 1))`. An empty result marks a terminal leaf.
pub fn uniform_sample(seg: &Segment, n: usize) -> Vec<u64> {
    let len = seg.len();
    let k = (n as u64).min(len.saturating_sub(1));
    let mut out: Vec<u64> = Vec::with_capacity(k as usize);
    for i in 1..=k {
        // round-half-up of i * len / (k + 1) in integer arithmetic
        let off = (2 * i * len + (k + 1)) / (2 * (k + 1));
        let p = seg.start + off;
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub media_type: String,
    pub bytes: Arc<[u8]>,
}

impl ImagePayload {
    pub fn new(media_type: impl Into<String>, bytes: impl Into<Arc<[u8]>>) -> Self {
        ImagePayload {
            media_type: media_type.into(),
            bytes: bytes.into(),
        }
    }

    /// The embedded label of a synthetic frame, e.g. `frame-512 KEY-0`.
    pub fn synthetic_label(&self) -> Option<&str> {
        if self.media_type != SYNTHETIC_MEDIA_TYPE {
            return None;
        }
        std::str::from_utf8(&self.bytes).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    ImageDir,
    Decoder,
    Synthetic,
}

/// External frame extractor. `command` is run through `sh -c` with the
/// placeholders `{input}`, `{index}` and `{output}` substituted; `probe`, if
/// set, must print the total frame count for `{input}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub command: String,
    #[serde(default)]
    pub probe: Option<String>,
    pub cache_dir: PathBuf,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
}

fn default_frame_rate() -> f64 {
    1.0
}

#[derive(Debug, Clone)]
enum Source {
    ImageDir(PathBuf),
    Decoder {
        input: PathBuf,
        config: DecoderConfig,
    },
    Synthetic {
        key_intervals: Vec<(u64, u64)>,
    },
}

#[derive(Debug, Clone)]
pub struct VideoHandle {
    pub id: String,
    pub total_frames: u64,
    pub frame_rate: f64,
    source: Source,
}

impl VideoHandle {
    /// Opens `<root>/<video_id>/` holding `<index:08>.jpg` files numbered from 0.
    pub fn image_dir(root: &Path, video_id: &str, frame_rate: f64) -> Result<Self> {
        let dir = root.join(video_id);
        let mut count = 0u64;
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(".jpg") {
                if stem.len() == 8 && stem.bytes().all(|b| b.is_ascii_digit()) {
                    count += 1;
                }
            }
        }
        Self::checked(video_id, count, frame_rate, Source::ImageDir(dir))
    }

    pub fn decoder(
        input: &Path,
        video_id: &str,
        total_frames: Option<u64>,
        config: DecoderConfig,
    ) -> Result<Self> {
        if !input.is_file() {
            return Err(Error::DecoderFailure(format!(
                "input {} not found",
                input.display()
            )));
        }
        let total = match total_frames {
            Some(n) => n,
            None => probe_frame_count(input, &config)?,
        };
        let rate = config.frame_rate;
        Self::checked(
            video_id,
            total,
            rate,
            Source::Decoder {
                input: input.to_path_buf(),
                config,
            },
        )
    }

    pub fn synthetic(
        video_id: &str,
        total_frames: u64,
        key_intervals: Vec<(u64, u64)>,
    ) -> Result<Self> {
        Self::checked(
            video_id,
            total_frames,
            1.0,
            Source::Synthetic { key_intervals },
        )
    }

    fn checked(id: &str, total_frames: u64, frame_rate: f64, source: Source) -> Result<Self> {
        if total_frames < 2 {
            return Err(Error::InvalidConfig(format!(
                "video {id} has {total_frames} frames; at least 2 are required"
            )));
        }
        if frame_rate.is_nan() || frame_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "video {id}: frame rate must be positive"
            )));
        }
        Ok(VideoHandle {
            id: id.to_string(),
            total_frames,
            frame_rate,
            source,
        })
    }

    pub fn kind(&self) -> SourceKind {
        match self.source {
            Source::ImageDir(_) => SourceKind::ImageDir,
            Source::Decoder { .. } => SourceKind::Decoder,
            Source::Synthetic { .. } => SourceKind::Synthetic,
        }
    }

    pub fn seconds(&self, frame: u64) -> f64 {
        frame as f64 / self.frame_rate
    }

    /// One payload per index, order preserved.
    pub fn fetch_frames(&self, indices: &[u64]) -> Result<Vec<ImagePayload>> {
        if let Some(&index) = indices.iter().find(|&&i| i >= self.total_frames) {
            return Err(Error::FrameUnavailable { index });
        }
        match &self.source {
            Source::ImageDir(dir) => indices
                .iter()
                .map(|&index| {
                    let path = dir.join(frame_file_name(index));
                    fs::read(&path)
                        .map(|b| ImagePayload::new("image/jpeg", b))
                        .map_err(|_| Error::FrameUnavailable { index })
                })
                .collect(),
            Source::Decoder { input, config } => self.fetch_decoded(input, config, indices),
            Source::Synthetic { key_intervals } => Ok(indices
                .iter()
                .map(|&i| {
                    ImagePayload::new(
                        SYNTHETIC_MEDIA_TYPE,
                        synthetic_label(i, key_intervals).into_bytes(),
                    )
                })
                .collect()),
        }
    }

    fn fetch_decoded(
        &self,
        input: &Path,
        config: &DecoderConfig,
        indices: &[u64],
    ) -> Result<Vec<ImagePayload>> {
        let dir = config.cache_dir.join(&self.id);
        fs::create_dir_all(&dir)?;
        let missing: Vec<u64> = indices
            .iter()
            .copied()
            .filter(|&i| !dir.join(frame_file_name(i)).is_file())
            .collect();
        if !missing.is_empty() {
            // serializes extraction of the same video across threads and processes
            let lock = File::create(dir.join(".lock"))?;
            lock.lock()?;
            for index in missing {
                let out = dir.join(frame_file_name(index));
                if out.is_file() {
                    continue;
                }
                let tmp = dir.join(format!(".{}.part.jpg", index));
                let cmd = config
                    .command
                    .replace("{input}", &shell_quote(&input.to_string_lossy()))
                    .replace("{index}", &index.to_string())
                    .replace("{output}", &shell_quote(&tmp.to_string_lossy()));
                let status = Command::new("sh").arg("-c").arg(&cmd).output()?;
                if !status.status.success() || !tmp.is_file() {
                    let _ = fs::remove_file(&tmp);
                    return Err(Error::DecoderFailure(format!(
                        "frame {index}: `{cmd}` exited with {}: {}",
                        status.status,
                        String::from_utf8_lossy(&status.stderr).trim()
                    )));
                }
                fs::rename(&tmp, &out)?;
            }
            lock.unlock()?;
        }
        indices
            .iter()
            .map(|&index| {
                fs::read(dir.join(frame_file_name(index)))
                    .map(|b| ImagePayload::new("image/jpeg", b))
                    .map_err(|_| Error::FrameUnavailable { index })
            })
            .collect()
    }
}

pub fn frame_file_name(index: u64) -> String {
    format!("{index:08}.jpg")
}

pub fn synthetic_label(index: u64, key_intervals: &[(u64, u64)]) -> String {
    let mut label = format!("frame-{index}");
    for (j, &(s, e)) in key_intervals.iter().enumerate() {
        if s <= index && index < e {
            label.push_str(&format!(" KEY-{j}"));
        }
    }
    label
}

fn probe_frame_count(input: &Path, config: &DecoderConfig) -> Result<u64> {
    let probe = config.probe.as_deref().ok_or_else(|| {
        Error::InvalidConfig("decoder video needs a frame count or a probe command".into())
    })?;
    let cmd = probe.replace("{input}", &shell_quote(&input.to_string_lossy()));
    let out = Command::new("sh").arg("-c").arg(&cmd).output()?;
    if !out.status.success() {
        return Err(Error::DecoderFailure(format!(
            "probe `{cmd}` exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    String::from_utf8_lossy(&out.stdout)
        .trim()
        .parse()
        .map_err(|_| Error::DecoderFailure(format!("probe `{cmd}` did not print a frame count")))
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(start: u64, end: u64) -> Segment {
        Segment {
            id: 1,
            start,
            end,
            depth: 1,
            parent: Some(0),
        }
    }

    #[test]
    fn sampling_examples() {
        assert_eq!(uniform_sample(&seg(0, 100), 4), vec![20, 40, 60, 80]);
        assert_eq!(uniform_sample(&seg(0, 5), 4), vec![1, 2, 3, 4]);
        assert_eq!(uniform_sample(&seg(5, 6), 4), Vec::<u64>::new());
    }

    #[test]
    fn sampling_two_frame_segment_matches_enumeration() {
        // the only interior frame of [10, 12) is 11
        let interior: Vec<u64> = (11..12).collect();
        assert_eq!(uniform_sample(&seg(10, 12), 4), interior);
    }

    #[test]
    fn synthetic_labels() {
        let v = VideoHandle::synthetic("sim", 1000, vec![(510, 515)]).unwrap();
        let p = v.fetch_frames(&[0, 511, 999]).unwrap();
        assert_eq!(p[0].synthetic_label(), Some("frame-0"));
        assert_eq!(p[1].synthetic_label(), Some("frame-511 KEY-0"));
        assert!(matches!(
            v.fetch_frames(&[1000]),
            Err(Error::FrameUnavailable { index: 1000 })
        ));
    }

    #[test]
    fn tiny_video_rejected() {
        assert!(VideoHandle::synthetic("x", 1, vec![]).is_err());
    }
}
