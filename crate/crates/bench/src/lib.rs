//! Fixtures shared by the criterion benches.

use vca_core::memory::FrameRecord;
use vca_core::{ImagePayload, Score, SyntheticSpec};

/// `n` frames with scores cycling through 0..=100 and distinct indices.
pub fn frames(n: u64, round: u32, offset: u64) -> Vec<FrameRecord> {
    let img = ImagePayload::new("image/x-bench", Vec::new());
    (0..n)
        .map(|i| FrameRecord {
            frame_index: offset + i,
            image: img.clone(),
            score: Score::new(((i * 37 + offset) % 101) as u32).unwrap(),
            acquired_round: round,
        })
        .collect()
}

/// The noisy environment family used by the acceptance sweeps.
pub fn noisy_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        reward_noise: 0.2,
        ..Default::default()
    }
}
