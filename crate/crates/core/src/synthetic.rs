//! Synthetic frames and session recordings for tests and smoke runs.
//!
//! Gesture frames are a per-class base colour with independent per-pixel
//! noise, so consecutive frames always differ (they read as activity) and
//! classes stay separable by colour. Pause frames repeat one fixed image.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::label::GestureLabel;

pub fn class_color(label: GestureLabel) -> [u8; 3] {
    match label {
        GestureLabel::RubPalmToPalm => [200, 40, 40],
        GestureLabel::FingersInterlaced => [40, 190, 60],
        GestureLabel::P2PFingersInterlaced => [40, 60, 210],
        GestureLabel::FingersInterlocked => [210, 200, 40],
        GestureLabel::ThumbRub => [190, 50, 200],
        GestureLabel::RotationalRub => [40, 200, 200],
    }
}

/// Class colour plus uniform noise in `[-jitter, jitter]` per channel.
pub fn gesture_frame(label: GestureLabel, width: u32, height: u32, jitter: u8, rng: &mut ChaCha8Rng) -> RgbImage {
    let base = class_color(label);
    let j = jitter as i16;
    RgbImage::from_fn(width, height, |_, _| {
        Rgb(base.map(|c| (c as i16 + rng.random_range(-j..=j)).clamp(0, 255) as u8))
    })
}

pub fn pause_frame(width: u32, height: u32) -> RgbImage {
    RgbImage::from_pixel(width, height, Rgb([96, 96, 96]))
}

/// Layout of a synthetic session: activity bursts separated by still pauses.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionPlan {
    pub bursts: Vec<(GestureLabel, usize)>,
    pub pause_frames: usize,
    /// Still frames before the first and after the last burst.
    pub lead_frames: usize,
    pub width: u32,
    pub height: u32,
    pub jitter: u8,
    pub seed: u64,
}

impl SessionPlan {
    /// One burst per WHO stage in recording order.
    pub fn six_stages(burst_frames: usize, pause_frames: usize, seed: u64) -> Self {
        Self {
            bursts: GestureLabel::session_order()
                .into_iter()
                .map(|l| (l, burst_frames))
                .collect(),
            pause_frames,
            lead_frames: 0,
            width: 32,
            height: 24,
            jitter: 24,
            seed,
        }
    }

    pub fn frame_count(&self) -> usize {
        let bursts: usize = self.bursts.iter().map(|b| b.1).sum();
        bursts + self.pause_frames * self.bursts.len().saturating_sub(1) + 2 * self.lead_frames
    }

    pub fn render(&self) -> Vec<RgbImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let still = pause_frame(self.width, self.height);
        let mut out = vec![still.clone(); self.lead_frames];
        for (k, &(label, n)) in self.bursts.iter().enumerate() {
            if k > 0 {
                out.extend(std::iter::repeat_n(still.clone(), self.pause_frames));
            }
            for _ in 0..n {
                out.push(gesture_frame(label, self.width, self.height, self.jitter, &mut rng));
            }
        }
        out.extend(std::iter::repeat_n(still, self.lead_frames));
        out
    }
}
