//! Video and image containers, clip sampling and synthetic datasets.

mod augment;
pub mod io;
pub mod synth;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment_clip, AugmentConfig, AugmentationParams};

use crate::error::{Error, Result};
use crate::imgproc::Rect;
use crate::tensor::Tensor;

/// Default number of frames per clip.
pub const CLIP_LENGTH: usize = 16;
/// Default temporal stride inside a training clip.
pub const SKIP_RATE: usize = 2;

/// Clip geometry: temporal length and stride, output resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub length: usize,
    pub skip: usize,
    pub height: usize,
    pub width: usize,
}

impl ClipSpec {
    pub fn new(length: usize, skip: usize, height: usize, width: usize) -> Self {
        Self {
            length,
            skip,
            height,
            width,
        }
    }

    pub fn span(&self) -> usize {
        window_span(self.length, self.skip)
    }
}

/// A decoded video, frames `[T, C, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub frames: Tensor<f32>,
    /// Action class index, or `1` for anomalous and `0` for normal.
    pub label: usize,
    /// Per-frame anomaly ground truth. Only evaluation code reads it.
    pub frame_mask: Option<Vec<bool>>,
    /// Per-frame person boxes (`frames x boxes`).
    pub boxes: Vec<Vec<Rect>>,
}

impl Video {
    pub fn new(id: impl Into<String>, frames: Tensor<f32>, label: usize) -> Result<Self> {
        let id = id.into();
        if frames.ndim() != 4 {
            return Err(Error::Shape(format!("video `{id}`: expected [T, C, H, W], got {:?}", frames.shape())));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Dataset(format!("video `{id}`: pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            id,
            frames,
            label,
            frame_mask: None,
            boxes: Vec::new(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// `(C, H, W)`.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[1], s[2], s[3])
    }

    pub fn frame(&self, t: usize) -> Tensor<f32> {
        self.frames.index_axis0(t)
    }

    /// Boxes for frame `t`, empty when none were recorded.
    pub fn frame_boxes(&self, t: usize) -> &[Rect] {
        self.boxes.get(t).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// `L` frames taken from one video at a fixed stride.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// `[L, C, H, W]`.
    pub frames: Tensor<f32>,
    pub source_id: String,
    pub start_index: usize,
    pub skip_rate: usize,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anchor, same-timestamp positive and different-timestamp negative.
#[derive(Clone, Debug)]
pub struct ClipTriplet {
    pub anchor: VideoClip,
    pub positive: VideoClip,
    pub negative: VideoClip,
}

/// Image with binary privacy attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct PrivacyImage {
    pub id: String,
    /// `[C, H, W]`.
    pub image: Tensor<f32>,
    pub labels: Vec<bool>,
    pub boxes: Vec<Rect>,
}

/// Number of frames covered by a clip window.
pub fn window_span(length: usize, skip: usize) -> usize {
    (length - 1) * skip + 1
}

/// Frames `start, start + skip, ...` of `video`.
pub fn sample_clip(video: &Video, start: usize, length: usize, skip: usize) -> Result<VideoClip> {
    if length == 0 || skip == 0 {
        return Err(Error::Parameter(format!("clip length {length} and skip {skip} must be positive")));
    }
    let frames = video.num_frames();
    let last = start + (length - 1) * skip;
    if last >= frames {
        return Err(Error::ClipRange {
            video: video.id.clone(),
            start,
            length,
            skip,
            last,
            frames,
        });
    }
    let (c, h, w) = video.frame_dims();
    let plane = c * h * w;
    let mut data = Vec::with_capacity(length * plane);
    for i in 0..length {
        let t = start + i * skip;
        data.extend_from_slice(&video.frames.data()[t * plane..(t + 1) * plane]);
    }
    Ok(VideoClip {
        frames: Tensor::from_vec(&[length, c, h, w], data),
        source_id: video.id.clone(),
        start_index: start,
        skip_rate: skip,
    })
}

/// How far the negative clip starts from the anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeDistance {
    /// Uniform over every valid start other than the anchor's.
    #[default]
    Random,
    /// Exactly this many frames away (either side).
    Fixed(usize),
}

/// Draws a triplet from one video.
///
/// The anchor is transformed with `aug.0`, the positive (same frames) with
/// `aug.1`, and the negative with `aug.0` so it differs from the anchor only
/// in time. The video must hold two disjoint clip windows.
pub fn sample_triplet(
    video: &Video,
    anchor_t: usize,
    negative_distance: NegativeDistance,
    aug: (&AugmentationParams, &AugmentationParams),
    spec: ClipSpec,
    rng: &mut impl Rng,
) -> Result<ClipTriplet> {
    let ClipSpec { length, skip, .. } = spec;
    if length == 0 || skip == 0 {
        return Err(Error::Parameter(format!("clip length {length} and skip {skip} must be positive")));
    }
    let span = window_span(length, skip);
    let frames = video.num_frames();
    if frames < 2 * span {
        return Err(Error::Sampling(format!(
            "video `{}` has {frames} frames; triplets need two disjoint windows of {span}",
            video.id
        )));
    }
    let max_start = frames - span;
    if anchor_t > max_start {
        sample_clip(video, anchor_t, length, skip)?;
    }
    let negative_t = match negative_distance {
        NegativeDistance::Random => {
            let pick = rng.random_range(0..max_start);
            if pick >= anchor_t {
                pick + 1
            } else {
                pick
            }
        }
        NegativeDistance::Fixed(d) => {
            if d == 0 {
                return Err(Error::Parameter("negative distance must be > 0".into()));
            }
            let forward = anchor_t + d;
            let candidates: Vec<usize> = [Some(forward).filter(|&t| t <= max_start), anchor_t.checked_sub(d)]
                .into_iter()
                .flatten()
                .collect();
            match candidates.as_slice() {
                [] => {
                    return Err(Error::Sampling(format!(
                        "no negative at distance {d} from {anchor_t} in `{}` ({frames} frames)",
                        video.id
                    )))
                }
                [only] => *only,
                [a, b] => {
                    if rng.random_bool(0.5) {
                        *a
                    } else {
                        *b
                    }
                }
                _ => unreachable!(),
            }
        }
    };
    let base = sample_clip(video, anchor_t, length, skip)?;
    let neg = sample_clip(video, negative_t, length, skip)?;
    let (oh, ow) = (spec.height, spec.width);
    Ok(ClipTriplet {
        anchor: augment_clip(&base, aug.0, oh, ow)?,
        positive: augment_clip(&base, aug.1, oh, ow)?,
        negative: augment_clip(&neg, aug.0, oh, ow)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_video(t: usize) -> Video {
        let (c, h, w) = (1, 2, 2);
        let data = (0..t * c * h * w).map(|i| (i / (c * h * w)) as f32 / t as f32).collect();
        Video::new("ramp", Tensor::from_vec(&[t, c, h, w], data), 0).unwrap()
    }

    fn frame_indices(clip: &VideoClip, t: usize) -> Vec<usize> {
        clip.frames
            .data()
            .chunks(4)
            .map(|f| (f[0] * t as f32).round() as usize)
            .collect()
    }

    #[test]
    fn clip_indices() {
        let v = ramp_video(64);
        let clip = sample_clip(&v, 0, 16, 2).unwrap();
        assert_eq!(frame_indices(&clip, 64), (0..16).map(|i| 2 * i).collect::<Vec<_>>());
        let v = ramp_video(32);
        let clip = sample_clip(&v, 1, 16, 2).unwrap();
        assert_eq!(frame_indices(&clip, 32), (0..16).map(|i| 1 + 2 * i).collect::<Vec<_>>());
        let v = ramp_video(31);
        assert!(matches!(sample_clip(&v, 1, 16, 2), Err(Error::ClipRange { last: 31, frames: 31, .. })));
    }

    #[test]
    fn triplet_fixed_distance_and_short_video() {
        let v = ramp_video(64);
        let id = AugmentationParams::identity(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = sample_triplet(&v, 0, NegativeDistance::Fixed(8), (&id, &id), ClipSpec::new(16, 2, 2, 2), &mut rng).unwrap();
        assert_eq!(t.negative.start_index, 8);
        assert_eq!(t.positive.start_index, 0);
        let short = ramp_video(33);
        assert!(matches!(
            sample_triplet(&short, 0, NegativeDistance::Random, (&id, &id), ClipSpec::new(16, 2, 2, 2), &mut rng),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn random_negatives_are_valid() {
        let v = ramp_video(256);
        let id = AugmentationParams::identity(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let t = sample_triplet(&v, 0, NegativeDistance::Random, (&id, &id), ClipSpec::new(16, 2, 2, 2), &mut rng).unwrap();
            assert_ne!(t.negative.start_index, 0);
            assert!(t.negative.start_index + 30 < 256);
            assert_eq!(t.negative.source_id, t.anchor.source_id);
        }
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let bad = Tensor::from_vec(&[1, 1, 1, 1], vec![1.5f32]);
        assert!(matches!(Video::new("x", bad, 0), Err(Error::Dataset(_))));
    }
}
