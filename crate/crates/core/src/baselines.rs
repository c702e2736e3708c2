//! Hand-crafted privacy transforms that can stand in for the learned
//! anonymizer: down-up resampling, blackening and blurring of person boxes.
//!
//! All transforms act on `[.., C, H, W]` tensors frame by frame and keep the
//! input shape.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::io::read_boxes;
use crate::data::Video;
use crate::error::{Error, Result};
use crate::imgproc::{gaussian_blur, gaussian_kernel, resize_bilinear, Rect};
use crate::tensor::Tensor;

pub const BLUR_KERNEL: usize = 13;
pub const BLUR_SIGMA: f64 = 10.0;

/// Source of person boxes for one frame sequence.
pub trait BoxProvider {
    /// Boxes for frame `t` of a `w x h` frame, clipped to the frame.
    fn boxes(&self, t: usize, w: usize, h: usize) -> Vec<Rect>;
}

fn clip_all(boxes: &[Rect], w: usize, h: usize) -> Vec<Rect> {
    boxes.iter().map(|b| b.clip_to(w, h)).filter(|b| !b.is_empty()).collect()
}

/// Ground-truth boxes recorded by the synthetic generator.
#[derive(Clone, Debug, Default)]
pub struct ToyBoxProvider {
    pub frames: Vec<Vec<Rect>>,
}

impl ToyBoxProvider {
    pub fn from_video(video: &Video) -> Self {
        Self {
            frames: video.boxes.clone(),
        }
    }

    /// The same boxes on every frame.
    pub fn constant(boxes: Vec<Rect>) -> Self {
        Self { frames: vec![boxes] }
    }
}

impl BoxProvider for ToyBoxProvider {
    fn boxes(&self, t: usize, w: usize, h: usize) -> Vec<Rect> {
        let frame = match self.frames.len() {
            0 => return Vec::new(),
            1 => &self.frames[0],
            _ => self.frames.get(t).map(Vec::as_slice).unwrap_or(&[]),
        };
        clip_all(frame, w, h)
    }
}

/// Boxes produced offline by an external detector, in the boxes CSV format.
#[derive(Clone, Debug)]
pub struct CsvBoxProvider {
    pub path: PathBuf,
    frames: Vec<Vec<Rect>>,
}

impl CsvBoxProvider {
    pub fn open(path: &Path, frames: usize) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            frames: read_boxes(path, frames)?,
        })
    }
}

impl BoxProvider for CsvBoxProvider {
    fn boxes(&self, t: usize, w: usize, h: usize) -> Vec<Rect> {
        clip_all(self.frames.get(t).map(Vec::as_slice).unwrap_or(&[]), w, h)
    }
}

/// A non-learned input transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Raw,
    Downsample2,
    Downsample4,
    Blacken,
    Blur,
    /// Blackening with a full-frame box.
    BlackenAll,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Raw,
        Transform::Downsample2,
        Transform::Downsample4,
        Transform::Blacken,
        Transform::Blur,
        Transform::BlackenAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Transform::Raw => "raw",
            Transform::Downsample2 => "downsample2",
            Transform::Downsample4 => "downsample4",
            Transform::Blacken => "blacken",
            Transform::Blur => "blur",
            Transform::BlackenAll => "blacken_all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|t| t.name()).collect();
            Error::Config(format!("unknown transform `{s}` (expected one of {})", names.join(", ")))
        })
    }

    pub fn apply(self, frames: &Tensor<f32>, boxes: &dyn BoxProvider) -> Result<Tensor<f32>> {
        match self {
            Transform::Raw => {
                frame_dims(frames)?;
                Ok(frames.clone())
            }
            Transform::Downsample2 => downsample(frames, 2),
            Transform::Downsample4 => downsample(frames, 4),
            Transform::Blacken => obfuscate_blacken(frames, boxes),
            Transform::Blur => obfuscate_blur(frames, boxes),
            Transform::BlackenAll => {
                let (_, _, h, w) = frame_dims(frames)?;
                obfuscate_blacken(frames, &ToyBoxProvider::constant(vec![Rect::full(w, h)]))
            }
        }
    }
}

/// `(frames, C, H, W)` for a `[.., C, H, W]` tensor.
fn frame_dims(x: &Tensor<f32>) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 3 {
        return Err(Error::Shape(format!("expected [.., C, H, W], got {s:?}")));
    }
    let n = s.len();
    Ok((s[..n - 3].iter().product(), s[n - 3], s[n - 2], s[n - 1]))
}

fn map_planes(x: &Tensor<f32>, mut f: impl FnMut(usize, &[f32], &mut [f32])) -> Result<Tensor<f32>> {
    let (n, c, h, w) = frame_dims(x)?;
    let mut out = x.clone();
    let plane = h * w;
    for t in 0..n {
        for ch in 0..c {
            let off = (t * c + ch) * plane;
            f(t, &x.data()[off..off + plane], &mut out.data_mut()[off..off + plane]);
        }
    }
    Ok(out)
}

/// Bilinear down-resize by `factor` followed by an up-resize back to the
/// original resolution.
pub fn downsample(frames: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    if factor != 2 && factor != 4 {
        return Err(Error::Parameter(format!("downsample factor must be 2 or 4, got {factor}")));
    }
    let (_, _, h, w) = frame_dims(frames)?;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Parameter(format!("resolution {h}x{w} is not divisible by {factor}")));
    }
    let (lh, lw) = (h / factor, w / factor);
    map_planes(frames, |_, src, dst| {
        let low = resize_bilinear(src, h, w, lh, lw);
        dst.copy_from_slice(&resize_bilinear(&low, lh, lw, h, w));
    })
}

/// Sets every pixel inside the boxes to 0.
pub fn obfuscate_blacken(frames: &Tensor<f32>, boxes: &dyn BoxProvider) -> Result<Tensor<f32>> {
    let (_, _, h, w) = frame_dims(frames)?;
    map_planes(frames, |t, _, dst| {
        for b in boxes.boxes(t, w, h) {
            for y in b.y..b.y + b.h {
                dst[y * w + b.x..y * w + b.x + b.w].fill(0.0);
            }
        }
    })
}

/// Replaces the content of each box by its Gaussian-blurred crop, with
/// reflective padding at the crop border.
pub fn obfuscate_blur(frames: &Tensor<f32>, boxes: &dyn BoxProvider) -> Result<Tensor<f32>> {
    let (_, _, h, w) = frame_dims(frames)?;
    let kernel = gaussian_kernel(BLUR_KERNEL, BLUR_SIGMA);
    map_planes(frames, |t, _, dst| {
        for b in boxes.boxes(t, w, h) {
            let mut crop = Vec::with_capacity(b.w * b.h);
            for y in b.y..b.y + b.h {
                crop.extend_from_slice(&dst[y * w + b.x..y * w + b.x + b.w]);
            }
            let blurred = gaussian_blur(&crop, b.h, b.w, &kernel);
            for (r, y) in (b.y..b.y + b.h).enumerate() {
                dst[y * w + b.x..y * w + b.x + b.w].copy_from_slice(&blurred[r * b.w..(r + 1) * b.w]);
            }
        }
    })
}
