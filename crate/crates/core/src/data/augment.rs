use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VideoClip;
use crate::error::{Error, Result};
use crate::imgproc::{resize_region, source_coord, Rect};
use crate::tensor::Tensor;

/// Ranges from which [`AugmentationParams::random`] draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Side length of the crop as a fraction of the frame.
    pub crop_scale: f64,
    pub flip_prob: f64,
    /// Jitter factors are drawn from `1 +/- value`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub erase_prob: f64,
    /// Largest erased side as a fraction of the output frame.
    pub erase_max_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: 0.8,
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            erase_prob: 0.25,
            erase_max_frac: 0.25,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn none() -> Self {
        Self {
            crop_scale: 1.0,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            erase_prob: 0.0,
            erase_max_frac: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("flip_prob", self.flip_prob),
            ("erase_prob", self.erase_prob),
            ("erase_max_frac", self.erase_max_frac),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("augment.{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.crop_scale > 0.0 && self.crop_scale <= 1.0) {
            return Err(Error::Config(format!("augment.crop_scale must be in (0, 1], got {}", self.crop_scale)));
        }
        Ok(())
    }
}

/// One draw of spatial and photometric augmentation, shared by every frame
/// of a clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    /// Crop in source pixels.
    pub crop: Rect,
    pub flip: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    /// Zero-filled rectangle in output pixels.
    pub erase: Option<Rect>,
    pub seed: u64,
}

impl AugmentationParams {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            crop: Rect::full(w, h),
            flip: false,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            erase: None,
            seed: 0,
        }
    }

    /// Draws parameters for an `h x w` source frame resized to `oh x ow`.
    pub fn random(rng: &mut impl Rng, h: usize, w: usize, oh: usize, ow: usize, cfg: &AugmentConfig) -> Self {
        let seed: u64 = rng.random();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cw = ((w as f64 * cfg.crop_scale).round() as usize).clamp(1, w);
        let ch = ((h as f64 * cfg.crop_scale).round() as usize).clamp(1, h);
        let crop = Rect::new(r.random_range(0..=w - cw), r.random_range(0..=h - ch), cw, ch);
        let flip = r.random_bool(cfg.flip_prob);
        let jitter = |r: &mut ChaCha8Rng, amount: f64| (1.0 + r.random_range(-1.0..=1.0) * amount) as f32;
        let brightness = jitter(&mut r, cfg.brightness);
        let contrast = jitter(&mut r, cfg.contrast);
        let saturation = jitter(&mut r, cfg.saturation);
        let erase = if r.random_bool(cfg.erase_prob) {
            let max_w = ((ow as f64 * cfg.erase_max_frac) as usize).max(1);
            let max_h = ((oh as f64 * cfg.erase_max_frac) as usize).max(1);
            let ew = r.random_range(1..=max_w);
            let eh = r.random_range(1..=max_h);
            Some(Rect::new(r.random_range(0..=ow - ew), r.random_range(0..=oh - eh), ew, eh))
        } else {
            None
        };
        Self {
            crop,
            flip,
            brightness,
            contrast,
            saturation,
            erase,
            seed,
        }
    }

    pub fn validate(&self, h: usize, w: usize, oh: usize, ow: usize) -> Result<()> {
        if self.crop.is_empty() || !self.crop.fits(w, h) {
            return Err(Error::Parameter(format!("crop {:?} outside a {w}x{h} frame", self.crop)));
        }
        if let Some(e) = self.erase {
            if !e.fits(ow, oh) {
                return Err(Error::Parameter(format!("erase {e:?} outside a {ow}x{oh} output")));
            }
        }
        let factors = [self.brightness, self.contrast, self.saturation];
        if factors.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::Parameter(format!("invalid jitter factors {factors:?}")));
        }
        Ok(())
    }

    /// Source coordinate sampled by output pixel `(ox, oy)`.
    pub fn map_coord(&self, ox: usize, oy: usize, oh: usize, ow: usize) -> (f64, f64) {
        let x = if self.flip { ow - 1 - ox } else { ox };
        (
            source_coord(x, self.crop.x, self.crop.w, ow),
            source_coord(oy, self.crop.y, self.crop.h, oh),
        )
    }
}

fn transform_frame(frame: &[f32], c: usize, h: usize, w: usize, p: &AugmentationParams, oh: usize, ow: usize) -> Vec<f32> {
    let plane = oh * ow;
    let mut out = Vec::with_capacity(c * plane);
    for ch in 0..c {
        let mut resized = resize_region(&frame[ch * h * w..(ch + 1) * h * w], w, p.crop, oh, ow);
        if p.flip {
            for row in resized.chunks_mut(ow) {
                row.reverse();
            }
        }
        out.extend(resized);
    }
    if p.brightness != 1.0 || p.contrast != 1.0 {
        for v in out.iter_mut() {
            *v = (*v * p.brightness - 0.5) * p.contrast + 0.5;
        }
    }
    if c == 3 && p.saturation != 1.0 {
        for i in 0..plane {
            let lum = (out[i] + out[plane + i] + out[2 * plane + i]) / 3.0;
            for ch in 0..3 {
                let v = &mut out[ch * plane + i];
                *v = lum + (*v - lum) * p.saturation;
            }
        }
    }
    if let Some(e) = p.erase {
        for ch in 0..c {
            for y in e.y..e.y + e.h {
                out[ch * plane + y * ow + e.x..][..e.w].fill(0.0);
            }
        }
    }
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Applies `params` identically to every frame and resizes to `oh x ow`.
pub fn augment_clip(clip: &VideoClip, params: &AugmentationParams, oh: usize, ow: usize) -> Result<VideoClip> {
    let s = clip.frames.shape();
    let (l, c, h, w) = (s[0], s[1], s[2], s[3]);
    params.validate(h, w, oh, ow)?;
    let mut data = Vec::with_capacity(l * c * oh * ow);
    for frame in clip.frames.data().chunks(c * h * w) {
        data.extend(transform_frame(frame, c, h, w, params, oh, ow));
    }
    Ok(VideoClip {
        frames: Tensor::from_vec(&[l, c, oh, ow], data),
        ..clip.clone()
    })
}
