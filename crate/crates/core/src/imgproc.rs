//! Plane-level image resampling and filtering on `f32` buffers.
//!
//! Resampling uses half-pixel centres without antialiasing, so a factor-2
//! downscale averages 2x2 blocks and coordinates outside the source are
//! clamped to the border.

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn full(w: usize, h: usize) -> Self {
        Self { x: 0, y: 0, w, h }
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn fits(&self, w: usize, h: usize) -> bool {
        self.x + self.w <= w && self.y + self.h <= h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    /// Intersection with a `w x h` frame.
    pub fn clip_to(&self, w: usize, h: usize) -> Rect {
        let x0 = self.x.min(w);
        let y0 = self.y.min(h);
        let x1 = (self.x + self.w).min(w);
        let y1 = (self.y + self.h).min(h);
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }
}

/// Source coordinate for output index `o` when `len` source pixels starting
/// at `origin` are stretched over `out` output pixels.
pub fn source_coord(o: usize, origin: usize, len: usize, out: usize) -> f64 {
    let s = origin as f64 + (o as f64 + 0.5) * len as f64 / out as f64 - 0.5;
    s.clamp(origin as f64, (origin + len - 1) as f64)
}

fn taps(out: usize, origin: usize, len: usize) -> Vec<(usize, usize, f32)> {
    (0..out)
        .map(|o| {
            let s = source_coord(o, origin, len, out);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(origin + len - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resample of `region` of an `h x w` plane to `oh x ow`.
pub fn resize_region(src: &[f32], w: usize, region: Rect, oh: usize, ow: usize) -> Vec<f32> {
    let ty = taps(oh, region.y, region.h);
    let tx = taps(ow, region.x, region.w);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    resize_region(src, w, Rect::full(w, h), oh, ow)
}

/// Normalised 1-d Gaussian taps of odd length `k`.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Vec<f64> {
    assert!(k % 2 == 1, "kernel size must be odd");
    let r = (k / 2) as f64;
    let raw: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Mirror index without repeating the edge sample (`dcba|abcd` -> `dcb|abcd`).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Separable Gaussian blur of a whole plane with reflective borders.
pub fn gaussian_blur(src: &[f32], h: usize, w: usize, kernel: &[f64]) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f64;
            for (t, &kv) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + t as isize - r, w);
                acc += kv * src[y * w + sx] as f64;
            }
            tmp[y * w + x] = acc as f32;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f64;
            for (t, &kv) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + t as isize - r, h);
                acc += kv * tmp[sy * w + x] as f64;
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_two_downscale_averages_blocks() {
        let src: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let out = resize_bilinear(&src, 4, 4, 2, 2);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let src: Vec<f32> = (0..30).map(|v| (v as f32 * 0.37).sin()).collect();
        assert_eq!(resize_bilinear(&src, 5, 6, 5, 6), src);
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn rect_clipping() {
        assert_eq!(Rect::new(2, 3, 10, 10).clip_to(8, 8), Rect::new(2, 3, 6, 5));
        assert!(Rect::new(9, 0, 3, 3).clip_to(8, 8).is_empty());
    }
}
