use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, check_shape, standardize, Model};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{add_conv, conv, Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Three-level U-shaped encoder-decoder with concatenated skips.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnonymizerConfig {
    pub channels: usize,
    pub resolution: usize,
    /// Widths at full, half and quarter resolution.
    pub widths: [usize; 3],
}

impl Default for AnonymizerConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            resolution: 32,
            widths: [8, 16, 16],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Anonymizer<T: Scalar> {
    pub cfg: AnonymizerConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> for Anonymizer<T> {
    const KIND: &'static str = "anonymizer";
    type Config = AnonymizerConfig;

    fn config(&self) -> &AnonymizerConfig {
        &self.cfg
    }
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}

impl<T: Scalar> Anonymizer<T> {
    pub fn new(cfg: AnonymizerConfig, rng: &mut impl Rng) -> Self {
        let [w1, w2, w3] = cfg.widths;
        let c = cfg.channels;
        let mut p = ParamStore::new();
        add_conv(&mut p, rng, "enc1a", c, w1, &[3, 3]);
        add_conv(&mut p, rng, "enc1b", w1, w1, &[3, 3]);
        add_conv(&mut p, rng, "enc2a", w1, w2, &[3, 3]);
        add_conv(&mut p, rng, "enc2b", w2, w2, &[3, 3]);
        add_conv(&mut p, rng, "mid", w2, w3, &[3, 3]);
        add_conv(&mut p, rng, "dec2", w3 + w2, w2, &[3, 3]);
        add_conv(&mut p, rng, "dec1", w2 + w1, w1, &[3, 3]);
        add_conv(&mut p, rng, "out", w1, c, &[1, 1]);
        Self { cfg, params: p }
    }

    /// `[N, C, H, W] -> [N, C, H, W]` with values in `(0, 1)`.
    pub fn forward(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        let c3 = |name: &str, x: Var| g.relu(conv(g, p, name, x, &[1, 1], &[1, 1]));
        let e1 = c3("enc1b", c3("enc1a", standardize(g, x)));
        let e2 = c3("enc2b", c3("enc2a", g.avg_pool2(e1)));
        let m = c3("mid", g.avg_pool2(e2));
        let d2 = c3("dec2", g.concat1(&[g.upsample2(m), e2]));
        let d1 = c3("dec1", g.concat1(&[g.upsample2(d2), e1]));
        g.sigmoid(conv(g, p, "out", d1, &[1, 1], &[0, 0]))
    }

    /// Framewise anonymization of `[..., C, H, W]` (images, frames or clips).
    pub fn forward_frames(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        let shape = g.shape(x);
        let nd = shape.len();
        let frames: usize = shape[..nd - 3].iter().product();
        let flat = g.reshape(x, &[frames, shape[nd - 3], shape[nd - 2], shape[nd - 1]]);
        g.reshape(self.forward(g, p, flat), &shape)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let nd = shape.len();
        let expected = [self.cfg.channels, self.cfg.resolution, self.cfg.resolution];
        if nd < 3 {
            return check_shape(shape, &expected, "anonymizer input");
        }
        check_shape(&shape[nd - 3..], &expected, "anonymizer input")
    }

    /// Eager framewise anonymization.
    pub fn anonymize(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        check_finite(x, "anonymizer")?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let xv = g.constant(x.clone());
        let y = self.forward_frames(&g, &p, xv);
        let out = (*g.value(y)).clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Anonymizer<f32> {
        let cfg = AnonymizerConfig {
            resolution: 8,
            widths: [4, 4, 4],
            ..AnonymizerConfig::default()
        };
        Anonymizer::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn output_is_inside_unit_interval() {
        let m = small();
        let x = Tensor::from_vec(&[2, 3, 8, 8], (0..384).map(|i| (i % 17) as f32 / 16.0).collect());
        let y = m.anonymize(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(m.anonymize(&x).unwrap(), y);
    }

    #[test]
    fn clips_are_anonymized_framewise() {
        let m = small();
        let clip = Tensor::from_vec(&[4, 3, 8, 8], (0..768).map(|i| ((i * 7) % 23) as f32 / 22.0).collect());
        let whole = m.anonymize(&clip).unwrap();
        for t in 0..4 {
            let frame = clip.index_axis0(t).reshape(&[1, 3, 8, 8]);
            let single = m.anonymize(&frame).unwrap();
            assert_eq!(single.data(), whole.index_axis0(t).data());
        }
    }

    #[test]
    fn wrong_resolution_is_a_shape_error() {
        let m = small();
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        assert!(matches!(m.anonymize(&x), Err(crate::Error::Shape(_))));
    }
}
