use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, check_shape, Model};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::NORM_EPS;
use crate::nn::{add_conv, add_linear, conv, linear, Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Segment-level scorer: norm amplification, a shortcut 1-d convolution,
/// single-head self-attention over segments and a residual feed-forward
/// block, followed by a sigmoid score head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalyHeadConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    /// Weight of the appended per-segment feature norm.
    pub norm_weight: f64,
}

impl Default for AnomalyHeadConfig {
    fn default() -> Self {
        Self {
            feature_dim: 128,
            hidden: 32,
            norm_weight: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnomalyHead<T: Scalar> {
    pub cfg: AnomalyHeadConfig,
    pub params: ParamStore<T>,
}

/// Graph handles for a batch of feature sequences.
#[derive(Clone, Copy, Debug)]
pub struct SegmentOutput {
    /// `[B, S]` in `[0, 1]`.
    pub scores: Var,
    /// `[B, S]`, non-negative.
    pub magnitudes: Var,
}

impl<T: Scalar> Model<T> for AnomalyHead<T> {
    const KIND: &'static str = "anomaly_head";
    type Config = AnomalyHeadConfig;

    fn config(&self) -> &AnomalyHeadConfig {
        &self.cfg
    }
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}

impl<T: Scalar> AnomalyHead<T> {
    pub fn new(cfg: AnomalyHeadConfig, rng: &mut impl Rng) -> Self {
        let (c, d) = (cfg.feature_dim + 1, cfg.hidden);
        let mut p = ParamStore::new();
        add_conv(&mut p, rng, "shortcut", c, d, &[3]);
        add_conv(&mut p, rng, "query", d, d, &[1]);
        add_conv(&mut p, rng, "key", d, d, &[1]);
        add_conv(&mut p, rng, "value", d, d, &[1]);
        add_linear(&mut p, rng, "ffn1", d, d);
        add_linear(&mut p, rng, "ffn2", d, d);
        add_linear(&mut p, rng, "score", d, 1);
        Self { cfg, params: p }
    }

    /// Appends `norm_weight * ||x_s||` to every segment: `[B, S, C] -> [B, S, C + 1]`.
    pub fn amplify(&self, g: &Graph<T>, x: Var) -> Var {
        let s = g.shape(x);
        let (b, n, c) = (s[0], s[1], s[2]);
        let rows = g.reshape(x, &[b * n, c]);
        let norm = g.reshape(g.scale(g.row_norm(rows, NORM_EPS), self.cfg.norm_weight), &[b * n, 1]);
        g.reshape(g.concat1(&[rows, norm]), &[b, n, c + 1])
    }

    /// `x` is `[B, S, C]`; `keep_mask`, if given, multiplies the input
    /// features elementwise (inverted dropout).
    pub fn forward(&self, g: &Graph<T>, p: &Bound, x: Var, keep_mask: Option<Var>) -> SegmentOutput {
        let x = match keep_mask {
            Some(m) => g.mul(x, m),
            None => x,
        };
        let s = g.shape(x);
        let (b, n) = (s[0], s[1]);
        let d = self.cfg.hidden;
        let a = g.permute(self.amplify(g, x), &[0, 2, 1]);
        let h0 = g.relu(conv(g, p, "shortcut", a, &[1], &[1]));
        let q = g.permute(conv(g, p, "query", h0, &[1], &[0]), &[0, 2, 1]);
        let k = conv(g, p, "key", h0, &[1], &[0]);
        let v = g.permute(conv(g, p, "value", h0, &[1], &[0]), &[0, 2, 1]);
        let attn = g.softmax(g.scale(g.matmul(q, k), 1.0 / (d as f64).sqrt()));
        let h1 = g.add(g.permute(h0, &[0, 2, 1]), g.matmul(attn, v));
        let h1 = g.reshape(h1, &[b * n, d]);
        let ffn = linear(g, p, "ffn2", g.relu(linear(g, p, "ffn1", h1)));
        let h2 = g.add(h1, ffn);
        let magnitudes = g.reshape(g.row_norm(h2, NORM_EPS), &[b, n]);
        let scores = g.reshape(g.sigmoid(linear(g, p, "score", h2)), &[b, n]);
        SegmentOutput { scores, magnitudes }
    }

    /// Eager scoring of one `[S, C]` feature sequence.
    pub fn score_segments(&self, features: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
        let s = features.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("feature sequence: expected [S, {}], got {s:?}", self.cfg.feature_dim)));
        }
        if s[0] == 0 {
            return Err(Error::EmptyInput("feature sequence has no segments".into()));
        }
        check_shape(&s[1..], &[self.cfg.feature_dim], "feature sequence")?;
        check_finite(features, "anomaly head")?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let x = g.constant(features.clone().reshape(&[1, s[0], s[1]]));
        let out = self.forward(&g, &p, x, None);
        let scores = g.value(out.scores).data().to_vec();
        let mags = g.value(out.magnitudes).data().to_vec();
        Ok((scores, mags))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head() -> AnomalyHead<f64> {
        let cfg = AnomalyHeadConfig {
            feature_dim: 5,
            hidden: 4,
            ..AnomalyHeadConfig::default()
        };
        AnomalyHead::new(cfg, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn single_segment_and_empty_input() {
        let h = head();
        let (s, m) = h.score_segments(&Tensor::zeros(&[1, 5])).unwrap();
        assert_eq!((s.len(), m.len()), (1, 1));
        assert!(matches!(h.score_segments(&Tensor::zeros(&[0, 5])), Err(Error::EmptyInput(_))));
        assert!(matches!(h.score_segments(&Tensor::zeros(&[2, 4])), Err(Error::Shape(_))));
    }

    #[test]
    fn amplified_norm_column_is_positionwise() {
        let h = head();
        let g = Graph::<f64>::new();
        let x = Tensor::from_vec(&[1, 3, 5], (0..15).map(|i| i as f64 * 0.3 - 2.0).collect());
        let perm = [2usize, 0, 1];
        let mut px = Vec::new();
        for &r in &perm {
            px.extend_from_slice(&x.data()[r * 5..(r + 1) * 5]);
        }
        let a = g.value(h.amplify(&g, g.constant(x.clone())));
        let b = g.value(h.amplify(&g, g.constant(Tensor::from_vec(&[1, 3, 5], px))));
        for (i, &r) in perm.iter().enumerate() {
            assert_eq!(b.data()[i * 6 + 5], a.data()[r * 6 + 5]);
        }
        assert!((a.data()[5] - 0.1 * x.data()[..5].iter().map(|v| v * v).sum::<f64>().sqrt()).abs() < 1e-15);
    }
}
