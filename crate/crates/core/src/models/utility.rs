use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, check_shape, standardize, Model};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{add_conv, add_linear, conv, linear, Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Three strided 3-d convolutions, global average pooling and a linear
/// classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UtilityEncoderConfig {
    pub channels: usize,
    pub clip_length: usize,
    pub resolution: usize,
    pub widths: [usize; 2],
    /// Embedding dimension `C`.
    pub feature_dim: usize,
    pub classes: usize,
}

impl Default for UtilityEncoderConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            clip_length: 16,
            resolution: 32,
            widths: [16, 32],
            feature_dim: 128,
            classes: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct UtilityEncoder<T: Scalar> {
    pub cfg: UtilityEncoderConfig,
    pub params: ParamStore<T>,
}

/// Graph handles of an encoded clip batch.
#[derive(Clone, Copy, Debug)]
pub struct ClipOutput {
    /// `[N, C]`.
    pub embedding: Var,
    /// `[N, classes]`.
    pub logits: Var,
}

impl<T: Scalar> Model<T> for UtilityEncoder<T> {
    const KIND: &'static str = "utility_encoder";
    type Config = UtilityEncoderConfig;

    fn config(&self) -> &UtilityEncoderConfig {
        &self.cfg
    }
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}

impl<T: Scalar> UtilityEncoder<T> {
    pub fn new(cfg: UtilityEncoderConfig, rng: &mut impl Rng) -> Self {
        let [w1, w2] = cfg.widths;
        let mut p = ParamStore::new();
        add_conv(&mut p, rng, "conv1", cfg.channels, w1, &[3, 3, 3]);
        add_conv(&mut p, rng, "conv2", w1, w2, &[3, 3, 3]);
        add_conv(&mut p, rng, "conv3", w2, cfg.feature_dim, &[3, 3, 3]);
        add_linear(&mut p, rng, "fc", cfg.feature_dim, cfg.classes);
        Self { cfg, params: p }
    }

    /// Clips `[N, L, C, H, W]` to embeddings and class logits.
    pub fn forward(&self, g: &Graph<T>, p: &Bound, clips: Var) -> ClipOutput {
        let x = g.permute(standardize(g, clips), &[0, 2, 1, 3, 4]);
        let x = g.relu(conv(g, p, "conv1", x, &[1, 2, 2], &[1, 1, 1]));
        let x = g.relu(conv(g, p, "conv2", x, &[2, 2, 2], &[1, 1, 1]));
        let x = g.relu(conv(g, p, "conv3", x, &[2, 2, 2], &[1, 1, 1]));
        let embedding = g.mean_spatial(x);
        let logits = linear(g, p, "fc", embedding);
        ClipOutput { embedding, logits }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.cfg;
        let tail = [c.clip_length, c.channels, c.resolution, c.resolution];
        if shape.len() != 5 {
            return check_shape(shape, &tail, "utility encoder input");
        }
        check_shape(&shape[1..], &tail, "utility encoder input")
    }

    /// Eager encoding of `[N, L, C, H, W]`; returns `(embeddings, logits)`.
    pub fn encode(&self, clips: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(clips.shape())?;
        check_finite(clips, "utility encoder")?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let out = self.forward(&g, &p, g.constant(clips.clone()));
        let emb = (*g.value(out.embedding)).clone();
        let logits = (*g.value(out.logits)).clone();
        Ok((emb, logits))
    }
}
