use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, check_shape, standardize, Model};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{add_conv, add_linear, conv, linear, Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Strided 2-d convolutional image encoder with a two-layer projection.
///
/// With `outputs = Some(a)` the projection is replaced by an `a`-way linear
/// head, which is the layout of the privacy attack model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetEncoderConfig {
    pub channels: usize,
    pub resolution: usize,
    pub widths: [usize; 3],
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub outputs: Option<usize>,
}

impl Default for BudgetEncoderConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            resolution: 32,
            widths: [16, 32, 64],
            projection_hidden: 64,
            projection_dim: 32,
            outputs: None,
        }
    }
}

impl BudgetEncoderConfig {
    /// The same backbone with an attribute head.
    pub fn attack(&self, attributes: usize) -> Self {
        Self {
            outputs: Some(attributes),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct BudgetEncoder<T: Scalar> {
    pub cfg: BudgetEncoderConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> for BudgetEncoder<T> {
    const KIND: &'static str = "budget_encoder";
    type Config = BudgetEncoderConfig;

    fn config(&self) -> &BudgetEncoderConfig {
        &self.cfg
    }
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}

impl<T: Scalar> BudgetEncoder<T> {
    pub fn new(cfg: BudgetEncoderConfig, rng: &mut impl Rng) -> Self {
        let [w1, w2, w3] = cfg.widths;
        let mut p = ParamStore::new();
        add_conv(&mut p, rng, "conv1", cfg.channels, w1, &[3, 3]);
        add_conv(&mut p, rng, "conv2", w1, w2, &[3, 3]);
        add_conv(&mut p, rng, "conv3", w2, w3, &[3, 3]);
        match cfg.outputs {
            Some(a) => add_linear(&mut p, rng, "head", w3, a),
            None => {
                add_linear(&mut p, rng, "proj1", w3, cfg.projection_hidden);
                add_linear(&mut p, rng, "proj2", cfg.projection_hidden, cfg.projection_dim);
            }
        }
        Self { cfg, params: p }
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.outputs.unwrap_or(self.cfg.projection_dim)
    }

    /// Images `[N, C, H, W]` to projections (or attribute logits) `[N, D]`.
    pub fn forward(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        let x = g.relu(conv(g, p, "conv1", standardize(g, x), &[2, 2], &[1, 1]));
        let x = g.relu(conv(g, p, "conv2", x, &[2, 2], &[1, 1]));
        let x = g.relu(conv(g, p, "conv3", x, &[2, 2], &[1, 1]));
        let h = g.mean_spatial(x);
        match self.cfg.outputs {
            Some(_) => linear(g, p, "head", h),
            None => linear(g, p, "proj2", g.relu(linear(g, p, "proj1", h))),
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.cfg;
        let tail = [c.channels, c.resolution, c.resolution];
        if shape.len() != 4 {
            return check_shape(shape, &tail, "image encoder input");
        }
        check_shape(&shape[1..], &tail, "image encoder input")
    }

    /// Eager encoding of `[N, C, H, W]`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        check_finite(x, "image encoder")?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let y = self.forward(&g, &p, g.constant(x.clone()));
        let out = (*g.value(y)).clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_and_attack_heads() {
        let cfg = BudgetEncoderConfig {
            resolution: 8,
            widths: [4, 4, 4],
            projection_hidden: 5,
            projection_dim: 3,
            ..BudgetEncoderConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::full(&[2, 3, 8, 8], 0.5);
        let enc = BudgetEncoder::new(cfg.clone(), &mut rng);
        assert_eq!(enc.encode(&x).unwrap().shape(), &[2, 3]);
        let attack = BudgetEncoder::new(cfg.attack(7), &mut rng);
        let y = attack.encode(&x).unwrap();
        assert_eq!(y.shape(), &[2, 7]);
        assert!(y.all_finite());
        assert_ne!(enc.arch_hash(), attack.arch_hash());
    }
}
