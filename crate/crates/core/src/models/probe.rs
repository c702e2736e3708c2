use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, check_shape, Model};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{add_linear, linear, Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Fully connected attribute probe on clip features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyProbeConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub attributes: usize,
}

impl Default for PrivacyProbeConfig {
    fn default() -> Self {
        Self {
            input_dim: 128,
            hidden: vec![2048, 1028, 1028, 512],
            attributes: 7,
        }
    }
}

impl PrivacyProbeConfig {
    /// Every layer width from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden);
        d.push(self.attributes);
        d
    }
}

#[derive(Clone, Debug)]
pub struct PrivacyProbe<T: Scalar> {
    pub cfg: PrivacyProbeConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> for PrivacyProbe<T> {
    const KIND: &'static str = "privacy_probe";
    type Config = PrivacyProbeConfig;

    fn config(&self) -> &PrivacyProbeConfig {
        &self.cfg
    }
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}

fn layer(i: usize) -> String {
    format!("fc{i}")
}

impl<T: Scalar> PrivacyProbe<T> {
    pub fn new(cfg: PrivacyProbeConfig, rng: &mut impl Rng) -> Self {
        let mut p = ParamStore::new();
        for (i, w) in cfg.dims().windows(2).enumerate() {
            add_linear(&mut p, rng, &layer(i), w[0], w[1]);
        }
        Self { cfg, params: p }
    }

    /// Weight shapes as stored, `(in, out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.cfg.dims().len() - 1)
            .map(|i| {
                let s = self.params.get(&format!("{}.weight", layer(i))).expect("probe layer").shape();
                (s[0], s[1])
            })
            .collect()
    }

    /// `[N, C] -> [N, A]`.
    pub fn forward(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        let n = self.cfg.dims().len() - 1;
        let mut h = x;
        for i in 0..n {
            h = linear(g, p, &layer(i), h);
            if i + 1 < n {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn probe_attributes(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let s = features.shape();
        let rows = if s.len() == 2 { s[0] } else { 1 };
        check_shape(&s[s.len().saturating_sub(1)..], &[self.cfg.input_dim], "probe input")?;
        check_finite(features, "probe")?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let x = g.constant(features.clone().reshape(&[rows, self.cfg.input_dim]));
        let y = self.forward(&g, &p, x);
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
    fn default_stack_dims() {
        let cfg = PrivacyProbeConfig {
            input_dim: 16,
            ..PrivacyProbeConfig::default()
        };
        let p = PrivacyProbe::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(p.layer_dims(), vec![(16, 2048), (2048, 1028), (1028, 1028), (1028, 512), (512, 7)]);
        let y = p.probe_attributes(&Tensor::zeros(&[16])).unwrap();
        assert_eq!(y.shape(), &[1, 7]);
        assert!(y.all_finite());
        assert!(p.probe_attributes(&Tensor::zeros(&[15])).is_err());
    }
}
