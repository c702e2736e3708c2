//! Differentiable networks. Every model owns a [`ParamStore`] and exposes a
//! graph-level `forward` plus an eager convenience wrapper.

mod anomaly;
mod anonymizer;
mod budget;
pub mod checkpoint;
mod probe;
mod utility;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use anomaly::{AnomalyHead, AnomalyHeadConfig, SegmentOutput};
pub use anonymizer::{Anonymizer, AnonymizerConfig};
pub use budget::{BudgetEncoder, BudgetEncoderConfig};
pub use probe::{PrivacyProbe, PrivacyProbeConfig};
pub use utility::{ClipOutput, UtilityEncoder, UtilityEncoderConfig};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Common surface used by checkpointing and training loops.
pub trait Model<T: Scalar> {
    /// Stable architecture name stored in checkpoints.
    const KIND: &'static str;
    type Config: Serialize;

    fn config(&self) -> &Self::Config;
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;

    /// Hex SHA-256 of the architecture name and configuration.
    fn arch_hash(&self) -> String {
        arch_hash(Self::KIND, self.config())
    }
}

pub fn arch_hash<C: Serialize>(kind: &str, cfg: &C) -> String {
    let json = serde_json::to_string(cfg).expect("model configs serialize");
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update(b"\0");
    h.update(json.as_bytes());
    hex::encode(h.finalize())
}

/// Pixel statistics the encoders standardize their inputs with.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

pub(crate) fn standardize<T: Scalar>(g: &crate::graph::Graph<T>, x: crate::graph::Var) -> crate::graph::Var {
    g.scale(g.add_scalar(x, -INPUT_MEAN), 1.0 / INPUT_STD)
}

pub(crate) fn check_finite<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what}: non-finite input")))
    }
}

pub(crate) fn check_shape(actual: &[usize], expected: &[usize], what: &str) -> Result<()> {
    if actual == expected {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: expected {expected:?}, got {actual:?}")))
    }
}
