use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of reconstruction-quality columns appended to the latent code.
pub const RECON_FEATURE_DIM: usize = 2;

/// Default diagonal regularizer added to every mixture covariance.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Tanh,
    Linear,
}

impl fmt::Display for OutputActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputActivation::Tanh => "tanh",
            OutputActivation::Linear => "linear",
        })
    }
}

impl FromStr for OutputActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(OutputActivation::Tanh),
            "linear" => Ok(OutputActivation::Linear),
            other => Err(Error::Config(format!("unknown decoder output activation `{other}`"))),
        }
    }
}

/// Which summary of reconstruction quality forms the extra latent columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReconFeatures {
    /// Relative Euclidean distance and cosine similarity.
    RelativeEuclideanCosine,
}

impl fmt::Display for ReconFeatures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("relative-euclidean+cosine")
    }
}

impl FromStr for ReconFeatures {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relative-euclidean+cosine" => Ok(ReconFeatures::RelativeEuclideanCosine),
            other => Err(Error::Config(format!("unknown reconstruction features `{other}`"))),
        }
    }
}

/// Layer sizes and structural hyperparameters of the network.
///
/// Every hidden layer uses tanh. The feature encoder ends at
/// `encoder_hidden.last()`, which must equal `graph_dim` so the two
/// encoder outputs can be summed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub graph_dim: usize,
    pub latent_dim: usize,
    pub decoder_hidden: Vec<usize>,
    pub estimator_hidden: Vec<usize>,
    pub mixtures: usize,
    pub k: usize,
    pub epsilon: f64,
    pub decoder_output: OutputActivation,
    pub recon_features: ReconFeatures,
    /// When false the attention branch output is replaced by zeros.
    pub graph_branch: bool,
}

impl ModelConfig {
    /// KDD99: FC(120,64) FC(64,32) | GAT(120,32) | FC(32,8) | FC(8,32)
    /// FC(32,64) FC(64,120) | FC(10,20) FC(20,8) FC(8,4).
    pub fn kdd99() -> Self {
        ModelConfig {
            input_dim: 120,
            encoder_hidden: vec![64, 32],
            graph_dim: 32,
            latent_dim: 8,
            decoder_hidden: vec![32, 64],
            estimator_hidden: vec![20, 8],
            mixtures: 4,
            k: 15,
            ..ModelConfig::base()
        }
    }

    /// Arrhythmia: FC(274,32) | GAT(274,32) | FC(32,2) | FC(2,10)
    /// FC(10,274) | FC(4,10) FC(10,2).
    pub fn arrhythmia() -> Self {
        ModelConfig {
            input_dim: 274,
            encoder_hidden: vec![32],
            graph_dim: 32,
            latent_dim: 2,
            decoder_hidden: vec![10],
            estimator_hidden: vec![10],
            mixtures: 2,
            k: 5,
            ..ModelConfig::base()
        }
    }

    /// Satellite: FC(36,16) | GAT(36,16) | FC(16,2) | FC(2,16) FC(16,36)
    /// | FC(4,10) FC(10,4).
    pub fn satellite() -> Self {
        ModelConfig {
            input_dim: 36,
            encoder_hidden: vec![16],
            graph_dim: 16,
            latent_dim: 2,
            decoder_hidden: vec![16],
            estimator_hidden: vec![10],
            mixtures: 4,
            k: 13,
            ..ModelConfig::base()
        }
    }

    fn base() -> Self {
        ModelConfig {
            input_dim: 0,
            encoder_hidden: Vec::new(),
            graph_dim: 0,
            latent_dim: 0,
            decoder_hidden: Vec::new(),
            estimator_hidden: Vec::new(),
            mixtures: 1,
            k: 1,
            epsilon: DEFAULT_EPSILON,
            decoder_output: OutputActivation::Tanh,
            recon_features: ReconFeatures::RelativeEuclideanCosine,
            graph_branch: true,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "kdd99" => Some(Self::kdd99()),
            "arrhythmia" => Some(Self::arrhythmia()),
            "satellite" => Some(Self::satellite()),
            _ => None,
        }
    }

    /// Width of the estimation-network input: latent code plus
    /// reconstruction features.
    pub fn z_dim(&self) -> usize {
        self.latent_dim + RECON_FEATURE_DIM
    }

    /// Size of the attention vector `a` (twice the projected width).
    pub fn attention_dim(&self) -> usize {
        2 * self.graph_dim
    }

    pub fn encoder_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.encoder_hidden.iter().copied())
            .collect()
    }

    pub fn decoder_dims(&self) -> Vec<usize> {
        std::iter::once(self.latent_dim)
            .chain(self.decoder_hidden.iter().copied())
            .chain(std::iter::once(self.input_dim))
            .collect()
    }

    pub fn estimator_dims(&self) -> Vec<usize> {
        std::iter::once(self.z_dim())
            .chain(self.estimator_hidden.iter().copied())
            .chain(std::iter::once(self.mixtures))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_dim == 0 || self.latent_dim == 0 || self.graph_dim == 0 {
            return bad("input, latent and graph dimensions must be positive".into());
        }
        let Some(&enc_out) = self.encoder_hidden.last() else {
            return bad("feature encoder needs at least one layer".into());
        };
        if enc_out != self.graph_dim {
            return bad(format!(
                "feature encoder output {enc_out} must equal graph encoder output {}",
                self.graph_dim
            ));
        }
        let all = self
            .encoder_hidden
            .iter()
            .chain(&self.decoder_hidden)
            .chain(&self.estimator_hidden);
        if all.into_iter().any(|&d| d == 0) {
            return bad("layer widths must be positive".into());
        }
        if self.mixtures == 0 {
            return bad("mixture count must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be a finite non-negative value, got {}", self.epsilon));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_dimension_chains() {
        let kdd = ModelConfig::kdd99();
        assert_eq!(kdd.encoder_dims(), vec![120, 64, 32]);
        assert_eq!(kdd.decoder_dims(), vec![8, 32, 64, 120]);
        assert_eq!(kdd.estimator_dims(), vec![10, 20, 8, 4]);
        assert_eq!(kdd.attention_dim(), 64);

        let arr = ModelConfig::arrhythmia();
        assert_eq!(arr.decoder_dims(), vec![2, 10, 274]);
        assert_eq!(arr.estimator_dims(), vec![4, 10, 2]);

        let sat = ModelConfig::satellite();
        assert_eq!(sat.encoder_dims(), vec![36, 16]);
        assert_eq!(sat.decoder_dims(), vec![2, 16, 36]);
        assert_eq!(sat.estimator_dims(), vec![4, 10, 4]);
        for c in [kdd, arr, sat] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn fusion_requires_equal_widths() {
        let mut c = ModelConfig::satellite();
        c.graph_dim = 8;
        assert!(c.validate().is_err());
    }
}
