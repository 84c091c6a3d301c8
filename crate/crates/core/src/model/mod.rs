//! The correlation-aware network and its Gaussian-mixture head.

mod config;
pub mod gmm;
pub mod network;
mod params;

pub use config::{ModelConfig, OutputActivation, ReconFeatures, DEFAULT_EPSILON, RECON_FEATURE_DIM};
pub use gmm::{gmm_energy_taped, gmm_fit, GmmAccumulator, GmmState, TapedGmm};
pub use network::{
    attention_coefficients, decode, estimate_membership, feature_encode, fuse, graph_encode,
    Attention, Cadgmm, ForwardOutputs, ForwardVars, ParamVars,
};
pub use params::{Dense, Layout, ParamStore};
