pub mod batching;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod numeric;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{build_knn_graph, NeighborGraph};
pub use model::{Cadgmm, GmmState, ModelConfig, ParamStore};
pub use numeric::{Matrix, SeededRng, Tape, Var};
