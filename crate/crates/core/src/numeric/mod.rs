//! Dense matrices, reverse-mode differentiation and the small amount of
//! linear algebra the mixture model needs.

pub mod linalg;
mod matrix;
mod rng;
pub mod tape;

pub use linalg::{cholesky_logdet_solve, Cholesky};
pub use matrix::Matrix;
pub use rng::SeededRng;
pub use tape::{logsumexp, row_softmax, Gradients, Tape, Var};
