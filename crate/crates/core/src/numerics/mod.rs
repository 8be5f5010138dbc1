//! Dense linear algebra and seeded random streams.
//!
//! Matrices are row-major `f32` storage; every reduction accumulates in `f64`.

mod matrix;
mod rng;

pub use matrix::{cosine_similarity, dot, matmul, matmul_nt, matmul_tn, Matrix};
pub use rng::{sample_uniform_init, splitmix64, RngStream};
