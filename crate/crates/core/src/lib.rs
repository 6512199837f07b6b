//! Cheems: RoPE, state space duality, inner-function attention and a
//! product-key mixture of experts, assembled into a small hybrid language
//! model with a training and benchmark harness.

pub mod attention;
pub mod cdmmoe;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod model;
pub mod params;
pub mod real;
pub mod rng;
pub mod rope;
pub mod selftest;
pub mod ssd;
pub mod tensor;
pub mod vectors;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use real::Real;
pub use rope::RopeTable;
pub use tensor::{NamedTensor, Tensor};
