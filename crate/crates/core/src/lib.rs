//! Learned hierarchical retrieval indexes over two-tower recommender
//! embeddings.
//!
//! The pipeline: train a [`model::TwoTowerModel`] on implicit feedback, build
//! a residual index either jointly with the model ([`hill`]) or by k-means
//! EM ([`em`]), assemble it into a searchable tree ([`tree`]), and optionally
//! fine-tune the user tower on `<user, index node>` pairs ([`ttt`]).
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix `f32`, which is what the command line tool uses.

pub mod data;
pub mod em;
pub mod error;
pub mod hill;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod progress;
pub mod rng;
pub mod scalar;
pub mod synthetic;
pub mod tree;
pub mod ttt;

pub use error::{HillError, Result};
pub use scalar::Scalar;

pub type Model = model::TwoTowerModel<f32>;
pub type Model64 = model::TwoTowerModel<f64>;
pub type Codebook = hill::LevelCodebook<f32>;
pub type Index = tree::HierarchicalIndex<f32>;
pub type Embeddings = linalg::Matrix<f32>;
