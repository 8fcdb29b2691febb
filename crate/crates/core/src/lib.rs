//! Knowledge-based grade prediction.
//!
//! Courses are embedded as a pair of vectors: the knowledge a course
//! *provides* and the knowledge it *requires*. A student's knowledge state is
//! aggregated from the provided vectors of the courses they already took,
//! weighted by their (row-centered) grades, and the predicted grade for a
//! target course is its bias plus the inner product of that state with the
//! target's required vector.
//!
//! Aggregation variants:
//!
//! * `krm-sum` / `krm-avg`: decayed sum or mean of prior courses.
//! * `mak`: per-dimension maximum pooling.
//! * `nak-soft` / `nak-sparse`: attention over prior courses with a
//!   single-layer perceptron scorer and softmax or sparsegen activation.
//! * `cmak` / `cnak`: the above, with the target's required vector modulated
//!   by courses taken in the same term.
//! * `mf`: biased matrix factorization baseline.
//!
//! All gradients are derived by hand; see [`models::Model::backward`].

pub mod activations;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod synthesis;
pub mod training;

pub use error::{Error, Result};
