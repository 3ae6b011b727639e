//! Self-distilled (DINO) and supervised (x-vector) utterance embeddings for
//! speech, with cosine/PLDA back-ends, pseudo-label clustering and
//! verification metrics.
//!
//! Every numeric routine is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the training precision to [`Real`].

// `!(a < b)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the textbook triangular solves.
#![allow(clippy::needless_range_loop)]

pub mod augment;
pub mod backend;
pub mod clustering;
pub mod data;
pub mod dino;
pub mod error;
pub mod eval;
pub mod features;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod supervised;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Precision used by the training loops and the command-line tool.
pub type Real = f64;

pub type Mat = linalg::Matrix<Real>;
pub type Wave = features::Waveform<Real>;
pub type Features = features::FeatureMatrix<Real>;
pub type Utt = synth::Utterance<Real>;
