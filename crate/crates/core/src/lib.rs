//! Stable and explainable attention for a recurrent text classifier.
//!
//! * [`corpus`]: vocabulary, embeddings, datasets, synthetic corpus, synonym substitution
//! * [`model`]: encoder / attention / decoder with exact gradients and base training
//! * [`seat`]: top-k overlap, its surrogate, PGD on attention weights, SEAT and baselines
//! * [`metrics`]: JSD, TVD, F1, comprehensiveness, sufficiency, sensitivity, certificate
//! * [`perturb`]: seed, embedding-noise and word-substitution stability studies
//! * [`harness`]: configuration, checkpoints, reports and end-to-end recipes

pub mod corpus;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod perturb;
pub mod rng;
pub mod seat;

pub use error::{Result, SeatError};
