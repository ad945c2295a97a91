//! Distribution-based emotion recognition in conversation.
//!
//! Utterance-level emotion states are modelled as categorical distributions
//! and estimated auto-regressively along a dialogue by a small Transformer
//! encoder-decoder over fused audio/text features. Three training objectives
//! are supported: hard majority labels, soft labels, and a Dirichlet prior
//! network loss combined with a soft-label KL term.

pub mod corpus;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
