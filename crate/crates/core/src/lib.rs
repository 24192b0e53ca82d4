//! Drift-only latent diffusion for source-free domain adaptation on feature
//! vectors.
//!
//! The pipeline: train a source classifier on labeled features, store the
//! source label structure in a drift network by diffusing vicinity-prior
//! samples back onto source features, then adapt a target encoder to the
//! frozen classifier's decision boundaries using drift-generated cues,
//! SiLGA positives and an InfoNCE objective — without ever reading source
//! data at adaptation time.

pub mod adaptation;
pub mod bench;
pub mod checkpoint;
pub mod databench;
pub mod diffcore;
pub mod driftnet;
pub mod error;
pub mod featurebank;
pub mod oracle;
pub mod rng;
pub mod training;

pub use error::{DvdError, Result};
