//! Representational alignment toolkit.
//!
//! Compares two sets of per-stimulus vector representations (for instance,
//! language-model activations and fMRI responses) through three lenses:
//!
//! - cross-validated ridge encoding scores normalized by a noise ceiling ([`encode`]),
//! - unbiased linear CKA ([`repgeo::cka_unbiased`]),
//! - Gromov-Wasserstein distance between dissimilarity matrices ([`repgeo::gw_distance`]).
//!
//! Supporting modules cover the on-disk matrix format ([`tensorio`]), PCA
//! ([`reduce`]), significance testing ([`stats`]) and seeded synthetic
//! fixtures ([`synth`]).

pub mod encode;
pub mod error;
mod linalg;
pub mod reduce;
pub mod repgeo;
pub mod stats;
pub mod synth;
pub mod tensorio;

pub use error::{Error, Result};
