//! Speaker identification and verification toolkit.
//!
//! The crate bundles a spectrogram CNN trained from scratch on a small
//! reverse-mode engine, the classical GMM-UBM and i-vector/PLDA/SVM
//! baselines, verification and identification metrics, dataset split
//! protocols with a synthetic speaker corpus, and the face-track curation
//! decision logic used to harvest utterances from video.

pub mod audio;
pub mod binio;
pub mod corpus;
pub mod curation;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod ivector;
pub mod neural;
pub mod rng;

pub use error::{Error, Result};
