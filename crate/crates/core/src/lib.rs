//! Generalized category discovery over precomputed image and caption embeddings.
//!
//! The pipeline retrieves the top-k captions for every image by cosine
//! similarity, fuses the image view with the mean-pooled text view, and
//! clusters the fused views with a semi-supervised k-means whose labeled
//! items are pinned to their class clusters. Accuracy is scored with an
//! optimal cluster-to-class matching on the unlabeled set.
//!
//! Modules, bottom-up:
//!
//! - [`embedstore`]: the `EMB1` matrix format, label and split CSVs, split construction.
//! - [`retrieval`]: exact cosine top-k over a caption corpus.
//! - [`augment`]: mean pooling and view fusion.
//! - [`reprloss`]: contrastive objectives and a trainable projection head.
//! - [`cluster`]: constrained k-means++ seeding and semi-supervised Lloyd iterations.
//! - [`eval`]: Hungarian-matched clustering accuracy on All/Old/New.
//! - [`synth`]: synthetic aligned image/text embeddings with known classes.
//! - [`harness`]: end-to-end runs, top-k sweeps and corpus comparisons.

pub mod augment;
pub mod cluster;
pub mod embedstore;
mod error;
pub mod eval;
pub mod harness;
mod linalg;
pub mod reprloss;
pub mod retrieval;
pub mod synth;

pub use error::{Error, Result};
