//! Self-supervised graph representation learning by self-contrast.
//!
//! Each graph is contrasted against a weakly perturbed view of itself
//! (positive) and a strongly perturbed view (negative) with a triplet
//! margin loss. Projected representations are split into factors kept
//! independent by an HSIC penalty, every factor is masked in turn for an
//! adaptively weighted masked triplet loss, and a Barlow Twins (or MSE)
//! term pulls anchors and positives together in absolute distance.
//!
//! Modules, bottom up:
//!
//! * [`tensor`]: dense `f64` tensors with a reverse-mode tape
//! * [`graph`]: graphs, TU-format ingestion, one-hot features, batching
//! * [`augment`]: node dropping, edge perturbation, attribute masking,
//!   subgraph sampling and (anchor, positive, negative) triples
//! * [`model`]: GIN encoder and the three projection heads
//! * [`losses`]: every loss term and the combined objective
//! * [`trainer`]: Adam and the mini-batch training loop
//! * [`eval`]: frozen embeddings, linear SVM and k-fold evaluation
//! * [`check`]: finite-difference check of the whole objective
//! * [`cli`]: configuration files and command implementations

pub mod augment;
pub mod check;
pub mod cli;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
