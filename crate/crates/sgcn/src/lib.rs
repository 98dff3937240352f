//! Semantic graph convolutional networks.
//!
//! This crate trains node representations on undirected graphs by
//! disentangling each node's embedding into latent connection factors,
//! routing neighborhood information per factor, and then mining 2-hop
//! semantic paths from the hardened factor assignments. A shared-projection
//! independence penalty keeps the factor subspaces from collapsing onto each
//! other.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`graph`]: immutable graph datasets (loaders, splits, neighbor caps)
//! - [`tensor`]: dense f64 tensors with a reverse-mode tape
//! - [`routing`]: factor projection and neighborhood routing layers
//! - [`semantics`]: hard assignments, path adjacency, semantic aggregation
//! - [`independence`]: subspace-independence regularizer
//! - [`objectives`]: output head and task losses
//! - [`training`]: Adam, early stopping, gradient checking
//! - [`eval`]: accuracy, F1, K-Means, NMI, ARI
//! - [`synth`]: seeded synthetic graph generators for tests and diagnostics

pub mod tensor;

pub use tensor::{Tape, Tensor, TensorError, Var};
