//! Reprogramming frozen sequence classifiers through a sparse dictionary map.
//!
//! Target-token embeddings are written as sparse combinations of a frozen
//! source model's token embeddings (`V_T ≈ Θ·V_S`). Only the coefficient map
//! `Θ` is trained; the source classifier is never modified.
//!
//! Module map:
//! - [`embeddings`]: vocabularies, embedding matrices, the on-disk bundle format
//! - [`sparse_map`]: OMP sparse coding against the fixed source dictionary
//! - [`frozen_model`]: immutable classifier with exact input gradients
//! - [`labelmap`]: source/target label bijections and regression thresholds
//! - [`training`]: the alternating reprojection + gradient loop
//! - [`evaluation`]: accuracy, Spearman's rho, confusion matrices, sweeps
//! - [`bioseq`]: protein datasets, BLOSUM62 alignment, distance analyses
//! - [`synthetic`]: seeded synthetic source/target tasks used for fixtures

pub mod bioseq;
pub mod embeddings;
pub mod evaluation;
pub mod frozen_model;
pub mod labelmap;
mod linalg;
pub mod sparse_map;
pub mod synthetic;
pub mod training;

pub use bioseq::{Label, TaskDataset, TaskKind};
pub use embeddings::{EmbeddingMatrix, Vocabulary};
pub use frozen_model::FrozenClassifier;
pub use labelmap::LabelMapping;
pub use sparse_map::{CoefficientMap, SparseCodeConfig};
pub use training::{TrainConfig, TrainHistory};
