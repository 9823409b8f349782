//! Dimensionality reduction of scores and activations: sparse random
//! projection, optional PCA, and the per-sample embedding pipeline.

mod pca;
mod reduce;
mod sparse;

pub use pca::{fit_pca, fit_pca_with, PcaModel, PcaSolver};
pub use reduce::{reduce, Embedding, EmbeddingSource, ReduceOptions, ReductionChain};
pub use sparse::{project_rows, ProjectionSpec, ProjectionStream, SparseProjection};
