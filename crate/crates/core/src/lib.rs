//! Quality sampling of generated augmentation images for person
//! re-identification, driven entirely by precomputed embeddings.
//!
//! Each image is projected into a *consistency* space (identity evidence)
//! and a *diversity* space (identity-unrelated variation). A generated image
//! is kept when it lies close to its identity's real centroid in the first
//! space, far from it in the second, and survives a seeded drop of
//! over-dense images scored by Local Outlier Factor.
//!
//! - [`store`]: dataset types and the binary / text formats
//! - [`metric`]: centroids, distances, thresholds, candidate sets
//! - [`knn`], [`lof`]: exact neighbor search, LOF, density drop
//! - [`pipeline`]: end-to-end selection and the manifest
//! - [`batch`]: identity-balanced real/generated mini-batch plans
//! - [`loss`], [`gradcheck`]: loss kernels and finite-difference checks
//! - [`synth`]: planted synthetic scenes and a naive reference selection

pub mod batch;
pub mod gradcheck;
pub mod json;
pub mod knn;
pub mod lof;
pub mod loss;
pub mod metric;
pub mod pipeline;
pub mod store;
pub mod synth;

use thiserror::Error;

pub use pipeline::{run_pipeline, SamplingConfig, SelectionManifest};
pub use store::{align_spaces, load_dataset, EmbeddingDataset, Format, Source, Space, SpacePair};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Store(#[from] store::StoreError),
    #[error(transparent)]
    Metric(#[from] metric::MetricError),
    #[error(transparent)]
    Lof(#[from] lof::LofError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error(transparent)]
    Batch(#[from] batch::BatchError),
    #[error(transparent)]
    Loss(#[from] loss::LossError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
}

impl Error {
    /// Whether the failure came from the filesystem rather than the data.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Store(store::StoreError::Io(_))
                | Error::Pipeline(pipeline::PipelineError::Io(_))
                | Error::Synth(synth::SynthError::Store(store::StoreError::Io(_)))
        )
    }
}
