//! Synthetic multi-view captures of articulated bodies with exact ground
//! truth: scene specification, rendering, and the on-disk dataset.

mod dataset;
mod formats;
mod raster;
mod scene;

use thiserror::Error;

pub use dataset::{generate_dataset, render_observation, Dataset, DatasetConfig, IdentityEntry, Manifest, MultiViewObservation, SourceView, FORMAT_VERSION};
pub use formats::{parse_body, parse_cameras, write_body, write_cameras};
pub use raster::{rasterize, render_ground_truth, vertex_normals, Fragments};
pub use scene::{identity_seeds, sample_shape, Lighting, MotionParams, Palette, Profile, RigConfig, SceneSpec};

use crate::body::BodyError;
use crate::imaging::ImageIoError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{0}")]
    Missing(String),
    #[error("invalid scene specification: {0}")]
    InvalidSpec(String),
    #[error("output directory {0} is not empty (pass --force to overwrite)")]
    NotEmpty(String),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Body(#[from] BodyError),
}
