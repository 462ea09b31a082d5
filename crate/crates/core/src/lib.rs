//! Segmenter, domain discriminators, adversarial losses, the adaptation
//! trainer and evaluation for cross-city segmentation transfer.
//!
//! The segmenter maps images to a grid of features (`M_F`) and per-grid class
//! logits (`M_Y`). A global discriminator and one discriminator per class
//! classify every grid as source or target; adaptation alternates between
//! training those discriminators and updating the segmenter to fool them,
//! with class-wise terms weighted by grid soft labels.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminators;
pub mod eval;
pub mod losses;
pub mod segmenter;
pub mod trainer;

use crosscity_numkit::io::TnsrElement;
use crosscity_numkit::Scalar;
use thiserror::Error;

pub use config::TrainConfig;
pub use data::{SourceSet, TargetSet};
pub use discriminators::{Discriminators, Head};
pub use segmenter::{GridGeometry, Segmenter, SegmenterConfig};
pub use trainer::{lambda_at, Schedule, Trainer};

/// Element types usable for training and checkpoints.
pub trait Elem: Scalar + TnsrElement {}
impl Elem for f32 {}
impl Elem for f64 {}

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Num(#[from] crosscity_numkit::NumError),
    #[error(transparent)]
    Prior(#[from] crosscity_prior::PriorError),
    #[error(transparent)]
    Forge(#[from] crosscity_forge::ForgeError),
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CoreError + '_ {
    move |source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}
