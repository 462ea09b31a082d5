//! Synthetic "cities" for adaptation experiments.
//!
//! Scenes are layered road views (sky, buildings, vegetation, road, then cars
//! and pedestrians) rendered with integer geometry and fixed-point colour
//! arithmetic, so a [`SceneSpec`] maps to the same bytes on every platform.
//! The two [`Style`]s differ in palette, texture statistics and object
//! frequencies. [`generate_pair`] adds a second observation of the same place
//! where the static layout persists and dynamic objects move.

pub mod classes;
pub mod dataset;
mod draw;
mod scene;

pub use classes::ClassSet;
pub use dataset::{emit_dataset, load_labeled, load_unlabeled, EmitConfig, LabeledSample, UnlabeledSample};
pub use scene::{generate_pair, generate_scene, SceneSample, SceneSpec, Style};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error at {path}: {source}")]
    Image {
        path: std::path::PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ForgeError>;
