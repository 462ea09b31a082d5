//! Static-object priors mined from two views of the same place.
//!
//! Pixels of static structure (road, buildings, sky, vegetation) reappear at
//! the same spot in a later view, while cars and pedestrians move. The pipeline
//! matches a keypoint lattice across the pair ([`matching`]), groups the image
//! into boundary-preserving regions ([`superpixel`]), and keeps the regions
//! holding enough matched keypoints ([`static_prior`]). The resulting mask is
//! then used to strip non-static mass from pseudo labels.

pub mod matching;
pub mod static_prior;
pub mod superpixel;

pub use matching::{dense_match, Match, MatchConfig, MatchSet, Matcher, NccMatcher};
pub use static_prior::{extract_static_prior, refine_pseudo_labels, PriorMask, RefineStats, StaticClassSet};
pub use superpixel::{superpixels, superpixels_with, SuperpixelConfig, SuperpixelMap};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("image pair size mismatch: {a:?} vs {b:?}")]
    SizeMismatch { a: (u32, u32), b: (u32, u32) },
    #[error("superpixel count {k} outside [1, {max}]")]
    BadSuperpixelCount { k: usize, max: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Num(#[from] crosscity_numkit::NumError),
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, PriorError>;

/// Luma plane in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayPlane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayPlane {
    pub fn from_rgb(img: &image::RgbImage) -> Self {
        let data = img
            .pixels()
            .map(|p| (77 * p[0] as u32 + 150 * p[1] as u32 + 29 * p[2] as u32) as f32 / (256.0 * 255.0))
            .collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// 2×2 box-filtered half-resolution copy.
    pub fn downsample(&self) -> Self {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let s = self.at(2 * x, 2 * y) + self.at(2 * x + 1, 2 * y) + self.at(2 * x, 2 * y + 1) + self.at(2 * x + 1, 2 * y + 1);
                data.push(s * 0.25);
            }
        }
        Self { width: w, height: h, data }
    }
}

/// End-to-end settings for mining one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    pub matching: MatchConfig,
    pub superpixels: usize,
    pub spx: SuperpixelConfig,
    /// Minimum matched keypoints for a superpixel to join the prior.
    pub k: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            matching: MatchConfig::default(),
            superpixels: 256,
            spx: SuperpixelConfig::default(),
            k: 3,
        }
    }
}

/// Match `image` against its time-shifted `partner` and threshold the
/// superpixels of `image`.
pub fn mine_pair(image: &image::RgbImage, partner: &image::RgbImage, cfg: &PriorConfig) -> Result<(PriorMask, MatchSet)> {
    let matches = dense_match(image, partner, &cfg.matching)?;
    let n = (image.width() * image.height()) as usize;
    let spx = superpixels_with(image, cfg.superpixels.min(n.max(1)), &cfg.spx)?;
    Ok((extract_static_prior(&matches, &spx, cfg.k), matches))
}
