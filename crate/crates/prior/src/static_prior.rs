//! Thresholding matched superpixels into a prior mask, and using the mask to
//! strip non-static mass from soft pseudo labels.

use std::path::Path;

use crosscity_numkit::{Scalar, Tensor};
use image::GrayImage;

use crate::{MatchSet, PriorError, Result, SuperpixelMap};

/// Static classes as a per-class flag vector. Must be a non-empty strict subset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StaticClassSet {
    flags: Vec<bool>,
}

impl StaticClassSet {
    pub fn new(flags: Vec<bool>) -> Result<Self> {
        let n = flags.iter().filter(|&&f| f).count();
        if n == 0 || n == flags.len() {
            return Err(PriorError::Invalid(format!(
                "static classes must be a non-empty strict subset ({n} of {})",
                flags.len()
            )));
        }
        Ok(Self { flags })
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn num_classes(&self) -> usize {
        self.flags.len()
    }

    pub fn contains(&self, c: usize) -> bool {
        self.flags.get(c).copied().unwrap_or(false)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PriorMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    /// Matched-keypoint count per superpixel (empty for masks read from disk).
    pub counts: Vec<usize>,
}

impl PriorMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![false; width * height],
            counts: Vec::new(),
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![true; width * height],
            counts: Vec::new(),
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn to_image(&self) -> GrayImage {
        let data = self.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, data).expect("mask dims match buffer")
    }

    /// Any nonzero pixel counts as inside the prior.
    pub fn from_image(img: &GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            mask: img.pixels().map(|p| p[0] != 0).collect(),
            counts: Vec::new(),
        }
    }

    /// Binary PGM (P5, maxval 255).
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|source| PriorError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut enc = image::codecs::pnm::PnmEncoder::new(std::io::BufWriter::new(file))
            .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary));
        enc.encode(self.to_image().as_raw().as_slice(), self.width as u32, self.height as u32, image::ExtendedColorType::L8)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(source) => PriorError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => PriorError::Image(other),
        })?;
        Ok(Self::from_image(&img.to_luma8()))
    }
}

/// Union of superpixels holding at least `k` matched keypoints (image-a side).
pub fn extract_static_prior(matches: &MatchSet, spx: &SuperpixelMap, k: usize) -> PriorMask {
    let mut counts = vec![0usize; spx.count];
    for m in &matches.matches {
        if m.xa < spx.width && m.ya < spx.height {
            counts[spx.id_at(m.xa, m.ya) as usize] += 1;
        }
    }
    let keep: Vec<bool> = counts.iter().map(|&c| c >= k && c > 0).collect();
    PriorMask {
        width: spx.width,
        height: spx.height,
        mask: spx.ids.iter().map(|&id| keep[id as usize]).collect(),
        counts,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RefineStats {
    /// Masked pixels that were renormalized.
    pub refined: usize,
    /// Masked pixels with no static mass, left as they were.
    pub degenerate: usize,
}

impl std::ops::AddAssign for RefineStats {
    fn add_assign(&mut self, o: Self) {
        self.refined += o.refined;
        self.degenerate += o.degenerate;
    }
}

/// Inside the mask, zero the non-static classes and renormalize the static
/// ones to sum to one. `pseudo` is `[C, H, W]`; pixels outside the mask are
/// copied bit for bit.
pub fn refine_pseudo_labels<T: Scalar>(
    pseudo: &Tensor<T>,
    mask: &PriorMask,
    statics: &StaticClassSet,
) -> Result<(Tensor<T>, RefineStats)> {
    let shape = pseudo.shape();
    if shape.len() != 3 || shape[0] != statics.num_classes() || shape[1] != mask.height || shape[2] != mask.width {
        return Err(PriorError::Invalid(format!(
            "pseudo labels {:?} do not fit mask {}x{} with {} classes",
            shape,
            mask.height,
            mask.width,
            statics.num_classes()
        )));
    }
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let mut out = pseudo.clone();
    let data = out.data_mut();
    let mut stats = RefineStats::default();
    for i in 0..hw {
        if !mask.mask[i] {
            continue;
        }
        let z: T = (0..c).filter(|&ch| statics.contains(ch)).map(|ch| data[ch * hw + i]).sum();
        if z <= T::zero() {
            stats.degenerate += 1;
            continue;
        }
        for ch in 0..c {
            let v = &mut data[ch * hw + i];
            *v = if statics.contains(ch) { *v / z } else { T::zero() };
        }
        stats.refined += 1;
    }
    Ok((out, stats))
}
