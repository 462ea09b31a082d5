//! In-memory datasets in tensor form.
//!
//! [`SourceSet`] carries labels. [`TargetSet`] is built from
//! [`UnlabeledSample`]s and has nowhere to put a label, so adaptation code
//! handed a target set cannot read target supervision even by accident.

use crosscity_forge::{LabeledSample, SceneSample, UnlabeledSample};
use crosscity_numkit::{Scalar, Tensor};
use crosscity_prior::PriorMask;
use image::{GrayImage, RgbImage};

use crate::{CoreError, Result};

/// `[3, H, W]` planes scaled to roughly `[-1, 1]`.
pub fn image_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = p[c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::from_vec(vec![3, h, w], data).expect("buffer sized from image")
}

/// Stacks `[3,H,W]` images into `[B,3,H,W]`, converting the element type.
pub fn batch_images<T: Scalar>(images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let cast: Vec<Tensor<T>> = images.iter().map(|t| t.cast()).collect();
    Ok(Tensor::stack(&cast)?)
}

#[derive(Clone, Debug)]
pub struct SourceSet {
    pub width: usize,
    pub height: usize,
    pub images: Vec<Tensor<f32>>,
    /// Row-major class ids per image (255 = ignore).
    pub labels: Vec<Vec<u8>>,
}

impl SourceSet {
    pub fn from_labeled(samples: &[LabeledSample]) -> Result<Self> {
        Self::build(samples.iter().map(|s| (&s.image, &s.labels)))
    }

    pub fn from_scenes(samples: &[SceneSample]) -> Result<Self> {
        Self::build(samples.iter().map(|s| (&s.image, &s.labels)))
    }

    fn build<'a>(items: impl Iterator<Item = (&'a RgbImage, &'a GrayImage)>) -> Result<Self> {
        let mut set = Self {
            width: 0,
            height: 0,
            images: Vec::new(),
            labels: Vec::new(),
        };
        for (img, lab) in items {
            if img.dimensions() != lab.dimensions() {
                return Err(CoreError::Data(format!(
                    "image {:?} and labels {:?} differ in size",
                    img.dimensions(),
                    lab.dimensions()
                )));
            }
            set.check_size(img)?;
            set.images.push(image_tensor(img));
            set.labels.push(lab.as_raw().clone());
        }
        if set.images.is_empty() {
            return Err(CoreError::Data("labelled dataset is empty".into()));
        }
        Ok(set)
    }

    fn check_size(&mut self, img: &RgbImage) -> Result<()> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if self.images.is_empty() {
            self.width = w;
            self.height = h;
        } else if (w, h) != (self.width, self.height) {
            return Err(CoreError::Data(format!("mixed image sizes {}x{} and {w}x{h}", self.width, self.height)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Labels of several images concatenated in `[B,H,W]` order.
    pub fn batch_labels(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().flat_map(|&i| self.labels[i].iter().copied()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TargetSet {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<String>,
    pub images: Vec<Tensor<f32>>,
    /// Raw frames kept for prior mining.
    pub raw: Vec<RgbImage>,
    pub partners: Vec<Option<RgbImage>>,
    /// Static-object prior per image, when mined or loaded.
    pub priors: Vec<Option<PriorMask>>,
}

impl TargetSet {
    pub fn from_unlabeled(samples: Vec<UnlabeledSample>) -> Result<Self> {
        let mut set = Self {
            width: 0,
            height: 0,
            ids: Vec::new(),
            images: Vec::new(),
            raw: Vec::new(),
            partners: Vec::new(),
            priors: Vec::new(),
        };
        for s in samples {
            let (w, h) = (s.image.width() as usize, s.image.height() as usize);
            if set.images.is_empty() {
                set.width = w;
                set.height = h;
            } else if (w, h) != (set.width, set.height) {
                return Err(CoreError::Data(format!("mixed image sizes {}x{} and {w}x{h}", set.width, set.height)));
            }
            if let Some(p) = &s.partner {
                if p.dimensions() != s.image.dimensions() {
                    return Err(CoreError::Data(format!("partner of {} differs in size", s.id)));
                }
            }
            set.images.push(image_tensor(&s.image));
            set.ids.push(s.id);
            set.raw.push(s.image);
            set.partners.push(s.partner);
            set.priors.push(None);
        }
        if set.images.is_empty() {
            return Err(CoreError::Data("target dataset is empty".into()));
        }
        Ok(set)
    }

    /// Drops everything but pixels from generated scenes.
    pub fn from_scenes(samples: &[SceneSample]) -> Result<Self> {
        Self::from_unlabeled(
            samples
                .iter()
                .enumerate()
                .map(|(i, s)| UnlabeledSample {
                    id: format!("{i:05}"),
                    image: s.image.clone(),
                    partner: s.partner.as_ref().map(|p| p.image.clone()),
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn has_priors(&self) -> bool {
        self.priors.iter().any(Option::is_some)
    }

    pub fn set_prior(&mut self, index: usize, mask: PriorMask) -> Result<()> {
        if (mask.width, mask.height) != (self.width, self.height) {
            return Err(CoreError::Data(format!(
                "prior {}x{} does not fit {}x{} images",
                mask.width, mask.height, self.width, self.height
            )));
        }
        self.priors[index] = Some(mask);
        Ok(())
    }
}
