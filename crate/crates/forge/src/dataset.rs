//! On-disk dataset layout.
//!
//! ```text
//! <root>/classes.txt              ordered class names, one per line
//! <root>/<split>/<id>/image.ppm   binary P6
//! <root>/<split>/<id>/label.pgm   binary P5, class ids (labelled splits only)
//! <root>/<split>/<id>/partner.ppm time-shifted view (pair datasets)
//! <root>/<split>/<id>/static.pgm  ground-truth static mask (labelled splits only)
//! ```
//!
//! Source datasets put labelled samples in `train/`. Target datasets keep
//! `train/` unlabelled and put labelled evaluation samples in `eval/`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, RgbImage};

use crate::classes::ClassSet;
use crate::draw::mix;
use crate::scene::{generate_pair, generate_scene, SceneSample, SceneSpec, Style};
use crate::{ForgeError, Result};

#[derive(Clone, Debug)]
pub struct EmitConfig {
    pub style: Style,
    /// Samples in `train/`.
    pub count: usize,
    /// Samples in `eval/` (always labelled).
    pub eval_count: usize,
    pub with_pairs: bool,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
}

impl EmitConfig {
    pub fn new(style: Style, count: usize, seed: u64) -> Self {
        Self {
            style,
            count,
            eval_count: 0,
            with_pairs: false,
            seed,
            width: 128,
            height: 128,
        }
    }

    /// Spec of sample `index` in `split`; emission and tests share it.
    pub fn spec(&self, split: &str, index: usize) -> SceneSpec {
        let lane = split.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
        SceneSpec::new(mix(mix(self.seed, lane), index as u64), self.style).with_size(self.width, self.height)
    }

    pub fn render(&self, split: &str, index: usize) -> SceneSample {
        let spec = self.spec(split, index);
        if self.with_pairs && split == "train" {
            generate_pair(&spec)
        } else {
            generate_scene(&spec)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub image: RgbImage,
    pub labels: GrayImage,
}

/// A sample as seen by adaptation: pixels only, never labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample {
    pub id: String,
    pub image: RgbImage,
    pub partner: Option<RgbImage>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ForgeError + '_ {
    move |source| ForgeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn img_err(path: &Path) -> impl FnOnce(image::ImageError) -> ForgeError + '_ {
    move |source| ForgeError::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(img_err(path))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)
        .map_err(img_err(path))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(img_err(path))?.into_rgb8())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path).map_err(img_err(path))?.into_luma8())
}

pub fn write_classes(root: &Path, classes: &ClassSet) -> Result<()> {
    let path = root.join("classes.txt");
    let mut f = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    for name in classes.names() {
        writeln!(f, "{name}").map_err(io_err(&path))?;
    }
    f.flush().map_err(io_err(&path))
}

pub fn read_classes(root: &Path) -> Result<Vec<String>> {
    let path = root.join("classes.txt");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

fn emit_split(cfg: &EmitConfig, root: &Path, split: &str, count: usize, labelled: bool) -> Result<()> {
    for i in 0..count {
        let dir = root.join(split).join(sample_id(i));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let s = cfg.render(split, i);
        write_ppm(&dir.join("image.ppm"), &s.image)?;
        if labelled {
            write_pgm(&dir.join("label.pgm"), &s.labels)?;
            write_pgm(&dir.join("static.pgm"), &s.static_mask)?;
        }
        if let Some(p) = &s.partner {
            write_ppm(&dir.join("partner.ppm"), &p.image)?;
        }
    }
    Ok(())
}

/// Writes a complete dataset under `root`.
pub fn emit_dataset(cfg: &EmitConfig, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    write_classes(root, &ClassSet::default_six())?;
    emit_split(cfg, root, "train", cfg.count, cfg.style == Style::Source)?;
    if cfg.eval_count > 0 {
        emit_split(cfg, root, "eval", cfg.eval_count, true)?;
    }
    Ok(())
}

fn sample_dirs(root: &Path, split: &str) -> Result<Vec<(String, PathBuf)>> {
    let dir = root.join(split);
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let entry = entry.map_err(io_err(&dir))?;
        if entry.path().is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Loads images and labels of a labelled split, ordered by sample id.
pub fn load_labeled(root: &Path, split: &str) -> Result<Vec<LabeledSample>> {
    sample_dirs(root, split)?
        .into_iter()
        .map(|(id, dir)| {
            let label_path = dir.join("label.pgm");
            if !label_path.exists() {
                return Err(ForgeError::Invalid(format!("{} has no label.pgm", dir.display())));
            }
            let image = read_ppm(&dir.join("image.ppm"))?;
            let labels = read_pgm(&label_path)?;
            if image.dimensions() != labels.dimensions() {
                return Err(ForgeError::Invalid(format!("{}: image/label size mismatch", dir.display())));
            }
            Ok(LabeledSample { id, image, labels })
        })
        .collect()
}

/// Loads images (and partners when present) of a split. Label files are never opened.
pub fn load_unlabeled(root: &Path, split: &str) -> Result<Vec<UnlabeledSample>> {
    sample_dirs(root, split)?
        .into_iter()
        .map(|(id, dir)| {
            let image = read_ppm(&dir.join("image.ppm"))?;
            let partner_path = dir.join("partner.ppm");
            let partner = if partner_path.exists() {
                Some(read_ppm(&partner_path)?)
            } else {
                None
            };
            Ok(UnlabeledSample { id, image, partner })
        })
        .collect()
}
