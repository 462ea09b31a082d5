//! Segmentation metrics, discriminator accuracy and class-pooled embeddings.

use std::fmt::Write as _;
use std::path::Path;

use crosscity_numkit::Tensor;

use crate::data::{batch_images, SourceSet};
use crate::discriminators::{Discriminators, Head};
use crate::segmenter::Segmenter;
use crate::{io_err, CoreError, Elem, Result};

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulates one label map pair; ground-truth 255 is skipped.
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(CoreError::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if g == 255 {
                continue;
            }
            if g as usize >= self.classes || p as usize >= self.classes {
                return Err(CoreError::Data(format!(
                    "pixel {i}: label pair ({g}, {p}) outside [0,{})",
                    self.classes
                )));
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

pub fn confusion(pred: &[u8], gt: &[u8], classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// `TP / (TP + FP + FN)`; NaN when the class appears in neither map.
    pub iou: Vec<f64>,
    /// Class has ground-truth pixels.
    pub present: Vec<bool>,
    /// Mean IoU over present classes (0 when none is present).
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub samples: usize,
}

pub fn miou(cm: &ConfusionMatrix, class_names: &[String], samples: usize) -> EvalReport {
    let n = cm.classes;
    let mut iou = Vec::with_capacity(n);
    let mut present = Vec::with_capacity(n);
    for c in 0..n {
        let tp = cm.get(c, c);
        let gt: u64 = (0..n).map(|p| cm.get(c, p)).sum();
        let pred: u64 = (0..n).map(|g| cm.get(g, c)).sum();
        let union = gt + pred - tp;
        iou.push(if union == 0 { f64::NAN } else { tp as f64 / union as f64 });
        present.push(gt > 0);
    }
    let scored: Vec<f64> = iou.iter().zip(&present).filter(|(_, &p)| p).map(|(&v, _)| v).collect();
    let miou = if scored.is_empty() { 0.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 };
    let total = cm.total();
    let correct: u64 = (0..n).map(|c| cm.get(c, c)).sum();
    EvalReport {
        class_names: class_names.to_vec(),
        iou,
        present,
        miou,
        pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        samples,
    }
}

impl EvalReport {
    /// `class=<name> iou=<float>` per present class, then `miou=<float>`.
    pub fn machine_text(&self) -> String {
        let mut s = String::new();
        for (c, name) in self.class_names.iter().enumerate() {
            if self.present[c] {
                let _ = writeln!(s, "class={name} iou={:.6}", self.iou[c]);
            }
        }
        let _ = writeln!(s, "miou={:.6}", self.miou);
        s
    }

    pub fn table(&self) -> String {
        let w = self.class_names.iter().map(|n| n.chars().count()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<w$}  {:>7}\n", "class", "IoU");
        let _ = writeln!(s, "{}", "─".repeat(w + 9));
        for (c, name) in self.class_names.iter().enumerate() {
            let v = if self.present[c] { format!("{:>7.2}", 100.0 * self.iou[c]) } else { format!("{:>7}", "—") };
            let _ = writeln!(s, "{name:<w$}  {v}");
        }
        let _ = writeln!(s, "{}", "─".repeat(w + 9));
        let _ = writeln!(s, "{:<w$}  {:>7.2}", "mIoU", 100.0 * self.miou);
        let _ = writeln!(s, "{:<w$}  {:>7.2}", "pix acc", 100.0 * self.pixel_accuracy);
        let _ = writeln!(s, "{:<w$}  {:>7}", "images", self.samples);
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.machine_text()).map_err(io_err(path))
    }
}

const EVAL_CHUNK: usize = 16;

/// Confusion of segmenter predictions against a labelled set.
pub fn evaluate<T: Elem>(seg: &Segmenter<T>, set: &SourceSet) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(seg.config.num_classes());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let images: Vec<_> = chunk.iter().map(|&i| &set.images[i]).collect();
        let preds = seg.predict_label_map(batch_images::<T>(&images)?)?;
        for (p, &i) in preds.iter().zip(chunk) {
            cm.add(p, &set.labels[i])?;
        }
    }
    Ok(cm)
}

pub fn evaluate_report<T: Elem>(seg: &Segmenter<T>, set: &SourceSet) -> Result<EvalReport> {
    let cm = evaluate(seg, set)?;
    Ok(miou(&cm, &seg.config.classes, set.len()))
}

/// Fraction of grids classified correctly: `p ≥ 0.5` counts as source.
pub fn disc_accuracy_from_probs<T: Elem>(p_src: &Tensor<T>, p_tgt: &Tensor<T>) -> f64 {
    let half = T::from_f64(0.5);
    let hits = p_src.data().iter().filter(|&&p| p >= half).count() + p_tgt.data().iter().filter(|&&p| p < half).count();
    let total = p_src.len() + p_tgt.len();
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Global-discriminator accuracy on a source and a target batch of images.
pub fn disc_accuracy<T: Elem>(seg: &Segmenter<T>, disc: &Discriminators<T>, source: &[&Tensor<f32>], target: &[&Tensor<f32>]) -> Result<f64> {
    let mut ps = Vec::new();
    let mut pt = Vec::new();
    for chunk in source.chunks(EVAL_CHUNK) {
        let (f, _) = seg.infer(batch_images::<T>(chunk)?)?;
        ps.extend_from_slice(disc.infer(f, Head::Global)?.data());
    }
    for chunk in target.chunks(EVAL_CHUNK) {
        let (f, _) = seg.infer(batch_images::<T>(chunk)?)?;
        pt.extend_from_slice(disc.infer(f, Head::Global)?.data());
    }
    let n_s = ps.len();
    let n_t = pt.len();
    Ok(disc_accuracy_from_probs(
        &Tensor::from_vec(vec![n_s], ps)?,
        &Tensor::from_vec(vec![n_t], pt)?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub domain: String,
    pub class_id: usize,
    pub feature: Vec<f64>,
}

/// Per image and class, the mean over that class's pixels of the feature of
/// the grid each pixel falls in.
pub fn export_embeddings<T: Elem>(seg: &Segmenter<T>, domain: &str, images: &[&Tensor<f32>], labels: &[&[u8]]) -> Result<Vec<EmbeddingRecord>> {
    if images.len() != labels.len() {
        return Err(CoreError::Shape(format!("{} images but {} label maps", images.len(), labels.len())));
    }
    let nc = seg.config.num_classes();
    let mut out = Vec::new();
    for (img, lab) in images.iter().zip(labels) {
        let (_, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        if lab.len() != h * w {
            return Err(CoreError::Shape(format!("label map of {} pixels for a {h}x{w} image", lab.len())));
        }
        let geom = seg.geometry(h, w)?;
        let (feat, _) = seg.infer(batch_images::<T>(&[*img])?)?;
        let d = seg.config.feature_dim();
        let n = geom.grids();
        // Pixel counts per (class, grid) make the pooled mean a weighted grid sum.
        let mut counts = vec![0u64; nc * n];
        for y in 0..h {
            for x in 0..w {
                let l = lab[y * w + x];
                if l != 255 && (l as usize) < nc {
                    counts[l as usize * n + geom.grid_of(y, x)] += 1;
                }
            }
        }
        for c in 0..nc {
            let row = &counts[c * n..(c + 1) * n];
            let total: u64 = row.iter().sum();
            if total == 0 {
                continue;
            }
            let mut v = vec![0.0f64; d];
            for (k, vk) in v.iter_mut().enumerate() {
                let plane = &feat.data()[k * n..(k + 1) * n];
                *vk = row.iter().zip(plane).map(|(&cnt, &f)| cnt as f64 * f.as_f64()).sum::<f64>() / total as f64;
            }
            out.push(EmbeddingRecord {
                domain: domain.to_string(),
                class_id: c,
                feature: v,
            });
        }
    }
    Ok(out)
}

pub fn embeddings_text(records: &[EmbeddingRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = write!(s, "{} {}", r.domain, r.class_id);
        for v in &r.feature {
            let _ = write!(s, " {v:.6}");
        }
        s.push('\n');
    }
    s
}
