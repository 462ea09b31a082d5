//! Grid soft labels and the adversarial objectives.
//!
//! Every loss is a sum over grids within an image and a mean over the images
//! of each domain, so magnitudes do not depend on batch size.

use crosscity_numkit::{LogSide, Scalar, Tape, Tensor, Var};

use crate::discriminators::{Discriminators, Head};
use crate::segmenter::GridGeometry;
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// Per-grid class masses `Φ` and, once normalized, `Φ̃`; both `[B,|C|,H_f,W_f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelGrid<T> {
    pub domain: Domain,
    pub phi: Tensor<T>,
    pub phi_norm: Option<Tensor<T>>,
    /// `present[b][c]`: class `c` has nonzero mass in image `b`.
    pub present: Vec<Vec<bool>>,
}

impl<T: Scalar> SoftLabelGrid<T> {
    pub fn batch(&self) -> usize {
        self.phi.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.phi.shape()[1]
    }

    pub fn grids(&self) -> usize {
        self.phi.shape()[2] * self.phi.shape()[3]
    }

    /// `Φ̃` for class `c`, laid out `[B,1,H_f,W_f]` like a discriminator output.
    pub fn class_weights(&self, c: usize) -> Result<Vec<T>> {
        let norm = self
            .phi_norm
            .as_ref()
            .ok_or_else(|| CoreError::Shape("soft labels not normalized".into()))?;
        let (b, nc, n) = (self.batch(), self.num_classes(), self.grids());
        let mut out = Vec::with_capacity(b * n);
        for bi in 0..b {
            out.extend_from_slice(&norm.data()[(bi * nc + c) * n..(bi * nc + c + 1) * n]);
        }
        Ok(out)
    }

    /// Whether class `c` has mass in any image of the batch.
    pub fn class_present(&self, c: usize) -> bool {
        self.present.iter().any(|p| p[c])
    }

    /// Soft labels of image `b` alone.
    pub fn image(&self, b: usize) -> Result<Self> {
        Ok(Self {
            domain: self.domain,
            phi: add_batch_axis(self.phi.slice_first(b)?)?,
            phi_norm: match &self.phi_norm {
                Some(t) => Some(add_batch_axis(t.slice_first(b)?)?),
                None => None,
            },
            present: vec![self.present[b].clone()],
        })
    }

    /// Concatenates per-image grids along the batch axis.
    pub fn concat(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| CoreError::Shape("no soft labels to concatenate".into()))?;
        let squeeze = |t: &Tensor<T>| -> Result<Vec<Tensor<T>>> {
            (0..t.shape()[0]).map(|b| Ok(t.slice_first(b)?)).collect()
        };
        let mut phis = Vec::new();
        let mut norms = Vec::new();
        let mut present = Vec::new();
        for it in items {
            phis.extend(squeeze(&it.phi)?);
            if let Some(n) = &it.phi_norm {
                norms.extend(squeeze(n)?);
            }
            present.extend(it.present.iter().cloned());
        }
        Ok(Self {
            domain: first.domain,
            phi: Tensor::stack(&phis)?,
            phi_norm: if norms.len() == phis.len() { Some(Tensor::stack(&norms)?) } else { None },
            present,
        })
    }
}

fn add_batch_axis<T: Copy>(t: Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Ok(t.reshape(shape)?)
}

/// `Φ^c_n` = share of labelled pixels in block `R(n)` with class `c`.
/// Ignored pixels (255) count in neither numerator nor denominator; an
/// all-ignored grid gets zero mass.
pub fn grid_soft_labels_source<T: Scalar>(labels: &[u8], batch: usize, geom: &GridGeometry, num_classes: usize) -> Result<SoftLabelGrid<T>> {
    let (h, w) = (geom.height(), geom.width());
    if labels.len() != batch * h * w {
        return Err(CoreError::Shape(format!(
            "{} labels do not fill {batch} images of {h}x{w}",
            labels.len()
        )));
    }
    if let Some(i) = labels.iter().position(|&l| l != 255 && l as usize >= num_classes) {
        return Err(CoreError::Data(format!("label {} at {i} outside [0,{num_classes})", labels[i])));
    }
    let n = geom.grids();
    let mut counts = vec![0u32; batch * num_classes * n];
    let mut totals = vec![0u32; batch * n];
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                let l = labels[(b * h + y) * w + x];
                if l == 255 {
                    continue;
                }
                let g = geom.grid_of(y, x);
                counts[(b * num_classes + l as usize) * n + g] += 1;
                totals[b * n + g] += 1;
            }
        }
    }
    let mut phi = vec![T::zero(); counts.len()];
    for b in 0..batch {
        for c in 0..num_classes {
            for g in 0..n {
                let t = totals[b * n + g];
                if t > 0 {
                    phi[(b * num_classes + c) * n + g] = T::from_f64(counts[(b * num_classes + c) * n + g] as f64 / t as f64);
                }
            }
        }
    }
    let phi = Tensor::from_vec(vec![batch, num_classes, geom.grid_h, geom.grid_w], phi)?;
    Ok(with_presence(Domain::Source, phi))
}

/// `Φ^c_n` = mean of the pixel distributions `φ_i` over `R(n)`.
pub fn grid_soft_labels_target<T: Scalar>(pseudo: &Tensor<T>, geom: &GridGeometry) -> Result<SoftLabelGrid<T>> {
    let (b, c, h, w) = pseudo.dims4()?;
    if (h, w) != (geom.height(), geom.width()) {
        return Err(CoreError::Shape(format!(
            "pseudo labels {h}x{w} do not match geometry {}x{}",
            geom.height(),
            geom.width()
        )));
    }
    let n = geom.grids();
    let inv = T::from_f64(1.0 / (geom.d * geom.d) as f64);
    let mut phi = vec![T::zero(); b * c * n];
    for bc in 0..b * c {
        let plane = &pseudo.data()[bc * h * w..(bc + 1) * h * w];
        let out = &mut phi[bc * n..(bc + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let g = geom.grid_of(y, x);
                out[g] = out[g] + plane[y * w + x];
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
    }
    let phi = Tensor::from_vec(vec![b, c, geom.grid_h, geom.grid_w], phi)?;
    Ok(with_presence(Domain::Target, phi))
}

fn with_presence<T: Scalar>(domain: Domain, phi: Tensor<T>) -> SoftLabelGrid<T> {
    let s = phi.shape();
    let (b, c, n) = (s[0], s[1], s[2] * s[3]);
    let present = (0..b)
        .map(|bi| (0..c).map(|ci| phi.data()[(bi * c + ci) * n..(bi * c + ci + 1) * n].iter().any(|&v| v > T::zero())).collect())
        .collect();
    SoftLabelGrid {
        domain,
        phi,
        phi_norm: None,
        present,
    }
}

/// Fills `Φ̃^c_n = Φ^c_n / Σ_n Φ^c_n` per image; zero-mass classes stay zero.
pub fn normalize_soft_labels<T: Scalar>(mut grid: SoftLabelGrid<T>) -> SoftLabelGrid<T> {
    let (b, c, n) = (grid.batch(), grid.num_classes(), grid.grids());
    let mut norm = grid.phi.clone();
    for bi in 0..b {
        for ci in 0..c {
            let row = &mut norm.data_mut()[(bi * c + ci) * n..(bi * c + ci + 1) * n];
            let z: T = row.iter().copied().sum();
            if z > T::zero() {
                row.iter_mut().for_each(|v| *v = *v / z);
                grid.present[bi][ci] = true;
            } else {
                row.iter_mut().for_each(|v| *v = T::zero());
                grid.present[bi][ci] = false;
            }
        }
    }
    grid.phi_norm = Some(norm);
    grid
}

/// A scalar loss on the tape plus the number of clamped probabilities.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub var: Var,
    pub clamps: usize,
}

fn batch_of<T: Scalar>(tape: &Tape<T>, p: Var) -> Result<usize> {
    let (b, one, _, _) = tape.value(p).dims4()?;
    if one != 1 || b == 0 {
        return Err(CoreError::Shape(format!("expected [B,1,H,W] probabilities, got {:?}", tape.value(p).shape())));
    }
    Ok(b)
}

/// `(1/B)·(−Σ w log p)` or `(1/B)·(−Σ w log(1−p))` over one domain's grids.
fn domain_term<T: Scalar>(tape: &mut Tape<T>, p: Var, weights: Option<Vec<T>>, side: LogSide) -> Result<LossTerm> {
    let b = batch_of(tape, p)?;
    let n = tape.value(p).len();
    let inv_b = T::from_f64(1.0 / b as f64);
    let w = match weights {
        Some(w) => w.into_iter().map(|v| v * inv_b).collect(),
        None => vec![inv_b; n],
    };
    let (var, clamps) = tape.log_loss(p, w, side)?;
    Ok(LossTerm { var, clamps })
}

fn add_terms<T: Scalar>(tape: &mut Tape<T>, a: LossTerm, b: LossTerm) -> Result<LossTerm> {
    Ok(LossTerm {
        var: tape.add(a.var, b.var)?,
        clamps: a.clamps + b.clamps,
    })
}

/// `L_G^D`: source grids labelled source, target grids labelled target.
pub fn global_d_loss<T: Scalar>(tape: &mut Tape<T>, p_src: Var, p_tgt: Var) -> Result<LossTerm> {
    let s = domain_term(tape, p_src, None, LogSide::Positive)?;
    let t = domain_term(tape, p_tgt, None, LogSide::Negative)?;
    add_terms(tape, s, t)
}

/// `L_G^Dinv`: the same grids with the domain labels flipped.
pub fn global_inv_loss<T: Scalar>(tape: &mut Tape<T>, p_src: Var, p_tgt: Var) -> Result<LossTerm> {
    let s = domain_term(tape, p_src, None, LogSide::Negative)?;
    let t = domain_term(tape, p_tgt, None, LogSide::Positive)?;
    add_terms(tape, s, t)
}

/// Per-class discriminator outputs for the classes that carry weight.
/// `None` marks classes absent from both batches; they contribute nothing.
pub type ClassProbs = Vec<Option<(Var, Var)>>;

/// Evaluates the class heads needed for the given soft labels.
pub fn classwise_probs<T: Scalar>(
    tape: &mut Tape<T>,
    disc: &Discriminators<T>,
    bind: &crosscity_numkit::Binding,
    feat_src: Var,
    feat_tgt: Var,
    src: &SoftLabelGrid<T>,
    tgt: &SoftLabelGrid<T>,
) -> Result<ClassProbs> {
    (0..disc.num_classes())
        .map(|c| {
            if !src.class_present(c) && !tgt.class_present(c) {
                return Ok(None);
            }
            let ps = disc.prob(tape, bind, feat_src, Head::Class(c))?;
            let pt = disc.prob(tape, bind, feat_tgt, Head::Class(c))?;
            Ok(Some((ps, pt)))
        })
        .collect()
}

fn classwise<T: Scalar>(
    tape: &mut Tape<T>,
    probs: &ClassProbs,
    src: &SoftLabelGrid<T>,
    tgt: &SoftLabelGrid<T>,
    flip: bool,
) -> Result<Option<LossTerm>> {
    let (src_side, tgt_side) = if flip {
        (LogSide::Negative, LogSide::Positive)
    } else {
        (LogSide::Positive, LogSide::Negative)
    };
    let mut acc: Option<LossTerm> = None;
    for (c, pair) in probs.iter().enumerate() {
        let Some((ps, pt)) = *pair else { continue };
        let s = domain_term(tape, ps, Some(src.class_weights(c)?), src_side)?;
        let t = domain_term(tape, pt, Some(tgt.class_weights(c)?), tgt_side)?;
        let term = add_terms(tape, s, t)?;
        acc = Some(match acc {
            None => term,
            Some(a) => add_terms(tape, a, term)?,
        });
    }
    Ok(acc)
}

/// `L_class^D = −Σ_S Σ_c Σ_n Φ̃ log p^c − Σ_T Σ_c Σ_n Φ̃ log(1−p^c)`.
/// `None` when no class has mass in either batch.
pub fn classwise_d_loss<T: Scalar>(tape: &mut Tape<T>, probs: &ClassProbs, src: &SoftLabelGrid<T>, tgt: &SoftLabelGrid<T>) -> Result<Option<LossTerm>> {
    classwise(tape, probs, src, tgt, false)
}

/// `L_class^Dinv`: [`classwise_d_loss`] with domain labels flipped.
pub fn classwise_inv_loss<T: Scalar>(tape: &mut Tape<T>, probs: &ClassProbs, src: &SoftLabelGrid<T>, tgt: &SoftLabelGrid<T>) -> Result<Option<LossTerm>> {
    classwise(tape, probs, src, tgt, true)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossWeights {
    pub lambda_g: f64,
    pub lambda_class: f64,
}

/// `L_task + λ_G·g + λ_class·class`, skipping terms whose weight is zero so a
/// zero schedule reproduces plain source training exactly.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, task: Var, g: Option<Var>, class: Option<Var>, weights: LossWeights) -> Result<Var> {
    let mut total = task;
    for (term, lambda) in [(g, weights.lambda_g), (class, weights.lambda_class)] {
        if let Some(v) = term {
            if lambda != 0.0 {
                let scaled = tape.scale(v, lambda);
                total = tape.add(total, scaled)?;
            }
        }
    }
    Ok(total)
}

/// Value form of the objective decomposition.
pub fn total_loss_value(task: f64, g: f64, class: f64, weights: LossWeights) -> f64 {
    task + weights.lambda_g * g + weights.lambda_class * class
}

/// Feature-gradient comparison between the single minimax objective and the
/// split, label-flipped objective used for training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReversalReport {
    /// The minimax value, identical to `L_G^D`.
    pub minimax_loss: f64,
    /// `‖∂L/∂features‖` for the feature player of the minimax game.
    pub minimax_grad_norm: f64,
    pub split_loss: f64,
    pub split_grad_norm: f64,
}

impl ReversalReport {
    pub fn ratio(&self) -> f64 {
        self.minimax_grad_norm / self.split_grad_norm
    }
}

/// Diagnostic only: never used to train.
pub fn reversal_loss_diagnostic<T: Scalar>(disc: &Discriminators<T>, feat_src: &Tensor<T>, feat_tgt: &Tensor<T>) -> Result<ReversalReport> {
    let run = |split: bool| -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let bind = disc.params.bind_frozen(&mut tape);
        let fs = tape.variable(feat_src.clone());
        let ft = tape.variable(feat_tgt.clone());
        let ps = disc.global_prob(&mut tape, &bind, fs)?;
        let pt = disc.global_prob(&mut tape, &bind, ft)?;
        let loss = if split {
            global_inv_loss(&mut tape, ps, pt)?
        } else {
            // The feature player ascends L_G^D; the sign does not change the norm.
            global_d_loss(&mut tape, ps, pt)?
        };
        let value = tape.value(loss.var).item().map(|v| v.as_f64()).unwrap_or(f64::NAN);
        let grads = tape.backward(loss.var)?;
        let norm2 = [fs, ft]
            .iter()
            .map(|&v| grads.get(v).map(|g| g.l2_norm().powi(2)).unwrap_or(0.0))
            .sum::<f64>();
        Ok((value, norm2.sqrt()))
    };
    let (minimax_loss, minimax_grad_norm) = run(false)?;
    let (split_loss, split_grad_norm) = run(true)?;
    Ok(ReversalReport {
        minimax_loss,
        minimax_grad_norm,
        split_loss,
        split_grad_norm,
    })
}
