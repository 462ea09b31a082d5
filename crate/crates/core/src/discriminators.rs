//! Per-grid domain classifiers: one global head and one head per class.
//!
//! Each head is two 1×1 convolutions (D → D/2 → 1) with a leaky ReLU between
//! and a sigmoid on top, so every grid cell of a feature map is classified
//! independently. Final layers start at zero, giving p = 0.5 everywhere.

use crosscity_numkit::{Binding, ConvSpec, ParamSet, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::{CoreError, Result};

const LEAK: f64 = 0.2;
const PER_HEAD: usize = 4;

/// Which head to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Global,
    Class(usize),
}

pub struct Discriminators<T: Scalar> {
    pub feature_dim: usize,
    pub classes: Vec<String>,
    /// Global head first, then one head per class, four tensors each.
    pub params: ParamSet<T>,
}

impl<T: Scalar> Discriminators<T> {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, classes: &[String], rng: &mut R) -> Result<Self> {
        if feature_dim < 2 {
            return Err(CoreError::Config(format!("feature dimension {feature_dim} too small for a discriminator")));
        }
        let mut params = ParamSet::new();
        let hidden = feature_dim / 2;
        let mut add_head = |prefix: String, params: &mut ParamSet<T>| -> Result<()> {
            let limit = (6.0 / (feature_dim + hidden) as f64).sqrt();
            params.push(format!("{prefix}.fc1.weight"), Tensor::uniform([hidden, feature_dim, 1, 1], -limit, limit, rng))?;
            params.push(format!("{prefix}.fc1.bias"), Tensor::zeros([hidden]))?;
            params.push(format!("{prefix}.fc2.weight"), Tensor::zeros([1, hidden, 1, 1]))?;
            params.push(format!("{prefix}.fc2.bias"), Tensor::zeros([1]))?;
            Ok(())
        };
        add_head("disc_global".into(), &mut params)?;
        for name in classes {
            add_head(format!("disc_class.{name}"), &mut params)?;
        }
        Ok(Self {
            feature_dim,
            classes: classes.to_vec(),
            params,
        })
    }

    pub fn from_params(feature_dim: usize, classes: &[String], params: ParamSet<T>) -> Result<Self> {
        let hidden = feature_dim / 2;
        let mut prefixes = vec!["disc_global".to_string()];
        prefixes.extend(classes.iter().map(|c| format!("disc_class.{c}")));
        if params.len() != prefixes.len() * PER_HEAD {
            return Err(CoreError::Shape(format!(
                "expected {} discriminator tensors, got {}",
                prefixes.len() * PER_HEAD,
                params.len()
            )));
        }
        for (h, prefix) in prefixes.iter().enumerate() {
            let expect: [(&str, Vec<usize>); PER_HEAD] = [
                ("fc1.weight", vec![hidden, feature_dim, 1, 1]),
                ("fc1.bias", vec![hidden]),
                ("fc2.weight", vec![1, hidden, 1, 1]),
                ("fc2.bias", vec![1]),
            ];
            for (j, (suffix, shape)) in expect.iter().enumerate() {
                let p = params.get(h * PER_HEAD + j);
                let name = format!("{prefix}.{suffix}");
                if p.name != name || p.value.shape() != shape.as_slice() {
                    return Err(CoreError::Shape(format!("expected {name} {shape:?}, found {} {:?}", p.name, p.value.shape())));
                }
            }
        }
        Ok(Self {
            feature_dim,
            classes: classes.to_vec(),
            params,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Offset of a head's first tensor in [`Self::params`].
    pub fn head_offset(&self, head: Head) -> Result<usize> {
        match head {
            Head::Global => Ok(0),
            Head::Class(c) if c < self.classes.len() => Ok((1 + c) * PER_HEAD),
            Head::Class(c) => Err(CoreError::Config(format!(
                "unknown class index {c} (bank has {} heads)",
                self.classes.len()
            ))),
        }
    }

    /// Indices of a head's tensors in [`Self::params`].
    pub fn head_params(&self, head: Head) -> Result<std::ops::Range<usize>> {
        let o = self.head_offset(head)?;
        Ok(o..o + PER_HEAD)
    }

    /// Source-domain probability per grid, `[B,1,H_f,W_f]`.
    pub fn prob(&self, tape: &mut Tape<T>, bind: &Binding, features: Var, head: Head) -> Result<Var> {
        let (_, d, _, _) = tape.value(features).dims4()?;
        if d != self.feature_dim {
            return Err(CoreError::Shape(format!(
                "discriminator expects {} feature channels, got {d}",
                self.feature_dim
            )));
        }
        let o = self.head_offset(head)?;
        let unit = ConvSpec::default();
        let h = tape.conv2d(features, bind.var(o), unit)?;
        let h = tape.add_channel_bias(h, bind.var(o + 1))?;
        let h = tape.leaky_relu(h, LEAK);
        let z = tape.conv2d(h, bind.var(o + 2), unit)?;
        let z = tape.add_channel_bias(z, bind.var(o + 3))?;
        Ok(tape.sigmoid(z))
    }

    pub fn global_prob(&self, tape: &mut Tape<T>, bind: &Binding, features: Var) -> Result<Var> {
        self.prob(tape, bind, features, Head::Global)
    }

    pub fn classwise_prob(&self, tape: &mut Tape<T>, bind: &Binding, features: Var, class: usize) -> Result<Var> {
        self.prob(tape, bind, features, Head::Class(class))
    }

    pub fn classwise_prob_named(&self, tape: &mut Tape<T>, bind: &Binding, features: Var, class: &str) -> Result<Var> {
        let c = self
            .classes
            .iter()
            .position(|n| n == class)
            .ok_or_else(|| CoreError::Config(format!("unknown class {class:?}")))?;
        self.classwise_prob(tape, bind, features, c)
    }

    /// Value-only evaluation of one head.
    pub fn infer(&self, features: Tensor<T>, head: Head) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bind = self.params.bind_frozen(&mut tape);
        let f = tape.constant(features);
        let p = self.prob(&mut tape, &bind, f, head)?;
        Ok(tape.value(p).clone())
    }
}
