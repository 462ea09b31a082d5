use crate::error::{NumError, Result};
use crate::param::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-6,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adam with bias correction. Moment buffers mirror the shapes of the
/// parameter set the optimizer was created for.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_parts(config: AdamConfig, step: u64, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) -> Result<Self> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(a, b)| a.shape() != b.shape()) {
            return Err(NumError::InvalidArgument("adam moment buffers disagree in shape".into()));
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }

    /// Applies one update to every parameter, then zeroes their gradients.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(NumError::InvalidArgument(format!(
                "adam state tracks {} parameters, set has {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            match &p.grad {
                None => return Err(NumError::MissingGrad(p.name.clone())),
                Some(g) if g.shape() != p.value.shape() || self.first[i].shape() != p.value.shape() => {
                    return Err(NumError::ShapeMismatch {
                        op: "adam_step",
                        expected: format!("{:?}", p.value.shape()),
                        got: format!("{:?} for `{}`", g.shape(), p.name),
                    })
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad.as_mut().expect("checked above");
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, gv), mv), vv) in p.value.data_mut().iter_mut().zip(g.data_mut()).zip(m).zip(v) {
                let gf = gv.as_f64();
                let mf = c.beta1 * mv.as_f64() + (1.0 - c.beta1) * gf;
                let vf = c.beta2 * vv.as_f64() + (1.0 - c.beta2) * gf * gf;
                *mv = T::from_f64(mf);
                *vv = T::from_f64(vf);
                let update = c.lr * (mf / bc1) / ((vf / bc2).sqrt() + c.epsilon);
                *w = T::from_f64(w.as_f64() - update);
                *gv = T::zero();
            }
        }
        Ok(())
    }
}
