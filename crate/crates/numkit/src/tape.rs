use crate::error::{shape_err, NumError, Result};
use crate::kernels::{self, conv_output_len, ConvGeom, ConvSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability clamp applied by [`Tape::log_loss`].
pub const CLAMP_EPS: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which log-likelihood term [`Tape::log_loss`] evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogSide {
    /// `−Σ w·log p`
    Positive,
    /// `−Σ w·log(1 − p)`
    Negative,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        spec: ConvSpec,
    },
    AddBias {
        input: Var,
        bias: Var,
    },
    Relu(Var),
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Sigmoid(Var),
    Softmax(Var),
    UpsampleNearest {
        input: Var,
        factor: usize,
    },
    UpsampleBilinear {
        input: Var,
        factor: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<u8>,
        ignore: u8,
        probs: Vec<T>,
        count: usize,
    },
    LogLoss {
        input: Var,
        weights: Vec<T>,
        side: LogSide,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// Values are computed eagerly when an operation is recorded. A single call to
/// [`Tape::backward`] replays the record in reverse; afterwards the tape is
/// consumed and rejects further backward passes.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass.
///
/// Holds `∂loss/∂leaf` for every leaf recorded with `requires_grad`; leaves off
/// the loss path get an all-zero gradient.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Non-leaf operations in the order their backward rules ran.
    pub fn visit_order(&self) -> &[Var] {
        &self.visited
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// 2-D convolution of `[B,C_in,H,W]` with `[C_out,C_in,kh,kw]`, zero padded.
    pub fn conv2d(&mut self, input: Var, kernel: Var, spec: ConvSpec) -> Result<Var> {
        let (b, c_in, h, w) = self.value(input).dims4()?;
        let (c_out, kc, kh, kw) = self
            .value(kernel)
            .dims4()
            .map_err(|_| shape_err("conv2d", "kernel [C_out,C_in,kh,kw]", self.value(kernel).shape()))?;
        if kc != c_in {
            return Err(shape_err(
                "conv2d",
                format!("kernel with C_in={c_in}"),
                self.value(kernel).shape(),
            ));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(NumError::InvalidArgument(format!(
                "conv2d: stride and dilation must be >= 1, got {spec:?}"
            )));
        }
        let (Some(ho), Some(wo)) = (conv_output_len(h, kh, spec), conv_output_len(w, kw, spec)) else {
            return Err(shape_err(
                "conv2d",
                format!("input large enough for a {kh}x{kw} window under {spec:?}"),
                self.value(input).shape(),
            ));
        };
        let geom = ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            spec,
        };
        let out = kernels::conv_forward(self.value(input).data(), self.value(kernel).data(), b, c_out, &geom);
        let value = Tensor::from_vec(vec![b, c_out, ho, wo], out)?;
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(value, Op::Conv2d { input, kernel, spec }, rg))
    }

    /// Adds a per-channel bias `[C]` to `[B,C,H,W]`.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if self.value(bias).shape() != [c] {
            return Err(shape_err("add_channel_bias", format!("[{c}]"), self.value(bias).shape()));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(input).data().to_vec();
        let hw = h * w;
        for bi in 0..b {
            for (ci, &bc) in bv.iter().enumerate() {
                let base = (bi * c + ci) * hw;
                out[base..base + hw].iter_mut().for_each(|x| *x = *x + bc);
            }
        }
        let value = Tensor::from_vec(vec![b, c, h, w], out)?;
        let rg = self.any_grad(&[input, bias]);
        Ok(self.push(value, Op::AddBias { input, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let slope = T::from_f64(slope);
        let value = self.value(input).map(|x| if x > T::zero() { x } else { slope * x });
        let rg = self.any_grad(&[input]);
        self.push(value, Op::LeakyRelu { input, slope }, rg)
    }

    /// Elementwise logistic function, stable for large `|x|`.
    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(kernels::sigmoid);
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Sigmoid(input), rg)
    }

    /// Softmax across the channel axis of `[B,C,H,W]`.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4()?;
        if c == 0 {
            return Err(shape_err("softmax_channels", "C >= 1", x.shape()));
        }
        if let Some(index) = x.data().iter().position(|v| !v.is_finite()) {
            return Err(NumError::NonFinite {
                op: "softmax_channels",
                index,
            });
        }
        let out = softmax_planes(x.data(), b, c, h * w);
        let value = Tensor::from_vec(vec![b, c, h, w], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Softmax(input), rg))
    }

    /// Nearest-neighbour upsampling: every input cell becomes a `factor×factor` block.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if factor == 0 {
            return Err(NumError::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let (ho, wo) = (h * factor, w * factor);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        for plane in x.chunks_exact(h * w) {
            for y in 0..ho {
                let row = &plane[(y / factor) * w..(y / factor + 1) * w];
                for xo in 0..wo {
                    out.push(row[xo / factor]);
                }
            }
        }
        let value = Tensor::from_vec(vec![b, c, ho, wo], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::UpsampleNearest { input, factor }, rg))
    }

    /// Bilinear upsampling with half-pixel centres and clamped edges.
    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if factor == 0 {
            return Err(NumError::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let (ho, wo) = (h * factor, w * factor);
        let ty = kernels::bilinear_taps(ho, h, factor);
        let tx = kernels::bilinear_taps(wo, w, factor);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        for plane in x.chunks_exact(h * w) {
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let fy = T::from_f64(fy);
                    let fx = T::from_f64(fx);
                    let one = T::one();
                    let top = plane[y0 * w + x0] * (one - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (one - fx) + plane[y1 * w + x1] * fx;
                    out.push(top * (one - fy) + bot * fy);
                }
            }
        }
        let value = Tensor::from_vec(vec![b, c, ho, wo], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::UpsampleBilinear { input, factor }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let s = T::from_f64(factor);
        let value = self.value(input).map(|x| x * s);
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Scale(input, s), rg)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Sum(input), rg)
    }

    /// Mean per-pixel cross-entropy between `softmax(logits)` and integer labels.
    ///
    /// `labels` is laid out `[B,H,W]`; pixels equal to `ignore` are skipped. With
    /// nothing left to score the loss is 0 and so is its gradient.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let x = self.value(logits);
        let (b, c, h, w) = x.dims4()?;
        let hw = h * w;
        if labels.len() != b * hw {
            return Err(NumError::ShapeMismatch {
                op: "softmax_cross_entropy",
                expected: format!("{} labels for logits {:?}", b * hw, x.shape()),
                got: format!("{} labels", labels.len()),
            });
        }
        if let Some(i) = labels.iter().position(|&l| l != ignore && l as usize >= c) {
            return Err(NumError::InvalidArgument(format!(
                "label {} at pixel {i} is outside [0,{c}) and is not the ignore value {ignore}",
                labels[i]
            )));
        }
        let probs = softmax_planes(x.data(), b, c, hw);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for bi in 0..b {
            for p in 0..hw {
                let l = labels[bi * hw + p];
                if l == ignore {
                    continue;
                }
                let logit_row = |k: usize| x.data()[(bi * c + k) * hw + p];
                let max = (0..c).map(logit_row).fold(T::neg_infinity(), T::max);
                let lse = (0..c).map(|k| (logit_row(k) - max).exp()).sum::<T>().ln() + max;
                total += (lse - logit_row(l as usize)).as_f64();
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Weighted binary log-likelihood of probabilities, summed to a scalar.
    ///
    /// Probabilities are clamped into `[ε, 1−ε]` with `ε =` [`CLAMP_EPS`]; clamped
    /// entries carry no gradient. Returns the loss together with the number of
    /// clamped entries that had non-zero weight.
    pub fn log_loss(&mut self, input: Var, weights: Vec<T>, side: LogSide) -> Result<(Var, usize)> {
        let p = self.value(input);
        if weights.len() != p.len() {
            return Err(NumError::ShapeMismatch {
                op: "log_loss",
                expected: format!("{} weights", p.len()),
                got: format!("{} weights", weights.len()),
            });
        }
        let eps = T::from_f64(CLAMP_EPS);
        let hi = T::one() - eps;
        let mut total = T::zero();
        let mut clamps = 0;
        for (&pv, &wv) in p.data().iter().zip(&weights) {
            if wv == T::zero() {
                continue;
            }
            if !(pv >= eps && pv <= hi) {
                clamps += 1;
            }
            let q = pv.max(eps).min(hi);
            let term = match side {
                LogSide::Positive => q.ln(),
                LogSide::Negative => (T::one() - q).ln(),
            };
            total = total - wv * term;
        }
        let rg = self.any_grad(&[input]);
        let v = self.push(Tensor::scalar(total), Op::LogLoss { input, weights, side }, rg);
        Ok((v, clamps))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(op, format!("{:?}", self.value(a).shape()), self.value(b).shape()));
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar `loss`, consuming the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(NumError::TapeConsumed);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(NumError::NonScalarLoss(loss_shape));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut visited = Vec::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited.push(Var(idx));
            self.apply_rule(idx, g, &mut grads)?;
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match grads[v.0].as_mut() {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(&g) {
                    *e = *e + *x;
                }
            }
            None => grads[v.0] = Some(Tensor::from_vec(self.nodes[v.0].value.shape().to_vec(), g)?),
        }
        Ok(())
    }

    fn apply_rule(&self, idx: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, spec } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let (b, c_in, h, w) = x.dims4()?;
                let (c_out, _, kh, kw) = k.dims4()?;
                let (_, _, ho, wo) = node.value.dims4()?;
                let geom = ConvGeom {
                    c_in,
                    h,
                    w,
                    kh,
                    kw,
                    ho,
                    wo,
                    spec: *spec,
                };
                let (di, dk) = kernels::conv_backward(
                    x.data(),
                    k.data(),
                    gd,
                    b,
                    c_out,
                    &geom,
                    self.requires_grad(*input),
                    self.requires_grad(*kernel),
                );
                if let Some(di) = di {
                    self.accumulate(grads, *input, di)?;
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *kernel, dk)?;
                }
            }
            Op::AddBias { input, bias } => {
                let (b, c, h, w) = node.value.dims4()?;
                if self.requires_grad(*bias) {
                    let hw = h * w;
                    let mut db = vec![T::zero(); c];
                    for bi in 0..b {
                        for (ci, acc) in db.iter_mut().enumerate() {
                            let base = (bi * c + ci) * hw;
                            *acc = gd[base..base + hw].iter().fold(*acc, |s, &v| s + v);
                        }
                    }
                    self.accumulate(grads, *bias, db)?;
                }
                self.accumulate(grads, *input, gd.to_vec())?;
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let d = zip_map(x, gd, |xv, gv| if xv > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *input, d)?;
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input).data();
                let d = zip_map(x, gd, |xv, gv| if xv > T::zero() { gv } else { *slope * gv });
                self.accumulate(grads, *input, d)?;
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                let d = zip_map(y, gd, |yv, gv| gv * yv * (T::one() - yv));
                self.accumulate(grads, *input, d)?;
            }
            Op::Softmax(input) => {
                let (b, c, h, w) = node.value.dims4()?;
                let d = softmax_backward(node.value.data(), gd, b, c, h * w);
                self.accumulate(grads, *input, d)?;
            }
            Op::UpsampleNearest { input, factor } => {
                let (b, c, h, w) = self.value(*input).dims4()?;
                let wo = w * factor;
                let mut d = vec![T::zero(); b * c * h * w];
                for (plane_idx, plane) in gd.chunks_exact(h * factor * wo).enumerate() {
                    let dst = &mut d[plane_idx * h * w..(plane_idx + 1) * h * w];
                    for (y, row) in plane.chunks_exact(wo).enumerate() {
                        for (x, &v) in row.iter().enumerate() {
                            let t = &mut dst[(y / factor) * w + x / factor];
                            *t = *t + v;
                        }
                    }
                }
                self.accumulate(grads, *input, d)?;
            }
            Op::UpsampleBilinear { input, factor } => {
                let (b, c, h, w) = self.value(*input).dims4()?;
                let (ho, wo) = (h * factor, w * factor);
                let ty = kernels::bilinear_taps(ho, h, *factor);
                let tx = kernels::bilinear_taps(wo, w, *factor);
                let mut d = vec![T::zero(); b * c * h * w];
                for (plane_idx, plane) in gd.chunks_exact(ho * wo).enumerate() {
                    let dst = &mut d[plane_idx * h * w..(plane_idx + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = plane[oy * wo + ox];
                            let (fy, fx) = (T::from_f64(fy), T::from_f64(fx));
                            let one = T::one();
                            for (pos, wgt) in [
                                (y0 * w + x0, (one - fy) * (one - fx)),
                                (y0 * w + x1, (one - fy) * fx),
                                (y1 * w + x0, fy * (one - fx)),
                                (y1 * w + x1, fy * fx),
                            ] {
                                dst[pos] = dst[pos] + gv * wgt;
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, d)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec())?;
                self.accumulate(grads, *b, gd.to_vec())?;
            }
            Op::Mul(a, b) => {
                let da = zip_map(self.value(*b).data(), gd, |bv, gv| bv * gv);
                let db = zip_map(self.value(*a).data(), gd, |av, gv| av * gv);
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Scale(input, s) => {
                let d = gd.iter().map(|&v| v * *s).collect();
                self.accumulate(grads, *input, d)?;
            }
            Op::Sum(input) => {
                let n = self.value(*input).len();
                self.accumulate(grads, *input, vec![gd[0]; n])?;
            }
            Op::SoftmaxCe {
                logits,
                labels,
                ignore,
                probs,
                count,
            } => {
                let (b, c, h, w) = self.value(*logits).dims4()?;
                let hw = h * w;
                let mut d = vec![T::zero(); b * c * hw];
                if *count > 0 {
                    let scale = gd[0] / T::from_f64(*count as f64);
                    for bi in 0..b {
                        for p in 0..hw {
                            let l = labels[bi * hw + p];
                            if l == *ignore {
                                continue;
                            }
                            for k in 0..c {
                                let i = (bi * c + k) * hw + p;
                                let target = if k == l as usize { T::one() } else { T::zero() };
                                d[i] = (probs[i] - target) * scale;
                            }
                        }
                    }
                }
                self.accumulate(grads, *logits, d)?;
            }
            Op::LogLoss { input, weights, side } => {
                let eps = T::from_f64(CLAMP_EPS);
                let hi = T::one() - eps;
                let p = self.value(*input).data();
                let d = p
                    .iter()
                    .zip(weights)
                    .map(|(&pv, &wv)| {
                        if wv == T::zero() || !(pv >= eps && pv <= hi) {
                            return T::zero();
                        }
                        gd[0]
                            * match side {
                                LogSide::Positive => -wv / pv,
                                LogSide::Negative => wv / (T::one() - pv),
                            }
                    })
                    .collect();
                self.accumulate(grads, *input, d)?;
            }
        }
        Ok(())
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn softmax_planes<T: Scalar>(x: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let max = (0..c).map(|k| x[base + k * hw + p]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..c {
                let e = (x[base + k * hw + p] - max).exp();
                out[base + k * hw + p] = e;
                total = total + e;
            }
            for k in 0..c {
                let i = base + k * hw + p;
                out[i] = out[i] / total;
            }
        }
    }
    out
}

fn softmax_backward<T: Scalar>(y: &[T], g: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut d = vec![T::zero(); y.len()];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let dot = (0..c).fold(T::zero(), |s, k| s + y[base + k * hw + p] * g[base + k * hw + p]);
            for k in 0..c {
                let i = base + k * hw + p;
                d[i] = y[i] * (g[i] - dot);
            }
        }
    }
    d
}
