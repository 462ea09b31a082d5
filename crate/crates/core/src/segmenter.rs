//! Feature extractor (stacked, optionally dilated 3×3 convolutions) and a
//! 1×1 label head producing per-grid class logits.

use crosscity_numkit::{Binding, ConvSpec, ParamSet, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterConfig {
    pub classes: Vec<String>,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub dilations: Vec<usize>,
    pub kernel: usize,
    /// Bilinear instead of nearest upsampling in pixel predictions.
    pub bilinear: bool,
}

impl SegmenterConfig {
    /// Two stride-2 layers then two dilated layers, D = 64.
    pub fn new(classes: Vec<String>) -> Self {
        Self {
            classes,
            channels: vec![16, 32, 64, 64],
            strides: vec![2, 2, 1, 1],
            dilations: vec![1, 1, 2, 2],
            kernel: 3,
            bilinear: false,
        }
    }

    pub fn with_channels(mut self, channels: Vec<usize>) -> Self {
        self.channels = channels;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.classes.len() < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes.len()));
        }
        if self.channels.is_empty() || self.channels.len() != self.strides.len() || self.channels.len() != self.dilations.len() {
            return bad(format!(
                "channels/strides/dilations must be non-empty and equally long ({}/{}/{})",
                self.channels.len(),
                self.strides.len(),
                self.dilations.len()
            ));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) || self.dilations.contains(&0) {
            return bad("channels, strides and dilations must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel size must be odd, got {}", self.kernel));
        }
        if !self.downsample().is_power_of_two() {
            return bad(format!("downsample factor {} is not a power of two", self.downsample()));
        }
        Ok(())
    }

    fn layer_spec(&self, i: usize) -> ConvSpec {
        ConvSpec::new(self.strides[i], self.dilations[i], self.dilations[i] * (self.kernel / 2))
    }
}

/// Pixel blocks covered by each grid cell of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridGeometry {
    pub d: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl GridGeometry {
    pub fn new(height: usize, width: usize, d: usize) -> Result<Self> {
        if d == 0 || height % d != 0 || width % d != 0 || height == 0 || width == 0 {
            return Err(CoreError::Shape(format!("{height}x{width} input is not divisible by downsample factor {d}")));
        }
        Ok(Self {
            d,
            grid_h: height / d,
            grid_w: width / d,
        })
    }

    pub fn grids(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn height(&self) -> usize {
        self.grid_h * self.d
    }

    pub fn width(&self) -> usize {
        self.grid_w * self.d
    }

    /// Pixel rectangle `(y0, x0, y1, x1)` (half-open) of grid `n`.
    pub fn region(&self, n: usize) -> (usize, usize, usize, usize) {
        let (r, c) = (n / self.grid_w, n % self.grid_w);
        (r * self.d, c * self.d, (r + 1) * self.d, (c + 1) * self.d)
    }

    /// Grid index owning pixel `(y, x)`.
    #[inline]
    pub fn grid_of(&self, y: usize, x: usize) -> usize {
        (y / self.d) * self.grid_w + x / self.d
    }
}

pub struct Segmenter<T: Scalar> {
    pub config: SegmenterConfig,
    pub params: ParamSet<T>,
}

/// Variables of one forward pass.
pub struct SegOutput {
    pub features: Var,
    pub logits: Var,
}

impl<T: Scalar> Segmenter<T> {
    pub fn new<R: Rng + ?Sized>(config: SegmenterConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let k = config.kernel;
        let mut c_in = 3;
        for (i, &c_out) in config.channels.iter().enumerate() {
            let fan_in = (c_in * k * k) as f64;
            let limit = (6.0 / fan_in).sqrt();
            params.push(format!("features.conv{i}.weight"), Tensor::uniform([c_out, c_in, k, k], -limit, limit, rng))?;
            params.push(format!("features.conv{i}.bias"), Tensor::zeros([c_out]))?;
            c_in = c_out;
        }
        let nc = config.num_classes();
        let limit = (6.0 / (c_in + nc) as f64).sqrt();
        params.push("classifier.weight", Tensor::uniform([nc, c_in, 1, 1], -limit, limit, rng))?;
        params.push("classifier.bias", Tensor::zeros([nc]))?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: SegmenterConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let mut expect = Vec::new();
        let mut c_in = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            expect.push((format!("features.conv{i}.weight"), vec![c, c_in, config.kernel, config.kernel]));
            expect.push((format!("features.conv{i}.bias"), vec![c]));
            c_in = c;
        }
        expect.push(("classifier.weight".into(), vec![config.num_classes(), c_in, 1, 1]));
        expect.push(("classifier.bias".into(), vec![config.num_classes()]));
        if params.len() != expect.len() {
            return Err(CoreError::Shape(format!("expected {} segmenter tensors, got {}", expect.len(), params.len())));
        }
        for (i, (name, shape)) in expect.iter().enumerate() {
            let p = params.get(i);
            if &p.name != name || p.value.shape() != shape.as_slice() {
                return Err(CoreError::Shape(format!(
                    "parameter {i}: expected {name} {shape:?}, found {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<GridGeometry> {
        GridGeometry::new(height, width, self.config.downsample())
    }

    fn check_input(&self, tape: &Tape<T>, images: Var) -> Result<GridGeometry> {
        let (_, c, h, w) = tape.value(images).dims4()?;
        if c != 3 {
            return Err(CoreError::Shape(format!("expected 3 input channels, got {c}")));
        }
        self.geometry(h, w)
    }

    /// `M_F`: images `[B,3,H,W]` → features `[B,D,H/d,W/d]`.
    pub fn extract_features(&self, tape: &mut Tape<T>, bind: &Binding, images: Var) -> Result<Var> {
        let geom = self.check_input(tape, images)?;
        let mut x = images;
        for i in 0..self.config.channels.len() {
            x = tape.conv2d(x, bind.var(2 * i), self.config.layer_spec(i))?;
            x = tape.add_channel_bias(x, bind.var(2 * i + 1))?;
            x = tape.relu(x);
        }
        let (_, _, fh, fw) = tape.value(x).dims4()?;
        if (fh, fw) != (geom.grid_h, geom.grid_w) {
            return Err(CoreError::Shape(format!(
                "feature map {fh}x{fw} does not match grid {}x{}",
                geom.grid_h, geom.grid_w
            )));
        }
        Ok(x)
    }

    /// `M_Y`: features → per-grid logits `[B,|C|,H_f,W_f]`.
    pub fn predict_labels(&self, tape: &mut Tape<T>, bind: &Binding, features: Var) -> Result<Var> {
        let (_, d, _, _) = tape.value(features).dims4()?;
        if d != self.config.feature_dim() {
            return Err(CoreError::Shape(format!(
                "feature dimension {d} does not match head input {}",
                self.config.feature_dim()
            )));
        }
        let n = self.config.channels.len();
        let z = tape.conv2d(features, bind.var(2 * n), ConvSpec::default())?;
        Ok(tape.add_channel_bias(z, bind.var(2 * n + 1))?)
    }

    pub fn forward(&self, tape: &mut Tape<T>, bind: &Binding, images: Var) -> Result<SegOutput> {
        let features = self.extract_features(tape, bind, images)?;
        let logits = self.predict_labels(tape, bind, features)?;
        Ok(SegOutput { features, logits })
    }

    /// Grid logits upsampled to pixels, before the softmax.
    pub fn pixel_logits(&self, tape: &mut Tape<T>, logits: Var) -> Result<Var> {
        let d = self.config.downsample();
        Ok(if self.config.bilinear {
            tape.upsample_bilinear(logits, d)?
        } else {
            tape.upsample_nearest(logits, d)?
        })
    }

    /// `φ = softmax(upsample(logits))`, shape `[B,|C|,H,W]`.
    pub fn pixel_predictions(&self, tape: &mut Tape<T>, logits: Var) -> Result<Var> {
        let up = self.pixel_logits(tape, logits)?;
        Ok(tape.softmax_channels(up)?)
    }

    /// Mean pixel cross-entropy against `labels` (`[B,H,W]`, 255 ignored).
    pub fn task_loss(&self, tape: &mut Tape<T>, logits: Var, labels: &[u8]) -> Result<Var> {
        let up = self.pixel_logits(tape, logits)?;
        Ok(tape.softmax_cross_entropy(up, labels, 255)?)
    }

    /// Inference-only pass returning features and grid logits as values.
    pub fn infer(&self, images: Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let bind = self.params.bind_frozen(&mut tape);
        let x = tape.constant(images);
        let out = self.forward(&mut tape, &bind, x)?;
        Ok((tape.value(out.features).clone(), tape.value(out.logits).clone()))
    }

    /// Pixel class distributions for a batch, `[B,|C|,H,W]`.
    pub fn predict_pixels(&self, images: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bind = self.params.bind_frozen(&mut tape);
        let x = tape.constant(images);
        let out = self.forward(&mut tape, &bind, x)?;
        let phi = self.pixel_predictions(&mut tape, out.logits)?;
        Ok(tape.value(phi).clone())
    }

    /// Hard pixel labels (argmax of the grid logits replicated over each block).
    pub fn predict_label_map(&self, images: Tensor<T>) -> Result<Vec<Vec<u8>>> {
        let (b, _, h, w) = images.dims4()?;
        let geom = self.geometry(h, w)?;
        if self.config.bilinear {
            let phi = self.predict_pixels(images)?;
            let nc = self.config.num_classes();
            let hw = h * w;
            return Ok((0..b)
                .map(|bi| {
                    let p = &phi.data()[bi * nc * hw..(bi + 1) * nc * hw];
                    (0..hw)
                        .map(|i| (0..nc).fold(0, |best, c| if p[c * hw + i] > p[best * hw + i] { c } else { best }) as u8)
                        .collect()
                })
                .collect());
        }
        let (_, logits) = self.infer(images)?;
        let nc = self.config.num_classes();
        let gn = geom.grids();
        let mut out = Vec::with_capacity(b);
        for bi in 0..b {
            let l = &logits.data()[bi * nc * gn..(bi + 1) * nc * gn];
            let grid_label: Vec<u8> = (0..gn)
                .map(|n| {
                    let mut best = 0;
                    for c in 1..nc {
                        if l[c * gn + n] > l[best * gn + n] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            let mut map = vec![0u8; h * w];
            for y in 0..h {
                for x in 0..w {
                    map[y * w + x] = grid_label[geom.grid_of(y, x)];
                }
            }
            out.push(map);
        }
        Ok(out)
    }
}
