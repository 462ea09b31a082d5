//! Shared oracles and fixtures for the integration tests and the acceptance run.
#![allow(dead_code)]

use crosscity_core::data::{SourceSet, TargetSet};
use crosscity_core::losses::{
    classwise_d_loss, classwise_inv_loss, classwise_probs, global_d_loss, global_inv_loss, grid_soft_labels_source,
    grid_soft_labels_target, normalize_soft_labels, total_loss, LossWeights, SoftLabelGrid,
};
use crosscity_core::{Discriminators, Segmenter, SegmenterConfig, TrainConfig};
use crosscity_forge::{generate_pair, generate_scene, ClassSet, SceneSample, SceneSpec, Style};
use crosscity_numkit::{Binding, ConvSpec, LogSide, ParamSet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_H: f64 = 1e-5;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Relative error with an absolute floor so near-zero gradients do not blow up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Worst relative error between autodiff and central differences for a loss
/// built from leaf inputs.
pub fn fd_check<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |vals: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = vals.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).item().unwrap()
    };
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap();
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Weighted sum of an arbitrary output so each element gets its own gradient.
pub fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(v).shape().to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let m = tape.mul(v, w).unwrap();
    tape.sum(m)
}

/// Worst finite-difference error of each differentiable tape op over `trials` inputs.
pub fn op_gradchecks(trials: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut out = Vec::new();
    let mut record = |name: &'static str, errs: Vec<f64>| out.push((name, errs.into_iter().fold(0.0, f64::max)));

    record(
        "conv2d",
        (0..trials)
            .map(|t| {
                let spec = ConvSpec::new(1 + (t % 2) as usize, 1 + (t / 2 % 2) as usize, (t / 4 % 2) as usize);
                let x = rand_tensor(&mut rng, &[2, 2, 6, 5], -1.0, 1.0);
                let k = rand_tensor(&mut rng, &[3, 2, 3, 2], -1.0, 1.0);
                fd_check(&[x, k], |tp, v| {
                    let y = tp.conv2d(v[0], v[1], spec).unwrap();
                    project(tp, y, t)
                })
            })
            .collect(),
    );
    record(
        "add_channel_bias+relu+leaky_relu+add",
        (0..trials)
            .map(|t| {
                let mut x = rand_tensor(&mut rng, &[2, 3, 2, 2], 0.05, 1.0);
                x.data_mut().iter_mut().step_by(3).for_each(|v| *v = -*v);
                let b = rand_tensor(&mut rng, &[3], -0.01, 0.01);
                fd_check(&[x, b], |tp, v| {
                    let y = tp.add_channel_bias(v[0], v[1]).unwrap();
                    let r = tp.relu(y);
                    let l = tp.leaky_relu(y, 0.2);
                    let s = tp.add(r, l).unwrap();
                    project(tp, s, t)
                })
            })
            .collect(),
    );
    record(
        "sigmoid+scale",
        (0..trials)
            .map(|t| {
                let x = rand_tensor(&mut rng, &[7], -6.0, 6.0);
                fd_check(&[x], |tp, v| {
                    let y = tp.sigmoid(v[0]);
                    let y = tp.scale(y, 1.7);
                    project(tp, y, t)
                })
            })
            .collect(),
    );
    record(
        "softmax_channels",
        (0..trials)
            .map(|t| {
                let x = rand_tensor(&mut rng, &[2, 4, 2, 3], -3.0, 3.0);
                fd_check(&[x], |tp, v| {
                    let y = tp.softmax_channels(v[0]).unwrap();
                    project(tp, y, t)
                })
            })
            .collect(),
    );
    record(
        "upsample_nearest+upsample_bilinear",
        (0..trials)
            .map(|t| {
                let x = rand_tensor(&mut rng, &[1, 2, 3, 2], -1.0, 1.0);
                fd_check(&[x], |tp, v| {
                    let a = tp.upsample_nearest(v[0], 2).unwrap();
                    let b = tp.upsample_bilinear(v[0], 2).unwrap();
                    let s = tp.add(a, b).unwrap();
                    project(tp, s, t)
                })
            })
            .collect(),
    );
    record(
        "mul+sum",
        (0..trials)
            .map(|_| {
                let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
                let b = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
                fd_check(&[a, b], |tp, v| {
                    let m = tp.mul(v[0], v[1]).unwrap();
                    tp.sum(m)
                })
            })
            .collect(),
    );
    record(
        "softmax_cross_entropy",
        (0..trials)
            .map(|_| {
                let x = rand_tensor(&mut rng, &[2, 3, 2, 2], -2.0, 2.0);
                let labels: Vec<u8> = (0..8).map(|i| if i == 3 { 255 } else { rng.gen_range(0..3) }).collect();
                fd_check(&[x], |tp, v| tp.softmax_cross_entropy(v[0], &labels, 255).unwrap())
            })
            .collect(),
    );
    record(
        "log_loss",
        (0..trials)
            .map(|_| {
                let p = rand_tensor(&mut rng, &[6], 0.05, 0.95);
                let w: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
                fd_check(&[p], |tp, v| {
                    let (a, _) = tp.log_loss(v[0], w.clone(), LogSide::Positive).unwrap();
                    let (b, _) = tp.log_loss(v[0], w.clone(), LogSide::Negative).unwrap();
                    let b = tp.scale(b, 0.7);
                    tp.add(a, b).unwrap()
                })
            })
            .collect(),
    );
    out
}

/// Fixed inputs of the composite adaptation objective.
pub struct CompositeCase {
    pub seg: Segmenter<f64>,
    pub disc: Discriminators<f64>,
    pub xs: Tensor<f64>,
    pub xt: Tensor<f64>,
    pub labels: Vec<u8>,
    pub src: SoftLabelGrid<f64>,
    pub tgt: SoftLabelGrid<f64>,
    pub weights: LossWeights,
}

pub fn composite_case(seed: u64) -> CompositeCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = ["road", "car", "sky"].iter().map(|s| s.to_string()).collect();
    let mut cfg = SegmenterConfig::new(names.clone());
    cfg.channels = vec![3, 4];
    cfg.strides = vec![2, 2];
    cfg.dilations = vec![1, 2];
    let mut seg = Segmenter::<f64>::new(cfg, &mut rng).unwrap();
    let mut disc = Discriminators::<f64>::new(4, &names, &mut rng).unwrap();
    for p in seg.params.iter_mut().chain(disc.params.iter_mut()) {
        p.value = rand_tensor(&mut rng, &p.value.shape().to_vec(), -0.6, 0.6);
    }
    let xs = rand_tensor(&mut rng, &[1, 3, 8, 8], -1.0, 1.0);
    let xt = rand_tensor(&mut rng, &[1, 3, 8, 8], -1.0, 1.0);
    let labels: Vec<u8> = (0..64).map(|_| rng.gen_range(0..3)).collect();
    let geom = seg.geometry(8, 8).unwrap();
    let src = normalize_soft_labels(grid_soft_labels_source::<f64>(&labels, 1, &geom, 3).unwrap());
    let raw: Vec<f64> = (0..3 * 64).map(|_| rng.gen_range(0.05..1.0)).collect();
    let mut pseudo = raw.clone();
    for i in 0..64 {
        let z: f64 = (0..3).map(|c| raw[c * 64 + i]).sum();
        (0..3).for_each(|c| pseudo[c * 64 + i] = raw[c * 64 + i] / z);
    }
    let tgt = normalize_soft_labels(grid_soft_labels_target(&Tensor::from_vec(vec![1, 3, 8, 8], pseudo).unwrap(), &geom).unwrap());
    CompositeCase {
        seg,
        disc,
        xs,
        xt,
        labels,
        src,
        tgt,
        weights: LossWeights {
            lambda_g: 0.1,
            lambda_class: 0.5,
        },
    }
}

/// `L_task + λ_G(L_G^D + L_G^Dinv) + λ_class(L_class^D + L_class^Dinv)`.
pub fn composite_loss(c: &CompositeCase, seg: &ParamSet<f64>, disc: &ParamSet<f64>, tape: &mut Tape<f64>, train: bool) -> (Var, Binding, Binding) {
    let (sb, db) = if train { (seg.bind(tape), disc.bind(tape)) } else { (seg.bind_frozen(tape), disc.bind_frozen(tape)) };
    let xs = tape.constant(c.xs.clone());
    let xt = tape.constant(c.xt.clone());
    let os = c.seg.forward(tape, &sb, xs).unwrap();
    let ot = c.seg.forward(tape, &sb, xt).unwrap();
    let task = c.seg.task_loss(tape, os.logits, &c.labels).unwrap();
    let ps = c.disc.global_prob(tape, &db, os.features).unwrap();
    let pt = c.disc.global_prob(tape, &db, ot.features).unwrap();
    let gd = global_d_loss(tape, ps, pt).unwrap();
    let gi = global_inv_loss(tape, ps, pt).unwrap();
    let g = tape.add(gd.var, gi.var).unwrap();
    let probs = classwise_probs(tape, &c.disc, &db, os.features, ot.features, &c.src, &c.tgt).unwrap();
    let cd = classwise_d_loss(tape, &probs, &c.src, &c.tgt).unwrap().unwrap();
    let ci = classwise_inv_loss(tape, &probs, &c.src, &c.tgt).unwrap().unwrap();
    let cl = tape.add(cd.var, ci.var).unwrap();
    (total_loss(tape, task, Some(g), Some(cl), c.weights).unwrap(), sb, db)
}

/// Worst relative error over every segmenter and discriminator parameter.
pub fn composite_gradcheck(seed: u64) -> f64 {
    let c = composite_case(seed);
    let mut tape = Tape::new();
    let (loss, sb, db) = composite_loss(&c, &c.seg.params, &c.disc.params, &mut tape, true);
    let grads = tape.backward(loss).unwrap();
    let value = |seg: &ParamSet<f64>, disc: &ParamSet<f64>| {
        let mut t = Tape::new();
        let (l, _, _) = composite_loss(&c, seg, disc, &mut t, false);
        t.value(l).item().unwrap()
    };
    let mut worst = 0.0f64;
    for which in 0..2 {
        let (set, bind) = if which == 0 { (&c.seg.params, &sb) } else { (&c.disc.params, &db) };
        for i in 0..set.len() {
            let analytic = grads.get(bind.var(i)).cloned().unwrap_or_else(|| Tensor::zeros(set.get(i).value.shape().to_vec()));
            for j in 0..set.get(i).value.len() {
                let mut plus = set.clone();
                plus.get_mut(i).value.data_mut()[j] += FD_H;
                let mut minus = set.clone();
                minus.get_mut(i).value.data_mut()[j] -= FD_H;
                let numeric = if which == 0 {
                    (value(&plus, &c.disc.params) - value(&minus, &c.disc.params)) / (2.0 * FD_H)
                } else {
                    (value(&c.seg.params, &plus) - value(&c.seg.params, &minus)) / (2.0 * FD_H)
                };
                worst = worst.max(rel_err(analytic.data()[j], numeric));
            }
        }
    }
    worst
}

/// Two-channel features and a global head reading channel 0 minus channel 1,
/// tuned so source features give p = 0.999 and target features p = 0.001.
pub fn separating_bank() -> (Discriminators<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut d = Discriminators::<f64>::new(2, &["a".to_string(), "b".to_string()], &mut rng).unwrap();
    let logit = (0.999f64 / 0.001).ln();
    // h = f0 − f1 is +1 for source and −1 (→ −0.2 after the leak) for target
    let w = 2.0 * logit / 1.2;
    let b = logit - w;
    d.params.get_mut(0).value = Tensor::from_vec(vec![1, 2, 1, 1], vec![1.0, -1.0]).unwrap();
    d.params.get_mut(1).value = Tensor::zeros([1]);
    d.params.get_mut(2).value = Tensor::from_vec(vec![1, 1, 1, 1], vec![w]).unwrap();
    d.params.get_mut(3).value = Tensor::from_vec(vec![1], vec![b]).unwrap();
    let plane = |c0: f64, c1: f64| {
        let mut v = vec![c0; 8];
        v.extend(vec![c1; 8]);
        Tensor::from_vec(vec![2, 2, 2, 2], reorder(v)).unwrap()
    };
    (d, plane(1.0, 0.0), plane(0.0, 1.0))
}

/// `[C][B·H·W]` → `[B][C][H·W]` for two images of 2×2 grids.
fn reorder(v: Vec<f64>) -> Vec<f64> {
    let mut out = vec![0.0; 16];
    for c in 0..2 {
        for b in 0..2 {
            for i in 0..4 {
                out[(b * 2 + c) * 4 + i] = v[c * 8 + b * 4 + i];
            }
        }
    }
    out
}

pub fn class_names() -> Vec<String> {
    ClassSet::default_six().names().to_vec()
}

pub fn source_scenes(seed: u64, n: usize, size: u32) -> Vec<SceneSample> {
    (0..n as u64).map(|i| generate_scene(&SceneSpec::new(seed.wrapping_mul(1_000_003).wrapping_add(i), Style::Source).with_size(size, size))).collect()
}

pub fn target_pairs(seed: u64, n: usize, size: u32) -> Vec<SceneSample> {
    (0..n as u64)
        .map(|i| generate_pair(&SceneSpec::new(seed.wrapping_mul(1_000_003).wrapping_add(500_000 + i), Style::Target).with_size(size, size)))
        .collect()
}

pub fn target_scenes(seed: u64, n: usize, size: u32) -> Vec<SceneSample> {
    (0..n as u64)
        .map(|i| generate_scene(&SceneSpec::new(seed.wrapping_mul(1_000_003).wrapping_add(900_000 + i), Style::Target).with_size(size, size)))
        .collect()
}

/// Small sets and a tiny configuration for fast trainer tests.
pub fn tiny_setup(seed: u64) -> (SourceSet, TargetSet, TrainConfig) {
    let source = SourceSet::from_scenes(&source_scenes(seed, 8, 32)).unwrap();
    let target = TargetSet::from_scenes(&target_pairs(seed, 8, 32)).unwrap();
    let cfg = TrainConfig::default()
        .apply(&format!(
            "channels = 4,6,8,8\nbatch_size = 2\nlr = 1e-3\npretrain_steps = 5\nsteps = 6\nramp_g_steps = 2\nramp_class_steps = 2\nsuperpixels = 16\nseed = {seed}\n"
        ))
        .unwrap();
    (source, target, cfg)
}

pub fn tiny_segmenter(cfg: &TrainConfig) -> Segmenter<f32> {
    Segmenter::new(cfg.segmenter(class_names()), &mut crosscity_core::trainer::init_rng(cfg.seed)).unwrap()
}

pub fn params_bits<T: crosscity_numkit::Scalar>(set: &ParamSet<T>) -> Vec<(String, Vec<u64>)> {
    set.iter().map(|p| (p.name.clone(), p.value.data().iter().map(|v| v.as_f64().to_bits()).collect())).collect()
}
