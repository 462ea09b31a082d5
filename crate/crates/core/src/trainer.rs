//! Source pre-training and adversarial adaptation.
//!
//! One adaptation step samples a source and a target mini-batch, runs the
//! segmenter on both, then
//! 1. updates the discriminators on `L_G^D + L_class^D` with the features
//!    held fixed, and
//! 2. updates the segmenter on `L_task + λ_G·L_G^Dinv + λ_class·L_class^Dinv`
//!    with the (just updated) discriminators held fixed.
//!
//! Target images enter only through [`TargetSet`], which has no labels.

use std::fmt;
use std::fs;
use std::path::Path;

use crosscity_numkit::{io, Adam, AdamConfig, Tape, Tensor};
use crosscity_prior::{refine_pseudo_labels, RefineStats, StaticClassSet};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::TrainConfig;
use crate::data::{batch_images, SourceSet, TargetSet};
use crate::discriminators::Discriminators;
use crate::losses::{
    classwise_d_loss, classwise_inv_loss, classwise_probs, global_d_loss, global_inv_loss, grid_soft_labels_source,
    grid_soft_labels_target, normalize_soft_labels, total_loss, LossTerm, LossWeights, SoftLabelGrid,
};
use crate::segmenter::Segmenter;
use crate::{io_err, CoreError, Elem, Result};

const LANE_INIT: u64 = 1;
const LANE_DISC: u64 = 2;
const LANE_SOURCE: u64 = 3;
const LANE_TARGET: u64 = 4;

/// SplitMix64 finalizer over `a ^ b`-style combination, for deriving streams.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, LANE_INIT))
}

pub fn disc_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, LANE_DISC))
}

/// Linear ramps for `λ_G` and `λ_class`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub g_start: u64,
    pub g_end: u64,
    pub g_max: f64,
    pub class_start: u64,
    pub class_end: u64,
    pub class_max: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.g_end < self.g_start || self.class_end < self.class_start {
            return Err(CoreError::Config("ramp end precedes its start".into()));
        }
        if self.class_start < self.g_end {
            return Err(CoreError::Config(format!(
                "class-wise ramp starts at {} before the global ramp ends at {}",
                self.class_start, self.g_end
            )));
        }
        if !(self.g_max >= 0.0 && self.class_max >= 0.0) {
            return Err(CoreError::Config("ramp maxima must be non-negative".into()));
        }
        Ok(())
    }
}

fn ramp(step: u64, start: u64, end: u64, max: f64) -> f64 {
    if step < start {
        0.0
    } else if step >= end {
        max
    } else {
        max * (step - start) as f64 / (end - start) as f64
    }
}

pub fn lambda_at(s: &Schedule, step: u64) -> LossWeights {
    LossWeights {
        lambda_g: ramp(step, s.g_start, s.g_end, s.g_max),
        lambda_class: ramp(step, s.class_start, s.class_end, s.class_max),
    }
}

/// Shuffled passes over `0..n`, reshuffled whenever a batch would run past
/// the end of the current pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { rng, order, pos: 0 }
    }

    pub fn source(n: usize, seed: u64) -> Self {
        Self::new(n, mix(seed, LANE_SOURCE))
    }

    pub fn target(n: usize, seed: u64) -> Self {
        Self::new(n, mix(seed, LANE_TARGET))
    }

    /// True when the next batch begins a new pass.
    pub fn at_pass_start(&self, batch: usize) -> bool {
        self.pos == 0 || self.pos + batch.min(self.order.len()) > self.order.len()
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        let n = self.order.len();
        if self.pos > 0 && self.pos + batch.min(n) > n {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = (0..batch).map(|j| self.order[(self.pos + j) % n]).collect();
        self.pos += batch.min(n);
        out
    }

    fn to_line(&self) -> String {
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        let order: Vec<String> = self.order.iter().map(|i| i.to_string()).collect();
        format!("{} {} {} {}", seed, self.rng.get_word_pos(), self.pos, order.join(","))
    }

    fn from_line(line: &str) -> Result<Self> {
        let bad = || CoreError::Data(format!("malformed sampler state {line:?}"));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 || f[0].len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&f[0][2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(f[1].parse().map_err(|_| bad())?);
        let order = f[3].split(',').map(|s| s.parse().map_err(|_| bad())).collect::<Result<Vec<usize>>>()?;
        Ok(Self {
            rng,
            order,
            pos: f[2].parse().map_err(|_| bad())?,
        })
    }
}

/// Plain supervised training on source labels.
pub fn source_training<T: Elem>(seg: &mut Segmenter<T>, source: &SourceSet, steps: usize, lr: f64, batch: usize, seed: u64) -> Result<Vec<f64>> {
    let mut opt = Adam::new(AdamConfig::with_lr(lr), &seg.params);
    let mut sampler = Sampler::source(source.len(), seed);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let idx = sampler.next_batch(batch);
        let labels = source.batch_labels(&idx);
        let images: Vec<_> = idx.iter().map(|&i| &source.images[i]).collect();
        let mut tape = Tape::new();
        let sb = seg.params.bind(&mut tape);
        let x = tape.constant(batch_images::<T>(&images)?);
        let out = seg.forward(&mut tape, &sb, x)?;
        let loss = seg.task_loss(&mut tape, out.logits, &labels)?;
        losses.push(scalar(&tape, loss));
        let grads = tape.backward(loss)?;
        seg.params.absorb(&sb, &grads);
        opt.step(&mut seg.params)?;
    }
    Ok(losses)
}

/// Pre-trains `θ_F, θ_Y` on source labels with the pre-training budget and lr.
pub fn pretrain_source<T: Elem>(seg: &mut Segmenter<T>, source: &SourceSet, cfg: &TrainConfig) -> Result<Vec<f64>> {
    source_training(seg, source, cfg.pretrain_steps, cfg.pretrain_lr, cfg.batch_size, cfg.seed)
}

fn scalar<T: Elem>(tape: &Tape<T>, v: crosscity_numkit::Var) -> f64 {
    tape.value(v).item().map(|x| x.as_f64()).unwrap_or(f64::NAN)
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub l_task: f64,
    pub l_g_d: f64,
    pub l_g_inv: f64,
    pub l_class_d: f64,
    pub l_class_inv: f64,
    pub lambda_g: f64,
    pub lambda_class: f64,
    pub clamps: usize,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} L_task={:.6} L_G_D={:.6} L_G_inv={:.6} L_class_D={:.6} L_class_inv={:.6} lambda_G={:.6} lambda_class={:.6} clamps={}",
            self.step,
            self.l_task,
            self.l_g_d,
            self.l_g_inv,
            self.l_class_d,
            self.l_class_inv,
            self.lambda_g,
            self.lambda_class,
            self.clamps
        )
    }
}

/// Grid soft pseudo labels (`Φ`, one image each) for every target image.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoCache<T> {
    pub grids: Vec<Option<SoftLabelGrid<T>>>,
    pub refreshed_at: Option<u64>,
    pub stats: RefineStats,
}

impl<T> PseudoCache<T> {
    fn empty(n: usize) -> Self {
        Self {
            grids: (0..n).map(|_| None).collect(),
            refreshed_at: None,
            stats: RefineStats::default(),
        }
    }
}

const REFRESH_CHUNK: usize = 16;

/// Pixel distributions `φ` of target images `idx`, refined by their priors.
/// Returns one `[|C|,H,W]` tensor per image.
pub fn target_pseudo_labels<T: Elem>(
    seg: &Segmenter<T>,
    target: &TargetSet,
    idx: &[usize],
    statics: &StaticClassSet,
    stats: &mut RefineStats,
) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(REFRESH_CHUNK) {
        let images: Vec<_> = chunk.iter().map(|&i| &target.images[i]).collect();
        let phi = seg.predict_pixels(batch_images::<T>(&images)?)?;
        for (b, &i) in chunk.iter().enumerate() {
            let one = phi.slice_first(b)?;
            out.push(match &target.priors[i] {
                Some(mask) => {
                    let (refined, s) = refine_pseudo_labels(&one, mask, statics)?;
                    *stats += s;
                    refined
                }
                None => one,
            });
        }
    }
    Ok(out)
}

pub struct Trainer<T: Elem> {
    pub config: TrainConfig,
    pub schedule: Schedule,
    pub seg: Segmenter<T>,
    pub disc: Discriminators<T>,
    pub seg_opt: Adam<T>,
    pub disc_opt: Adam<T>,
    pub step: u64,
    pub source_sampler: Sampler,
    pub target_sampler: Sampler,
    pub statics: StaticClassSet,
    pub cache: PseudoCache<T>,
    pub log: Vec<StepLog>,
}

impl<T: Elem> Trainer<T> {
    /// Fresh adaptation run from a pre-trained segmenter; discriminators are
    /// randomly initialized from the configured seed.
    pub fn new(config: TrainConfig, seg: Segmenter<T>, source_len: usize, target_len: usize) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule();
        schedule.validate()?;
        if source_len == 0 || target_len == 0 {
            return Err(CoreError::Data("adaptation needs non-empty source and target sets".into()));
        }
        let statics = StaticClassSet::new(config.static_flags(&seg.config.classes)?)?;
        let disc = Discriminators::new(seg.config.feature_dim(), &seg.config.classes, &mut disc_rng(config.seed))?;
        Ok(Self {
            seg_opt: Adam::new(AdamConfig::with_lr(config.lr), &seg.params),
            disc_opt: Adam::new(AdamConfig::with_lr(config.disc_lr()), &disc.params),
            source_sampler: Sampler::source(source_len, config.seed),
            target_sampler: Sampler::target(target_len, config.seed),
            cache: PseudoCache::empty(target_len),
            step: 0,
            log: Vec::new(),
            schedule,
            statics,
            seg,
            disc,
            config,
        })
    }

    fn use_global(&self) -> bool {
        self.schedule.g_max > 0.0
    }

    fn use_class(&self) -> bool {
        self.schedule.class_max > 0.0
    }

    /// Recomputes `φ(I_T)` for every target image with the current segmenter
    /// and stores the grid soft labels.
    pub fn refresh_pseudo_labels(&mut self, target: &TargetSet) -> Result<()> {
        let idx: Vec<usize> = (0..target.len()).collect();
        let mut stats = RefineStats::default();
        let pixels = target_pseudo_labels(&self.seg, target, &idx, &self.statics, &mut stats)?;
        let geom = self.seg.geometry(target.height, target.width)?;
        for (i, phi) in pixels.into_iter().enumerate() {
            let mut shape = vec![1];
            shape.extend_from_slice(phi.shape());
            let grid = grid_soft_labels_target(&phi.reshape(shape)?, &geom)?;
            self.cache.grids[i] = Some(grid);
        }
        self.cache.refreshed_at = Some(self.step);
        self.cache.stats = stats;
        Ok(())
    }

    fn needs_refresh(&self) -> bool {
        if !self.use_class() {
            return false;
        }
        if self.cache.refreshed_at.is_none() {
            return true;
        }
        match self.config.refresh_every {
            0 => self.target_sampler.at_pass_start(self.config.batch_size),
            k => self.step % k as u64 == 0 && self.cache.refreshed_at != Some(self.step),
        }
    }

    fn target_grids(&self, idx: &[usize]) -> Result<SoftLabelGrid<T>> {
        let items = idx
            .iter()
            .map(|&i| {
                self.cache.grids[i]
                    .clone()
                    .ok_or_else(|| CoreError::Data(format!("no pseudo labels cached for target image {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(normalize_soft_labels(SoftLabelGrid::concat(&items)?))
    }

    pub fn adapt_step(&mut self, source: &SourceSet, target: &TargetSet) -> Result<StepLog> {
        if (source.width, source.height) != (target.width, target.height) {
            return Err(CoreError::Data("source and target image sizes differ".into()));
        }
        if self.needs_refresh() {
            self.refresh_pseudo_labels(target)?;
        }
        let b = self.config.batch_size;
        let s_idx = self.source_sampler.next_batch(b);
        let t_idx = self.target_sampler.next_batch(b);
        let weights = lambda_at(&self.schedule, self.step);
        let mut log = StepLog {
            step: self.step,
            lambda_g: weights.lambda_g,
            lambda_class: weights.lambda_class,
            ..Default::default()
        };

        let labels = source.batch_labels(&s_idx);
        let xs = batch_images::<T>(&s_idx.iter().map(|&i| &source.images[i]).collect::<Vec<_>>())?;
        let xt = batch_images::<T>(&t_idx.iter().map(|&i| &target.images[i]).collect::<Vec<_>>())?;

        let mut tape = Tape::new();
        let sb = self.seg.params.bind(&mut tape);
        let xs = tape.constant(xs);
        let out_s = self.seg.forward(&mut tape, &sb, xs)?;
        let xt = tape.constant(xt);
        let out_t = self.seg.forward(&mut tape, &sb, xt)?;

        let geom = self.seg.geometry(source.height, source.width)?;
        let nc = self.seg.config.num_classes();
        let grids = if self.use_class() {
            let src = normalize_soft_labels(grid_soft_labels_source::<T>(&labels, b, &geom, nc)?);
            Some((src, self.target_grids(&t_idx)?))
        } else {
            None
        };

        // Discriminator update on fixed features.
        if self.use_global() || self.use_class() {
            let fs = tape.value(out_s.features).clone();
            let ft = tape.value(out_t.features).clone();
            for _ in 0..self.config.alt_ratio {
                let mut dt = Tape::new();
                let db = self.disc.params.bind(&mut dt);
                let fsv = dt.constant(fs.clone());
                let ftv = dt.constant(ft.clone());
                let mut total: Option<LossTerm> = None;
                if self.use_global() {
                    let ps = self.disc.global_prob(&mut dt, &db, fsv)?;
                    let pt = self.disc.global_prob(&mut dt, &db, ftv)?;
                    let g = global_d_loss(&mut dt, ps, pt)?;
                    log.l_g_d = scalar(&dt, g.var);
                    total = Some(g);
                }
                if let Some((src, tgt)) = &grids {
                    let probs = classwise_probs(&mut dt, &self.disc, &db, fsv, ftv, src, tgt)?;
                    if let Some(c) = classwise_d_loss(&mut dt, &probs, src, tgt)? {
                        log.l_class_d = scalar(&dt, c.var);
                        total = Some(match total {
                            None => c,
                            Some(t) => LossTerm {
                                var: dt.add(t.var, c.var)?,
                                clamps: t.clamps + c.clamps,
                            },
                        });
                    }
                }
                let Some(total) = total else { break };
                log.clamps += total.clamps;
                let g = dt.backward(total.var)?;
                self.disc.params.absorb(&db, &g);
                self.disc_opt.step(&mut self.disc.params)?;
            }
        }

        // Feature update with frozen discriminators.
        let db = self.disc.params.bind_frozen(&mut tape);
        let task = self.seg.task_loss(&mut tape, out_s.logits, &labels)?;
        log.l_task = scalar(&tape, task);
        let mut g_inv = None;
        if self.use_global() {
            let ps = self.disc.global_prob(&mut tape, &db, out_s.features)?;
            let pt = self.disc.global_prob(&mut tape, &db, out_t.features)?;
            let g = global_inv_loss(&mut tape, ps, pt)?;
            log.l_g_inv = scalar(&tape, g.var);
            log.clamps += g.clamps;
            g_inv = Some(g.var);
        }
        let mut c_inv = None;
        if let Some((src, tgt)) = &grids {
            let probs = classwise_probs(&mut tape, &self.disc, &db, out_s.features, out_t.features, src, tgt)?;
            if let Some(c) = classwise_inv_loss(&mut tape, &probs, src, tgt)? {
                log.l_class_inv = scalar(&tape, c.var);
                log.clamps += c.clamps;
                c_inv = Some(c.var);
            }
        }
        let total = total_loss(&mut tape, task, g_inv, c_inv, weights)?;
        let grads = tape.backward(total)?;
        self.seg.params.absorb(&sb, &grads);
        self.seg_opt.step(&mut self.seg.params)?;

        self.step += 1;
        self.log.push(log);
        Ok(log)
    }

    pub fn run(&mut self, source: &SourceSet, target: &TargetSet, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.adapt_step(source, target)?;
        }
        Ok(())
    }

    pub fn log_text(&self) -> String {
        self.log.iter().map(|l| format!("{l}\n")).collect()
    }

    /// Writes everything needed to continue training bit for bit.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        save_checkpoint(&dir.join("model"), &self.seg, Some(&self.disc))?;
        write_adam(&dir.join("adam_seg"), &self.seg_opt)?;
        write_adam(&dir.join("adam_disc"), &self.disc_opt)?;
        let cache_dir = dir.join("pseudo");
        fs::create_dir_all(&cache_dir).map_err(io_err(&cache_dir))?;
        for (i, g) in self.cache.grids.iter().enumerate() {
            if let Some(g) = g {
                io::write(cache_dir.join(format!("{i}.tnsr")), &g.phi)?;
            }
        }
        let state = format!(
            "step = {}\nrefreshed_at = {}\nrefined = {}\ndegenerate = {}\nsource_sampler = {}\ntarget_sampler = {}\n",
            self.step,
            self.cache.refreshed_at.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
            self.cache.stats.refined,
            self.cache.stats.degenerate,
            self.source_sampler.to_line(),
            self.target_sampler.to_line()
        );
        let path = dir.join("state.txt");
        fs::write(&path, state).map_err(io_err(&path))
    }

    pub fn load_state(dir: &Path, config: TrainConfig) -> Result<Self> {
        let (seg, disc) = load_checkpoint::<T>(&dir.join("model"))?;
        let disc = disc.ok_or_else(|| CoreError::Data("training state has no discriminators".into()))?;
        let path = dir.join("state.txt");
        let kv = crate::config::parse_kv(&fs::read_to_string(&path).map_err(io_err(&path))?)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| CoreError::Data(format!("state.txt lacks `{k}`")));
        let parse_u = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| CoreError::Data(format!("bad `{k}` in state.txt"))) };
        let source_sampler = Sampler::from_line(get("source_sampler")?)?;
        let target_sampler = Sampler::from_line(get("target_sampler")?)?;
        let mut cache = PseudoCache::empty(target_sampler.order.len());
        cache.refreshed_at = match get("refreshed_at")?.as_str() {
            "none" => None,
            s => Some(s.parse().map_err(|_| CoreError::Data("bad refreshed_at".into()))?),
        };
        cache.stats = RefineStats {
            refined: parse_u("refined")? as usize,
            degenerate: parse_u("degenerate")? as usize,
        };
        for (i, slot) in cache.grids.iter_mut().enumerate() {
            let p = dir.join("pseudo").join(format!("{i}.tnsr"));
            if p.exists() {
                let phi: Tensor<T> = io::read(&p)?;
                *slot = Some(grid_from_phi(phi));
            }
        }
        let statics = StaticClassSet::new(config.static_flags(&seg.config.classes)?)?;
        let schedule = config.schedule();
        schedule.validate()?;
        Ok(Self {
            seg_opt: read_adam(&dir.join("adam_seg"), AdamConfig::with_lr(config.lr))?,
            disc_opt: read_adam(&dir.join("adam_disc"), AdamConfig::with_lr(config.disc_lr()))?,
            step: parse_u("step")?,
            source_sampler,
            target_sampler,
            cache,
            statics,
            schedule,
            seg,
            disc,
            log: Vec::new(),
            config,
        })
    }
}

fn grid_from_phi<T: Elem>(phi: Tensor<T>) -> SoftLabelGrid<T> {
    let s = phi.shape().to_vec();
    let n = s[2] * s[3];
    let present = (0..s[0])
        .map(|b| (0..s[1]).map(|c| phi.data()[(b * s[1] + c) * n..(b * s[1] + c + 1) * n].iter().any(|&v| v > T::zero())).collect())
        .collect();
    SoftLabelGrid {
        domain: crate::losses::Domain::Target,
        phi,
        phi_norm: None,
        present,
    }
}

fn write_adam<T: Elem>(dir: &Path, opt: &Adam<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, (m, v)) in opt.first_moments().iter().zip(opt.second_moments()).enumerate() {
        io::write(dir.join(format!("m{i}.tnsr")), m)?;
        io::write(dir.join(format!("v{i}.tnsr")), v)?;
    }
    let path = dir.join("step.txt");
    fs::write(&path, format!("{}\n{}\n", opt.step_count(), opt.first_moments().len())).map_err(io_err(&path))
}

fn read_adam<T: Elem>(dir: &Path, config: AdamConfig) -> Result<Adam<T>> {
    let path = dir.join("step.txt");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut lines = text.lines();
    let bad = || CoreError::Data(format!("malformed {}", path.display()));
    let step: u64 = lines.next().and_then(|l| l.parse().ok()).ok_or_else(bad)?;
    let n: usize = lines.next().and_then(|l| l.parse().ok()).ok_or_else(bad)?;
    let mut first = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    for i in 0..n {
        first.push(io::read(dir.join(format!("m{i}.tnsr")))?);
        second.push(io::read(dir.join(format!("v{i}.tnsr")))?);
    }
    Ok(Adam::from_parts(config, step, first, second)?)
}

/// Builds a trainer from a pre-trained segmenter and runs `config.steps`
/// adaptation steps.
pub fn adapt<T: Elem>(source: &SourceSet, target: &TargetSet, pretrained: Segmenter<T>, config: TrainConfig) -> Result<Trainer<T>> {
    let steps = config.steps;
    let mut trainer = Trainer::new(config, pretrained, source.len(), target.len())?;
    trainer.run(source, target, steps)?;
    Ok(trainer)
}
