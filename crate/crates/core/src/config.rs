//! Flat `key = value` configuration files (`#` starts a comment).

use std::collections::BTreeMap;
use std::path::Path;

use crate::segmenter::SegmenterConfig;
use crate::trainer::Schedule;
use crate::{io_err, CoreError, Result};

/// Parses `key = value` lines; later keys override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CoreError::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(CoreError::Config(format!("line {}: empty key", i + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn parse_list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CoreError::Config(format!("expected comma-separated integers, got {v:?}")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Adaptation learning rate (feature extractor and label head).
    pub lr: f64,
    /// Discriminator learning rate; defaults to `lr`.
    pub disc_lr: Option<f64>,
    pub pretrain_lr: f64,
    pub pretrain_steps: usize,
    pub steps: usize,
    pub lambda_g_max: f64,
    pub lambda_class_max: f64,
    pub ramp_g_steps: usize,
    pub ramp_class_steps: usize,
    /// Discriminator updates per feature update.
    pub alt_ratio: usize,
    /// Pseudo-label refresh period in steps; 0 = once per pass over the target set.
    pub refresh_every: usize,
    pub seed: u64,
    pub static_classes: Vec<String>,
    pub prior_k: usize,
    pub superpixels: usize,
    pub tau: f64,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub dilations: Vec<usize>,
    pub kernel: usize,
    pub bilinear: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            lr: 5e-6,
            disc_lr: None,
            pretrain_lr: 1e-3,
            pretrain_steps: 2000,
            steps: 1000,
            lambda_g_max: 0.1,
            lambda_class_max: 0.5,
            ramp_g_steps: 250,
            ramp_class_steps: 250,
            alt_ratio: 1,
            refresh_every: 0,
            seed: 0,
            static_classes: crosscity_forge::classes::DEFAULT_STATIC.iter().map(|s| s.to_string()).collect(),
            prior_k: 3,
            superpixels: 256,
            tau: 0.8,
            channels: vec![16, 32, 64, 64],
            strides: vec![2, 2, 1, 1],
            dilations: vec![1, 1, 2, 2],
            kernel: 3,
            bilinear: false,
        }
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::default().apply(&text)
    }

    /// Overrides fields from `key = value` text. Unknown keys are rejected.
    pub fn apply(mut self, text: &str) -> Result<Self> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        fn num<X: std::str::FromStr>(key: &str, v: &str) -> Result<X> {
            v.parse().map_err(|_| CoreError::Config(format!("`{key}`: cannot parse {v:?}")))
        }
        match key {
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "disc_lr" => self.disc_lr = Some(num(key, v)?),
            "pretrain_lr" => self.pretrain_lr = num(key, v)?,
            "pretrain_steps" => self.pretrain_steps = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "lambda_g_max" => self.lambda_g_max = num(key, v)?,
            "lambda_class_max" => self.lambda_class_max = num(key, v)?,
            "ramp_g_steps" => self.ramp_g_steps = num(key, v)?,
            "ramp_class_steps" => self.ramp_class_steps = num(key, v)?,
            "alt_ratio" => self.alt_ratio = num(key, v)?,
            "refresh_every" => self.refresh_every = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "static_classes" => self.static_classes = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            "prior_k" => self.prior_k = num(key, v)?,
            "superpixels" => self.superpixels = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "channels" => self.channels = parse_list(v)?,
            "strides" => self.strides = parse_list(v)?,
            "dilations" => self.dilations = parse_list(v)?,
            "kernel" => self.kernel = num(key, v)?,
            "bilinear" => self.bilinear = num(key, v)?,
            _ => return Err(CoreError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.alt_ratio == 0 {
            return bad("alt_ratio must be positive");
        }
        if !(self.lr >= 0.0 && self.pretrain_lr >= 0.0 && self.disc_lr.unwrap_or(0.0) >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(self.lambda_g_max >= 0.0 && self.lambda_class_max >= 0.0) {
            return bad("lambda maxima must be non-negative");
        }
        if self.superpixels == 0 {
            return bad("superpixels must be positive");
        }
        Ok(())
    }

    pub fn segmenter(&self, classes: Vec<String>) -> SegmenterConfig {
        SegmenterConfig {
            classes,
            channels: self.channels.clone(),
            strides: self.strides.clone(),
            dilations: self.dilations.clone(),
            kernel: self.kernel,
            bilinear: self.bilinear,
        }
    }

    /// Global ramp over `[0, ramp_g_steps]`, class-wise ramp right after it.
    pub fn schedule(&self) -> Schedule {
        let g_end = self.ramp_g_steps as u64;
        Schedule {
            g_start: 0,
            g_end,
            g_max: self.lambda_g_max,
            class_start: g_end,
            class_end: g_end + self.ramp_class_steps as u64,
            class_max: self.lambda_class_max,
        }
    }

    pub fn disc_lr(&self) -> f64 {
        self.disc_lr.unwrap_or(self.lr)
    }

    /// Per-class static flags for `classes`; unknown names are an error.
    pub fn static_flags(&self, classes: &[String]) -> Result<Vec<bool>> {
        for s in &self.static_classes {
            if !classes.contains(s) {
                return Err(CoreError::Config(format!("static class {s:?} is not among {classes:?}")));
            }
        }
        Ok(classes.iter().map(|c| self.static_classes.contains(c)).collect())
    }

    pub fn prior_config(&self) -> crosscity_prior::PriorConfig {
        let mut p = crosscity_prior::PriorConfig {
            superpixels: self.superpixels,
            k: self.prior_k,
            ..Default::default()
        };
        p.matching.tau = self.tau;
        p
    }
}
