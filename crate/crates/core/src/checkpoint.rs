//! Checkpoint directories: one TNSR file per named parameter plus a
//! `params.txt` manifest of `name file shape` lines in canonical order, and a
//! `model.txt` describing the segmenter architecture.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crosscity_numkit::{io, ParamSet, Tensor};

use crate::config::{parse_kv, parse_list};
use crate::discriminators::Discriminators;
use crate::segmenter::{Segmenter, SegmenterConfig};
use crate::{io_err, CoreError, Elem, Result};

pub const MANIFEST: &str = "params.txt";
pub const MODEL: &str = "model.txt";

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".into()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "scalar" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| d.parse().map_err(|_| CoreError::Data(format!("bad shape {s:?} in manifest"))))
        .collect()
}

/// Writes every parameter of `sets`, in order, under `dir`.
pub fn write_params<T: Elem>(dir: &Path, sets: &[&ParamSet<T>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::new();
    for set in sets {
        for p in set.iter() {
            let file = format!("{}.tnsr", p.name);
            io::write(dir.join(&file), &p.value)?;
            let _ = writeln!(manifest, "{} {} {}", p.name, file, shape_str(p.value.shape()));
        }
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(io_err(&path))
}

/// Reads all parameters listed in the manifest, in manifest order.
pub fn read_params<T: Elem>(dir: &Path) -> Result<ParamSet<T>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut set = ParamSet::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(CoreError::Data(format!("{}:{}: expected `name file shape`", path.display(), ln + 1)));
        }
        let t: Tensor<T> = io::read(dir.join(f[1]))?;
        let shape = parse_shape(f[2])?;
        if t.shape() != shape.as_slice() {
            return Err(CoreError::Data(format!(
                "{}: manifest shape {:?} but file holds {:?}",
                f[0],
                shape,
                t.shape()
            )));
        }
        set.push(f[0], t)?;
    }
    Ok(set)
}

/// Splits a parameter set into the tensors whose names start with one of
/// `prefixes` and the rest, preserving order.
pub fn partition<T: Elem>(set: ParamSet<T>, prefixes: &[&str]) -> Result<(ParamSet<T>, ParamSet<T>)> {
    let mut hit = ParamSet::new();
    let mut rest = ParamSet::new();
    for p in set.iter() {
        let target = if prefixes.iter().any(|pre| p.name.starts_with(pre)) { &mut hit } else { &mut rest };
        target.push(p.name.clone(), p.value.clone())?;
    }
    Ok((hit, rest))
}

pub fn model_text(cfg: &SegmenterConfig) -> String {
    let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    format!(
        "classes = {}\nchannels = {}\nstrides = {}\ndilations = {}\nkernel = {}\nbilinear = {}\n",
        cfg.classes.join(","),
        list(&cfg.channels),
        list(&cfg.strides),
        list(&cfg.dilations),
        cfg.kernel,
        cfg.bilinear
    )
}

pub fn parse_model(text: &str) -> Result<SegmenterConfig> {
    let kv = parse_kv(text)?;
    let get = |k: &str| kv.get(k).ok_or_else(|| CoreError::Config(format!("model description lacks `{k}`")));
    let classes: Vec<String> = get("classes")?.split(',').map(|s| s.trim().to_string()).collect();
    let cfg = SegmenterConfig {
        classes,
        channels: parse_list(get("channels")?)?,
        strides: parse_list(get("strides")?)?,
        dilations: parse_list(get("dilations")?)?,
        kernel: get("kernel")?.parse().map_err(|_| CoreError::Config("bad kernel".into()))?,
        bilinear: kv.get("bilinear").map(|v| v == "true").unwrap_or(false),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Saves the segmenter and, when given, the discriminators.
pub fn save_checkpoint<T: Elem>(dir: &Path, seg: &Segmenter<T>, disc: Option<&Discriminators<T>>) -> Result<()> {
    let mut sets = vec![&seg.params];
    if let Some(d) = disc {
        sets.push(&d.params);
    }
    write_params(dir, &sets)?;
    let path = dir.join(MODEL);
    fs::write(&path, model_text(&seg.config)).map_err(io_err(&path))
}

pub fn load_checkpoint<T: Elem>(dir: &Path) -> Result<(Segmenter<T>, Option<Discriminators<T>>)> {
    let path = dir.join(MODEL);
    let cfg = parse_model(&fs::read_to_string(&path).map_err(io_err(&path))?)?;
    let all = read_params::<T>(dir)?;
    let (disc_params, seg_params) = partition(all, &["disc_global.", "disc_class."])?;
    let disc = if disc_params.is_empty() {
        None
    } else {
        Some(Discriminators::from_params(cfg.feature_dim(), &cfg.classes, disc_params)?)
    };
    Ok((Segmenter::from_params(cfg, seg_params)?, disc))
}
