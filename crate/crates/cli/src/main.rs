use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use crosscity_core::checkpoint::{load_checkpoint, save_checkpoint};
use crosscity_core::data::{SourceSet, TargetSet};
use crosscity_core::eval::{disc_accuracy, embeddings_text, evaluate_report, export_embeddings};
use crosscity_core::trainer::{adapt, init_rng, pretrain_source};
use crosscity_core::{Segmenter, TrainConfig};
use crosscity_forge::dataset::read_classes;
use crosscity_forge::{emit_dataset, load_labeled, load_unlabeled, EmitConfig, Style};
use crosscity_prior::{mine_pair, PriorMask};

#[derive(Parser, Debug)]
#[command(name = "crosscity", version, about = "Cross-city segmentation transfer on synthetic cities")]
struct Cli {
    /// Overrides the `seed` key of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` training config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; computation is single-threaded, so only 1 changes nothing.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Forces a single thread; runs are bitwise reproducible either way.
    #[arg(long, global = true)]
    test_mode: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Emit a synthetic city dataset.
    Synth(SynthArgs),
    /// Train the segmenter on a labelled source dataset.
    Pretrain(PretrainArgs),
    /// Adapt a pre-trained segmenter to an unlabelled target dataset.
    Adapt(AdaptArgs),
    /// Mine static-object prior masks from time-shifted pairs.
    ExtractPrior(PriorArgs),
    /// Per-class IoU and mIoU of a checkpoint on a labelled split.
    Eval(EvalArgs),
    /// Per-image, per-class mean features for external projection tools.
    ExportEmbeddings(EmbedArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StyleArg {
    Source,
    Target,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum)]
    style: StyleArg,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    /// Add a time-shifted partner view to every training sample.
    #[arg(long)]
    pairs: bool,
    /// Labelled samples in `eval/`.
    #[arg(long, default_value_t = 0)]
    eval_count: usize,
    #[arg(long, default_value_t = 128)]
    width: u32,
    #[arg(long, default_value_t = 128)]
    height: u32,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Pre-trained checkpoint directory.
    #[arg(long)]
    init: PathBuf,
    /// Directory of `<id>.pgm` prior masks from `extract-prior`.
    #[arg(long)]
    priors: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PriorArgs {
    /// Dataset whose `train/` samples carry `partner.ppm`.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    superpixels: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Also write `<id>.matches.txt` dumps.
    #[arg(long)]
    dump_matches: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to `eval` when present, else `train`.
    #[arg(long)]
    split: Option<String>,
    /// Machine-readable report file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// With `--disc-target`, also report global discriminator accuracy.
    #[arg(long, requires = "disc_target")]
    disc_source: Option<PathBuf>,
    #[arg(long, requires = "disc_source")]
    disc_target: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: Option<String>,
    /// First field of every record.
    #[arg(long)]
    domain: String,
    /// Pool with predicted labels instead of ground truth.
    #[arg(long)]
    pseudo: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Synth(a) => synth(a, cfg.seed),
        Command::Pretrain(a) => pretrain(a, &cfg),
        Command::Adapt(a) => run_adapt(a, cfg),
        Command::ExtractPrior(a) => extract_prior(a, &cfg),
        Command::Eval(a) => eval(a),
        Command::ExportEmbeddings(a) => embeddings(a),
    }
}

fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    let style = match a.style {
        StyleArg::Source => Style::Source,
        StyleArg::Target => Style::Target,
    };
    let mut emit = EmitConfig::new(style, a.count, seed);
    emit.with_pairs = a.pairs;
    emit.eval_count = a.eval_count;
    emit.width = a.width;
    emit.height = a.height;
    emit_dataset(&emit, &a.out)?;
    println!("wrote {} train and {} eval samples to {}", a.count, a.eval_count, a.out.display());
    Ok(())
}

fn default_split(root: &Path, split: Option<String>) -> String {
    split.unwrap_or_else(|| if root.join("eval").is_dir() { "eval" } else { "train" }.to_string())
}

fn labelled(root: &Path, split: &str) -> Result<SourceSet> {
    let samples = load_labeled(root, split).with_context(|| format!("loading {}/{split}", root.display()))?;
    Ok(SourceSet::from_labeled(&samples)?)
}

fn pretrain(a: PretrainArgs, cfg: &TrainConfig) -> Result<()> {
    let classes = read_classes(&a.data)?;
    let source = labelled(&a.data, "train")?;
    let mut seg = Segmenter::<f32>::new(cfg.segmenter(classes), &mut init_rng(cfg.seed))?;
    let losses = pretrain_source(&mut seg, &source, cfg)?;
    save_checkpoint(&a.out, &seg, None)?;
    let text: String = losses.iter().enumerate().map(|(i, l)| format!("step={i} L_task={l:.6}\n")).collect();
    fs::write(a.out.join("train.log"), text)?;
    println!("pre-trained {} steps on {} images; checkpoint in {}", losses.len(), source.len(), a.out.display());
    Ok(())
}

fn run_adapt(a: AdaptArgs, cfg: TrainConfig) -> Result<()> {
    let (seg, _) = load_checkpoint::<f32>(&a.init).with_context(|| format!("loading {}", a.init.display()))?;
    if read_classes(&a.source)? != seg.config.classes {
        bail!("source classes differ from the checkpoint's");
    }
    let source = labelled(&a.source, "train")?;
    let mut target = TargetSet::from_unlabeled(load_unlabeled(&a.target, "train")?)?;
    if let Some(dir) = &a.priors {
        for i in 0..target.len() {
            let path = dir.join(format!("{}.pgm", target.ids[i]));
            let mask = PriorMask::read_pgm(&path).with_context(|| format!("reading prior {}", path.display()))?;
            target.set_prior(i, mask)?;
        }
    }
    let steps = cfg.steps;
    let trainer = adapt(&source, &target, seg, cfg)?;
    save_checkpoint(&a.out, &trainer.seg, Some(&trainer.disc))?;
    fs::write(a.out.join("train.log"), trainer.log_text())?;
    println!("adapted {steps} steps; checkpoint in {}", a.out.display());
    Ok(())
}

fn extract_prior(a: PriorArgs, cfg: &TrainConfig) -> Result<()> {
    let mut pcfg = cfg.prior_config();
    if let Some(k) = a.k {
        pcfg.k = k;
    }
    if let Some(s) = a.superpixels {
        pcfg.superpixels = s;
    }
    if let Some(t) = a.tau {
        pcfg.matching.tau = t;
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let samples = load_unlabeled(&a.pairs, "train")?;
    let mut area = 0usize;
    for s in &samples {
        let partner = s.partner.as_ref().with_context(|| format!("sample {} has no partner.ppm", s.id))?;
        let (mask, matches) = mine_pair(&s.image, partner, &pcfg)?;
        mask.write_pgm(&a.out.join(format!("{}.pgm", s.id)))?;
        if a.dump_matches {
            matches.write_dump(&a.out.join(format!("{}.matches.txt", s.id)))?;
        }
        area += mask.area();
    }
    let pixels: usize = samples.iter().map(|s| (s.image.width() * s.image.height()) as usize).sum();
    println!("wrote {} masks; prior covers {:.1}% of pixels", samples.len(), 100.0 * area as f64 / pixels.max(1) as f64);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (seg, disc) = load_checkpoint::<f32>(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let split = default_split(&a.data, a.split);
    let set = labelled(&a.data, &split)?;
    let report = evaluate_report(&seg, &set)?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        report.write(out)?;
    }
    if let (Some(s), Some(t)) = (&a.disc_source, &a.disc_target) {
        let disc = disc.context("checkpoint has no discriminators")?;
        let s = TargetSet::from_unlabeled(load_unlabeled(s, &default_split(s, None))?)?;
        let t = TargetSet::from_unlabeled(load_unlabeled(t, &default_split(t, None))?)?;
        let acc = disc_accuracy(&seg, &disc, &s.images.iter().collect::<Vec<_>>(), &t.images.iter().collect::<Vec<_>>())?;
        println!("disc_accuracy={acc:.6}");
    }
    Ok(())
}

fn embeddings(a: EmbedArgs) -> Result<()> {
    let (seg, _) = load_checkpoint::<f32>(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let split = default_split(&a.data, a.split);
    let (images, labels) = if a.pseudo {
        let set = TargetSet::from_unlabeled(load_unlabeled(&a.data, &split)?)?;
        let mut labels = Vec::new();
        for img in &set.images {
            labels.extend(seg.predict_label_map(crosscity_core::data::batch_images(&[img])?)?);
        }
        (set.images, labels)
    } else {
        let set = labelled(&a.data, &split)?;
        (set.images, set.labels)
    };
    let refs: Vec<_> = images.iter().collect();
    let label_refs: Vec<&[u8]> = labels.iter().map(|l| l.as_slice()).collect();
    let records = export_embeddings(&seg, &a.domain, &refs, &label_refs)?;
    fs::write(&a.out, embeddings_text(&records)).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}
