//! Command-line entry point. Each subcommand maps to one pipeline stage and
//! reads or writes subject directories of the form
//! `<dir>/<subject>/{baseline,followup,gt}.nii`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::RunConfig;
use crate::data::preprocess::preprocess_sample;
use crate::data::{
    extract_subvolumes, generate_phantom, split_patches, Patch, PhantomSpec, Provenance, Sample,
};
use crate::error::{Error, Result};
use crate::inference::{ensemble_predict, predict_volume};
use crate::metrics::{evaluate, write_reports};
use crate::tensor::primitive_suite;
use crate::trainer::{train, train_ensemble, write_history_csv, TrainOutcome};
use crate::unet::{network_gradient_check, Model, ModelConfig, ZERO_GRADIENT_RATIO};
use crate::volume_io::{
    read_patch_set, read_volume, write_file, write_patch_set, write_volume, Checkpoint,
};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_DIVERGED: i32 = 5;

/// New-lesion segmentation from baseline/follow-up FLAIR pairs.
#[derive(Debug, Parser)]
#[command(name = "lesionseg", version, about)]
pub struct Cli {
    /// TOML run configuration; every section is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for patch-parallel work.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic subjects.
    Phantom(PhantomArgs),
    /// Resample, crop/pad and normalize subjects.
    Preprocess(InOut),
    /// Cut subjects into patches and write all/, train/ and val/ patch sets.
    Extract(ExtractArgs),
    /// Train one network; writes best.ckpt, last.ckpt and history.csv.
    Train(TrainArgs),
    /// Train an ensemble, one member per data split; the last member uses attention.
    TrainEnsemble(EnsembleArgs),
    /// Whole-volume prediction with one network or an ensemble.
    Predict(PredictArgs),
    /// Score predictions against reference masks; writes metrics.csv and metrics.jsonl.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every primitive and a small network.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the first subject; later subjects use consecutive seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct InOut {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Patch size S.
    #[arg(long = "patch-size", visible_alias = "S")]
    pub patch_size: Option<usize>,
    /// Grid stride R.
    #[arg(long, visible_alias = "R")]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `extract`.
    #[arg(long)]
    pub patches: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train and validate on every patch (all/) instead of train/ and val/.
    #[arg(long)]
    pub overfit: bool,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Directory written by `extract`; members split its all/ set.
    #[arg(long)]
    pub patches: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub members: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Subject directories to segment.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// A single checkpoint.
    #[arg(
        long,
        conflicts_with = "ensemble",
        required_unless_present = "ensemble"
    )]
    pub checkpoint: Option<PathBuf>,
    /// Directory searched recursively for member checkpoints (best.ckpt).
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    #[arg(long = "patch-size", visible_alias = "S")]
    pub patch_size: Option<usize>,
    #[arg(long, visible_alias = "R")]
    pub stride: Option<usize>,
    /// Monte-Carlo dropout passes per patch (0: deterministic).
    #[arg(long = "mc-samples")]
    pub mc_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of `<subject>/pred.nii` files.
    #[arg(long)]
    pub pred: PathBuf,
    /// Subject directories holding the reference masks.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    pub spatial: usize,
    #[arg(long = "base-filters", default_value_t = 2)]
    pub base_filters: usize,
    #[arg(long, default_value_t = 100)]
    pub probes: usize,
    /// Central-difference step for the network check.
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } => EXIT_IO,
        Error::Format(_) => EXIT_FORMAT,
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_OTHER,
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Phantom(a) => {
            if let Some(s) = a.seed {
                cfg.phantom.seed = s;
            }
            for k in 0..a.count {
                let spec = PhantomSpec {
                    seed: cfg.phantom.seed + k as u64,
                    ..cfg.phantom.clone()
                };
                let s = generate_phantom(&spec)?;
                save_subject(&s, &a.out.join(&s.subject_id))?;
                info!("wrote {}", s.subject_id);
            }
            Ok(())
        }
        Command::Preprocess(a) => {
            for dir in list_subjects(&a.input)? {
                let s = preprocess_sample(&load_subject(&dir)?, &cfg.preprocess)?;
                save_subject(&s, &a.out.join(&s.subject_id))?;
            }
            Ok(())
        }
        Command::Extract(a) => {
            let size = a.patch_size.unwrap_or(cfg.train.patch_size);
            let stride = a.stride.unwrap_or(cfg.train.stride);
            let mut all: Vec<Patch> = Vec::new();
            for dir in list_subjects(&a.input)? {
                all.extend(extract_subvolumes(&load_subject(&dir)?, size, stride)?);
            }
            let split = split_patches(all.len(), cfg.train.seed)?;
            let pick = |idx: &[usize]| idx.iter().map(|&i| all[i].clone()).collect::<Vec<_>>();
            write_patch_set(a.out.join("all"), &all)?;
            write_patch_set(a.out.join("train"), &pick(&split.train))?;
            write_patch_set(a.out.join("val"), &pick(&split.val))?;
            info!(
                "{} patches ({} positive)",
                all.len(),
                all.iter().filter(|p| p.positive).count()
            );
            Ok(())
        }
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let (tr, va) = if a.overfit {
                let all = read_patch_set(a.patches.join("all"))?;
                (all.clone(), all)
            } else {
                (
                    read_patch_set(a.patches.join("train"))?,
                    read_patch_set(a.patches.join("val"))?,
                )
            };
            cfg.train.patch_size = patch_size_of(&tr)?;
            let outcome = train(Model::build(cfg.model.clone())?, &tr, &va, &cfg.train)?;
            save_outcome(&outcome, &a.out)
        }
        Command::TrainEnsemble(a) => {
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            if let Some(m) = a.members {
                cfg.ensemble.members = m;
            }
            cfg.validate()?;
            let all = read_patch_set(a.patches.join("all"))?;
            cfg.train.patch_size = patch_size_of(&all)?;
            let members = train_ensemble(cfg.ensemble.members, &all, &cfg.model, &cfg.train)?;
            for (k, m) in members.iter().enumerate() {
                let dir = a.out.join(format!("member-{}", k + 1));
                save_outcome(&m.outcome, &dir)?;
                let split = serde_json::json!({ "train": m.split.train, "val": m.split.val });
                write_file(&dir.join("split.json"), split.to_string().as_bytes())?;
            }
            Ok(())
        }
        Command::Predict(a) => {
            let inf = &mut cfg.inference;
            if let Some(s) = a.patch_size {
                inf.patch_size = s;
            }
            if let Some(r) = a.stride {
                inf.stride = r;
            }
            if let Some(t) = a.mc_samples {
                inf.mc_samples = t;
            }
            if let Some(s) = a.seed {
                inf.seed = s;
            }
            cfg.validate()?;
            let inf = &cfg.inference;
            let models: Vec<Model<f32>> = match (&a.checkpoint, &a.ensemble) {
                (Some(c), _) => vec![Checkpoint::load(c)?.model],
                (None, Some(dir)) => find_checkpoints(dir)?
                    .iter()
                    .map(|p| Checkpoint::load(p).map(|c| c.model))
                    .collect::<Result<_>>()?,
                (None, None) => {
                    return Err(Error::Config(
                        "either --checkpoint or --ensemble is required".into(),
                    ))
                }
            };
            for dir in list_subjects(&a.input)? {
                let s = load_subject(&dir)?;
                let pred = if models.len() == 1 {
                    predict_volume(
                        &models[0],
                        &s,
                        inf.patch_size,
                        inf.stride,
                        inf.mc_samples,
                        inf.seed,
                    )?
                } else {
                    ensemble_predict(
                        &models,
                        &s,
                        inf.patch_size,
                        inf.stride,
                        inf.mc_samples,
                        inf.seed,
                    )?
                };
                write_volume(&pred, a.out.join(&s.subject_id).join(PRED))?;
                info!("predicted {}", s.subject_id);
            }
            Ok(())
        }
        Command::Evaluate(a) => {
            let mut reports = Vec::new();
            for dir in list_subjects(&a.gt)? {
                let s = load_subject(&dir)?;
                let pred = read_volume(a.pred.join(&s.subject_id).join(PRED))?;
                reports.push(evaluate(&s.subject_id, &pred, &s.gt_soft, &cfg.eval)?);
            }
            write_reports(
                a.out.join("metrics.csv"),
                a.out.join("metrics.jsonl"),
                &reports,
            )?;
            if let Some(last) = crate::metrics::reports_to_csv(&reports)?.lines().last() {
                println!("{last}");
            }
            Ok(())
        }
        Command::Gradcheck(a) => {
            let mut worst = 0.0f64;
            for c in primitive_suite(1e-5, a.seed)? {
                println!(
                    "{:<24} checked {:>4}  max rel err {:.3e}",
                    c.name, c.report.checked, c.report.max_rel_error
                );
                worst = worst.max(c.report.max_rel_error);
            }
            let net = ModelConfig {
                base_filters: a.base_filters,
                seed: a.seed,
                ..cfg.model.clone()
            };
            let c = network_gradient_check(&net, a.spatial, a.probes, a.step, a.seed)?;
            println!(
                "{:<24} checked {:>4}  max rel err {:.3e}  ({} skipped near a kink)",
                "network", c.report.checked, c.report.max_rel_error, c.kink_skipped
            );
            println!(
                "{:<24} checked {:>4}  max |numeric| {:.1e} (gradient scale {:.1e})",
                "network zero-gradient", c.zero_probed, c.zero_max_numeric, c.grad_scale
            );
            worst = worst.max(c.report.max_rel_error);
            if worst > a.tolerance {
                return Err(Error::invalid(format!(
                    "max relative error {worst:.3e} exceeds {:.1e}",
                    a.tolerance
                )));
            }
            if c.report.checked < a.probes {
                return Err(Error::invalid(format!(
                    "only {} of {} network probes were checkable",
                    c.report.checked, a.probes
                )));
            }
            if c.zero_max_numeric > ZERO_GRADIENT_RATIO * c.grad_scale {
                return Err(Error::invalid(format!(
                    "a parameter with zero tape gradient has central difference {:.1e}",
                    c.zero_max_numeric
                )));
            }
            Ok(())
        }
    }
}

const BASELINE: &str = "baseline.nii";
const FOLLOWUP: &str = "followup.nii";
const GT: &str = "gt.nii";
const PRED: &str = "pred.nii";

fn patch_size_of(patches: &[Patch]) -> Result<usize> {
    patches
        .first()
        .map(|p| p.size)
        .ok_or_else(|| Error::invalid("patch set is empty"))
}

fn save_outcome(o: &TrainOutcome, dir: &Path) -> Result<()> {
    o.best.save(dir.join("best.ckpt"))?;
    Checkpoint {
        model: o.last.clone(),
        meta: crate::volume_io::CheckpointMeta {
            epoch: o.history.len(),
            ..o.best.meta.clone()
        },
    }
    .save(dir.join("last.ckpt"))?;
    write_history_csv(dir.join("history.csv"), &o.history)?;
    info!(
        "best epoch {} (val soft Dice {:.4})",
        o.best.meta.epoch, o.best.meta.val_soft_dice
    );
    Ok(())
}

/// Subject subdirectories of `dir`, sorted by name.
pub fn list_subjects(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no subject directories"),
        ));
    }
    Ok(out)
}

pub fn save_subject(s: &Sample, dir: &Path) -> Result<()> {
    write_volume(&s.baseline, dir.join(BASELINE))?;
    write_volume(&s.followup, dir.join(FOLLOWUP))?;
    write_volume(&s.gt_soft, dir.join(GT))
}

/// Reads a subject directory. The reference is `gt.nii` or, failing that,
/// the average of every `mask*.nii` (one per rater).
pub fn load_subject(dir: &Path) -> Result<Sample> {
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let baseline = read_volume(dir.join(BASELINE))?;
    let followup = read_volume(dir.join(FOLLOWUP))?;
    let gt_path = dir.join(GT);
    let (gt, masks) = if gt_path.exists() {
        (read_volume(&gt_path)?, vec![gt_path])
    } else {
        let mut masks: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name().is_some_and(|n| {
                    n.to_string_lossy().starts_with("mask") && n.to_string_lossy().ends_with(".nii")
                })
            })
            .collect();
        masks.sort();
        if masks.is_empty() {
            return Err(Error::io(
                &gt_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no gt.nii or mask*.nii"),
            ));
        }
        let vols = masks.iter().map(read_volume).collect::<Result<Vec<_>>>()?;
        (Sample::average_masks(&vols)?, masks)
    };
    let provenance = Provenance::Files {
        baseline: dir.join(BASELINE),
        followup: dir.join(FOLLOWUP),
        masks,
    };
    Sample::new(id, baseline, followup, gt, provenance)
}

fn find_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = e.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "best.ckpt") {
                found.push(p);
            }
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "no best.ckpt under this directory",
            ),
        ));
    }
    Ok(found)
}
