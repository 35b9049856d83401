//! Command implementations behind the `drgan` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use drgan_core::data::{eyepacs_counts, generate_corpus, Dataset, NUM_GRADES};
use drgan_core::grading::{fit_grading_spaces, pretrain_grader, GradingBackbone};
use drgan_core::metrics::{augmentation_ab, fid, images01, per_grade_fid, swd, AbReport, BackboneClassifier, MetricReport, RandomConvEmbedding, SWD_PROJECTIONS};
use drgan_core::metrics::Embedding;
use drgan_core::rng::stream;
use drgan_core::trainer::{train, GanModel, SynthesisStream, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, load_grader, read_spaces, save_checkpoint, save_grader, write_spaces};
use crate::config::{resolve, run_dir, write_resolved};
use crate::dataset_io::{load_dataset, save_dataset, save_sample};
use crate::error::{io_err, write_json, Error, Result};
use crate::grid::save_contact_sheet;
use crate::train_log::RunObserver;

#[derive(Parser, Debug)]
#[command(name = "drgan", version, about = "Mask-conditioned fundus image synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a procedural toy dataset.
    GenData(GenDataArgs),
    /// Train the grade classifier whose features define the grading spaces.
    PretrainGrader(PretrainArgs),
    /// Fit per-grade Gaussians over grader features.
    FitSpaces(FitSpacesArgs),
    /// Train the GAN (pretraining the grader first unless spaces are given).
    Train(TrainArgs),
    /// Synthesize a balanced corpus and per-grade contact sheets.
    Synthesize(SynthesizeArgs),
    /// FID, SWD, kappa/TPR and the augmentation A/B comparison.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON config file; every field optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set generator.base_channels=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Ablation switch: no_lesion_masks, no_agm, no_perceptual, no_cls, no_sca.
    #[arg(long = "ablate", value_name = "NAME")]
    pub ablate: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = resolve(self.config.as_deref(), &self.overrides)?;
        for name in &self.ablate {
            cfg.ablations.parse_flag(name)?;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["counts", "imbalanced"])]
    pub per_grade: Option<usize>,
    /// Five comma-separated counts, grade 0 first.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    /// Class profile; only `eyepacs` is known.
    #[arg(long, requires = "total")]
    pub imbalanced: Option<String>,
    #[arg(long)]
    pub total: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct FitSpacesArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub grader: PathBuf,
    /// Output file, `grade_spaces.json` by default next to the grader.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pre-fitted `grade_spaces.json`; skips grader pretraining.
    #[arg(long)]
    pub spaces: Option<PathBuf>,
    /// Continue from `<out>/checkpoint` with its stored config.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub per_grade: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Real image set.
    #[arg(long)]
    pub real: PathBuf,
    /// Synthesized image set.
    #[arg(long)]
    pub fake: PathBuf,
    /// Test set; enables the augmentation A/B comparison.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Grader whose predictions on the fake set give kappa and TPR.
    #[arg(long)]
    pub grader: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub ab_seeds: Vec<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a).map(|_| ()),
        Command::PretrainGrader(a) => cmd_pretrain(&a).map(|_| ()),
        Command::FitSpaces(a) => cmd_fit_spaces(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Synthesize(a) => cmd_synthesize(&a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|_| ()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::Io { path: dir.to_path_buf(), source: std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found") })
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<PathBuf> {
    let counts: [usize; NUM_GRADES] = match (&a.per_grade, &a.counts, &a.imbalanced) {
        (Some(n), _, _) => [*n; NUM_GRADES],
        (_, Some(c), _) => c.as_slice().try_into().map_err(|_| Error::Usage("--counts needs five values".into()))?,
        (_, _, Some(p)) if p == "eyepacs" => eyepacs_counts(a.total.unwrap_or(0)),
        (_, _, Some(p)) => return Err(Error::Usage(format!("unknown profile {p}"))),
        _ => return Err(Error::Usage("one of --per-grade, --counts or --imbalanced is required".into())),
    };
    let out = run_dir(a.out.as_deref(), "data");
    let ds = generate_corpus(a.seed, counts, a.resolution)?;
    save_dataset(&ds, &out)?;
    log::info!("wrote {} samples {:?} to {}", ds.len(), counts, out.display());
    Ok(out)
}

fn pretrain_into(ds: &Dataset, cfg: &TrainConfig, dir: &Path) -> Result<GradingBackbone> {
    ensure_dir(dir)?;
    let (net, report) = pretrain_grader(ds, &cfg.grader)?;
    save_grader(&net, cfg.grader.seed, dir)?;
    write_json(&dir.join("grader_report.json"), &report)?;
    log::info!("grader held-out accuracy {:.3}", report.accuracy);
    Ok(net)
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<PathBuf> {
    let cfg = a.config.resolve()?;
    let ds = load_dataset(&a.data)?;
    let out = run_dir(a.out.as_deref(), "grader");
    pretrain_into(&ds, &cfg, &out)?;
    write_resolved(&out, &cfg)?;
    Ok(out)
}

pub fn cmd_fit_spaces(a: &FitSpacesArgs) -> Result<PathBuf> {
    let net = load_grader(&a.grader)?;
    let ds = load_dataset(&a.data)?;
    let spaces = fit_grading_spaces(&net, &ds)?;
    let out = a.out.clone().unwrap_or_else(|| a.grader.join("grade_spaces.json"));
    write_spaces(&out, &spaces)?;
    Ok(out)
}

/// Returns the run directory; the final checkpoint is `<run>/checkpoint`.
pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    let out = run_dir(a.out.as_deref(), "train");
    ensure_dir(&out)?;
    let ckpt = out.join("checkpoint");
    let ds = load_dataset(&a.data)?;
    let mut model = if a.resume {
        let model = load_checkpoint(&ckpt)?;
        log::info!("resuming at step {} epoch {}", model.state.step, model.state.epoch);
        model
    } else {
        let cfg = a.config.resolve()?;
        let spaces = match &a.spaces {
            Some(p) => read_spaces(p)?,
            None => {
                let net = pretrain_into(&ds, &cfg, &out.join("grader"))?;
                fit_grading_spaces(&net, &ds)?
            }
        };
        write_spaces(&out.join("grade_spaces.json"), &spaces)?;
        GanModel::new(cfg, spaces)?
    };
    write_resolved(&out, &model.config)?;
    let mut observer = RunObserver::new(&out.join("train_log.csv"), Some(ckpt.clone()))?;
    let started = Instant::now();
    train(&mut model, &ds, &mut observer)?;
    save_checkpoint(&model, &ckpt)?;
    log::info!("trained {} steps in {:.1}s", observer.steps_seen, started.elapsed().as_secs_f64());
    Ok(out)
}

pub fn cmd_synthesize(a: &SynthesizeArgs) -> Result<PathBuf> {
    let model = load_checkpoint(&a.checkpoint)?;
    let out = run_dir(a.out.as_deref(), "synth");
    ensure_dir(&out)?;
    let started = Instant::now();
    let mut by_grade: Vec<Vec<drgan_core::Tensor>> = vec![Vec::new(); NUM_GRADES];
    for sample in SynthesisStream::new(&model, a.per_grade, a.seed) {
        let sample = sample?;
        save_sample(&sample, &out.join(&sample.id))?;
        by_grade[sample.grade.index()].push(sample.image);
    }
    let n = a.per_grade * NUM_GRADES;
    if n > 0 {
        log::info!("synthesized {n} images, {:.3}s per image", started.elapsed().as_secs_f64() / n as f64);
    }
    for (g, imgs) in by_grade.iter().enumerate() {
        if !imgs.is_empty() {
            save_contact_sheet(&imgs.iter().collect::<Vec<_>>(), 8, &out.join(format!("grid_grade{g}.png")))?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    #[serde(flatten)]
    pub metrics: MetricReport,
    /// FID over the whole sets.
    pub fid_overall: f64,
    pub fid_per_grade: Vec<Option<f64>>,
    pub augmentation: Option<AbReport>,
}

pub fn evaluate(real: &Dataset, fake: &Dataset, grader: Option<&GradingBackbone>, test: Option<&Dataset>, cfg: &TrainConfig, ab_seeds: &[u64], seed: u64) -> Result<EvaluationReport> {
    let embedding = RandomConvEmbedding::new(seed);
    let ri: Vec<usize> = (0..real.len()).collect();
    let fi: Vec<usize> = (0..fake.len()).collect();
    let (real_img, fake_img) = (images01(real, &ri), images01(fake, &fi));
    let fid_overall = fid(&embedding.embed_set(&real_img, "real")?, &embedding.embed_set(&fake_img, "fake")?)?;
    let (fid_avg, per) = per_grade_fid(real, fake, &embedding)?;
    let s = swd(&real_img, &fake_img, SWD_PROJECTIONS, &mut stream(&[seed]))?;
    let mut metrics = MetricReport::empty(seed).with_swd(&s);
    metrics.fid = Some(fid_avg);
    metrics.counts = fake.counts_per_grade().to_vec();
    if let Some(net) = grader {
        let pred: Vec<usize> = fi.chunks(64).flat_map(|c| net.predict(&fake.image_batch(c))).collect();
        metrics = metrics.with_grading(&pred, &fake.labels())?;
    }
    let augmentation = match test {
        Some(t) => Some(augmentation_ab(real, fake, t, &BackboneClassifier { config: cfg.grader.clone() }, ab_seeds)?),
        None => None,
    };
    Ok(EvaluationReport { metrics, fid_overall, fid_per_grade: per.to_vec(), augmentation })
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<PathBuf> {
    require_dir(&a.real)?;
    require_dir(&a.fake)?;
    if let Some(t) = &a.test {
        require_dir(t)?;
    }
    let cfg = a.config.resolve()?;
    let real = load_dataset(&a.real)?;
    let fake = load_dataset(&a.fake)?;
    let test = a.test.as_deref().map(load_dataset).transpose()?;
    let grader = a.grader.as_deref().map(load_grader).transpose()?;
    let report = evaluate(&real, &fake, grader.as_ref(), test.as_ref(), &cfg, &a.ab_seeds, a.seed)?;
    let out = a.out.clone().unwrap_or_else(|| run_dir(None, "eval").join("report.json"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_json(&out, &report)?;
    Ok(out)
}
