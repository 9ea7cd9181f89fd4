//! The `octnet` executable: one subcommand per pipeline stage, handing off
//! through files.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cohort::{self, ClinicalTables, CohortRules, Manifest, Split};
use crate::error::{Error, Result};
use crate::evaluation::{self, Level, ScoredSample};
use crate::image::{self, FULL_HEIGHT, FULL_WIDTH};
use crate::network::{ArchName, InputDims, Network};
use crate::occlusion;
use crate::rng::Rng;
use crate::synth::{self, DatasetSpec, Perturbation, PhantomParams};
use crate::trainer::{self, TrainConfig};
use crate::weights;

pub const DEFAULT_SEED: u64 = 20170101;
pub const META_FILE: &str = "run.meta";

#[derive(Debug, Parser)]
#[command(name = "octnet", version, about = "OCT AMD classification pipeline")]
pub struct Cli {
    /// Seed for every random choice (required with --test-mode).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; never changes output bytes.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Refuse to run without an explicit --seed.
    #[arg(long, global = true)]
    pub test_mode: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Classify patients, split them and write the manifest.
    Cohort(CohortArgs),
    /// Equalize and downsample the manifest's images.
    Preprocess(PreprocessArgs),
    /// Train a network.
    Train(TrainArgs),
    /// Score a split and write ROC curves and metrics per level.
    Eval(EvalArgs),
    /// Occlusion heatmaps for preprocessed images.
    Occlude(OccludeArgs),
    /// Re-run the command recorded in a run.meta file.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub patients_per_class: usize,
    #[arg(long, default_value_t = 1)]
    pub scans_per_patient: usize,
    #[arg(long, default_value_t = 61)]
    pub slices: usize,
    #[arg(long, default_value_t = synth::DESK_WIDTH)]
    pub width: usize,
    #[arg(long, default_value_t = synth::DESK_HEIGHT)]
    pub height: usize,
    /// Half-width of uniform pixel noise.
    #[arg(long)]
    pub noise: Option<f32>,
    /// drusen | fluid
    #[arg(long, default_value = "drusen")]
    pub perturbation: String,
}

#[derive(Debug, Args)]
pub struct CohortArgs {
    /// Directory holding diagnoses.csv, acuity.csv, injections.csv, scans.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Slice images; defaults to <data>/images.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub validation_fraction: f64,
    /// Comma-separated ICD-9 prefixes counted as retinal diagnoses.
    #[arg(long, value_delimiter = ',', default_value = "361,362,363")]
    pub retinal_prefixes: Vec<String>,
    #[arg(long, default_value_t = 30.0)]
    pub acuity_cut: f64,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = FULL_WIDTH)]
    pub width: usize,
    #[arg(long, default_value_t = FULL_HEIGHT)]
    pub height: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// desk | full
    #[arg(long, default_value = "desk")]
    pub config: String,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub learning_rate: f32,
    #[arg(long, default_value_t = 500)]
    pub eval_interval: usize,
    #[arg(long, default_value_t = 8000)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 2)]
    pub patience: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value = "desk")]
    pub config: String,
    #[arg(long, default_value = "validation")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OccludeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value = "desk")]
    pub config: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Take images from this manifest instead of (or as well as) positional paths.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "validation")]
    pub split: String,
    /// Only manifest rows with this label (0 or 1).
    #[arg(long)]
    pub label: Option<u8>,
    /// At most this many manifest rows.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long = "box", default_value_t = occlusion::DEFAULT_BOX)]
    pub box_size: usize,
    /// Fill intensity of the occluder, 0-255.
    #[arg(long, default_value_t = 0)]
    pub fill: u8,
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub meta: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Contents of `run.meta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Command line without the program name and without --threads.
    pub args: Vec<String>,
    pub config: serde_json::Value,
}

fn strip_threads(args: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
        } else if a == "--threads" {
            skip = true;
        } else if !a.starts_with("--threads=") {
            out.push(a.clone());
        }
    }
    out
}

fn write_meta(out: &Path, command: &str, seed: u64, args: &[String], config: serde_json::Value) -> Result<()> {
    let meta = RunMeta {
        tool: "octnet".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        seed,
        args: strip_threads(args),
        config,
    };
    let path = out.join(META_FILE);
    let mut text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse()
}

/// Network input dims taken from the first image of the manifest.
fn manifest_dims(manifest: &Manifest) -> Result<InputDims> {
    let row = manifest.rows.first().ok_or_else(|| Error::EmptySplit("manifest has no rows".into()))?;
    let img = image::load_pgm(row.path.as_ref())?;
    Ok(InputDims::gray(img.width(), img.height()))
}

struct Ctx<'a> {
    seed: u64,
    args: &'a [String],
}

fn cmd_synth(a: &SynthArgs, ctx: &Ctx) -> Result<()> {
    let mut params = PhantomParams::with_dims(a.width, a.height);
    params.perturbation = a.perturbation.parse::<Perturbation>()?;
    if let Some(noise) = a.noise {
        params.noise = noise;
    }
    let spec = DatasetSpec {
        patients_per_class: a.patients_per_class,
        scans_per_patient: a.scans_per_patient,
        slices_per_scan: a.slices,
        params,
        seed: ctx.seed,
    };
    create_dir(&a.out)?;
    let ds = synth::generate_dataset(&spec, &a.out)?;
    write_meta(&a.out, "synth", ctx.seed, ctx.args, serde_json::to_value(&spec).expect("json"))?;
    eprintln!("synth: {} patients, {} images -> {}", ds.truth.len(), ds.n_images, a.out.display());
    Ok(())
}

fn cmd_cohort(a: &CohortArgs, ctx: &Ctx) -> Result<()> {
    let tables = ClinicalTables::load(&a.data)?;
    let rules =
        CohortRules { retinal_prefixes: a.retinal_prefixes.clone(), acuity_cut: a.acuity_cut, ..Default::default() };
    let labels = cohort::classify_all(&tables, &rules);
    let mut rng = Rng::new(ctx.seed);
    let split = cohort::split_patients(&labels, a.validation_fraction, &mut rng)?;
    let images = a.images.clone().unwrap_or_else(|| a.data.join(synth::IMAGES_DIR));
    let (manifest, rejected) = cohort::build_manifest(&tables, &labels, &split, &images, &mut rng)?;
    create_dir(&a.out)?;
    cohort::save_labels(&a.out.join("labels.csv"), &labels)?;
    manifest.save(&a.out.join("manifest.csv"))?;
    cohort::write_csv(&a.out.join("rejected_scans.csv"), &rejected)?;
    let config = serde_json::json!({ "rules": rules, "validation_fraction": a.validation_fraction });
    write_meta(&a.out, "cohort", ctx.seed, ctx.args, config)?;
    let count = |l| labels.iter().filter(|c| c.label == l).count();
    eprintln!(
        "cohort: {} normal, {} AMD, {} excluded; {} rows ({} scans rejected)",
        count(cohort::Label::Normal),
        count(cohort::Label::Amd),
        count(cohort::Label::Excluded),
        manifest.rows.len(),
        rejected.len()
    );
    Ok(())
}

fn cmd_preprocess(a: &PreprocessArgs, ctx: &Ctx) -> Result<()> {
    use rayon::prelude::*;
    let manifest = Manifest::load(&a.manifest)?;
    create_dir(&a.out)?;
    let rows = manifest
        .rows
        .par_iter()
        .map(|row| {
            let img = image::load_pgm(row.path.as_ref())?;
            let processed = image::preprocess(&img, a.width, a.height)?;
            let path = a.out.join(image::slice_file_name(&row.scan_id, row.slice_index));
            image::save_pgm(&processed, &path)?;
            Ok(cohort::ManifestRow { path: path.to_string_lossy().into_owned(), ..row.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = Manifest { rows };
    out.save(&a.out.join("manifest.csv"))?;
    let config = serde_json::json!({ "width": a.width, "height": a.height, "order": "equalize-then-downsample" });
    write_meta(&a.out, "preprocess", ctx.seed, ctx.args, config)?;
    eprintln!("preprocess: {} images -> {}x{}", out.rows.len(), a.width, a.height);
    Ok(())
}

fn cmd_train(a: &TrainArgs, ctx: &Ctx) -> Result<()> {
    let arch: ArchName = a.config.parse()?;
    let config = TrainConfig {
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        eval_interval: a.eval_interval,
        max_iterations: a.max_iterations,
        patience: a.patience,
        seed: ctx.seed,
    };
    config.validate()?;
    let manifest = Manifest::load(&a.manifest)?;
    let train_set = trainer::load_split(&manifest, Split::Train)?;
    let validation = trainer::load_split(&manifest, Split::Validation)?;
    let dims = manifest_dims(&manifest)?;
    let network = Network::build(arch.specs(dims), dims, ctx.seed)?;
    create_dir(&a.out)?;
    eprintln!(
        "train: {} network, {} parameters, {} train / {} validation images",
        arch,
        network.param_count(),
        train_set.len(),
        validation.len()
    );
    let out = a.out.clone();
    let (best, history) = trainer::train(network, &train_set, &validation, &config, |rec, net| {
        eprintln!("iter {:>6}  val_acc {:.4}  val_loss {:.4}", rec.iteration, rec.accuracy, rec.loss);
        weights::save(net, &out.join(format!("ckpt_{}.octw", rec.iteration)))
    })?;
    weights::save(&best, &a.out.join("best.octw"))?;
    write_file(&a.out.join("history.csv"), history.to_csv())?;
    let summary = serde_json::json!({
        "iterations": history.losses.len(),
        "stop_reason": history.stop_reason,
        "best_iteration": history.best_iteration,
        "input": dims,
    });
    let mut text = serde_json::to_string_pretty(&summary).expect("json");
    text.push('\n');
    write_file(&a.out.join("summary.json"), text)?;
    let meta = serde_json::json!({ "arch": arch, "train": config, "input": dims });
    write_meta(&a.out, "train", ctx.seed, ctx.args, meta)?;
    let kept = match history.best_iteration {
        Some(it) => format!("best checkpoint at iteration {it}"),
        None => "no evaluation ran; kept final weights".to_string(),
    };
    eprintln!("train: stopped after {} iterations ({}), {kept}", history.losses.len(), history.stop_reason);
    Ok(())
}

fn load_network(path: &Path, config: &str, dims: InputDims) -> Result<Network> {
    let arch: ArchName = config.parse()?;
    weights::load(path, arch.specs(dims), dims)
}

fn cmd_eval(a: &EvalArgs, ctx: &Ctx) -> Result<()> {
    let split = parse_split(&a.split)?;
    let manifest = Manifest::load(&a.manifest)?;
    let samples = trainer::load_split(&manifest, split)?;
    if samples.is_empty() {
        return Err(Error::EmptySplit(format!("no {split} rows in manifest")));
    }
    let dims = InputDims::gray(samples[0].image.shape()[2], samples[0].image.shape()[1]);
    let network = load_network(&a.weights, &a.config, dims)?;
    let classes: std::collections::BTreeSet<u8> = samples.iter().map(|s| s.label).collect();
    if classes.len() < 2 {
        return Err(Error::SingleClass(format!("{split} split only contains label {classes:?}")));
    }

    let started = Instant::now();
    let result = trainer::evaluate_split(&network, &samples)?;
    let ms_per_image = started.elapsed().as_secs_f64() * 1e3 / samples.len() as f64;

    let scored: Vec<ScoredSample> = samples
        .iter()
        .zip(&result.probs)
        .map(|(s, &p)| ScoredSample::image(&s.patient_id, &s.scan_id, s.slice_index, s.label, p as f64))
        .collect();
    create_dir(&a.out)?;
    evaluation::save_scores(&a.out.join("scores.csv"), &scored)?;
    for level in Level::ALL {
        let (metrics, roc) = evaluation::evaluate_level(&scored, level)?;
        write_file(&a.out.join(format!("roc_{level}.csv")), evaluation::roc_csv(&roc))?;
        evaluation::save_metrics(&a.out.join(format!("metrics_{level}.csv")), &metrics)?;
        println!(
            "{level:<8} n={:<5} AUROC {:.2}%  accuracy {:.2}%  sensitivity {:.2}%  specificity {:.2}%  \
             optimal cutoff {:.4} (sens {:.2}%, spec {:.2}%)",
            metrics.n,
            100.0 * metrics.auroc,
            100.0 * metrics.accuracy,
            100.0 * metrics.sensitivity,
            100.0 * metrics.specificity,
            metrics.cutoff,
            100.0 * metrics.cutoff_sensitivity,
            100.0 * metrics.cutoff_specificity,
        );
    }
    println!("inference: {ms_per_image:.3} ms/image");
    let config = serde_json::json!({ "arch": a.config, "split": split, "input": dims });
    write_meta(&a.out, "eval", ctx.seed, ctx.args, config)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct OcclusionRow {
    image: String,
    base_prob: f32,
    max_drop: f32,
    peak_x: usize,
    peak_y: usize,
    positions: usize,
}

fn cmd_occlude(a: &OccludeArgs, ctx: &Ctx) -> Result<()> {
    let mut inputs: Vec<PathBuf> = Vec::new();
    if let Some(m) = &a.manifest {
        let split = parse_split(&a.split)?;
        let manifest = Manifest::load(m)?;
        inputs.extend(
            manifest
                .split(split)
                .filter(|r| a.label.is_none_or(|l| r.label == l))
                .take(a.limit.unwrap_or(usize::MAX))
                .map(|r| PathBuf::from(&r.path)),
        );
    }
    inputs.extend(a.images.iter().cloned());
    if inputs.is_empty() {
        return Err(Error::Config("no input images (give paths or --manifest)".into()));
    }
    create_dir(&a.out)?;
    let mut network: Option<Network> = None;
    let mut rows = Vec::new();
    for path in &inputs {
        let img = image::load_pgm(path)?;
        let dims = InputDims::gray(img.width(), img.height());
        if network.as_ref().is_none_or(|n| n.input_dims() != dims) {
            network = Some(load_network(&a.weights, &a.config, dims)?);
        }
        let net = network.as_ref().expect("loaded");
        let heat = occlusion::occlusion_map(net, &img.to_tensor(), a.box_size, a.fill as f32 / 255.0)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Config(format!("cannot name output for {}", path.display())))?;
        heat.save(&a.out.join(format!("{stem}.heat")))?;
        image::save_ppm(&occlusion::render_heatmap(&heat, &img)?, &a.out.join(format!("{stem}.ppm")))?;
        let (peak_x, peak_y) = heat.peak();
        rows.push(OcclusionRow {
            image: stem,
            base_prob: heat.base_prob,
            max_drop: heat.max_value(),
            peak_x,
            peak_y,
            positions: heat.positions(),
        });
    }
    cohort::write_csv(&a.out.join("occlusion.csv"), &rows)?;
    let config = serde_json::json!({ "arch": a.config, "box": a.box_size, "fill": a.fill });
    write_meta(&a.out, "occlude", ctx.seed, ctx.args, config)?;
    eprintln!("occlude: {} heatmaps -> {}", rows.len(), a.out.display());
    Ok(())
}

fn cmd_replay(a: &ReplayArgs, threads: usize) -> Result<()> {
    let text = std::fs::read_to_string(&a.meta).map_err(|e| Error::io(&a.meta, e))?;
    let meta: RunMeta = serde_json::from_str(&text).map_err(|e| Error::format("run.meta", e.to_string()))?;
    if meta.command == "replay" {
        return Err(Error::Config("refusing to replay a replay".into()));
    }
    let mut args = meta.args.clone();
    if let Some(out) = &a.out {
        let pos = args
            .iter()
            .position(|s| s == "--out")
            .ok_or_else(|| Error::Config("recorded command has no --out".into()))?;
        args[pos + 1] = out.to_string_lossy().into_owned();
    }
    args.push("--threads".into());
    args.push(threads.to_string());
    run(args).map_err(|e| match e {
        CliError::Usage(e) => Error::Config(e.to_string()),
        CliError::Run(e) => e,
    })
}

/// Failure of a whole invocation.
#[derive(Debug)]
pub enum CliError {
    Usage(clap::Error),
    Run(Error),
}

/// Runs one command line (without the program name).
pub fn run<I, T>(args: I) -> std::result::Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<String> = args.into_iter().map(|a| a.into().to_string_lossy().into_owned()).collect();
    let cli = Cli::try_parse_from(std::iter::once("octnet".to_string()).chain(args.iter().cloned()))
        .map_err(CliError::Usage)?;
    execute(&cli, &args).map_err(CliError::Run)
}

fn execute(cli: &Cli, args: &[String]) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let seed = match (cli.seed, cli.test_mode) {
        (Some(s), _) => s,
        (None, true) if !matches!(cli.command, Command::Replay(_)) => {
            return Err(Error::Config("--seed is required in test mode".into()))
        }
        (None, _) => DEFAULT_SEED,
    };
    // The recorded command line always carries the effective seed.
    let mut recorded = args.to_vec();
    if cli.seed.is_none() {
        recorded.push("--seed".into());
        recorded.push(seed.to_string());
    }
    let ctx = Ctx { seed, args: &recorded };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Synth(a) => cmd_synth(a, &ctx),
        Command::Cohort(a) => cmd_cohort(a, &ctx),
        Command::Preprocess(a) => cmd_preprocess(a, &ctx),
        Command::Train(a) => cmd_train(a, &ctx),
        Command::Eval(a) => cmd_eval(a, &ctx),
        Command::Occlude(a) => cmd_occlude(a, &ctx),
        Command::Replay(a) => cmd_replay(a, cli.threads),
    })
}

/// Process entry point; returns the exit code.
pub fn main() -> i32 {
    match run(std::env::args_os().skip(1)) {
        Ok(()) => 0,
        Err(CliError::Usage(e)) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}
