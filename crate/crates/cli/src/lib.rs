//! Command-line driver for the desk-scale chest X-ray pipeline.
//!
//! Every command stages its outputs in a temporary directory next to
//! `--out-dir` and moves them into place only after it succeeds, together
//! with a `run.json` describing the run.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use densecxr::data::manifest::{resolve_image, write_manifest};
use densecxr::data::netpbm::read_pgm;
use densecxr::data::normalize::{load_stats, save_stats};
use densecxr::data::synth::{load_regions, PlantedRegion};
use densecxr::data::{
    apply_stats, compute_stats, generate_synthetic, load_images, load_manifest, normalized_dataset,
    patient_level_split, prepare_image, ImageGeometry, Manifest, SampleRecord, SyntheticDatasetSpec,
};
use densecxr::eval::{self, BootstrapConfig};
use densecxr::gradcam::{self, localization_score, upsample_heatmap, Sidecar};
use densecxr::loss::{compute_frequencies, compute_weights, contribution_report, write_contribution_csv};
use densecxr::optim::{train, write_training_log, TrainConfig};
use densecxr::weights::{load_weights, save_weights};
use densecxr::{Dataset, Model, ModelConfig, Tensor};
use serde::Serialize;
use serde_json::{json, Value};

pub const RUN_MANIFEST: &str = "run.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const STATS_FILE: &str = "stats.json";
pub const TRAINING_LOG: &str = "training_log.csv";
pub const CONTRIBUTIONS_FILE: &str = "contributions.csv";
pub const TRAIN_MANIFEST: &str = "train.csv";
pub const TEST_MANIFEST: &str = "test.csv";
pub const SPLIT_REPORT: &str = "split_report.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const BOOTSTRAP_CSV: &str = "bootstrap.csv";
pub const INTERVALS_CSV: &str = "intervals.csv";
pub const SCORES_CSV: &str = "scores.csv";

/// Noise level of the synthetic acceptance dataset.
pub const DEFAULT_NOISE_STD: f64 = 120.0;

/// Images scored per forward pass in `eval`.
const EVAL_BATCH: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "densecxr", version, about = "Multi-label DenseNet classifier for chest X-rays, desk scale")]
pub struct Cli {
    /// Seed for generation, splitting, initialization, shuffling and bootstrap.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving the command's outputs.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Suppress progress messages.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted class signals.
    Synth(SynthArgs),
    /// Split a manifest into train and test sides by patient.
    Split(SplitArgs),
    /// Train a model on a train manifest.
    Train(TrainArgs),
    /// Score a test manifest and write metrics, ROC curves and intervals.
    Eval(EvalArgs),
    /// Write Grad-CAM overlays for images and classes.
    Gradcam(GradcamArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Side length of the square images.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Comma-separated per-class prevalence.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.1,0.3,0.5")]
    pub prevalence: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_NOISE_STD)]
    pub noise: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Share of images assigned to train.
    #[arg(long, default_value_t = 0.8)]
    pub fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub weighted_loss: Switch,
    #[arg(long, default_value_t = 0.10)]
    pub dropout: f64,
    /// Side length images are resized to.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 16)]
    pub initial_channels: usize,
    #[arg(long, default_value_t = 8)]
    pub growth_rate: usize,
    /// Comma-separated layers per dense block.
    #[arg(long, value_delimiter = ',', default_value = "2,2")]
    pub blocks: Vec<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Normalization statistics written by `train`.
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long, default_value_t = eval::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = eval::DEFAULT_RESAMPLES)]
    pub resamples: usize,
    #[arg(long, default_value_t = eval::DEFAULT_CONFIDENCE)]
    pub confidence: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcamArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    /// Image to explain; repeatable.
    #[arg(long = "image", required = true)]
    pub images: Vec<PathBuf>,
    /// Class index to explain; repeatable.
    #[arg(long = "class", required = true)]
    pub classes: Vec<usize>,
    /// Class names for the sidecars, in model output order.
    #[arg(long, value_delimiter = ',')]
    pub class_names: Option<Vec<String>>,
    /// `regions.csv` of a synthetic dataset, for localization scores.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    #[arg(long, default_value_t = gradcam::DEFAULT_BLEND_ALPHA)]
    pub alpha: f64,
}

/// Bad flags or flag combinations; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

/// Written on every successful run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub flags: Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub wall_seconds: f64,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let stage = Stage::new(&cli.out_dir)?;
    let (name, flags, inputs) = match &cli.command {
        Command::Synth(a) => {
            synth(cli, a, stage.path())?;
            ("synth", json!(a), vec![])
        }
        Command::Split(a) => {
            split(cli, a, stage.path())?;
            ("split", json!(a), vec![a.manifest.clone()])
        }
        Command::Train(a) => {
            train_cmd(cli, a, stage.path())?;
            ("train", json!(a), vec![a.manifest.clone()])
        }
        Command::Eval(a) => {
            eval_cmd(cli, a, stage.path())?;
            ("eval", json!(a), vec![a.weights.clone(), a.manifest.clone(), a.stats.clone()])
        }
        Command::Gradcam(a) => {
            gradcam_cmd(cli, a, stage.path())?;
            let mut inputs = vec![a.weights.clone(), a.stats.clone()];
            inputs.extend(a.images.iter().cloned());
            inputs.extend(a.regions.iter().cloned());
            ("gradcam", json!(a), inputs)
        }
    };
    let mut outputs = stage.entries()?;
    outputs.push(RUN_MANIFEST.into());
    let manifest = RunManifest {
        command: name.into(),
        flags,
        seed: cli.seed,
        inputs,
        outputs,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&stage.path().join(RUN_MANIFEST), &manifest)?;
    stage.commit()?;
    progress(cli, format_args!("{name}: wrote {}", cli.out_dir.display()));
    Ok(())
}

fn progress(cli: &Cli, msg: std::fmt::Arguments<'_>) {
    if !cli.quiet {
        eprintln!("{msg}");
    }
}

/// Temporary sibling of the output directory. Dropping it without
/// [`Stage::commit`] removes everything written so far.
struct Stage {
    dir: tempfile::TempDir,
    target: PathBuf,
}

impl Stage {
    fn new(target: &Path) -> Result<Self> {
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let dir = tempfile::Builder::new()
            .prefix(".densecxr-stage-")
            .tempdir_in(&parent)
            .with_context(|| format!("staging next to {}", target.display()))?;
        Ok(Stage {
            dir,
            target: target.to_path_buf(),
        })
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn entries(&self) -> Result<Vec<String>> {
        let mut names = Vec::new();
        for e in fs::read_dir(self.path())? {
            names.push(e?.file_name().to_string_lossy().into_owned());
        }
        names.sort();
        Ok(names)
    }

    /// Moves every staged file into the target directory, replacing files
    /// of the same name.
    fn commit(self) -> Result<()> {
        fs::create_dir_all(&self.target).with_context(|| format!("creating {}", self.target.display()))?;
        for name in self.entries()? {
            let to = self.target.join(&name);
            fs::rename(self.path().join(&name), &to).with_context(|| format!("moving {}", to.display()))?;
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn synth(cli: &Cli, a: &SynthArgs, out: &Path) -> Result<()> {
    let spec = SyntheticDatasetSpec {
        n_images: a.n,
        height: a.size,
        width: a.size,
        num_classes: a.classes,
        prevalence: a.prevalence.clone(),
        noise_std: a.noise,
        seed: cli.seed,
    };
    if let Err(e) = spec.validate() {
        return usage(e.to_string());
    }
    let data = generate_synthetic(&spec, out)?;
    progress(cli, format_args!("synth: {} images, {} planted regions", a.n, data.regions.len()));
    Ok(())
}

/// `path` rewritten relative to `base`, both taken as absolute.
fn relative_to(path: &Path, base: &Path) -> Result<String> {
    let path = std::path::absolute(path)?;
    let base = std::path::absolute(base)?;
    let rel = pathdiff::diff_paths(&path, &base).unwrap_or(path);
    Ok(rel.to_string_lossy().replace('\\', "/"))
}

#[derive(Debug, Serialize)]
struct SideReport {
    patients: usize,
    images: usize,
    prevalence: BTreeMap<String, f64>,
}

fn side_report(m: &Manifest) -> SideReport {
    let mut patients: Vec<&str> = m.records.iter().map(|r| r.patient_id.as_str()).collect();
    patients.sort_unstable();
    patients.dedup();
    let n = m.records.len().max(1) as f64;
    let prevalence = m
        .class_names
        .iter()
        .enumerate()
        .map(|(c, name)| (name.clone(), m.records.iter().filter(|r| r.labels[c] == 1).count() as f64 / n))
        .collect();
    SideReport {
        patients: patients.len(),
        images: m.records.len(),
        prevalence,
    }
}

fn split(cli: &Cli, a: &SplitArgs, out: &Path) -> Result<()> {
    if !(a.fraction > 0.0 && a.fraction < 1.0) {
        return usage(format!("--fraction {} must lie strictly between 0 and 1", a.fraction));
    }
    let manifest = load_manifest(&a.manifest)?;
    let result = patient_level_split(&manifest.records, a.fraction, cli.seed)?;
    // image paths must still resolve from the output directory
    let rebase = |mut records: Vec<SampleRecord>| -> Result<Manifest> {
        for r in &mut records {
            r.image_path = relative_to(&resolve_image(&a.manifest, &r.image_path), &cli.out_dir)?;
        }
        Ok(manifest.with_records(records))
    };
    let train = rebase(result.train)?;
    let test = rebase(result.test)?;
    write_manifest(&out.join(TRAIN_MANIFEST), &train)?;
    write_manifest(&out.join(TEST_MANIFEST), &test)?;

    let train_ids: std::collections::HashSet<&str> = train.records.iter().map(|r| r.patient_id.as_str()).collect();
    let overlap = test
        .records
        .iter()
        .filter(|r| train_ids.contains(r.patient_id.as_str()))
        .map(|r| r.patient_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let report = json!({
        "train_fraction": a.fraction,
        "seed": cli.seed,
        "train": side_report(&train),
        "test": side_report(&test),
        "patient_overlap": overlap,
    });
    write_json(&out.join(SPLIT_REPORT), &report)?;
    progress(
        cli,
        format_args!("split: {} train / {} test images", train.records.len(), test.records.len()),
    );
    Ok(())
}

fn geometry(config: &ModelConfig) -> ImageGeometry {
    ImageGeometry {
        size: config.input_size,
        replicate_to_3: config.input_channels == 3,
    }
}

fn train_cmd(cli: &Cli, a: &TrainArgs, out: &Path) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let config = ModelConfig {
        input_channels: 1,
        input_size: (a.size, a.size),
        initial_channels: a.initial_channels,
        growth_rate: a.growth_rate,
        block_layout: a.blocks.clone(),
        num_classes: manifest.num_classes(),
        dropout_rate: a.dropout,
        use_batch_norm: true,
    };
    if let Err(e) = config.validate() {
        return usage(e.to_string());
    }
    let tc = TrainConfig {
        batch_size: a.batch_size,
        epochs: a.epochs,
        initial_lr: a.lr,
        seed: cli.seed,
        weighted_loss: a.weighted_loss == Switch::On,
        ..TrainConfig::default()
    };
    if let Err(e) = tc.validate() {
        return usage(e.to_string());
    }

    let images = load_images::<f64>(&manifest, &a.manifest, geometry(&config))?;
    let stats = compute_stats(&images)?;
    let data = normalized_dataset(&manifest, &images, &stats)?;
    drop(images);
    let freqs = compute_frequencies::<f64>(&data.labels)?;
    for c in freqs.degenerate() {
        progress(cli, format_args!("warning: class {} has a single label value", manifest.class_names[c]));
    }
    let weights = compute_weights(&freqs);
    let report = contribution_report(&data.labels, &weights, &manifest.class_names)?;
    write_contribution_csv(&report, create(&out.join(CONTRIBUTIONS_FILE))?)?;

    let mut model = Model::<f64>::build(config, cli.seed)?;
    let logs = train(&mut model, &data, &weights, &tc, |log, _| {
        progress(
            cli,
            format_args!(
                "epoch {:>3}  loss {:.5}  lr {:.2e}  {:.1}s",
                log.epoch, log.mean_loss, log.lr, log.wall_seconds
            ),
        );
        Ok(())
    })?;
    write_training_log(&logs, create(&out.join(TRAINING_LOG))?)?;
    save_stats(&out.join(STATS_FILE), &stats)?;
    save_weights(&out.join(WEIGHTS_FILE), &model)?;
    Ok(())
}

/// Probabilities for every image, `N×K`, scored in fixed-size batches.
pub fn score(model: &Model<f64>, data: &Dataset<f64>) -> Result<Vec<Vec<f64>>> {
    let k = model.config().num_classes;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (batch, _) = data.batch(chunk)?;
        let p = model.predict(&batch)?;
        rows.extend(p.data().chunks(k).map(<[f64]>::to_vec));
    }
    Ok(rows)
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn eval_cmd(cli: &Cli, a: &EvalArgs, out: &Path) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return usage(format!("--threshold {} outside [0, 1]", a.threshold));
    }
    if !a.stats.is_file() {
        bail!(
            "normalization statistics {} not found; evaluation needs the stats written by train",
            a.stats.display()
        );
    }
    let stats = load_stats(&a.stats)?;
    let model = load_weights::<f64>(&a.weights)?;
    let manifest = load_manifest(&a.manifest)?;
    if manifest.num_classes() != model.config().num_classes {
        bail!(
            "manifest has {} classes, model has {}",
            manifest.num_classes(),
            model.config().num_classes
        );
    }
    let images = load_images::<f64>(&manifest, &a.manifest, geometry(model.config()))?;
    let data = normalized_dataset(&manifest, &images, &stats)?;
    let scores = score(&model, &data)?;

    let bootstrap = BootstrapConfig {
        n_resamples: a.resamples,
        confidence_level: a.confidence,
        seed: cli.seed,
    };
    let report = eval::metrics_table(&manifest.class_names, &scores, &data.labels, a.threshold, &bootstrap)?;
    let rows: Vec<_> = report.classes.iter().map(|c| c.row.clone()).collect();
    eval::write_metrics_csv(&rows, create(&out.join(METRICS_CSV))?)?;
    eval::write_metrics_json(&report, create(&out.join(METRICS_JSON))?)?;
    eval::write_bootstrap_csv(&report, create(&out.join(BOOTSTRAP_CSV))?)?;
    eval::write_interval_table(&report, create(&out.join(INTERVALS_CSV))?)?;
    for c in &report.classes {
        if let Some(roc) = &c.roc {
            let path = out.join(format!("roc_{}.csv", file_safe(&c.row.class_name)));
            eval::write_roc_csv(roc, create(&path)?)?;
        }
    }

    let mut w = csv::Writer::from_writer(create(&out.join(SCORES_CSV))?);
    let mut header = vec!["image".to_string()];
    header.extend(manifest.class_names.iter().cloned());
    w.write_record(&header)?;
    for (r, s) in manifest.records.iter().zip(&scores) {
        let mut rec = vec![r.image_path.clone()];
        rec.extend(s.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;

    for c in &report.classes {
        let interval = c.bootstrap.as_ref().map_or_else(|| "NaN".into(), |b| b.format_interval());
        progress(
            cli,
            format_args!("{:<12} AUC {:.4}  {}", c.row.class_name, c.row.auc, interval),
        );
    }
    Ok(())
}

/// Planted regions keyed by absolute image path and class.
fn region_index(path: &Path) -> Result<HashMap<(PathBuf, usize), PlantedRegion>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut index = HashMap::new();
    for r in load_regions(path)? {
        let image = std::path::absolute(base.join(&r.image))?;
        index.insert((image, r.class_index), r);
    }
    Ok(index)
}

fn gradcam_cmd(cli: &Cli, a: &GradcamArgs, out: &Path) -> Result<()> {
    let model = load_weights::<f64>(&a.weights)?;
    let k = model.config().num_classes;
    if let Some(&bad) = a.classes.iter().find(|&&c| c >= k) {
        return usage(format!("--class {bad} for a {k}-class model"));
    }
    let names = match &a.class_names {
        Some(n) if n.len() != k => return usage(format!("{} class names for a {k}-class model", n.len())),
        Some(n) => n.clone(),
        None => (0..k).map(|c| format!("class{c}")).collect(),
    };
    if !(a.alpha > 0.0 && a.alpha <= 1.0) {
        return usage(format!("--alpha {} outside (0, 1]", a.alpha));
    }
    let stats = load_stats(&a.stats)?;
    let regions = match &a.regions {
        Some(p) => region_index(p)?,
        None => HashMap::new(),
    };
    let geom = geometry(model.config());
    let mut used = std::collections::HashSet::new();
    for path in &a.images {
        let raw = read_pgm(path)?;
        let input: Tensor<f64> = apply_stats(&prepare_image(&raw, geom.size, geom.replicate_to_3)?, &stats)?;
        let stem = path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        if !used.insert(stem.clone()) {
            return usage(format!("two images share the file name {stem}"));
        }
        let abs = std::path::absolute(path)?;
        for &class in &a.classes {
            let cam = gradcam::gradcam(&model, &input, class)?;
            let map = upsample_heatmap(&cam.heatmap, raw.height, raw.width)?;
            let base = format!("{stem}_{}", file_safe(&names[class]));
            gradcam::write_overlay(&raw, &map, a.alpha, &out.join(format!("{base}.ppm")))?;
            let score = match regions.get(&(abs.clone(), class)) {
                Some(r) => Some(localization_score(&map, &r.quadrant)?),
                None => None,
            };
            let sidecar = Sidecar {
                image: path.to_string_lossy().into_owned(),
                class: names[class].clone(),
                class_index: class,
                probability: cam.probability,
                raw_max: cam.heatmap.raw_max,
                empty_heatmap: cam.heatmap.is_empty(),
                source_layer: cam.heatmap.source_layer.clone(),
                blend_alpha: a.alpha,
                localization_score: score,
            };
            gradcam::write_sidecar(&out.join(format!("{base}.json")), &sidecar)?;
        }
    }
    progress(
        cli,
        format_args!("gradcam: {} overlays", a.images.len() * a.classes.len()),
    );
    Ok(())
}
