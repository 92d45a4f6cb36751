//! Command-line entry point: corpus generation, label fusion, agreement
//! statistics, training, evaluation, attention maps, threshold calibration,
//! and model export. All outputs land under `--out` with fixed names.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_corpus, load_manifest, CorpusConfig, Manifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::explain::{grad_cam, export_map, ExplainTarget};
use crate::fusion::{build_targets, TargetSource};
use crate::metrics::report_io::{agreement_report_csv, metric_report_csv, threshold_table_csv};
use crate::metrics::{
    calibrate_threshold, evaluate_model, pairwise_interrater, AgreementScope,
};
use crate::network::{
    load_model, save_model, serial::size_report, softmax, BackboneConfig, Mode, Model,
    ModelConfig, EXPLANATIONS, QUALITY_CLASSES,
};
use crate::training::{train, AdamWConfig, LossWeights, ScheduleConfig, TrainConfig};
use crate::types::QualityClass;

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const THRESHOLDS_FILE: &str = "thresholds.csv";
pub const CONFIG_ECHO_FILE: &str = "config.json";
pub const FUSED_FILE: &str = "fused.jsonl";

/// Fusion settings: where training targets come from and optional fixed
/// class weights (computed from the training split when absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub target_source: TargetSource,
    pub class_weights: Option<[f64; QUALITY_CLASSES]>,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            target_source: TargetSource::Truth,
            class_weights: None,
        }
    }
}

/// Training loop settings (the schedule lives in its own section).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub runs: usize,
    pub master_seed: u64,
    pub val_fraction: f64,
    pub loss_weights: LossWeights,
    pub optimizer: AdamWConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            runs: d.runs,
            master_seed: d.master_seed,
            val_fraction: d.val_fraction,
            loss_weights: d.loss_weights,
            optimizer: d.optimizer,
        }
    }
}

/// Network shape settings. `preset` ("desk" or "b0-equivalent") and explicit
/// stage lists are mutually exclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub preset: Option<String>,
    pub stage_widths: Option<Vec<usize>>,
    pub strides: Option<Vec<usize>>,
    pub hidden_units: usize,
    pub dropout: f64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            preset: None,
            stage_widths: None,
            strides: None,
            hidden_units: 64,
            dropout: 0.2,
        }
    }
}

/// Top-level run configuration; a single JSON document with one section per
/// module. Unknown keys are rejected; omitted fields take the defaults shown
/// in the echoed `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub corpus: CorpusConfig,
    pub fusion: FusionSection,
    pub training: TrainingSection,
    pub schedule: ScheduleConfig,
    pub backbone: BackboneSection,
    pub thresholds: [f64; EXPLANATIONS],
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            fusion: FusionSection::default(),
            training: TrainingSection::default(),
            schedule: ScheduleConfig::default(),
            backbone: BackboneSection::default(),
            thresholds: [0.5; EXPLANATIONS],
        }
    }
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: RunConfigFile = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.to_train_config().validate()?;
        self.to_model_config(self.corpus.resolution())?.validate()
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            runs: self.training.runs,
            master_seed: self.training.master_seed,
            val_fraction: self.training.val_fraction,
            target_source: self.fusion.target_source,
            loss_weights: self.training.loss_weights,
            optimizer: self.training.optimizer,
            schedule: self.schedule,
            class_weights: self.fusion.class_weights,
            thresholds: self.thresholds,
        }
    }

    pub fn to_model_config(&self, resolution: usize) -> Result<ModelConfig> {
        let backbone = match (&self.backbone.preset, &self.backbone.stage_widths) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "backbone: choose either `preset` or explicit stage lists, not both".into(),
                ))
            }
            (Some(name), None) => BackboneConfig::preset(name)?,
            (None, Some(widths)) => BackboneConfig {
                stage_widths: widths.clone(),
                strides: self
                    .backbone
                    .strides
                    .clone()
                    .ok_or_else(|| Error::Config("backbone: stage_widths needs strides".into()))?,
            },
            (None, None) => BackboneConfig::desk(),
        };
        Ok(ModelConfig {
            resolution,
            backbone,
            hidden_units: self.backbone.hidden_units,
            dropout: self.backbone.dropout,
        })
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "imageqx",
    about = "Explainable photo quality assessment for skin images",
    version
)]
pub struct Cli {
    /// Worker threads for internal parallelism (does not affect results).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled corpus and write its manifest.
    Generate {
        /// Run configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Master seed; overrides nothing else, all randomness flows from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Fuse per-image rater annotations into single targets.
    Fuse {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Label distribution and pairwise inter-rater agreement tables.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train one or more models and write per-run reports.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Overrides the config file's training.master_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Score a trained model against a manifest.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Five comma-separated explanation thresholds (default 0.5 each).
        #[arg(long)]
        thresholds: Option<String>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Write attention-map PNGs for one image and target.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Quality class or explanation name.
        #[arg(long)]
        target: String,
        /// Backbone stage index (default: last).
        #[arg(long)]
        layer: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Sweep poor-quality decision thresholds over a grid.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Grid as start:end:step, e.g. 0.0:1.0:0.1.
        #[arg(long, default_value = "0.0:1.0:0.1")]
        grid: String,
        #[command(flatten)]
        out: OutArg,
    },
    /// Copy a model and report its exact on-disk size.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|source| Error::Io { path, source })
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("report encode failed: {e}")))?;
    write_text(dir, name, &text)
}

/// Parse "start:end:step" into an inclusive ascending grid.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let [start, end, step] = parts[..] else {
        return Err(Error::Argument(format!(
            "grid `{s}` must be start:end:step"
        )));
    };
    let parse = |v: &str| {
        v.parse::<f64>()
            .map_err(|_| Error::Argument(format!("grid value `{v}` is not a number")))
    };
    let (start, end, step) = (parse(start)?, parse(end)?, parse(step)?);
    if step <= 0.0 || end < start {
        return Err(Error::Argument(format!(
            "grid `{s}` needs end >= start and step > 0"
        )));
    }
    let n = ((end - start) / step).round() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|i| start + i as f64 * step).collect();
    grid.retain(|v| *v <= end + 1e-12);
    Ok(grid)
}

fn parse_thresholds(s: &str) -> Result<[f64; EXPLANATIONS]> {
    let values: Vec<f64> = s
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Argument(format!("threshold `{v}` is not a number")))
        })
        .collect::<Result<_>>()?;
    let arr: [f64; EXPLANATIONS] = values.try_into().map_err(|v: Vec<f64>| {
        Error::Argument(format!("expected {EXPLANATIONS} thresholds, got {}", v.len()))
    })?;
    if arr.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Argument("thresholds must lie in [0,1]".into()));
    }
    Ok(arr)
}

fn load_manifest_arg(path: &Path) -> Result<Manifest> {
    load_manifest(path)
}

fn eval_probs(
    model: &Model<f32>,
    manifest: &Manifest,
) -> Result<(Vec<[f64; QUALITY_CLASSES]>, Vec<[f64; EXPLANATIONS]>)> {
    let mut qual = Vec::new();
    let mut expl = Vec::new();
    for records in manifest.records.chunks(64) {
        let images: Vec<_> = records
            .iter()
            .map(|r| manifest.load_image(r))
            .collect::<Result<_>>()?;
        let x = crate::network::image_batch::<f32>(&images)?;
        let (q_logits, e_logits, _) = model.forward_batch(&x, Mode::Eval, 0)?;
        let q_probs = softmax(&q_logits);
        for ni in 0..records.len() {
            let mut q = [0.0; QUALITY_CLASSES];
            for d in 0..QUALITY_CLASSES {
                q[d] = q_probs[[ni, d]] as f64;
            }
            let sum: f64 = q.iter().sum();
            q.iter_mut().for_each(|p| *p /= sum);
            qual.push(q);
            let mut e = [0.0; EXPLANATIONS];
            for c in 0..EXPLANATIONS {
                e[c] = crate::network::layers::sigmoid(e_logits[[ni, c]]) as f64;
            }
            expl.push(e);
        }
    }
    Ok((qual, expl))
}

fn cmd_generate(config_path: &Path, seed: u64, out: &Path) -> Result<()> {
    let config = RunConfigFile::load(config_path)?;
    ensure_dir(out)?;
    let manifest = generate_corpus(&config.corpus, seed, out)?;
    write_json(out, CONFIG_ECHO_FILE, &config)?;
    println!(
        "wrote {} records to {}",
        manifest.records.len(),
        out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FusedLine<'a> {
    image_path: &'a str,
    quality: QualityClass,
    explanations: Vec<String>,
}

fn cmd_fuse(manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest_arg(manifest_path)?;
    let source = if manifest.records.iter().all(|r| r.annotations.is_empty()) {
        TargetSource::Truth
    } else {
        TargetSource::Fused
    };
    let fused = build_targets(&manifest.records, source)?;
    ensure_dir(out)?;
    let mut lines = String::new();
    for (record, f) in manifest.records.iter().zip(&fused) {
        let line = serde_json::to_string(&FusedLine {
            image_path: &record.image_path,
            quality: f.quality,
            explanations: f.explanations.to_names(),
        })
        .map_err(|e| Error::Config(format!("fused encode failed: {e}")))?;
        lines.push_str(&line);
        lines.push('\n');
    }
    write_text(out, FUSED_FILE, &lines)?;
    println!("fused {} records ({:?} targets)", fused.len(), source);
    Ok(())
}

#[derive(Serialize)]
struct StatsReport {
    total_images: usize,
    rater_count: usize,
    class_counts: [usize; QUALITY_CLASSES],
    quality: crate::metrics::AgreementReport,
    explanations: crate::metrics::AgreementReport,
}

fn cmd_stats(manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest_arg(manifest_path)?;
    let images: Vec<_> = manifest
        .records
        .iter()
        .map(|r| r.annotations.clone())
        .collect();
    let raters: BTreeSet<&str> = images
        .iter()
        .flatten()
        .map(|a| a.rater_id.as_str())
        .collect();
    if raters.len() < 2 {
        return Err(Error::Data(format!(
            "agreement statistics need >=2 raters in the manifest, found {}",
            raters.len()
        )));
    }
    let quality = pairwise_interrater(&images, AgreementScope::Quality)?;
    let explanations = pairwise_interrater(&images, AgreementScope::Explanations)?;
    ensure_dir(out)?;
    let csv = format!(
        "{}{}",
        agreement_report_csv(&quality),
        agreement_report_csv(&explanations)
            .lines()
            .skip(1)
            .map(|l| format!("{l}\n"))
            .collect::<String>()
    );
    write_text(out, METRICS_FILE, &csv)?;
    write_json(
        out,
        REPORT_FILE,
        &StatsReport {
            total_images: manifest.records.len(),
            rater_count: raters.len(),
            class_counts: manifest.class_counts(),
            quality,
            explanations,
        },
    )?;
    println!("agreement tables written to {}", out.display());
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    manifest_path: &Path,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut config = RunConfigFile::load(config_path)?;
    if let Some(seed) = seed {
        config.training.master_seed = seed;
    }
    let manifest = load_manifest_arg(manifest_path)?;
    let train_config = config.to_train_config();
    let model_config = config.to_model_config(manifest.resolution()?)?;
    let outcome = train(&manifest, &train_config, &model_config)?;
    ensure_dir(out)?;
    for (k, model) in outcome.models.iter().enumerate() {
        save_model(model, &out.join(format!("model-run{k}.qxm")))?;
    }
    write_json(out, REPORT_FILE, &outcome.report)?;
    write_json(out, CONFIG_ECHO_FILE, &config)?;
    match (
        outcome.report.macro_f1_mean,
        outcome.report.macro_f1_std,
    ) {
        (Some(mean), Some(std)) => {
            println!(
                "{} run(s) done; held-out macro F1 {:.4} +/- {:.4}",
                outcome.models.len(),
                mean,
                std
            );
        }
        _ => println!("{} run(s) done", outcome.models.len()),
    }
    Ok(())
}

fn cmd_evaluate(
    model_path: &Path,
    manifest_path: &Path,
    thresholds: Option<&str>,
    out: &Path,
) -> Result<()> {
    let model = load_model(model_path)?;
    let manifest = load_manifest_arg(manifest_path)?;
    if manifest.records.is_empty() {
        return Err(Error::Data("manifest has no records".into()));
    }
    let thresholds = match thresholds {
        Some(s) => parse_thresholds(s)?,
        None => [0.5; EXPLANATIONS],
    };
    let source = if manifest.records.iter().all(|r| r.annotations.is_empty()) {
        TargetSource::Truth
    } else {
        TargetSource::Fused
    };
    let targets = build_targets(&manifest.records, source)?;
    let (q_probs, e_probs) = eval_probs(&model, &manifest)?;
    let report = evaluate_model(&targets, &q_probs, &e_probs, thresholds)?;
    ensure_dir(out)?;
    write_text(out, METRICS_FILE, &metric_report_csv(&report))?;
    write_json(out, REPORT_FILE, &report)?;
    println!(
        "macro quality F1: {}",
        report
            .macro_f1
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "undefined".into())
    );
    Ok(())
}

fn cmd_explain(
    model_path: &Path,
    image_path: &Path,
    target: &str,
    layer: Option<usize>,
    out: &Path,
) -> Result<()> {
    let model = load_model(model_path)?;
    let target = ExplainTarget::parse(target).map_err(|e| {
        let quality: Vec<_> = QualityClass::ALL.iter().map(|c| c.name()).collect();
        let expl: Vec<_> = crate::types::ExplanationKind::ALL
            .iter()
            .map(|k| k.name())
            .collect();
        Error::Argument(format!(
            "{e}; valid targets: {} / {}",
            quality.join(", "),
            expl.join(", ")
        ))
    })?;
    let image = crate::corpus::ImageTensor::load_png(image_path)?;
    let layer = layer.unwrap_or(model.stages.len() - 1);
    let map = grad_cam(&model, &image, target, layer)?;
    ensure_dir(out)?;
    let stem_anchor = out.join(image_path.file_name().unwrap_or_default());
    export_map(&map, &image, &stem_anchor)?;
    let (cam, overlay) = crate::explain::map_paths(&stem_anchor, target);
    println!("wrote {} and {}", cam.display(), overlay.display());
    Ok(())
}

fn cmd_calibrate(model_path: &Path, manifest_path: &Path, grid: &str, out: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let manifest = load_manifest_arg(manifest_path)?;
    if manifest.records.is_empty() {
        return Err(Error::Data("manifest has no records".into()));
    }
    let grid = parse_grid(grid)?;
    let source = if manifest.records.iter().all(|r| r.annotations.is_empty()) {
        TargetSource::Truth
    } else {
        TargetSource::Fused
    };
    let fused = build_targets(&manifest.records, source)?;
    let (q_probs, _) = eval_probs(&model, &manifest)?;
    let scores: Vec<f64> = q_probs
        .iter()
        .map(|q| q[QualityClass::PoorQuality.index()])
        .collect();
    let targets: Vec<bool> = fused
        .iter()
        .map(|f| f.quality == QualityClass::PoorQuality)
        .collect();
    let rows = calibrate_threshold(&scores, &targets, &grid)?;
    ensure_dir(out)?;
    write_text(out, THRESHOLDS_FILE, &threshold_table_csv(&rows))?;
    write_json(out, REPORT_FILE, &rows)?;
    if let Some(best) = rows.iter().find(|r| r.recommended) {
        println!("recommended poor-quality threshold: {:.3}", best.threshold);
    }
    Ok(())
}

#[derive(Serialize)]
struct ExportReport {
    size: crate::network::SizeReport,
    exported_file: String,
    round_trip_identical: bool,
}

fn cmd_export(model_path: &Path, out: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    ensure_dir(out)?;
    let exported = out.join("model.qxm");
    save_model(&model, &exported)?;
    let reloaded = load_model(&exported)?;

    // Round-trip check: identical eval outputs on a deterministic batch.
    let mut rng = crate::rng::stream(0, "export-check", 0);
    let res = model.config.resolution;
    let x = ndarray::Array4::from_shape_fn((4, 3, res, res), |_| {
        rand::Rng::gen_range(&mut rng, 0.0..1.0f32)
    });
    let (q1, e1, _) = model.forward_batch(&x, Mode::Eval, 0)?;
    let (q2, e2, _) = reloaded.forward_batch(&x, Mode::Eval, 0)?;
    let round_trip_identical = q1 == q2 && e1 == e2;

    let size = size_report(&model)?;
    let on_disk = fs::metadata(&exported)
        .map_err(|source| Error::Io {
            path: exported.clone(),
            source,
        })?
        .len() as usize;
    if on_disk != size.total_bytes {
        return Err(Error::ModelFile(format!(
            "exported file is {on_disk} bytes but the size report says {}",
            size.total_bytes
        )));
    }
    write_json(
        out,
        REPORT_FILE,
        &ExportReport {
            size,
            exported_file: exported.display().to_string(),
            round_trip_identical,
        },
    )?;
    println!("model size: {on_disk} bytes; round trip identical: {round_trip_identical}");
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Error::Argument("--threads must be >= 1".into()));
        }
        // Ignore failure: the global pool may already exist in-process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match &cli.command {
        Command::Generate { config, seed, out } => cmd_generate(config, *seed, &out.out),
        Command::Fuse { manifest, out } => cmd_fuse(manifest, &out.out),
        Command::Stats { manifest, out } => cmd_stats(manifest, &out.out),
        Command::Train {
            config,
            manifest,
            seed,
            out,
        } => cmd_train(config, manifest, *seed, &out.out),
        Command::Evaluate {
            model,
            manifest,
            thresholds,
            out,
        } => cmd_evaluate(model, manifest, thresholds.as_deref(), &out.out),
        Command::Explain {
            model,
            image,
            target,
            layer,
            out,
        } => cmd_explain(model, image, target, *layer, &out.out),
        Command::Calibrate {
            model,
            manifest,
            grid,
            out,
        } => cmd_calibrate(model, manifest, grid, &out.out),
        Command::Export { model, out } => cmd_export(model, &out.out),
    }
}
