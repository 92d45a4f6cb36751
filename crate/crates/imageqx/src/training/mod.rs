//! Multi-run training loop: deterministic split and shuffling, per-batch
//! forward/backward with the combined loss, AdamW updates on a cosine
//! warm-restart schedule, and a per-run report with final validation metrics.

pub mod adamw;
pub mod loss;
pub mod schedule;

use ndarray::Array4;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adamw::{AdamWConfig, OptimizerState};
pub use loss::{LossParts, LossWeights, LOG_EPS};
pub use schedule::{cosine_lr, lr_at, ScheduleConfig};

use crate::corpus::{ImageTensor, Manifest};
use crate::error::{Error, Result};
use crate::fusion::{build_targets, compute_class_weights, ClassWeights, TargetSource};
use crate::metrics::{evaluate_model, MetricReport};
use crate::network::{
    image_batch, init_params, softmax, Mode, Model, ModelConfig, EXPLANATIONS, QUALITY_CLASSES,
};
use crate::rng::stream;
use crate::types::{FusedRecord, QualityClass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub runs: usize,
    pub master_seed: u64,
    /// Fraction of the corpus held out for validation.
    pub val_fraction: f64,
    pub target_source: TargetSource,
    pub loss_weights: LossWeights,
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleConfig,
    /// Per-class quality loss weights; computed from the training-split
    /// class counts when absent.
    pub class_weights: Option<[f64; QUALITY_CLASSES]>,
    /// Explanation decision thresholds used for validation metrics.
    pub thresholds: [f64; EXPLANATIONS],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 39,
            batch_size: 32,
            runs: 5,
            master_seed: 0,
            val_fraction: 0.2,
            target_source: TargetSource::Truth,
            loss_weights: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            schedule: ScheduleConfig::default(),
            class_weights: None,
            thresholds: [0.5; EXPLANATIONS],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.runs == 0 {
            return Err(Error::Config("epochs and runs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be >= 2 (batch statistics need more than one sample)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0,1)".into()));
        }
        if self.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("thresholds must lie in [0,1]".into()));
        }
        self.optimizer.validate()?;
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_quality: f64,
    pub loss_explanations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: usize,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    /// Validation metrics; training-split metrics when no holdout.
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub class_weights: [f64; QUALITY_CLASSES],
    pub train_size: usize,
    pub val_size: usize,
    pub runs: Vec<RunReport>,
    /// Mean and population std of final validation macro F1 across runs.
    pub macro_f1_mean: Option<f64>,
    pub macro_f1_std: Option<f64>,
}

#[derive(Debug)]
pub struct TrainingOutcome {
    pub models: Vec<Model<f32>>,
    pub report: TrainingReport,
}

fn gather_batch(images: &[ImageTensor], idx: &[usize]) -> Result<Array4<f32>> {
    let picked: Vec<ImageTensor> = idx.iter().map(|&i| images[i].clone()).collect();
    image_batch(&picked)
}

/// Eval-mode probabilities for a set of images, in batches.
fn predict_probs(
    model: &Model<f32>,
    images: &[ImageTensor],
    idx: &[usize],
    batch_size: usize,
) -> Result<(Vec<[f64; QUALITY_CLASSES]>, Vec<[f64; EXPLANATIONS]>)> {
    let mut qual = Vec::with_capacity(idx.len());
    let mut expl = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch_size) {
        let x = gather_batch(images, chunk)?;
        let (q_logits, e_logits, _) = model.forward_batch(&x, Mode::Eval, 0)?;
        let q_probs = softmax(&q_logits);
        for ni in 0..chunk.len() {
            let mut q = [0.0; QUALITY_CLASSES];
            for d in 0..QUALITY_CLASSES {
                q[d] = q_probs[[ni, d]] as f64;
            }
            // Renormalize away f32 rounding so downstream sum checks hold.
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

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

/// Train `config.runs` independent models on the manifest. Deterministic for
/// a fixed `(manifest, config, model_config)`: the split, every shuffle, and
/// every dropout mask derive from the master seed.
pub fn train(
    manifest: &Manifest,
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<TrainingOutcome> {
    config.validate()?;
    model_config.validate()?;
    if manifest.records.is_empty() {
        return Err(Error::Data("manifest has no records".into()));
    }

    let targets: Vec<FusedRecord> = build_targets(&manifest.records, config.target_source)?;
    let images: Vec<ImageTensor> = manifest
        .records
        .iter()
        .map(|r| manifest.load_image(r))
        .collect::<Result<_>>()?;

    // Deterministic holdout split.
    let mut order: Vec<usize> = (0..manifest.records.len()).collect();
    order.shuffle(&mut stream(config.master_seed, "split", 0));
    let val_len = (order.len() as f64 * config.val_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(val_len);
    let train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    let mut train_counts = [0usize; QUALITY_CLASSES];
    for &i in &train_idx {
        train_counts[targets[i].quality.index()] += 1;
    }
    if let Some(missing) = QualityClass::ALL.iter().find(|c| train_counts[c.index()] == 0) {
        return Err(Error::Data(format!(
            "training split has no `{}` samples; add data or lower val_fraction",
            missing.name()
        )));
    }

    let class_weights = match config.class_weights {
        Some(weights) => ClassWeights { weights },
        None => compute_class_weights(train_counts)?,
    };

    let mut models = Vec::with_capacity(config.runs);
    let mut run_reports = Vec::with_capacity(config.runs);
    for run in 0..config.runs {
        let run_seed = config.master_seed.wrapping_add(run as u64);
        let mut model: Model<f32> = init_params(run_seed, model_config)?;
        let mut opt = OptimizerState::new(&model);

        let mut epoch_logs = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            let lr = lr_at(epoch as f64, &config.schedule);
            let mut idx = train_idx.clone();
            idx.shuffle(&mut stream(run_seed, "shuffle", epoch as u64));

            let (mut sum_t, mut sum_q, mut sum_e, mut seen) = (0.0, 0.0, 0.0, 0usize);
            for (batch_no, chunk) in idx.chunks(config.batch_size).enumerate() {
                if chunk.len() < 2 {
                    // A singleton batch has degenerate batch statistics.
                    continue;
                }
                let x = gather_batch(&images, chunk)?;
                let qual_targets: Vec<QualityClass> =
                    chunk.iter().map(|&i| targets[i].quality).collect();
                let expl_sets: Vec<_> = chunk.iter().map(|&i| targets[i].explanations).collect();
                let expl_targets = loss::explanation_targets::<f32>(&expl_sets);

                let dropout_seed = crate::rng::derive_seed(
                    run_seed,
                    "dropout",
                    (epoch * 1_000_000 + batch_no) as u64,
                );
                let (q_logits, e_logits, trace) =
                    model.forward_batch(&x, Mode::Train, dropout_seed)?;
                let (parts, d_qual, d_expl) = loss::loss_and_grads(
                    &q_logits,
                    &e_logits,
                    &qual_targets,
                    &expl_targets,
                    &class_weights,
                    &config.loss_weights,
                )?;
                if !parts.total.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at run {run}, epoch {epoch}, batch {batch_no}"
                    )));
                }

                let mut grads = model.zero_grads();
                model.backward(&trace, &d_qual, &d_expl, &mut grads);
                model.update_running_stats(&trace);
                adamw::step(&mut model, &grads, &mut opt, lr, &config.optimizer)?;

                sum_t += parts.total * chunk.len() as f64;
                sum_q += parts.quality * chunk.len() as f64;
                sum_e += parts.explanations * chunk.len() as f64;
                seen += chunk.len();
            }
            if seen == 0 {
                return Err(Error::Data(
                    "no usable training batches; need at least 2 training samples".into(),
                ));
            }
            epoch_logs.push(EpochLog {
                epoch,
                lr,
                loss_total: sum_t / seen as f64,
                loss_quality: sum_q / seen as f64,
                loss_explanations: sum_e / seen as f64,
            });
        }

        let eval_idx = if val_idx.is_empty() { &train_idx } else { &val_idx };
        let (q_probs, e_probs) = predict_probs(&model, &images, eval_idx, config.batch_size)?;
        let eval_targets: Vec<FusedRecord> = eval_idx.iter().map(|&i| targets[i]).collect();
        let metrics = evaluate_model(&eval_targets, &q_probs, &e_probs, config.thresholds)?;

        run_reports.push(RunReport {
            run,
            seed: run_seed,
            epochs: epoch_logs,
            metrics,
        });
        models.push(model);
    }

    let finals: Vec<f64> = run_reports
        .iter()
        .filter_map(|r| r.metrics.macro_f1)
        .collect();
    let (macro_f1_mean, macro_f1_std) = mean_std(&finals);

    Ok(TrainingOutcome {
        models,
        report: TrainingReport {
            config: config.clone(),
            model: model_config.clone(),
            class_weights: class_weights.weights,
            train_size: train_idx.len(),
            val_size: val_idx.len(),
            runs: run_reports,
            macro_f1_mean,
            macro_f1_std,
        },
    })
}
