//! Pixel-wise cross-entropy training with validation, per-epoch
//! checkpointing and history logging, plus the evaluation driver that
//! turns a model and a dataset into a metric report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::backend::{ops, NllConf, Optimizer, OptimizerKind};
use crate::dataio::{scan_dataset, BatchIter, DatasetConfig, PairPaths};
use crate::error::{Error, Result};
use crate::inference::argmax_labels;
use crate::metrics::{build_report, ConfusionMatrix, EvalReport};
use crate::models::{batch_to_arrays, ModelSpec, SegmentationModel};
use crate::persistence::{save_checkpoint, save_optimizer_state};

const LOSS_EPS: f32 = 1e-7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    pub checkpoint_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub validation_fraction: f64,
    /// Optional per-class loss weights (length = n_classes).
    #[serde(default)]
    pub class_weights: Option<Vec<f32>>,
    /// Optional label excluded from the loss and the accuracy count.
    #[serde(default)]
    pub ignore_label: Option<u8>,
    /// Stop once training pixel accuracy reaches this threshold.
    #[serde(default)]
    pub stop_at_train_accuracy: Option<f64>,
    /// Retain every per-epoch checkpoint instead of only the latest one
    /// (plus `best.ckpt`). Long runs on large models write gigabytes per
    /// hundred epochs when this is on.
    #[serde(default)]
    pub keep_all_checkpoints: bool,
}

fn default_momentum() -> f32 {
    0.9
}
fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 2,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::AdaptiveMoment,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            checkpoint_dir: PathBuf::from("checkpoints"),
            seed: 0,
            validation_fraction: 0.0,
            class_weights: None,
            ignore_label: None,
            stop_at_train_accuracy: None,
            keep_all_checkpoints: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction must lie in [0,1)"));
        }
        if let Some(t) = self.stop_at_train_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("stop_at_train_accuracy must lie in [0,1]"));
            }
        }
        Ok(())
    }

    pub fn build_optimizer(&self) -> Optimizer {
        Optimizer::new(
            self.optimizer,
            self.learning_rate,
            self.momentum,
            self.beta1,
            self.beta2,
        )
    }

    fn nll_conf(&self) -> NllConf {
        NllConf {
            eps: LOSS_EPS,
            class_weights: self.class_weights.clone(),
            ignore_label: self.ignore_label,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_pixel_accuracy: f64,
    pub val_miou: Option<f64>,
    pub steps: usize,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One JSON object per line, one line per epoch.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes"))
            .map(|s| s + "\n")
            .collect()
    }
}

/// Mean over all pixels of −log p[truth], probabilities clamped at 1e-7.
pub fn pixelwise_cross_entropy(probs: &Array4<f32>, truth: &Array3<u8>) -> Result<f32> {
    let conf = NllConf {
        eps: LOSS_EPS,
        class_weights: None,
        ignore_label: None,
    };
    ops::nll_fwd(probs, truth, &conf).map(|(loss, _)| loss)
}

pub struct StepOutcome {
    pub loss: f32,
    /// Class distributions at label resolution (training mode).
    pub probs: Array4<f32>,
}

/// One optimizer update on one batch: training-mode forward, loss at label
/// resolution, backprop, parameter step.
pub fn train_batch_step(
    model: &mut SegmentationModel,
    optimizer: &mut Optimizer,
    images: &Array4<f32>,
    labels: &Array3<u8>,
    conf: &NllConf,
) -> Result<StepOutcome> {
    let (mut graph, probs, leaves) = model.forward_training(images)?;
    let (_, lh, lw) = labels.dim();
    let (_, _, ph, pw) = graph.dim4(probs);
    let at_label_res = if (ph, pw) != (lh, lw) {
        graph.resize_bilinear(probs, lh, lw)
    } else {
        probs
    };
    let loss_id = graph.nll_from_probs(
        at_label_res,
        labels.clone(),
        NllConf {
            eps: conf.eps,
            class_weights: conf.class_weights.clone(),
            ignore_label: conf.ignore_label,
        },
    )?;
    let loss = graph.scalar(loss_id) as f32;
    if !loss.is_finite() {
        return Err(Error::Runtime("non-finite loss".into()));
    }
    let mut grads_by_id = graph.backward(loss_id);
    let mut grads: BTreeMap<String, ndarray::ArrayD<f32>> = BTreeMap::new();
    for (name, id) in leaves {
        if let Some(g) = grads_by_id.take(id) {
            grads.insert(name, g);
        }
    }
    optimizer.step(model.params_mut(), &grads);
    let probs_val = graph.take4(at_label_res);
    Ok(StepOutcome {
        loss,
        probs: probs_val,
    })
}

/// Training-mode loss of one batch without an update (running statistics
/// still advance, as in any training-mode pass).
pub fn training_loss(
    model: &mut SegmentationModel,
    images: &Array4<f32>,
    labels: &Array3<u8>,
    conf: &NllConf,
) -> Result<f32> {
    let (mut graph, probs, _) = model.forward_training(images)?;
    let (_, lh, lw) = labels.dim();
    let (_, _, ph, pw) = graph.dim4(probs);
    let at_label_res = if (ph, pw) != (lh, lw) {
        graph.resize_bilinear(probs, lh, lw)
    } else {
        probs
    };
    let loss_id = graph.nll_from_probs(
        at_label_res,
        labels.clone(),
        NllConf {
            eps: conf.eps,
            class_weights: conf.class_weights.clone(),
            ignore_label: conf.ignore_label,
        },
    )?;
    Ok(graph.scalar(loss_id) as f32)
}

fn count_correct(probs: &Array4<f32>, labels: &Array3<u8>, ignore: Option<u8>) -> (u64, u64) {
    let pred = argmax_labels(probs);
    let mut correct = 0u64;
    let mut total = 0u64;
    for (p, t) in pred.iter().zip(labels.iter()) {
        if ignore == Some(*t) {
            continue;
        }
        total += 1;
        if p == t {
            correct += 1;
        }
    }
    (correct, total)
}

/// Deterministic tail split of the sorted pair list.
fn split_pairs(pairs: &[PairPaths], validation_fraction: f64) -> (&[PairPaths], &[PairPaths]) {
    let n_val = (pairs.len() as f64 * validation_fraction).floor() as usize;
    let cut = pairs.len() - n_val;
    (&pairs[..cut], &pairs[cut..])
}

pub type EpochCallback<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Train a freshly assembled model on a verified dataset.
pub fn train(
    spec: ModelSpec,
    dataset: &DatasetConfig,
    tc: &TrainConfig,
    callback: Option<EpochCallback<'_>>,
) -> Result<(SegmentationModel, TrainHistory)> {
    let mut model = SegmentationModel::new(spec, tc.seed)?;
    let mut optimizer = tc.build_optimizer();
    let history = run_loop(&mut model, &mut optimizer, 0, dataset, tc, callback)?;
    Ok((model, history))
}

/// Continue training a loaded model, typically with optimizer state from a
/// checkpoint sidecar.
pub fn train_resume(
    mut model: SegmentationModel,
    mut optimizer: Optimizer,
    start_epoch: usize,
    dataset: &DatasetConfig,
    tc: &TrainConfig,
    callback: Option<EpochCallback<'_>>,
) -> Result<(SegmentationModel, TrainHistory)> {
    let history = run_loop(&mut model, &mut optimizer, start_epoch, dataset, tc, callback)?;
    Ok((model, history))
}

fn run_loop(
    model: &mut SegmentationModel,
    optimizer: &mut Optimizer,
    start_epoch: usize,
    dataset: &DatasetConfig,
    tc: &TrainConfig,
    mut callback: Option<EpochCallback<'_>>,
) -> Result<TrainHistory> {
    dataset.validate()?;
    tc.validate()?;
    if model.spec().n_classes != dataset.n_classes {
        return Err(Error::config(format!(
            "model has {} classes but the dataset declares {}",
            model.spec().n_classes,
            dataset.n_classes
        )));
    }
    if let Some(w) = &tc.class_weights {
        if w.len() != dataset.n_classes {
            return Err(Error::config(format!(
                "{} class weights for {} classes",
                w.len(),
                dataset.n_classes
            )));
        }
    }
    let scan = scan_dataset(dataset)?;
    if let Some(stem) = scan.missing_annotations.first() {
        return Err(Error::data(
            dataset.images_dir.join(stem),
            format!(
                "image has no matching annotation ({} unmatched in total); run verify for the full list",
                scan.missing_annotations.len()
            ),
        ));
    }
    let (train_pairs, val_pairs) = split_pairs(&scan.pairs, tc.validation_fraction);
    if train_pairs.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    std::fs::create_dir_all(&tc.checkpoint_dir)
        .map_err(|e| Error::io(&tc.checkpoint_dir, e))?;

    let conf = tc.nll_conf();
    let mut history = TrainHistory::default();
    let mut best_metric = f64::NEG_INFINITY;
    let mut previous_ckpt: Option<(PathBuf, PathBuf)> = None;
    for epoch in start_epoch..tc.epochs {
        let started = Instant::now();
        let epoch_seed = tc
            .seed
            .wrapping_add((epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
        let batches = BatchIter::new(train_pairs, dataset, tc.batch_size, epoch_seed)?;
        let mut steps = 0usize;
        let mut loss_sum = 0.0f64;
        let mut sample_count = 0usize;
        let mut correct = 0u64;
        let mut total = 0u64;
        for batch in batches {
            let samples = batch?;
            let (images, labels) = batch_to_arrays(&samples)?;
            let outcome =
                train_batch_step(model, optimizer, &images, &labels, &conf).map_err(|e| {
                    match e {
                        Error::Runtime(msg) => Error::Runtime(format!(
                            "{msg} at epoch {epoch} step {steps}"
                        )),
                        other => other,
                    }
                })?;
            loss_sum += outcome.loss as f64 * samples.len() as f64;
            sample_count += samples.len();
            let (c, t) = count_correct(&outcome.probs, &labels, tc.ignore_label);
            correct += c;
            total += t;
            steps += 1;
        }

        let val_miou = if val_pairs.is_empty() {
            None
        } else {
            Some(evaluate_pairs(model, val_pairs, dataset, None)?.miou)
        };

        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / sample_count.max(1) as f64,
            train_pixel_accuracy: correct as f64 / total.max(1) as f64,
            val_miou,
            steps,
            wall_secs: started.elapsed().as_secs_f64(),
        };

        let ckpt = tc.checkpoint_dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
        let sidecar = tc.checkpoint_dir.join(format!("epoch_{:03}.optim", epoch + 1));
        save_checkpoint(model, &ckpt)?;
        save_optimizer_state(optimizer, epoch + 1, &sidecar)?;
        if !tc.keep_all_checkpoints {
            if let Some((old_ckpt, old_sidecar)) = previous_ckpt.take() {
                let _ = std::fs::remove_file(old_ckpt);
                let _ = std::fs::remove_file(old_sidecar);
            }
            previous_ckpt = Some((ckpt, sidecar));
        }
        let metric = val_miou.unwrap_or(-record.mean_loss);
        if metric > best_metric {
            best_metric = metric;
            save_checkpoint(model, &tc.checkpoint_dir.join("best.ckpt"))?;
        }
        append_history_line(&tc.checkpoint_dir.join("history.jsonl"), &record)?;
        if let Some(cb) = callback.as_mut() {
            cb(&record);
        }
        let reached_target = tc
            .stop_at_train_accuracy
            .map(|t| record.train_pixel_accuracy >= t)
            .unwrap_or(false);
        history.records.push(record);
        if reached_target {
            break;
        }
    }
    Ok(history)
}

fn append_history_line(path: &Path, record: &EpochRecord) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(record).expect("record serializes"))
        .map_err(|e| Error::io(path, e))
}

/// Evaluate a model over explicit pairs: argmax predictions at annotation
/// resolution accumulated into one confusion matrix.
pub fn evaluate_pairs(
    model: &SegmentationModel,
    pairs: &[PairPaths],
    dataset: &DatasetConfig,
    class_names: Option<&[String]>,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Metric("empty dataset: nothing to evaluate".into()));
    }
    if model.spec().n_classes != dataset.n_classes {
        return Err(Error::config(format!(
            "model has {} classes but the dataset declares {}",
            model.spec().n_classes,
            dataset.n_classes
        )));
    }
    let mut cm = ConfusionMatrix::new(dataset.n_classes);
    for chunk in pairs.chunks(4) {
        let samples: Vec<_> = chunk
            .iter()
            .map(|p| crate::dataio::load_sample(&p.image, &p.annotation, dataset))
            .collect::<Result<_>>()?;
        let (images, labels) = batch_to_arrays(&samples)?;
        let probs = model.forward(&images)?;
        let (_, lh, lw) = labels.dim();
        let (_, _, ph, pw) = probs.dim();
        let probs = if (ph, pw) != (lh, lw) {
            ops::resize_bilinear_fwd(&probs, lh, lw)
        } else {
            probs
        };
        let pred = argmax_labels(&probs);
        for i in 0..samples.len() {
            cm.accumulate(
                pred.index_axis(ndarray::Axis(0), i),
                labels.index_axis(ndarray::Axis(0), i),
            )?;
        }
    }
    let names = match class_names {
        Some(n) => n.to_vec(),
        None => crate::inference::numbered_class_names(dataset.n_classes),
    };
    build_report(&cm, &names)
}

/// Evaluate over every pair the dataset scan produces.
pub fn evaluate_split(
    model: &SegmentationModel,
    dataset: &DatasetConfig,
    class_names: Option<&[String]>,
) -> Result<EvalReport> {
    dataset.validate()?;
    let scan = scan_dataset(dataset)?;
    evaluate_pairs(model, &scan.pairs, dataset, class_names)
}
