//! Loss and metric computation, the Adam/MSE training loop with early
//! stopping and best-checkpoint restore, and test-set evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SampleRecord;
use crate::models::{layers::ForwardCtx, ModelError, RegressionModel};
use crate::transforms::{make_batch, BatchMode, TransformConfig, TransformError};
use crate::util::{mix_seed, mix_seed2};

/// Bone age values and errors are expressed in months throughout.
pub type Months = f64;

pub type MetricResult<T> = Result<T, MetricError>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("length mismatch: predictions {pred} vs truths {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}; training aborted")]
    NonFiniteLoss { epoch: usize, history: TrainHistory },
    #[error("empty {0} set")]
    EmptyDataset(&'static str),
    #[error("model expects {model:?} input but transforms produce {transforms:?}")]
    InputSpecMismatch {
        model: crate::transforms::PreprocessSpec,
        transforms: crate::transforms::PreprocessSpec,
    },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Mean squared error, the training loss (months squared).
pub fn mse_loss(pred: &[f64], truth: &[f64]) -> MetricResult<f64> {
    check_pair(pred, truth)?;
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Analytic gradient of [`mse_loss`] with respect to each prediction:
/// `2 * (pred_i - truth_i) / B`.
pub fn mse_loss_gradient(pred: &[f64], truth: &[f64]) -> MetricResult<Vec<f64>> {
    check_pair(pred, truth)?;
    let b = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| 2.0 * (p - t) / b)
        .collect())
}

/// Mean absolute error, the comparison metric (months).
pub fn mae_metric(pred: &[f64], truth: &[f64]) -> MetricResult<Months> {
    check_pair(pred, truth)?;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

fn check_pair(pred: &[f64], truth: &[f64]) -> MetricResult<()> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricError::EmptyBatch);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EarlyStopDecision {
    pub stop: bool,
    /// Earliest index whose value improved on everything before it by more
    /// than `min_delta`.
    pub best_index: usize,
}

/// Scan a validation-MAE history and decide whether training should cease:
/// stop once `current_index - best_index >= patience`.
pub fn early_stop_check(
    val_mae_history: &[Months],
    patience: usize,
    min_delta: Months,
) -> EarlyStopDecision {
    let Some(&first) = val_mae_history.first() else {
        return EarlyStopDecision {
            stop: false,
            best_index: 0,
        };
    };
    let mut best = first;
    let mut best_index = 0;
    for (i, &v) in val_mae_history.iter().enumerate().skip(1) {
        if v < best - min_delta {
            best = v;
            best_index = i;
        }
    }
    let current = val_mae_history.len() - 1;
    EarlyStopDecision {
        stop: current - best_index >= patience,
        best_index,
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Optimizer, loss-schedule, and seeding settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamParams,
    pub seed: u64,
    /// Validation-MAE improvements at or below this margin do not reset
    /// patience.
    pub min_delta: Months,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 15,
            patience: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            adam: AdamParams::default(),
            seed: 0,
            min_delta: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_epochs < 1 {
            return Err("max_epochs must be at least 1".into());
        }
        if self.patience < 1 {
            return Err("patience must be at least 1".into());
        }
        if self.batch_size < 1 {
            return Err("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return Err("learning_rate must be positive".into());
        }
        if self.min_delta < 0.0 {
            return Err("min_delta must be non-negative".into());
        }
        Ok(())
    }
}

/// One epoch's aggregate metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean squared error over the training pass, months squared.
    pub train_loss: f64,
    pub train_mae: Months,
    pub val_mae: Months,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// First epoch achieving the minimum validation MAE.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// One prediction on a held-out sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub true_months: Months,
    pub pred_months: Months,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mae: Months,
    pub predictions: Vec<Prediction>,
}

/// Adam with bias correction; per-parameter state keyed by parameter name.
pub struct Adam {
    lr: f64,
    params: AdamParams,
    t: u64,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, params: AdamParams) -> Self {
        Self {
            lr,
            params,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, views: &mut [crate::models::layers::ParamView<'_>]) {
        self.t += 1;
        let AdamParams {
            beta1,
            beta2,
            epsilon,
        } = self.params;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for view in views {
            let (m, v) = self
                .state
                .entry(view.name.clone())
                .or_insert_with(|| (vec![0.0; view.value.len()], vec![0.0; view.value.len()]));
            for i in 0..view.value.len() {
                let g = view.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                view.value[i] -= self.lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
    }
}

const SALT_SHUFFLE: u64 = 0x5f9e;
const SALT_AUGMENT: u64 = 0x0a06;
const SALT_DROPOUT: u64 = 0xd409;

fn partial_history(records: Vec<EpochRecord>) -> TrainHistory {
    let best_epoch = best_epoch_of(&records);
    TrainHistory {
        records,
        best_epoch,
        stopped_early: false,
    }
}

fn best_epoch_of(records: &[EpochRecord]) -> usize {
    let mut best = 0;
    for (i, r) in records.iter().enumerate() {
        if r.val_mae < records[best].val_mae {
            best = i;
        }
    }
    best
}

/// Train `model` in place: per-epoch passes over shuffled batches minimizing
/// MSE with Adam, validation MAE after each epoch, early stopping, and
/// best-epoch weight restore on return.
///
/// `cfg.seed` fully determines shuffling, augmentation, and dropout; head
/// initialization is fixed by the seed given to `build_model`.
pub fn train(
    model: &mut RegressionModel,
    train_set: &[SampleRecord],
    val_set: &[SampleRecord],
    tc: &TransformConfig,
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    cfg.validate().map_err(TrainError::InvalidConfig)?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    if model.spec.input_spec != tc.preprocess {
        return Err(TrainError::InputSpecMismatch {
            model: model.spec.input_spec,
            transforms: tc.preprocess,
        });
    }

    let mut adam = Adam::new(cfg.learning_rate, cfg.adam);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SALT_SHUFFLE));
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut val_history: Vec<Months> = Vec::new();
    let mut best: Option<(Months, usize, RegressionModel)> = None;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut sq_sum = 0.0;
        let mut abs_sum = 0.0;
        let mut seen = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_records: Vec<SampleRecord> =
                chunk.iter().map(|&i| train_set[i].clone()).collect();
            let aug_seed =
                mix_seed2(mix_seed(cfg.seed, SALT_AUGMENT), epoch as u64, batch_no as u64);
            let (images, targets) = make_batch(
                &batch_records,
                &tc.preprocess,
                &tc.augment,
                BatchMode::Train,
                aug_seed,
            )?;

            let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed2(
                mix_seed(cfg.seed, SALT_DROPOUT),
                epoch as u64,
                batch_no as u64,
            ));
            let mut ctx = ForwardCtx {
                update_stats: true,
                rng: Some(&mut dropout_rng),
            };
            let preds = model.forward_train(&images, &mut ctx)?;
            let preds = preds.as_slice().expect("contiguous predictions");

            let batch_loss = mse_loss(preds, &targets)?;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    history: partial_history(records),
                });
            }

            let grad = mse_loss_gradient(preds, &targets)?;
            model.zero_grads();
            model.backward(&Array1::from_vec(grad));
            adam.step(&mut model.trainable_params());

            for (p, t) in preds.iter().zip(&targets) {
                let d = p - t;
                sq_sum += d * d;
                abs_sum += d.abs();
            }
            seen += targets.len();
        }

        let train_loss = sq_sum / seen as f64;
        let train_mae = abs_sum / seen as f64;
        let val_mae = evaluate(model, val_set, tc, cfg.batch_size)?.mae;
        if !val_mae.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                history: partial_history(records),
            });
        }

        records.push(EpochRecord {
            epoch,
            train_loss,
            train_mae,
            val_mae,
        });
        val_history.push(val_mae);

        if best.as_ref().is_none_or(|(b, _, _)| val_mae < *b) {
            best = Some((val_mae, epoch, model.clone()));
        }
        if early_stop_check(&val_history, cfg.patience, cfg.min_delta).stop {
            stopped_early = true;
            break;
        }
    }

    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    *model = best_model;
    Ok(TrainHistory {
        records,
        best_epoch,
        stopped_early,
    })
}

/// Deterministic evaluation: one prediction per sample, plus the mean
/// absolute error over the set.
pub fn evaluate(
    model: &RegressionModel,
    test_set: &[SampleRecord],
    tc: &TransformConfig,
    batch_size: usize,
) -> Result<EvalResult, TrainError> {
    if test_set.is_empty() {
        return Err(TrainError::EmptyDataset("test"));
    }
    if model.spec.input_spec != tc.preprocess {
        return Err(TrainError::InputSpecMismatch {
            model: model.spec.input_spec,
            transforms: tc.preprocess,
        });
    }
    let batch_size = batch_size.max(1);

    let mut predictions = Vec::with_capacity(test_set.len());
    for chunk in test_set.chunks(batch_size) {
        let (images, targets) = make_batch(chunk, &tc.preprocess, &tc.augment, BatchMode::Eval, 0)?;
        let preds = model.predict(&images)?;
        for ((record, &truth), &pred) in chunk.iter().zip(&targets).zip(preds.iter()) {
            predictions.push(Prediction {
                id: record.id.clone(),
                true_months: truth,
                pred_months: pred,
            });
        }
    }
    let truths: Vec<f64> = predictions.iter().map(|p| p.true_months).collect();
    let preds: Vec<f64> = predictions.iter().map(|p| p.pred_months).collect();
    let mae = mae_metric(&preds, &truths)?;
    Ok(EvalResult { mae, predictions })
}

/// Write the history file: the epoch records plus best-epoch metadata and a
/// full echo of the resolved configuration.
pub fn write_history_json(
    history: &TrainHistory,
    config_echo: &serde_json::Value,
    path: &Path,
) -> Result<(), TrainError> {
    let doc = serde_json::json!({
        "records": history.records,
        "best_epoch": history.best_epoch,
        "stopped_early": history.stopped_early,
        "config": config_echo,
    });
    let bytes = serde_json::to_vec_pretty(&doc).expect("history serialization");
    fs::write(path, bytes).map_err(|e| TrainError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Write predictions as CSV with header `id,true_months,pred_months`.
pub fn write_predictions_csv(eval: &EvalResult, path: &Path) -> Result<(), TrainError> {
    let mut out = String::from("id,true_months,pred_months\n");
    for p in &eval.predictions {
        out.push_str(&format!("{},{},{}\n", p.id, p.true_months, p.pred_months));
    }
    fs::write(path, out).map_err(|e| TrainError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
