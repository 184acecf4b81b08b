//! Adam and the mini-batch training loop.

use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{PreparedModality, WindowedDataset};
use crate::metrics::{compute_metrics, ConfusionMatrix, MetricsError};
use crate::model::{argmax, Mode, ModelConfig, ModelError, Transformer};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },
    #[error("optimizer state mismatch: {0}")]
    Internal(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 50,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(TrainError::Config("eps must be > 0".into()));
        }
        Ok(())
    }

    fn init_seed(&self) -> u64 {
        self.seed
    }

    fn shuffle_seed(&self) -> u64 {
        self.seed ^ 0x5348_5546_464c_4521
    }

    fn dropout_seed(&self) -> u64 {
        self.seed ^ 0x4452_4f50_4f55_5421
    }
}

/// First and second moment buffers for every parameter plus the shared step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_params<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params.into_iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).unzip();
        Self { step: 0, m, v }
    }
}

/// One bias-corrected Adam update at step `t` (1-based) for a single buffer.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &TrainConfig) -> Result<()> {
    if t < 1 {
        return Err(TrainError::Internal("adam step counter must start at 1".into()));
    }
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(TrainError::Internal(format!(
            "param {} / grad {} / moments {},{} lengths differ",
            param.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Advances the step counter and updates every parameter from its grad slot.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(TrainError::Internal(format!(
            "{} moment buffers for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p
            .grad()
            .ok_or_else(|| TrainError::Internal(format!("parameter {i} has no gradient")))?
            .to_vec();
        adam_update(p.data_mut(), &grad, &mut state.m[i], &mut state.v[i], state.step, cfg)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub val_precision: Option<f64>,
    pub val_recall: Option<f64>,
    pub val_f1: Option<f64>,
    pub adam_step: u64,
}

/// Per-run training report, written next to the checkpoint as JSON.
///
/// Field names: `modality`, `epochs[]` (`epoch`, `train_loss`,
/// `train_accuracy`, `val_accuracy`, `val_precision`, `val_recall`, `val_f1`,
/// `adam_step`), `wall_clock_seconds`, `checkpoint_path`, `model_config`,
/// `train_config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub modality: String,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_seconds: f64,
    pub checkpoint_path: Option<String>,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
}

impl TrainRunRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, json)
    }
}

/// Fits `model` in place on normalized `train`, reporting `val` every epoch.
pub fn fit(model: &mut Transformer, train: &WindowedDataset, val: &WindowedDataset, cfg: &TrainConfig) -> Result<TrainRunRecord> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("training dataset is empty".into()));
    }
    if train.window_len != model.config().window_len {
        return Err(TrainError::Config(format!(
            "dataset window length {} does not match model window length {}",
            train.window_len,
            model.config().window_len
        )));
    }
    let started = Instant::now();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.dropout_seed());
    let mut state = AdamState::for_params(model.weights.params().into_iter().map(|(_, t)| t));
    model.weights.set_requires_grad(true);

    let labels = train.labels();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let windows: Vec<&[f64]> = idx.iter().map(|&i| train.windows[i].samples.as_slice()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (tape, loss, out) = match model.loss_tape(&windows, &ys, Mode::Train(&mut dropout_rng)) {
                Ok(r) => r,
                Err(ModelError::Tensor(TensorError::NonFinite { value, .. })) => {
                    model.weights.set_requires_grad(false);
                    return Err(TrainError::NonFiniteLoss { epoch, batch, value });
                }
                Err(e) => return Err(e.into()),
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                model.weights.set_requires_grad(false);
                return Err(TrainError::NonFiniteLoss { epoch, batch, value });
            }
            loss_sum += value * idx.len() as f64;
            let probs = tape.value(out.probs);
            correct += probs
                .data()
                .chunks(model.config().n_classes)
                .zip(&ys)
                .filter(|(p, &y)| argmax(p) == y)
                .count();
            let grads = tape.backward(loss).map_err(ModelError::from)?;
            model.weights.assign_grads(&out.params, &grads)?;
            let mut params: Vec<&mut Tensor> = model.weights.params_mut().into_iter().map(|(_, t)| t).collect();
            adam_step(&mut params, &mut state, cfg)?;
        }
        let val_metrics = if val.is_empty() { None } else { Some(evaluate(model, val)?) };
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_accuracy: val_metrics.as_ref().map(|m| m.accuracy),
            val_precision: val_metrics.as_ref().map(|m| m.weighted_precision),
            val_recall: val_metrics.as_ref().map(|m| m.weighted_recall),
            val_f1: val_metrics.as_ref().map(|m| m.weighted_f1),
            adam_step: state.step,
        };
        info!(
            "{} epoch {epoch}/{}: loss {:.5} train acc {:.4} val acc {}",
            train.modality,
            cfg.epochs,
            rec.train_loss,
            rec.train_accuracy,
            rec.val_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
        );
        epochs.push(rec);
    }
    model.weights.set_requires_grad(false);
    Ok(TrainRunRecord {
        modality: train.modality.to_string(),
        epochs,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        checkpoint_path: None,
        model_config: model.config().clone(),
        train_config: cfg.clone(),
    })
}

/// Eval-mode predictions for every window.
pub fn predict(model: &Transformer, ds: &WindowedDataset) -> Result<Vec<usize>> {
    let windows = ds.samples();
    Ok(model
        .forward_many(&windows)?
        .iter()
        .map(|o| o.predicted_class())
        .collect())
}

pub fn confusion(model: &Transformer, ds: &WindowedDataset) -> Result<ConfusionMatrix> {
    let preds = predict(model, ds)?;
    Ok(ConfusionMatrix::from_predictions(&preds, &ds.labels())?)
}

pub fn evaluate(model: &Transformer, ds: &WindowedDataset) -> Result<crate::metrics::MetricSet> {
    Ok(compute_metrics(&confusion(model, ds)?)?)
}

/// Builds a seeded model for `prepared`, fits it, and optionally saves the
/// checkpoint and the run record into `out_dir`.
pub fn train_modality(
    prepared: &PreparedModality,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Checkpoint, TrainRunRecord)> {
    cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.init_seed());
    let mut model = Transformer::new(model_cfg.clone(), &mut init_rng)?;
    let train = prepared.normalized_train();
    let val = prepared.normalized_test();
    let mut record = fit(&mut model, &train, &val, cfg)?;
    let ckpt = Checkpoint::from_model(prepared.modality, &model, cfg, prepared.stats);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(CheckpointError::from)?;
        let path = dir.join(Checkpoint::file_name(prepared.modality));
        ckpt.save(&path)?;
        record.checkpoint_path = Some(path.display().to_string());
        record
            .save(&dir.join(format!("{}.train.json", prepared.modality)))
            .map_err(CheckpointError::from)?;
    }
    Ok((ckpt, record))
}
