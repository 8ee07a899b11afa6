//! Training loop, evaluation and prediction export.
//!
//! Adam with decoupled weight decay on the batch-mean L1 loss, seeded batch
//! shuffling, and early stopping on validation MAE in original units. The
//! best-epoch parameters are restored into the store when training ends.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{metrics, Metrics, SampleSet, MAPE_MASK_EPS};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{bind_all, ParameterStore};
use crate::tape::Tape;
use crate::tensor::DenseArray;

fn default_lr() -> f64 {
    0.003
}
fn default_batch() -> usize {
    8
}
fn default_epochs() -> usize {
    200
}
fn default_patience() -> usize {
    30
}
fn default_seed() -> u64 {
    1
}
fn default_device() -> String {
    "cpu".to_string()
}

/// Optimizer and loop settings. Defaults are desk-scale (batch 8, 200
/// epochs); batch 64 / 500 epochs are the full-scale values.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_device")]
    pub device: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_epochs: default_epochs(),
            patience: default_patience(),
            weight_decay: 0.0,
            grad_clip: None,
            seed: default_seed(),
            device: default_device(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if !(0.0..=0.001).contains(&self.weight_decay) {
            return Err(Error::Config(format!(
                "weight_decay must lie in [0, 0.001], got {}",
                self.weight_decay
            )));
        }
        if self.device != "cpu" {
            return Err(Error::Config(format!(
                "unsupported device '{}', only cpu is available",
                self.device
            )));
        }
        Ok(())
    }
}

/// Adam with the published moment constants and optional decoupled decay.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    /// first/second moment per parameter, aligned with store order
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(store: &ParameterStore) -> Self {
        let moments = store
            .iter()
            .map(|(_, e)| (vec![0.0; e.value.numel()], vec![0.0; e.value.numel()]))
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        }
    }

    /// One update from the gradients currently in the store. Weight decay is
    /// decoupled (applied straight to the weights) and skips entries
    /// registered as non-decaying (biases, norm parameters).
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        lr: f64,
        weight_decay: f64,
        grad_clip: Option<f64>,
    ) -> Result<()> {
        if let Some(clip) = grad_clip {
            let norm_sq: f64 = store
                .iter()
                .map(|(_, e)| e.grad.data().iter().map(|g| g * g).sum::<f64>())
                .sum();
            let norm = norm_sq.sqrt();
            if norm > clip {
                let scale = clip / norm;
                let names: Vec<String> = store.names().map(String::from).collect();
                for name in names {
                    for g in store.entry_mut(&name)?.grad.data_mut() {
                        *g *= scale;
                    }
                }
            }
        }

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = store.names().map(String::from).collect();
        for (idx, name) in names.iter().enumerate() {
            let (m, v) = &mut self.moments[idx];
            let entry = store.entry_mut(name)?;
            let decay = entry.decay;
            let grads = entry.grad.data().to_vec();
            let values = entry.value.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                if decay && weight_decay > 0.0 {
                    values[i] -= lr * weight_decay * values[i];
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based index of the epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stop_reason: String,
}

/// Per-horizon-step and overall metrics of one evaluation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: MetricsRecord,
    pub per_step: Vec<MetricsRecord>,
    pub n_samples: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
}

impl From<Metrics> for MetricsRecord {
    fn from(m: Metrics) -> Self {
        MetricsRecord {
            mae: m.mae,
            rmse: m.rmse,
            mape: m.mape,
        }
    }
}

/// Denormalized batched predictions for a whole sample set, flattened as
/// m x horizon x n_nodes.
pub fn predict_all(model: &Model, store: &ParameterStore, set: &SampleSet) -> Result<Vec<f64>> {
    let chunk = 64usize;
    let mut out = vec![0.0; set.m * set.horizon * set.n_nodes];
    let stride = set.horizon * set.n_nodes;
    for start in (0..set.m).step_by(chunk) {
        let end = (start + chunk).min(set.m);
        let preds: Vec<Result<DenseArray>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let item = set.input_item(i);
                let mut tape = Tape::new();
                let binds = bind_all(store, &mut tape)?;
                let var = model.forward_var(&mut tape, &binds, &item)?;
                Ok(tape.value(var).clone())
            })
            .collect();
        for (offset, pred) in preds.into_iter().enumerate() {
            let pred = pred?; // n_nodes x horizon, normalized
            let base = (start + offset) * stride;
            for node in 0..set.n_nodes {
                for step in 0..set.horizon {
                    out[base + step * set.n_nodes + node] =
                        pred.at2(node, step) * set.std + set.mean;
                }
            }
        }
    }
    Ok(out)
}

/// Metrics of already-denormalized predictions against a set's targets,
/// overall and per horizon step.
pub fn score_predictions(preds: &[f64], set: &SampleSet) -> Result<EvalReport> {
    if preds.len() != set.targets.len() {
        return Err(Error::Shape {
            op: "score_predictions",
            detail: format!(
                "{} predictions vs {} targets",
                preds.len(),
                set.targets.len()
            ),
        });
    }
    if set.is_empty() {
        return Err(Error::Config("cannot score an empty sample set".into()));
    }
    let overall = metrics(preds, &set.targets, MAPE_MASK_EPS)?.into();
    let mut per_step = Vec::with_capacity(set.horizon);
    let stride = set.horizon * set.n_nodes;
    for step in 0..set.horizon {
        let mut p = Vec::with_capacity(set.m * set.n_nodes);
        let mut t = Vec::with_capacity(set.m * set.n_nodes);
        for i in 0..set.m {
            let base = i * stride + step * set.n_nodes;
            p.extend_from_slice(&preds[base..base + set.n_nodes]);
            t.extend_from_slice(&set.targets[base..base + set.n_nodes]);
        }
        per_step.push(metrics(&p, &t, MAPE_MASK_EPS)?.into());
    }
    Ok(EvalReport {
        overall,
        per_step,
        n_samples: set.m,
    })
}

/// Forward over a set and score in original units.
pub fn evaluate(model: &Model, store: &ParameterStore, set: &SampleSet) -> Result<EvalReport> {
    let preds = predict_all(model, store, set)?;
    score_predictions(&preds, set)
}

/// Fits the model on the training set, monitoring validation MAE (original
/// units) for early stopping. On return the store holds the best epoch's
/// parameters.
pub fn train(
    model: &Model,
    store: &mut ParameterStore,
    train_set: &SampleSet,
    val_set: &SampleSet,
    tcfg: &TrainConfig,
) -> Result<TrainHistory> {
    tcfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("train and validation sets must be nonempty".into()));
    }
    if train_set.input_len != model.cfg.input_len
        || train_set.n_nodes != model.cfg.n_nodes
        || train_set.horizon != model.cfg.horizon
    {
        return Err(Error::Shape {
            op: "train",
            detail: format!(
                "sample geometry ({}, {}, {}) vs model ({}, {}, {})",
                train_set.input_len,
                train_set.horizon,
                train_set.n_nodes,
                model.cfg.input_len,
                model.cfg.horizon,
                model.cfg.n_nodes
            ),
        });
    }

    let mut optimizer = Adam::new(store);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_mae: f64::INFINITY,
        stop_reason: String::new(),
    };
    let mut best_params: Option<Vec<(String, DenseArray)>> = None;
    let mut stale_epochs = 0usize;

    let mut indices: Vec<usize> = (0..train_set.m).collect();
    for epoch in 1..=tcfg.max_epochs {
        let started = std::time::Instant::now();
        indices.shuffle(&mut rng);

        let mut loss_weighted = 0.0;
        let mut item_count = 0usize;
        for (batch_idx, batch) in indices.chunks(tcfg.batch_size).enumerate() {
            let inputs: Vec<DenseArray> = batch.iter().map(|&i| train_set.input_item(i)).collect();
            let targets: Vec<DenseArray> = batch
                .iter()
                .map(|&i| train_set.target_norm_matrix(i))
                .collect();
            store.zero_grads();
            let loss = model
                .batch_loss_and_grad(store, &inputs, &targets)
                .map_err(|e| match e {
                    Error::NonFinite { context } => Error::Training(format!(
                        "non-finite loss at epoch {epoch} batch {batch_idx}: {context}"
                    )),
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch} batch {batch_idx}"
                )));
            }
            optimizer.step(store, tcfg.learning_rate, tcfg.weight_decay, tcfg.grad_clip)?;
            loss_weighted += loss * batch.len() as f64;
            item_count += batch.len();
        }
        let train_loss = loss_weighted / item_count as f64;

        let val = evaluate(model, store, val_set)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_mae: val.overall.mae,
            val_rmse: val.overall.rmse,
            val_mape: val.overall.mape,
            wall_secs: started.elapsed().as_secs_f64(),
        });

        if val.overall.mae < history.best_val_mae {
            history.best_val_mae = val.overall.mae;
            history.best_epoch = epoch;
            best_params = Some(store.snapshot());
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= tcfg.patience {
                history.stop_reason = "early-stop".into();
                break;
            }
        }
    }
    if history.stop_reason.is_empty() {
        history.stop_reason = "max-epochs".into();
    }
    if let Some(best) = best_params {
        store.restore(&best)?;
    }
    Ok(history)
}

/// Writes test predictions as CSV rows of
/// `sample_index,horizon_step,node_id,truth,prediction` in original units.
/// Horizon steps are 1-based. An empty set produces a header-only file.
pub fn export_predictions(
    model: &Model,
    store: &ParameterStore,
    set: &SampleSet,
    path: &std::path::Path,
) -> Result<()> {
    use std::io::Write;
    let preds = if set.is_empty() {
        Vec::new()
    } else {
        predict_all(model, store, set)?
    };
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    let write_err = |e| Error::io(format!("write {}", path.display()), e);
    writeln!(w, "sample_index,horizon_step,node_id,truth,prediction").map_err(write_err)?;
    let stride = set.horizon * set.n_nodes;
    for i in 0..set.m {
        for step in 0..set.horizon {
            for node in 0..set.n_nodes {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    i,
                    step + 1,
                    set.node_ids[node],
                    set.target_at(i, step, node),
                    preds[i * stride + step * set.n_nodes + node],
                )
                .map_err(write_err)?;
            }
        }
    }
    Ok(())
}

/// Last-value persistence baseline: every horizon step repeats the final
/// input step (inputs are denormalized first). Returns m x horizon x n_nodes
/// predictions in original units.
pub fn persistence_baseline(set: &SampleSet) -> Vec<f64> {
    let mut preds = vec![0.0; set.m * set.horizon * set.n_nodes];
    let in_stride = set.input_len * set.n_nodes;
    let out_stride = set.horizon * set.n_nodes;
    for i in 0..set.m {
        let last = &set.inputs
            [i * in_stride + (set.input_len - 1) * set.n_nodes..(i + 1) * in_stride];
        for step in 0..set.horizon {
            for node in 0..set.n_nodes {
                preds[i * out_stride + step * set.n_nodes + node] =
                    last[node] * set.std + set.mean;
            }
        }
    }
    preds
}
