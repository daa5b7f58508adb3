//! Mini-batch Adam on `L_pr + λ·L_ue` with early stopping on validation MSE.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{PirError, Result};
use crate::model::{sample_inputs, PirModel, Sample};
use crate::tensor::{named_rng, AdamConfig, AdamState, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Epochs trained with β's branch closed.
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch_size: 32, learning_rate: 1e-3, max_epochs: 50, patience: 5, warmup_epochs: 1, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub gate_open: bool,
    /// Means over training samples.
    pub train_loss: f64,
    pub train_l_pr: f64,
    pub train_l_ue: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation MSE of the untrained model (equal to the backbone's).
    pub initial_val_mse: f64,
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were kept; `None` means the initial model was best.
    pub best_epoch: Option<usize>,
    pub best_val_mse: f64,
}

/// Mean squared error over all cells of all samples.
pub fn mse_of(model: &PirModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(PirError::invalid("no samples to evaluate"));
    }
    let preds = model.predict_all(samples)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        let se: f64 = p.y_pred.data().iter().zip(s.y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        total += se / s.y.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains `model` and returns the best-validation parameters. Gradients of a
/// batch are accumulated in sample order, so runs are bitwise reproducible.
pub fn train(
    mut model: PirModel,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
) -> Result<(PirModel, TrainHistory)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(PirError::invalid("training and validation sets must be nonempty"));
    }
    if config.batch_size == 0 {
        return Err(PirError::invalid("batch size must be positive"));
    }
    model.gate_open = config.warmup_epochs == 0;
    let initial_val_mse = mse_of(&model, val_set)?;
    let mut best = (model.clone(), initial_val_mse, None);
    let mut adam = AdamState::new(AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() });
    let mut history = Vec::new();
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.max_epochs {
        model.gate_open = epoch >= config.warmup_epochs;
        let graph = model.graph(true)?;
        let mut rng = named_rng(config.seed.wrapping_add(epoch as u64), "train.shuffle");
        order.shuffle(&mut rng);

        let (mut sum_loss, mut sum_pr, mut sum_ue) = (0.0, 0.0, 0.0);
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &train_set[i];
                let mut sess = graph.session();
                sess.forward(&model.params, &sample_inputs(s, true))?;
                let loss = sess.get("loss")?.data()[0];
                if !loss.is_finite() {
                    return Err(PirError::Diverged { epoch, batch: batch_idx, loss });
                }
                batch_loss += loss;
                sum_pr += sess.get("l_pr")?.data()[0];
                sum_ue += sess.get("l_ue")?.data()[0];
                let g = sess.backward("loss", &Tensor::scalar(1.0))?;
                for (name, t) in g.params {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(name, t);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for t in grads.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            adam.update(&mut model.params, &grads)?;
            sum_loss += batch_loss;
        }

        let m = train_set.len() as f64;
        let val_mse = mse_of(&model, val_set)?;
        if !val_mse.is_finite() {
            return Err(PirError::Diverged { epoch, batch: order.len().div_ceil(config.batch_size), loss: val_mse });
        }
        log::info!(
            "epoch {epoch}: loss {:.6} (pr {:.6}, ue {:.6}) val mse {val_mse:.6}",
            sum_loss / m,
            sum_pr / m,
            sum_ue / m
        );
        history.push(EpochStats {
            epoch,
            gate_open: model.gate_open,
            train_loss: sum_loss / m,
            train_l_pr: sum_pr / m,
            train_l_ue: sum_ue / m,
            val_mse,
        });
        if val_mse < best.1 {
            best = (model.clone(), val_mse, Some(epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (model, best_val_mse, best_epoch) = best;
    Ok((model, TrainHistory { initial_val_mse, epochs: history, best_epoch, best_val_mse }))
}
