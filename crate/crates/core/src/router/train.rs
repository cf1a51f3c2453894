use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accumulate_gradient, bce_loss, route_score, RouterError, RouterGradients, RouterParams, RoutingExample};
use crate::domain::NUM_SUBTASKS;

/// Minibatch gradient-descent settings. `batch_size == 0` means full batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "TrainConfig::default_lr")]
    pub lr: f64,
    #[serde(default = "TrainConfig::default_batch")]
    pub batch_size: usize,
    #[serde(default = "TrainConfig::default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    fn default_lr() -> f64 {
        2e-5
    }
    fn default_batch() -> usize {
        64
    }
    fn default_epochs() -> usize {
        10
    }

    /// Full-batch descent with a step size suited to a linear head over
    /// fixed features.
    pub fn practical(epochs: usize, seed: u64) -> Self {
        Self {
            lr: 0.1,
            batch_size: 0,
            epochs,
            seed,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: Self::default_lr(),
            batch_size: Self::default_batch(),
            epochs: Self::default_epochs(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: RouterParams,
    /// Pooled BCE over the full training set after the last epoch.
    pub final_loss: f64,
    /// Pooled BCE after each epoch.
    pub epoch_losses: Vec<f64>,
}

fn dataset_loss(dataset: &[RoutingExample], params: &RouterParams) -> Result<f64, RouterError> {
    let probs = dataset
        .iter()
        .map(|ex| route_score(&ex.features, params))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<[u8; NUM_SUBTASKS]> = dataset.iter().map(|ex| ex.labels).collect();
    bce_loss(&probs, &labels)
}

/// Fit the six routing heads from zero initialization.
pub fn train_router(dataset: &[RoutingExample], config: &TrainConfig) -> Result<TrainOutcome, RouterError> {
    let first = dataset.first().ok_or(RouterError::EmptyDataset)?;
    let dim = first.features.len();
    for ex in dataset {
        ex.validate()?;
        if ex.features.len() != dim {
            return Err(RouterError::DimensionMismatch {
                expected: dim,
                got: ex.features.len(),
            });
        }
    }

    let mut params = RouterParams::zeros(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let batch = if config.batch_size == 0 {
        dataset.len()
    } else {
        config.batch_size
    };
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut grads = RouterGradients {
                weights: std::array::from_fn(|_| vec![0.0; dim]),
                biases: [0.0; NUM_SUBTASKS],
            };
            let rows = chunk.iter().map(|&i| (&dataset[i].features, &dataset[i].labels));
            accumulate_gradient(rows, &params, &mut grads)?;
            let step = config.lr / chunk.len() as f64;
            for k in 0..NUM_SUBTASKS {
                params.biases[k] -= step * grads.biases[k];
                for (w, g) in params.weights[k].iter_mut().zip(&grads.weights[k]) {
                    *w -= step * g;
                }
            }
        }
        epoch_losses.push(dataset_loss(dataset, &params)?);
    }

    let final_loss = match epoch_losses.last() {
        Some(&l) => l,
        None => dataset_loss(dataset, &params)?,
    };
    Ok(TrainOutcome {
        params,
        final_loss,
        epoch_losses,
    })
}

/// Fraction of (example, subtask) pairs where `p_k > α_k` agrees with the
/// label. Pins are ignored.
pub fn activation_accuracy(params: &RouterParams, dataset: &[RoutingExample]) -> Result<f64, RouterError> {
    if dataset.is_empty() {
        return Err(RouterError::EmptyDataset);
    }
    let mut correct = 0usize;
    for ex in dataset {
        let p = route_score(&ex.features, params)?;
        for (k, p_k) in p.iter().enumerate() {
            if (*p_k > params.thresholds[k]) == (ex.labels[k] == 1) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / (dataset.len() * NUM_SUBTASKS) as f64)
}
