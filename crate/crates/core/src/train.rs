//! Minibatch SGD training with optional momentum and early stopping.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{backward_with_insertions, forward_with_insertions};
use crate::nn::{
    accumulate_grads, loss_and_grad, sgd_update, zero_grads_like, LayerParams, Network,
};
use crate::rng::{rng, seed_chain};
use crate::stochastic::{Insertion, RunMode};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Early stop once the validation loss improves by less than `min_delta`
    /// for `patience` consecutive epochs.
    pub min_delta: f64,
    pub patience: usize,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            min_delta: 1e-4,
            patience: 3,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// True when the early-stop criterion fired before the epoch cap.
    pub converged: bool,
    pub final_val_loss: f64,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Per-example input transformation applied before the trainable network
/// (e.g. a frozen switching prefix).
pub type PreprocessFn<'a> = dyn Fn(&Tensor) -> Result<Tensor> + 'a;

/// Trains `net` in place. `insertions` are stochastic layers active in
/// training mode (defensive dropout / Gaussian noise). Fully deterministic
/// given `(net initial params, data, cfg, seed)`.
pub fn train_network(
    net: &mut Network,
    data: &Batch,
    insertions: &[Insertion],
    cfg: &TrainConfig,
    seed: u64,
    preprocess: Option<&PreprocessFn<'_>>,
) -> Result<TrainReport> {
    train_network_with(net, data, insertions, cfg, seed, preprocess, None)
}

/// Per-example perturbation given the current parameters (adversarial
/// training hooks in here).
pub type PerturbFn<'a> = dyn Fn(&Network, &Tensor, usize, u64) -> Result<Tensor> + 'a;

pub fn train_network_with(
    net: &mut Network,
    data: &Batch,
    insertions: &[Insertion],
    cfg: &TrainConfig,
    seed: u64,
    preprocess: Option<&PreprocessFn<'_>>,
    perturb: Option<&PerturbFn>,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::InvalidParameter("batch_size and learning_rate must be positive".into()));
    }
    let n = data.len();
    let n_val = ((n as f64 * cfg.val_fraction).ceil() as usize).min(n.saturating_sub(1));
    let n_train = n - n_val;
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut shuffle_rng = rng(seed_chain(seed, &[0x73687566]));
    let mut layer_rng = rng(seed_chain(seed, &[0x6c617965]));
    let mut velocity = zero_grads_like(&net.params);
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut stall = 0usize;
    let mut converged = false;
    let mut epochs_run = 0usize;
    let mut perturb_step = 0u64;

    for _epoch in 0..cfg.epochs {
        epochs_run += 1;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = zero_grads_like(&net.params);
            let scale = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let mut x = data.inputs[idx].clone();
                if let Some(p) = preprocess {
                    x = p(&x)?;
                }
                if let Some(p) = perturb {
                    x = p(net, &x, data.labels[idx], seed_chain(seed, &[0xadf, perturb_step]))?;
                    perturb_step += 1;
                }
                let label = data.labels[idx];
                let (logits, cache) = forward_with_insertions(
                    net,
                    insertions,
                    &x,
                    RunMode::Train,
                    &mut layer_rng,
                    true,
                )?;
                let (loss, d_logits) = loss_and_grad(&logits, label)?;
                let cache = cache.expect("cache requested");
                let (example_grads, _) =
                    backward_with_insertions(net, &cache.fwd, &cache.realized, &d_logits)?;
                epoch_loss += loss;
                accumulate_grads(&mut grads, &example_grads, scale);
            }
            apply_momentum_step(&mut net.params, &mut velocity, &grads, cfg)?;
        }
        let train_loss = epoch_loss / n_train as f64;

        // validation at fixed randomness on the held-out tail (falls back to
        // the training loss when no validation split is configured)
        let val_loss = if n_val > 0 {
            mean_loss(net, data, n_train, n, preprocess)?
        } else {
            train_loss
        };
        history.push(EpochStats { train_loss, val_loss });

        if best_val - val_loss < cfg.min_delta {
            stall += 1;
            if stall >= cfg.patience {
                converged = true;
                break;
            }
        } else {
            stall = 0;
        }
        best_val = best_val.min(val_loss);
    }

    let final_val_loss = history.last().map_or(f64::INFINITY, |h| h.val_loss);
    Ok(TrainReport { epochs_run, converged, final_val_loss, history })
}

fn mean_loss(
    net: &Network,
    data: &Batch,
    start: usize,
    end: usize,
    preprocess: Option<&PreprocessFn<'_>>,
) -> Result<f64> {
    let mut total = 0.0;
    for i in start..end {
        let logits = match preprocess {
            Some(p) => net.logits(&p(&data.inputs[i])?)?,
            None => net.logits(&data.inputs[i])?,
        };
        total += loss_and_grad(&logits, data.labels[i])?.0;
    }
    Ok(total / (end - start) as f64)
}

fn apply_momentum_step(
    params: &mut Vec<LayerParams>,
    velocity: &mut [LayerParams],
    grads: &[LayerParams],
    cfg: &TrainConfig,
) -> Result<()> {
    if cfg.momentum == 0.0 {
        return sgd_update(params, grads, cfg.learning_rate);
    }
    // v <- mu*v + g; p <- p - lr*v
    for v in velocity.iter_mut() {
        scale_in_place(v, cfg.momentum);
    }
    accumulate_grads(velocity, grads, 1.0);
    sgd_update(params, velocity, cfg.learning_rate)
}

fn scale_in_place(p: &mut LayerParams, s: f64) {
    if let Some(w) = p.weight.as_mut() {
        for v in w.data_mut() {
            *v *= s;
        }
    }
    if let Some(b) = p.bias.as_mut() {
        for v in b.data_mut() {
            *v *= s;
        }
    }
}

/// Plain train accuracy of a deterministic network.
pub fn network_accuracy(net: &Network, data: &Batch) -> Result<f64> {
    let mut correct = 0usize;
    for (x, &label) in data.inputs.iter().zip(&data.labels) {
        if net.logits(x)?.argmax() == label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::nn::LayerSpec;

    #[test]
    fn linearly_separable_training_reaches_full_accuracy() {
        let data = gen_synthetic(5, 2, (4, 4), 200, 0.05);
        let mut net = Network::new(
            vec![
                LayerSpec::Dense { input: 16, output: 8 },
                LayerSpec::ReLU,
                LayerSpec::Dense { input: 8, output: 2 },
            ],
            vec![16],
        )
        .unwrap();
        net.init_params(1);
        let cfg = TrainConfig { epochs: 60, val_fraction: 0.0, ..Default::default() };
        let report = train_network(&mut net, &data, &[], &cfg, 1, None).unwrap();
        let last = report.history.last().unwrap();
        assert!(last.train_loss < 0.01, "loss {}", last.train_loss);
        assert_eq!(network_accuracy(&net, &data).unwrap(), 100.0);
    }

    #[test]
    fn training_is_deterministic() {
        let data = gen_synthetic(6, 3, (3, 3), 60, 0.1);
        let cfg = TrainConfig { epochs: 3, ..Default::default() };
        let mut a = Network::new(
            vec![LayerSpec::Dense { input: 9, output: 3 }],
            vec![9],
        )
        .unwrap();
        a.init_params(4);
        let mut b = a.clone();
        train_network(&mut a, &data, &[], &cfg, 10, None).unwrap();
        train_network(&mut b, &data, &[], &cfg, 10, None).unwrap();
        assert_eq!(a.params, b.params);
    }
}
