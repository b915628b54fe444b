//! Defense efficiency metrics: defense rate, DES (defense-rate gain per
//! point of clean-accuracy loss), and gradient-deviation diagnostics.

use crate::attacks::AttackConfig;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{LossKind, StochasticModel};
use crate::rng::{rng, seed_chain};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Denominator regularizer for DES.
pub const DES_ETA: f64 = 0.002;

/// Defense rate in percent from an attack success rate in percent.
pub fn defense_rate(asr_percent: f64) -> f64 {
    100.0 - asr_percent
}

/// Defense efficiency score: gain in defense rate per point of test-accuracy
/// drop, with a small eta guarding against division by ~zero drops.
///
/// All four inputs are percentages. `delta_d` = defended rate - baseline
/// rate; `delta_t` = baseline accuracy - defended accuracy.
pub fn des(
    base_defense_rate: f64,
    defended_defense_rate: f64,
    base_accuracy: f64,
    defended_accuracy: f64,
) -> f64 {
    let delta_d = defended_defense_rate - base_defense_rate;
    let delta_t = base_accuracy - defended_accuracy;
    delta_d / (delta_t + DES_ETA)
}

/// Mean and population variance of a slice of DES values.
pub fn mean_and_population_variance(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var))
}

/// Least-squares line fit through (delta_t, delta_d) points; the slope is
/// the model family's overall defense efficiency.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
}

pub fn des_fit(points: &[(f64, f64)]) -> Result<LineFit> {
    if points.len() < 2 {
        return Err(Error::DegenerateFit("need at least two points".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all x values identical".into()));
    }
    let slope = sxy / sxx;
    Ok(LineFit { slope, intercept: my - slope * mx })
}

/// Per-dimension standard deviation of the first attack-step input gradient,
/// averaged over dimensions and examples.
///
/// For each of the first `examples` inputs, draws `samples` fresh stochastic
/// gradients of the CW margin loss at the clean input (the state seen by the
/// first optimizer step of a margin-loss attack), computes the std of each
/// gradient dimension across samples, and averages everything.
pub fn gradient_std(
    model: &dyn StochasticModel,
    dataset: &Batch,
    examples: usize,
    samples: usize,
    kappa: f64,
    seed: u64,
) -> Result<f64> {
    if samples < 2 {
        return Err(Error::InvalidParameter("need at least 2 gradient samples".into()));
    }
    let n = examples.min(dataset.len());
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let loss = LossKind::CwMargin { kappa };
    let mut total = 0.0;
    for i in 0..n {
        let x = &dataset.inputs[i];
        let target = (dataset.labels[i] + 1) % dataset.classes;
        let mut r = rng(seed_chain(seed, &[0x67736400, i as u64]));
        let mut grads: Vec<Tensor> = Vec::with_capacity(samples);
        for _ in 0..samples {
            let (_, g) = model.input_grad_fresh(x, &loss, target, &mut r)?;
            grads.push(g);
        }
        let dims = x.len();
        let mut dim_std_sum = 0.0;
        for d in 0..dims {
            let mean = grads.iter().map(|g| g.data()[d]).sum::<f64>() / samples as f64;
            let var = grads
                .iter()
                .map(|g| {
                    let v = g.data()[d] - mean;
                    v * v
                })
                .sum::<f64>()
                / samples as f64;
            dim_std_sum += var.sqrt();
        }
        total += dim_std_sum / dims as f64;
    }
    Ok(total / n as f64)
}

/// Convenience struct tying an attack sweep row together for reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesRow {
    pub model: String,
    pub attack: String,
    pub epsilon: f64,
    pub clean_accuracy: f64,
    pub asr_percent: f64,
    pub defense_rate: f64,
    pub des: f64,
}

pub fn attack_config_summary(cfg: &AttackConfig) -> String {
    format!(
        "eps={:.6} alpha={:.6} iters={} kappa={}",
        cfg.epsilon,
        cfg.step_size(),
        cfg.iters,
        cfg.kappa
    )
}
