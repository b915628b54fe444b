//! Baseline randomized defenses: stochastic activation pruning (SAP),
//! defensive dropout, and additive Gaussian noise, as insertable
//! transformations over layer activations.

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Execution mode for stochastic layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Train,
    StochasticInference,
    /// All sampling disabled; the model becomes a pure function.
    FixedRandomness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DefenseKind {
    /// Categorical sampling with probability proportional to |activation|;
    /// `k` defaults to the activation length.
    Sap { k: Option<usize> },
    /// Inverted dropout, active in both training and inference.
    Dropout { rate: f64 },
    /// Additive i.i.d. noise, active in both training and inference.
    Gaussian { sigma: f64 },
}

/// A stochastic layer inserted *before* layer index `at` of the host network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insertion {
    pub at: usize,
    pub kind: DefenseKind,
}

impl DefenseKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            DefenseKind::Sap { k: Some(0) } => {
                Err(Error::InvalidParameter("SAP sample count must be >= 1".into()))
            }
            DefenseKind::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                Err(Error::InvalidParameter(format!("dropout rate {rate} must lie in [0,1)")))
            }
            DefenseKind::Gaussian { sigma } if !(sigma.is_finite() && *sigma >= 0.0) => {
                Err(Error::InvalidParameter(format!("gaussian sigma {sigma} must be finite and >= 0")))
            }
            _ => Ok(()),
        }
    }

    fn active_in(&self, mode: RunMode) -> bool {
        match (self, mode) {
            (_, RunMode::FixedRandomness) => false,
            // SAP is a pure inference-time defense.
            (DefenseKind::Sap { .. }, RunMode::Train) => false,
            _ => true,
        }
    }
}

/// The realized randomness of one stochastic-layer application, kept so the
/// backward pass can follow the sampled path. Additive noise contributes no
/// mask (gradient passes straight through).
#[derive(Debug, Clone)]
pub enum Realized {
    Identity,
    Mask(Vec<f64>),
}

impl Realized {
    pub fn apply_backward(&self, grad: &mut Tensor) {
        if let Realized::Mask(m) = self {
            for (g, s) in grad.data_mut().iter_mut().zip(m) {
                *g *= s;
            }
        }
    }
}

/// Applies one stochastic layer to `act`, returning the transformed
/// activation and the realized mask/noise for backpropagation.
pub fn apply(
    kind: &DefenseKind,
    act: &Tensor,
    mode: RunMode,
    rng: &mut SeedRng,
) -> Result<(Tensor, Realized)> {
    kind.validate()?;
    if !kind.active_in(mode) {
        return Ok((act.clone(), Realized::Identity));
    }
    match kind {
        DefenseKind::Sap { k } => {
            let k = k.unwrap_or(act.len());
            sap_forward(act, k, rng)
        }
        DefenseKind::Dropout { rate } => dropout_forward(act, *rate, rng),
        DefenseKind::Gaussian { sigma } => gaussian_forward(act, *sigma, rng),
    }
}

/// SAP: draws `k` categorical samples with p_i proportional to |a_i|;
/// survivors are rescaled by 1/(1-(1-p_i)^k), the rest zeroed. An all-zero
/// activation is returned unchanged.
pub fn sap_forward(act: &Tensor, k: usize, rng: &mut SeedRng) -> Result<(Tensor, Realized)> {
    if k == 0 {
        return Err(Error::InvalidParameter("SAP sample count must be >= 1".into()));
    }
    let a = act.data();
    let total: f64 = a.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return Ok((act.clone(), Realized::Identity));
    }
    // cumulative distribution over |a_i|
    let mut cdf = Vec::with_capacity(a.len());
    let mut acc = 0.0;
    for v in a {
        acc += v.abs() / total;
        cdf.push(acc);
    }
    let mut survived = vec![false; a.len()];
    for _ in 0..k {
        let u: f64 = rng.gen_range(0.0..1.0);
        let idx = cdf.partition_point(|&c| c < u).min(a.len() - 1);
        survived[idx] = true;
    }
    let mut mask = vec![0.0; a.len()];
    for (i, m) in mask.iter_mut().enumerate() {
        if survived[i] {
            let p = a[i].abs() / total;
            *m = 1.0 / (1.0 - (1.0 - p).powi(k as i32));
        }
    }
    let out: Vec<f64> = a.iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((Tensor::new(act.shape().to_vec(), out)?, Realized::Mask(mask)))
}

/// Inverted dropout: each unit zeroed with probability `rate`, survivors
/// scaled by 1/(1-rate).
pub fn dropout_forward(act: &Tensor, rate: f64, rng: &mut SeedRng) -> Result<(Tensor, Realized)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!("dropout rate {rate} must lie in [0,1)")));
    }
    if rate == 0.0 {
        return Ok((act.clone(), Realized::Identity));
    }
    let keep = 1.0 - rate;
    let mask: Vec<f64> = act
        .data()
        .iter()
        .map(|_| if rng.gen_range(0.0..1.0) < rate { 0.0 } else { 1.0 / keep })
        .collect();
    let out: Vec<f64> = act.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((Tensor::new(act.shape().to_vec(), out)?, Realized::Mask(mask)))
}

/// Additive element-wise N(0, sigma^2) noise; identity when sigma is zero.
pub fn gaussian_forward(act: &Tensor, sigma: f64, rng: &mut SeedRng) -> Result<(Tensor, Realized)> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("gaussian sigma {sigma} must be finite and >= 0")));
    }
    if sigma == 0.0 {
        return Ok((act.clone(), Realized::Identity));
    }
    let out: Vec<f64> = act
        .data()
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma * z
        })
        .collect();
    Ok((Tensor::new(act.shape().to_vec(), out)?, Realized::Identity))
}
