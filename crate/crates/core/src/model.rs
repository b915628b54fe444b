//! Unified model abstraction over deterministic networks, networks with
//! inserted stochastic defense layers, and HRS switching models.

use crate::error::{Error, Result};
use crate::hrs::PathId;
use crate::nn::{
    backprop_layers, loss_and_grad, run_layers, ForwardCache, LayerParams, Network,
};
use crate::rng::{rng, seed_chain, SeedRng};
use crate::stochastic::{apply, Insertion, Realized, RunMode};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Loss driving an attack's input gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    CrossEntropy,
    /// The margin loss max(max_{j != t} z_j - z_t, -kappa).
    CwMargin { kappa: f64 },
}

impl LossKind {
    /// Loss value and gradient at the logits for the target class.
    pub fn at_logits(&self, logits: &Tensor, target: usize) -> Result<(f64, Tensor)> {
        match self {
            LossKind::CrossEntropy => loss_and_grad(logits, target),
            LossKind::CwMargin { kappa } => {
                let z = logits.data();
                if target >= z.len() {
                    return Err(Error::LabelOutOfRange { label: target, classes: z.len() });
                }
                let mut best = f64::NEG_INFINITY;
                let mut best_j = usize::MAX;
                for (j, &v) in z.iter().enumerate() {
                    if j != target && v > best {
                        best = v;
                        best_j = j;
                    }
                }
                let margin = best - z[target];
                let mut grad = vec![0.0; z.len()];
                let loss = if margin > -kappa {
                    grad[best_j] = 1.0;
                    grad[target] = -1.0;
                    margin
                } else {
                    -kappa
                };
                Ok((loss, Tensor::new(vec![z.len()], grad)?))
            }
        }
    }
}

/// Randomness frozen at oracle construction: stochastic layers disabled for
/// defended networks, one active path fixed for HRS.
#[derive(Debug, Clone, PartialEq)]
pub enum Frozen {
    Plain,
    Path(PathId),
}

/// A classifier whose forward pass may consume randomness. Fresh queries
/// draw new randomness; frozen queries replay the fixed draw bit-exactly.
pub trait StochasticModel: Sync {
    fn classes(&self) -> usize;
    fn input_shape(&self) -> &[usize];
    fn logits_fresh(&self, x: &Tensor, rng: &mut SeedRng) -> Result<Tensor>;
    fn logits_frozen(&self, x: &Tensor, frozen: &Frozen) -> Result<Tensor>;
    /// Loss and input gradient for a fresh randomness draw; the gradient
    /// follows the realized mask/path of that draw.
    fn input_grad_fresh(
        &self,
        x: &Tensor,
        loss: &LossKind,
        target: usize,
        rng: &mut SeedRng,
    ) -> Result<(f64, Tensor)>;
    fn input_grad_frozen(
        &self,
        x: &Tensor,
        loss: &LossKind,
        target: usize,
        frozen: &Frozen,
    ) -> Result<(f64, Tensor)>;
    /// Samples and fixes one randomness realization.
    fn freeze(&self, rng: &mut SeedRng) -> Frozen;
}

/// A base network plus zero or more inserted stochastic defense layers.
/// With no insertions this is the plain deterministic model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefendedNet {
    pub net: Network,
    pub insertions: Vec<Insertion>,
}

/// Cache of a defended forward pass: layer inputs plus the realized
/// randomness of each insertion, in application order.
pub struct DefendedCache {
    pub fwd: ForwardCache,
    pub realized: Vec<(usize, Realized)>,
}

impl DefendedNet {
    pub fn plain(net: Network) -> Self {
        Self { net, insertions: Vec::new() }
    }

    pub fn new(net: Network, insertions: Vec<Insertion>) -> Result<Self> {
        for ins in &insertions {
            ins.kind.validate()?;
            if ins.at >= net.layers.len() {
                return Err(Error::InvalidParameter(format!(
                    "insertion point {} beyond {} layers",
                    ins.at,
                    net.layers.len()
                )));
            }
        }
        Ok(Self { net, insertions })
    }

    /// Forward pass applying every insertion active in `mode`.
    pub fn forward(
        &self,
        x: &Tensor,
        mode: RunMode,
        rng: &mut SeedRng,
        want_cache: bool,
    ) -> Result<(Tensor, Option<DefendedCache>)> {
        forward_with_insertions(&self.net, &self.insertions, x, mode, rng, want_cache)
    }

    /// Backward pass through the cached forward, following the realized
    /// randomness of that draw. Returns parameter gradients and input grad.
    pub fn backward(
        &self,
        cache: &DefendedCache,
        d_logits: &Tensor,
    ) -> Result<(Vec<LayerParams>, Tensor)> {
        backward_with_insertions(&self.net, &cache.fwd, &cache.realized, d_logits)
    }
}

/// Forward pass over `net` with `insertions` applied before their layer
/// indices when active in `mode`.
pub fn forward_with_insertions(
    net: &Network,
    insertions: &[Insertion],
    x: &Tensor,
    mode: RunMode,
    rng: &mut SeedRng,
    want_cache: bool,
) -> Result<(Tensor, Option<DefendedCache>)> {
    let layers = &net.layers;
    let mut cache = want_cache.then(|| DefendedCache {
        fwd: ForwardCache { layer_inputs: Vec::with_capacity(layers.len()) },
        realized: Vec::new(),
    });
    let mut cur = x.clone();
    for (i, (layer, params)) in layers.iter().zip(&net.params).enumerate() {
        for ins in insertions.iter().filter(|ins| ins.at == i) {
            let (out, realized) = apply(&ins.kind, &cur, mode, rng)?;
            cur = out;
            if let Some(c) = cache.as_mut() {
                c.realized.push((i, realized));
            }
        }
        if let Some(c) = cache.as_mut() {
            c.fwd.layer_inputs.push(cur.clone());
        }
        let (out, _) = run_layers(
            std::slice::from_ref(layer),
            std::slice::from_ref(params),
            &cur,
            false,
        )?;
        cur = out;
    }
    Ok((cur, cache))
}

/// Backward pass matching [`forward_with_insertions`]; realized masks are
/// folded into the gradient at their insertion boundaries.
pub fn backward_with_insertions(
    net: &Network,
    fwd: &ForwardCache,
    realized: &[(usize, Realized)],
    d_logits: &Tensor,
) -> Result<(Vec<LayerParams>, Tensor)> {
    let has_mask = realized.iter().any(|(_, r)| matches!(r, Realized::Mask(_)));
    if !has_mask {
        return backprop_layers(&net.layers, &net.params, fwd, d_logits);
    }
    let layers = &net.layers;
    let mut d_out = d_logits.clone();
    let mut per_layer: Vec<LayerParams> = Vec::with_capacity(layers.len());
    for (i, (layer, params)) in layers.iter().zip(&net.params).enumerate().rev() {
        let x = &fwd.layer_inputs[i];
        let single_cache = ForwardCache { layer_inputs: vec![x.clone()] };
        let (mut g, mut dx) = backprop_layers(
            std::slice::from_ref(layer),
            std::slice::from_ref(params),
            &single_cache,
            &d_out,
        )?;
        per_layer.push(g.remove(0));
        for (at, r) in realized.iter().rev() {
            if *at == i {
                r.apply_backward(&mut dx);
            }
        }
        d_out = dx;
    }
    per_layer.reverse();
    Ok((per_layer, d_out))
}

impl StochasticModel for DefendedNet {
    fn classes(&self) -> usize {
        self.net.num_classes()
    }

    fn input_shape(&self) -> &[usize] {
        &self.net.input_shape
    }

    fn logits_fresh(&self, x: &Tensor, rng: &mut SeedRng) -> Result<Tensor> {
        Ok(self.forward(x, RunMode::StochasticInference, rng, false)?.0)
    }

    fn logits_frozen(&self, x: &Tensor, _frozen: &Frozen) -> Result<Tensor> {
        let mut unused = rng(0);
        Ok(self.forward(x, RunMode::FixedRandomness, &mut unused, false)?.0)
    }

    fn input_grad_fresh(
        &self,
        x: &Tensor,
        loss: &LossKind,
        target: usize,
        rng: &mut SeedRng,
    ) -> Result<(f64, Tensor)> {
        let (logits, cache) = self.forward(x, RunMode::StochasticInference, rng, true)?;
        let (loss_v, d_logits) = loss.at_logits(&logits, target)?;
        let (_, dx) = self.backward(cache.as_ref().unwrap(), &d_logits)?;
        Ok((loss_v, dx))
    }

    fn input_grad_frozen(
        &self,
        x: &Tensor,
        loss: &LossKind,
        target: usize,
        _frozen: &Frozen,
    ) -> Result<(f64, Tensor)> {
        let mut unused = rng(0);
        let (logits, cache) = self.forward(x, RunMode::FixedRandomness, &mut unused, true)?;
        let (loss_v, d_logits) = loss.at_logits(&logits, target)?;
        let (_, dx) = self.backward(cache.as_ref().unwrap(), &d_logits)?;
        Ok((loss_v, dx))
    }

    fn freeze(&self, _rng: &mut SeedRng) -> Frozen {
        Frozen::Plain
    }
}

/// Test accuracy under fresh stochastic inference, one derived RNG stream
/// per example so parallel and serial evaluation agree.
pub fn accuracy_stochastic(
    model: &dyn StochasticModel,
    batch: &crate::data::Batch,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for (i, (x, &label)) in batch.inputs.iter().zip(&batch.labels).enumerate() {
        let mut r = rng(seed_chain(seed, &[0xacc, i as u64]));
        let logits = model.logits_fresh(x, &mut r)?;
        if logits.argmax() == label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / batch.len() as f64)
}

/// Test accuracy at fixed randomness.
pub fn accuracy_frozen(
    model: &dyn StochasticModel,
    batch: &crate::data::Batch,
    frozen: &Frozen,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for (x, &label) in batch.inputs.iter().zip(&batch.labels) {
        if model.logits_frozen(x, frozen)?.argmax() == label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use crate::stochastic::DefenseKind;
    use approx::assert_relative_eq;

    fn small_net(seed: u64) -> Network {
        let mut net = Network::new(
            vec![
                LayerSpec::Dense { input: 4, output: 6 },
                LayerSpec::ReLU,
                LayerSpec::Dense { input: 6, output: 3 },
            ],
            vec![4],
        )
        .unwrap();
        net.init_params(seed);
        net
    }

    #[test]
    fn cw_margin_loss_and_grad() {
        let logits = Tensor::from_vec(vec![1.0, 4.0, 2.0]);
        let (loss, grad) = LossKind::CwMargin { kappa: 0.0 }.at_logits(&logits, 0).unwrap();
        assert_relative_eq!(loss, 3.0);
        assert_eq!(grad.data(), &[-1.0, 1.0, 0.0]);
        // floor reached: margin already beyond kappa
        let (loss, grad) = LossKind::CwMargin { kappa: 1.0 }.at_logits(&logits, 1).unwrap();
        assert_relative_eq!(loss, -1.0);
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixed_randomness_makes_forward_pure() {
        let net = small_net(3);
        let model = DefendedNet::new(
            net,
            vec![
                Insertion { at: 0, kind: DefenseKind::Gaussian { sigma: 0.5 } },
                Insertion { at: 2, kind: DefenseKind::Dropout { rate: 0.5 } },
            ],
        )
        .unwrap();
        let x = Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let a = model.logits_frozen(&x, &Frozen::Plain).unwrap();
        let b = model.logits_frozen(&x, &Frozen::Plain).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, model.net.logits(&x).unwrap());
    }

    #[test]
    fn defended_backward_matches_finite_differences() {
        // fixed dropout mask via a cloned rng: same seed, same draw
        let net = small_net(7);
        let model = DefendedNet::new(
            net,
            vec![Insertion { at: 2, kind: DefenseKind::Dropout { rate: 0.4 } }],
        )
        .unwrap();
        let x = Tensor::from_vec(vec![0.3, -0.2, 0.5, 0.9]);
        let target = 1;
        let loss = LossKind::CrossEntropy;

        let mut r = rng(42);
        let (_, grad) = model.input_grad_fresh(&x, &loss, target, &mut r).unwrap();

        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            // replay the identical mask by reseeding
            let lp = {
                let mut r = rng(42);
                let (logits, _) = model.forward(&xp, RunMode::StochasticInference, &mut r, false).unwrap();
                loss.at_logits(&logits, target).unwrap().0
            };
            let lm = {
                let mut r = rng(42);
                let (logits, _) = model.forward(&xm, RunMode::StochasticInference, &mut r, false).unwrap();
                loss.at_logits(&logits, target).unwrap().0
            };
            let fd = (lp - lm) / (2.0 * h);
            let g = grad.data()[i];
            assert!(
                (fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()).max(1e-6),
                "dim {i}: fd {fd} vs grad {g}"
            );
        }
    }
}
