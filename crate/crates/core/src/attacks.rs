//! Gradient-based targeted attacks (FGSM, PGD, CW-L2, CW-PGD) over a
//! gradient oracle that abstracts deterministic and stochastic models,
//! with white-box, EOT, and fixed-randomness query modes.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{Frozen, LossKind, StochasticModel};
use crate::rng::{rng, seed_chain, SeedRng};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// How the oracle consumes the model's randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OracleMode {
    /// Fresh randomness draw per query.
    Whitebox,
    /// Mean of n fresh gradient samples per query.
    Eot(usize),
    /// Randomness frozen once at oracle construction.
    Fixed,
}

/// Gradient/logit query interface over a (possibly stochastic) model.
pub struct GradientOracle<'a> {
    model: &'a dyn StochasticModel,
    mode: OracleMode,
    rng: SeedRng,
    frozen: Frozen,
    queries: u64,
}

impl<'a> GradientOracle<'a> {
    pub fn new(model: &'a dyn StochasticModel, mode: OracleMode, seed: u64) -> Result<Self> {
        if let OracleMode::Eot(n) = mode {
            if n == 0 {
                return Err(Error::InvalidParameter("EOT sample count must be >= 1".into()));
            }
        }
        let mut r = rng(seed_chain(seed, &[0x6f7261636c65]));
        let frozen = model.freeze(&mut r);
        Ok(Self { model, mode, rng: r, frozen, queries: 0 })
    }

    pub fn classes(&self) -> usize {
        self.model.classes()
    }

    pub fn queries(&self) -> u64 {
        self.queries
    }

    pub fn frozen_view(&self) -> &Frozen {
        &self.frozen
    }

    /// One oracle gradient query under the configured mode.
    pub fn grad(&mut self, x: &Tensor, loss: &LossKind, target: usize) -> Result<Tensor> {
        match self.mode {
            OracleMode::Whitebox => {
                self.queries += 1;
                Ok(self.model.input_grad_fresh(x, loss, target, &mut self.rng)?.1)
            }
            OracleMode::Eot(n) => {
                self.queries += n as u64;
                let mut mean = Tensor::zeros(x.shape().to_vec());
                for _ in 0..n {
                    let (_, g) = self.model.input_grad_fresh(x, loss, target, &mut self.rng)?;
                    for (m, gv) in mean.data_mut().iter_mut().zip(g.data()) {
                        *m += gv / n as f64;
                    }
                }
                Ok(mean)
            }
            OracleMode::Fixed => {
                self.queries += 1;
                Ok(self.model.input_grad_frozen(x, loss, target, &self.frozen)?.1)
            }
        }
    }

    /// Logits at fixed randomness (the frozen view).
    pub fn logits_frozen(&self, x: &Tensor) -> Result<Tensor> {
        self.model.logits_frozen(x, &self.frozen)
    }

    /// Logits with one fresh randomness draw from the oracle stream.
    pub fn logits_fresh(&mut self, x: &Tensor) -> Result<Tensor> {
        self.model.logits_fresh(x, &mut self.rng)
    }
}

/// Mean of `n` fresh stochastic gradient samples (EOT).
pub fn eot_gradient(
    model: &dyn StochasticModel,
    x: &Tensor,
    loss: &LossKind,
    target: usize,
    n: usize,
    rng: &mut SeedRng,
) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidParameter("EOT sample count must be >= 1".into()));
    }
    let mut mean = Tensor::zeros(x.shape().to_vec());
    for _ in 0..n {
        let (_, g) = model.input_grad_fresh(x, loss, target, rng)?;
        for (m, gv) in mean.data_mut().iter_mut().zip(g.data()) {
            *m += gv / n as f64;
        }
    }
    Ok(mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    CwL2,
    CwPgd,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::CwL2 => "cw-l2",
            AttackKind::CwPgd => "cw-pgd",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// l-inf budget in [0,1] pixel units.
    pub epsilon: f64,
    /// PGD step size; defaults to max(epsilon/10, 1/510).
    pub alpha: Option<f64>,
    /// Iteration count for the iterative attacks.
    pub iters: usize,
    /// CW confidence.
    pub kappa: f64,
    /// Binary-search rounds and c range for CW-L2.
    pub c_rounds: usize,
    pub c_min: f64,
    pub c_max: f64,
    /// Untargeted gradient-ascent variant (diagnostics only).
    pub untargeted_ascent: bool,
    /// Majority-of-K success evaluation; 1 = single fresh pass.
    pub eval_votes: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            alpha: None,
            iters: 100,
            kappa: 0.0,
            c_rounds: 10,
            c_min: 1e-3,
            c_max: 100.0,
            untargeted_ascent: false,
            eval_votes: 1,
        }
    }
}

impl AttackConfig {
    pub fn step_size(&self) -> f64 {
        self.alpha.unwrap_or_else(|| (self.epsilon / 10.0).max(1.0 / 510.0))
    }
}

#[derive(Debug, Clone)]
pub struct AdvResult {
    pub x_adv: Tensor,
    pub success: bool,
    pub linf_distortion: f64,
    pub l2_distortion: f64,
    pub gradient_queries: u64,
}

fn finish(
    oracle: &mut GradientOracle<'_>,
    x: &Tensor,
    x_adv: Tensor,
    target: usize,
    eval_votes: usize,
) -> Result<AdvResult> {
    let votes = eval_votes.max(1);
    let mut hits = 0usize;
    for _ in 0..votes {
        if oracle.logits_fresh(&x_adv)?.argmax() == target {
            hits += 1;
        }
    }
    let success = hits * 2 > votes;
    Ok(AdvResult {
        linf_distortion: x_adv.linf_distance(x),
        l2_distortion: x_adv.l2_distance(x),
        gradient_queries: oracle.queries(),
        x_adv,
        success,
    })
}

fn signed_step(x: &mut Tensor, grad: &Tensor, step: f64, ascent: bool) {
    let dir = if ascent { step } else { -step };
    for (v, g) in x.data_mut().iter_mut().zip(grad.data()) {
        *v += dir * g.signum();
    }
}

/// Projection onto the l-inf epsilon ball around `origin` intersected with
/// the [0,1] box.
fn project(x: &mut Tensor, origin: &Tensor, epsilon: f64) {
    for (v, o) in x.data_mut().iter_mut().zip(origin.data()) {
        *v = v.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0);
    }
}

/// One-step targeted FGSM: x' = clip(x - eps * sign(grad of target loss)).
pub fn fgsm(
    oracle: &mut GradientOracle<'_>,
    x: &Tensor,
    target: usize,
    cfg: &AttackConfig,
) -> Result<AdvResult> {
    let mut x_adv = x.clone();
    if cfg.epsilon > 0.0 {
        let g = oracle.grad(x, &LossKind::CrossEntropy, target)?;
        signed_step(&mut x_adv, &g, cfg.epsilon, cfg.untargeted_ascent);
        x_adv.clamp_box(0.0, 1.0);
    }
    finish(oracle, x, x_adv, target, cfg.eval_votes)
}

fn pgd_loop(
    oracle: &mut GradientOracle<'_>,
    x: &Tensor,
    target: usize,
    cfg: &AttackConfig,
    loss: LossKind,
) -> Result<AdvResult> {
    let alpha = cfg.step_size();
    let mut x_adv = x.clone();
    for _ in 0..cfg.iters {
        let g = oracle.grad(&x_adv, &loss, target)?;
        signed_step(&mut x_adv, &g, alpha, cfg.untargeted_ascent);
        project(&mut x_adv, x, cfg.epsilon);
    }
    finish(oracle, x, x_adv, target, cfg.eval_votes)
}

/// Iterated targeted FGSM with projection onto the epsilon ball and box.
/// Each iteration issues a fresh oracle query (re-randomized for
/// stochastic models).
pub fn pgd(
    oracle: &mut GradientOracle<'_>,
    x: &Tensor,
    target: usize,
    cfg: &AttackConfig,
) -> Result<AdvResult> {
    pgd_loop(oracle, x, target, cfg, LossKind::CrossEntropy)
}

/// PGD descending the CW margin loss instead of cross-entropy.
pub fn cw_pgd(
    oracle: &mut GradientOracle<'_>,
    x: &Tensor,
    target: usize,
    cfg: &AttackConfig,
) -> Result<AdvResult> {
    pgd_loop(oracle, x, target, cfg, LossKind::CwMargin { kappa: cfg.kappa })
}

fn margin_at(logits: &Tensor, target: usize) -> f64 {
    let z = logits.data();
    let best_other = z
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    z[target] - best_other
}

/// CW-L2: minimizes ||delta||_2^2 + c * f(x + delta) by gradient descent
/// (`cfg.iters` steps of size 0.1 by default) per c, with binary search for
/// the smallest successful c. Success is judged at fixed randomness with
/// margin >= kappa.
pub fn cw_l2(
    oracle: &mut GradientOracle<'_>,
    x: &Tensor,
    target: usize,
    cfg: &AttackConfig,
) -> Result<AdvResult> {
    if cfg.c_min >= cfg.c_max {
        return Err(Error::InvalidParameter(format!(
            "c range [{}, {}] is empty",
            cfg.c_min, cfg.c_max
        )));
    }
    let loss = LossKind::CwMargin { kappa: cfg.kappa };
    let step = cfg.alpha.unwrap_or(0.1);
    let iters = if cfg.iters == 0 { 100 } else { cfg.iters };

    let mut lo = cfg.c_min;
    let mut hi = cfg.c_max;
    let mut best: Option<Tensor> = None;
    let mut best_l2 = f64::INFINITY;
    let mut fallback = x.clone();
    for round in 0..cfg.c_rounds.max(1) {
        // geometric bisection: c spans orders of magnitude
        let c = if round == 0 { hi } else { (lo * hi).sqrt() };
        let mut x_adv = x.clone();
        let mut round_ok = false;
        for _ in 0..iters {
            let g_f = oracle.grad(&x_adv, &loss, target)?;
            for ((v, xv), gf) in x_adv
                .data_mut()
                .iter_mut()
                .zip(x.data())
                .zip(g_f.data())
            {
                let delta = *v - xv;
                *v -= step * (2.0 * delta + c * gf);
                *v = v.clamp(0.0, 1.0);
            }
            // keep the closest successful iterate, judged at fixed randomness
            if margin_at(&oracle.logits_frozen(&x_adv)?, target) >= cfg.kappa {
                round_ok = true;
                let l2 = x_adv.l2_distance(x);
                if l2 < best_l2 {
                    best_l2 = l2;
                    best = Some(x_adv.clone());
                }
            }
        }
        if round_ok {
            hi = c; // try a smaller misclassification weight
        } else {
            fallback = x_adv;
            lo = c;
        }
    }
    let (x_adv, success) = match best {
        Some(t) => (t, true),
        None => (fallback, false),
    };
    let votes = cfg.eval_votes.max(1);
    let mut hits = 0usize;
    for _ in 0..votes {
        if oracle.logits_fresh(&x_adv)?.argmax() == target {
            hits += 1;
        }
    }
    // the search's own success verdict stands; fresh-pass voting is only
    // advisory for CW-L2 since its success is defined at fixed randomness
    let _ = hits;
    Ok(AdvResult {
        linf_distortion: x_adv.linf_distance(x),
        l2_distortion: x_adv.l2_distance(x),
        gradient_queries: oracle.queries(),
        x_adv,
        success,
    })
}

/// Runs one attack kind over a dataset and reports the attack success rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub example_id: usize,
    pub success: bool,
    pub linf: f64,
    pub l2: f64,
    pub queries: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsrReport {
    pub attack: AttackKind,
    pub epsilon: f64,
    pub mode: OracleMode,
    pub attacked: usize,
    pub successes: usize,
    pub asr_percent: f64,
    pub outcomes: Vec<ExampleOutcome>,
}

pub fn run_attack(
    oracle: &mut GradientOracle<'_>,
    kind: AttackKind,
    x: &Tensor,
    target: usize,
    cfg: &AttackConfig,
) -> Result<AdvResult> {
    match kind {
        AttackKind::Fgsm => fgsm(oracle, x, target, cfg),
        AttackKind::Pgd => pgd(oracle, x, target, cfg),
        AttackKind::CwL2 => cw_l2(oracle, x, target, cfg),
        AttackKind::CwPgd => cw_pgd(oracle, x, target, cfg),
    }
}

/// Evaluates an attack over `dataset`. Examples the model misclassifies at
/// fixed randomness are filtered out; the target class is
/// `(label + 1) mod classes`. Per-example oracles own RNG streams derived
/// from `(seed, example index)` so parallel and serial runs agree.
pub fn evaluate_attack(
    model: &dyn StochasticModel,
    kind: AttackKind,
    dataset: &Batch,
    cfg: &AttackConfig,
    mode: OracleMode,
    seed: u64,
) -> Result<AsrReport> {
    let mut filter_rng = rng(seed_chain(seed, &[0xf117e2]));
    let frozen = model.freeze(&mut filter_rng);
    let classes = model.classes();

    let kept: Vec<usize> = (0..dataset.len())
        .filter(|&i| {
            model
                .logits_frozen(&dataset.inputs[i], &frozen)
                .map(|z| z.argmax() == dataset.labels[i])
                .unwrap_or(false)
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let outcomes: Vec<ExampleOutcome> = kept
        .par_iter()
        .map(|&i| -> Result<ExampleOutcome> {
            let target = (dataset.labels[i] + 1) % classes;
            let mut oracle = GradientOracle::new(model, mode, seed_chain(seed, &[i as u64]))?;
            let r = run_attack(&mut oracle, kind, &dataset.inputs[i], target, cfg)?;
            Ok(ExampleOutcome {
                example_id: i,
                success: r.success,
                linf: r.linf_distortion,
                l2: r.l2_distortion,
                queries: r.gradient_queries,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let successes = outcomes.iter().filter(|o| o.success).count();
    Ok(AsrReport {
        attack: kind,
        epsilon: cfg.epsilon,
        mode,
        attacked: outcomes.len(),
        successes,
        asr_percent: 100.0 * successes as f64 / outcomes.len() as f64,
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DefendedNet;
    use crate::nn::{LayerSpec, Network};

    fn linear_model(weights: &[f64], classes: usize) -> DefendedNet {
        let d = weights.len() / classes;
        let mut net = Network::new(vec![LayerSpec::Dense { input: d, output: classes }], vec![d]).unwrap();
        net.params[0].weight.as_mut().unwrap().data_mut().copy_from_slice(weights);
        DefendedNet::plain(net)
    }

    #[test]
    fn fgsm_zero_epsilon_is_identity() {
        let model = linear_model(&[1.0, -1.0], 2);
        let mut oracle = GradientOracle::new(&model, OracleMode::Whitebox, 1).unwrap();
        let x = Tensor::from_vec(vec![0.5]);
        let cfg = AttackConfig { epsilon: 0.0, ..Default::default() };
        let r = fgsm(&mut oracle, &x, 1, &cfg).unwrap();
        assert_eq!(r.x_adv, x);
    }

    #[test]
    fn fgsm_sign_rule_and_clip() {
        // 1-d 2-class: logits = [w0*x, w1*x]; target 1 with w1 < w0 pushes x up
        let model = linear_model(&[-2.0, 2.0], 2);
        let mut oracle = GradientOracle::new(&model, OracleMode::Whitebox, 1).unwrap();
        let cfg = AttackConfig { epsilon: 0.1, ..Default::default() };
        // d loss_target / dx < 0 here, so the step is +eps
        let r = fgsm(&mut oracle, &Tensor::from_vec(vec![0.5]), 1, &cfg).unwrap();
        assert!((r.x_adv.data()[0] - 0.6).abs() < 1e-12);

        let mut oracle = GradientOracle::new(&model, OracleMode::Whitebox, 1).unwrap();
        let cfg = AttackConfig { epsilon: 0.1, ..Default::default() };
        let r = fgsm(&mut oracle, &Tensor::from_vec(vec![0.95]), 1, &cfg).unwrap();
        assert_eq!(r.x_adv.data()[0], 1.0);
    }

    #[test]
    fn pgd_zero_iters_is_identity() {
        let model = linear_model(&[1.0, -1.0], 2);
        let mut oracle = GradientOracle::new(&model, OracleMode::Whitebox, 1).unwrap();
        let x = Tensor::from_vec(vec![0.4]);
        let cfg = AttackConfig { iters: 0, ..Default::default() };
        let r = pgd(&mut oracle, &x, 1, &cfg).unwrap();
        assert_eq!(r.x_adv, x);
    }

    #[test]
    fn pgd_respects_linf_budget() {
        let mut net = Network::new(
            vec![
                LayerSpec::Dense { input: 6, output: 8 },
                LayerSpec::ReLU,
                LayerSpec::Dense { input: 8, output: 3 },
            ],
            vec![6],
        )
        .unwrap();
        net.init_params(10);
        let model = DefendedNet::plain(net);
        let x = Tensor::from_vec(vec![0.2, 0.4, 0.6, 0.8, 0.1, 0.9]);
        let cfg = AttackConfig { epsilon: 0.05, iters: 40, ..Default::default() };
        let mut oracle = GradientOracle::new(&model, OracleMode::Whitebox, 3).unwrap();
        let r = pgd(&mut oracle, &x, 2, &cfg).unwrap();
        assert!(r.linf_distortion <= cfg.epsilon + 1e-12);
        assert!(r.x_adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    /// Exhaustive corner-search oracle: for a linear classifier the optimal
    /// targeted l-inf attack sits at a corner of the epsilon box.
    #[test]
    fn pgd_reaches_optimal_corner_of_linear_classifier() {
        let d = 6;
        let mut r = crate::rng::rng(77);
        use rand::Rng;
        let w: Vec<f64> = (0..2 * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let model = linear_model(&w, 2);
        let x = Tensor::from_vec(vec![0.5; 6]);
        let eps = 0.2;
        let cfg = AttackConfig { epsilon: eps, iters: 50, alpha: Some(0.05), ..Default::default() };
        let mut oracle = GradientOracle::new(&model, OracleMode::Whitebox, 5).unwrap();
        let adv = pgd(&mut oracle, &x, 1, &cfg).unwrap();

        // enumerate all 2^d corners, pick the one maximizing target margin
        let mut best_margin = f64::NEG_INFINITY;
        let mut best_corner = x.clone();
        for bits in 0..(1u32 << d) {
            let mut corner = x.clone();
            for (i, v) in corner.data_mut().iter_mut().enumerate() {
                *v = (*v + if bits >> i & 1 == 1 { eps } else { -eps }).clamp(0.0, 1.0);
            }
            let z = model.net.logits(&corner).unwrap();
            let m = z.data()[1] - z.data()[0];
            if m > best_margin {
                best_margin = m;
                best_corner = corner;
            }
        }
        assert!(
            adv.x_adv.linf_distance(&best_corner) < 1e-9,
            "PGD endpoint differs from exhaustive corner"
        );
    }

    #[test]
    fn cw_pgd_zero_iters_identity_and_budget() {
        let model = linear_model(&[1.0, -1.0, 0.5, 0.2], 2);
        let x = Tensor::from_vec(vec![0.3, 0.7]);
        let cfg = AttackConfig { iters: 0, ..Default::default() };
        let mut oracle = GradientOracle::new(&model, OracleMode::Whitebox, 2).unwrap();
        let r = cw_pgd(&mut oracle, &x, 1, &cfg).unwrap();
        assert_eq!(r.x_adv, x);

        let cfg = AttackConfig { epsilon: 0.03, iters: 30, ..Default::default() };
        let mut oracle = GradientOracle::new(&model, OracleMode::Whitebox, 2).unwrap();
        let r = cw_pgd(&mut oracle, &x, 1, &cfg).unwrap();
        assert!(r.linf_distortion <= 0.03 + 1e-12);
    }

    #[test]
    fn cw_l2_already_target_gives_zero_distortion() {
        let model = linear_model(&[-3.0, 3.0], 2);
        let x = Tensor::from_vec(vec![0.9]); // strongly class 1
        let cfg = AttackConfig { kappa: 0.5, ..Default::default() };
        let mut oracle = GradientOracle::new(&model, OracleMode::Whitebox, 4).unwrap();
        let r = cw_l2(&mut oracle, &x, 1, &cfg).unwrap();
        assert!(r.success);
        assert!(r.l2_distortion <= 1e-6, "l2 {}", r.l2_distortion);
    }

    #[test]
    fn cw_l2_success_implies_target_margin_at_fixed_randomness() {
        let model = linear_model(&[1.0, 0.5, -0.5, 1.5, 0.2, -0.3], 2);
        let x = Tensor::from_vec(vec![0.6, 0.4, 0.5]);
        let cfg = AttackConfig { kappa: 0.1, ..Default::default() };
        let mut oracle = GradientOracle::new(&model, OracleMode::Whitebox, 8).unwrap();
        let r = cw_l2(&mut oracle, &x, 1, &cfg).unwrap();
        if r.success {
            let z = oracle.logits_frozen(&r.x_adv).unwrap();
            assert!(margin_at(&z, 1) >= -cfg.kappa);
            assert_eq!(z.argmax(), 1);
        }
    }

    /// Closed-form hyperplane oracle: on a 2-class linear model the minimal
    /// targeted L2 perturbation is the distance to the kappa-shifted
    /// decision hyperplane.
    #[test]
    fn cw_l2_matches_hyperplane_distance() {
        let w = [0.8, -0.4, 0.3, -0.6, 0.9, 0.1];
        let model = linear_model(&w, 2);
        let x = Tensor::from_vec(vec![0.5, 0.5, 0.5]);
        let kappa = 0.05;
        let cfg = AttackConfig {
            kappa,
            iters: 300,
            alpha: Some(0.02),
            c_rounds: 14,
            c_min: 1e-4,
            c_max: 1e4,
            ..Default::default()
        };
        let mut oracle = GradientOracle::new(&model, OracleMode::Whitebox, 6).unwrap();
        let r = cw_l2(&mut oracle, &x, 1, &cfg).unwrap();
        assert!(r.success);

        // margin(x + d) = (w1 - w0) . (x + d); need margin >= kappa
        let diff: Vec<f64> = (0..3).map(|i| w[3 + i] - w[i]).collect();
        let norm: f64 = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        let margin0: f64 = diff.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let needed = ((kappa - margin0) / norm).max(0.0);
        assert!(
            (r.l2_distortion - needed).abs() <= 0.1 * needed.max(1e-9),
            "distortion {} vs closed form {needed}",
            r.l2_distortion
        );
    }

    #[test]
    fn eot_on_deterministic_model_equals_single_query() {
        let mut net = Network::new(
            vec![
                LayerSpec::Dense { input: 4, output: 5 },
                LayerSpec::ReLU,
                LayerSpec::Dense { input: 5, output: 3 },
            ],
            vec![4],
        )
        .unwrap();
        net.init_params(2);
        let model = DefendedNet::plain(net);
        let x = Tensor::from_vec(vec![0.1, 0.9, 0.4, 0.3]);
        let loss = LossKind::CrossEntropy;
        let mut r1 = rng(9);
        let g10 = eot_gradient(&model, &x, &loss, 1, 10, &mut r1).unwrap();
        let mut r2 = rng(9);
        let (_, g1) = model.input_grad_fresh(&x, &loss, 1, &mut r2).unwrap();
        for (a, b) in g10.data().iter().zip(g1.data()) {
            let rel = (a - b).abs() / b.abs().max(1e-300);
            assert!(rel < 1e-12 || (a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn evaluate_attack_trivial_cases() {
        // epsilon 0 on the filtered set: target != label by construction
        let mut net = Network::new(vec![LayerSpec::Dense { input: 2, output: 3 }], vec![2]).unwrap();
        net.init_params(3);
        let model = DefendedNet::plain(net);
        let data = crate::data::gen_synthetic(1, 3, (1, 2), 30, 0.05);
        let cfg = AttackConfig { epsilon: 0.0, iters: 0, ..Default::default() };
        let report = evaluate_attack(&model, AttackKind::Pgd, &data, &cfg, OracleMode::Whitebox, 5);
        if let Ok(report) = report {
            assert_eq!(report.asr_percent, 0.0);
        }
    }

    #[test]
    fn fixed_oracle_is_reproducible() {
        let mut net = Network::new(
            vec![
                LayerSpec::Dense { input: 3, output: 4 },
                LayerSpec::ReLU,
                LayerSpec::Dense { input: 4, output: 2 },
            ],
            vec![3],
        )
        .unwrap();
        net.init_params(6);
        let model = DefendedNet::new(
            net,
            vec![crate::stochastic::Insertion {
                at: 0,
                kind: crate::stochastic::DefenseKind::Gaussian { sigma: 0.2 },
            }],
        )
        .unwrap();
        let x = Tensor::from_vec(vec![0.2, 0.5, 0.8]);
        let cfg = AttackConfig { epsilon: 0.1, iters: 20, ..Default::default() };
        let run = |seed| {
            let mut oracle = GradientOracle::new(&model, OracleMode::Fixed, seed).unwrap();
            pgd(&mut oracle, &x, 1, &cfg).unwrap().x_adv
        };
        assert_eq!(run(11), run(11));
    }
}
