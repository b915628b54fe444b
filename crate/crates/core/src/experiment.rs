//! End-to-end experiment orchestration: dataset preparation, model
//! presets, defense construction (including adversarial training), attack
//! sweeps, metric tables, and deterministic report emission.

use crate::attacks::{evaluate_attack, AsrReport};
use crate::config::{
    AttackSpec, DatasetConfig, DefenseConfig, ExperimentConfig, ModelConfig,
};
use crate::data::{gen_synthetic, load_idx, Batch};
use crate::error::{Error, Result};
use crate::hrs::{build_hrs, bottom_up_train, HrsModel};
use crate::metrics::{defense_rate, des, des_fit, gradient_std, mean_and_population_variance};
use crate::model::{accuracy_stochastic, DefendedNet, StochasticModel};
use crate::nn::{loss_and_grad, LayerSpec, Network};
use crate::reprogram::{AdversarialProgram, ReprogramReport};
use crate::rng::seed_chain;
use crate::stochastic::{DefenseKind, Insertion};
use crate::tensor::Tensor;
use crate::train::{train_network, train_network_with, TrainConfig};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

/// A trained model behind the stochastic-query interface.
pub enum TrainedModel {
    Net(DefendedNet),
    Hrs(HrsModel),
}

impl TrainedModel {
    pub fn as_model(&self) -> &dyn StochasticModel {
        match self {
            TrainedModel::Net(m) => m,
            TrainedModel::Hrs(m) => m,
        }
    }

    /// Clean test accuracy (percent) under fresh stochastic inference.
    pub fn clean_accuracy(&self, data: &Batch, seed: u64) -> Result<f64> {
        accuracy_stochastic(self.as_model(), data, seed)
    }
}

/// Train/test batches for an experiment.
pub fn prepare_data(cfg: &DatasetConfig, seed: u64) -> Result<(Batch, Batch)> {
    match cfg {
        DatasetConfig::Synthetic { classes, height, width, train, test, noise, seed: ds_seed } => {
            let base = ds_seed.unwrap_or(seed);
            // one draw so train and test share the class templates
            let all = gen_synthetic(
                seed_chain(base, &[1]),
                *classes,
                (*height, *width),
                train + test,
                *noise,
            );
            Ok((all.slice(0, *train), all.slice(*train, train + test)))
        }
        DatasetConfig::Idx { train_images, train_labels, test_images, test_labels, train_limit, test_limit } => {
            let mut tr = load_idx(train_images, train_labels)?;
            let mut te = load_idx(test_images, test_labels)?;
            if let Some(n) = train_limit {
                tr = tr.take(*n);
            }
            if let Some(n) = test_limit {
                te = te.take(*n);
            }
            Ok((tr, te))
        }
    }
}

/// Resolves a model preset to a layer list for the given data dimensions.
pub fn build_arch(cfg: &ModelConfig, input_len: usize, classes: usize) -> Result<Vec<LayerSpec>> {
    match cfg.preset.as_str() {
        "mlp" => {
            let hidden = cfg.hidden.clone().unwrap_or_else(|| vec![64, 64]);
            if hidden.is_empty() || hidden.contains(&0) {
                return Err(Error::Config("hidden widths must be nonzero".into()));
            }
            let mut layers = Vec::new();
            let mut prev = input_len;
            for &h in &hidden {
                layers.push(LayerSpec::Dense { input: prev, output: h });
                layers.push(LayerSpec::ReLU);
                prev = h;
            }
            layers.push(LayerSpec::Dense { input: prev, output: classes });
            layers.push(LayerSpec::SoftmaxOutput);
            Ok(layers)
        }
        "mlp-mnist" => {
            if input_len != 784 {
                return Err(Error::Config(format!(
                    "mlp-mnist preset expects 784 inputs, dataset has {input_len}"
                )));
            }
            Ok(vec![
                LayerSpec::Dense { input: 784, output: 200 },
                LayerSpec::ReLU,
                LayerSpec::Dense { input: 200, output: 200 },
                LayerSpec::ReLU,
                LayerSpec::Dense { input: 200, output: classes },
                LayerSpec::SoftmaxOutput,
            ])
        }
        other => Err(Error::Config(format!("unknown model preset {other:?}"))),
    }
}

/// Hidden-layer boundaries: indices of Dense layers other than the first,
/// the natural places to insert defenses or split switching blocks.
fn hidden_boundaries(arch: &[LayerSpec]) -> Vec<usize> {
    arch.iter()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| matches!(l, LayerSpec::Dense { .. }))
        .map(|(i, _)| i)
        .collect()
}

/// Default insertion points for a baseline stochastic defense.
pub fn default_insertions(arch: &[LayerSpec], defense: &DefenseConfig) -> Result<Vec<Insertion>> {
    let hidden = hidden_boundaries(arch);
    let at_hidden = |kind: DefenseKind| -> Vec<Insertion> {
        hidden.iter().map(|&at| Insertion { at, kind: kind.clone() }).collect()
    };
    Ok(match defense {
        DefenseConfig::Sap { k } => at_hidden(DefenseKind::Sap { k: *k }),
        DefenseConfig::Dropout { rate } => at_hidden(DefenseKind::Dropout { rate: *rate }),
        DefenseConfig::Gaussian { sigma, input_sigma } => {
            let mut ins = at_hidden(DefenseKind::Gaussian { sigma: *sigma });
            if let Some(s) = input_sigma {
                ins.insert(0, Insertion { at: 0, kind: DefenseKind::Gaussian { sigma: *s } });
            }
            ins
        }
        _ => Vec::new(),
    })
}

/// Default HRS split points: one hidden boundary per extra block.
pub fn default_splits(arch: &[LayerSpec], blocks: usize) -> Result<Vec<usize>> {
    if blocks == 0 {
        return Err(Error::Config("hrs needs at least one block".into()));
    }
    let hidden = hidden_boundaries(arch);
    if blocks - 1 > hidden.len() {
        return Err(Error::Config(format!(
            "{blocks} blocks need {} split points but the model only has {} hidden boundaries",
            blocks - 1,
            hidden.len()
        )));
    }
    Ok(hidden[..blocks - 1].to_vec())
}

/// Untargeted PGD in the true-label direction, used by adversarial training.
pub fn pgd_perturb(
    net: &Network,
    x: &Tensor,
    label: usize,
    epsilon: f64,
    alpha: Option<f64>,
    iters: usize,
) -> Result<Tensor> {
    if epsilon == 0.0 || iters == 0 {
        return Ok(x.clone());
    }
    let step = alpha.unwrap_or_else(|| (epsilon / 10.0).max(1.0 / 510.0));
    let mut x_adv = x.clone();
    for _ in 0..iters {
        let (logits, cache) = net.forward(&x_adv, true)?;
        let (_, d_logits) = loss_and_grad(&logits, label)?;
        let (_, g) = net.backprop(cache.as_ref().expect("cache requested"), &d_logits)?;
        for (v, gv) in x_adv.data_mut().iter_mut().zip(g.data()) {
            *v += step * gv.signum();
        }
        for (v, o) in x_adv.data_mut().iter_mut().zip(x.data()) {
            *v = v.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0);
        }
    }
    Ok(x_adv)
}

/// Adversarial training: every minibatch example is replaced by its
/// untargeted PGD perturbation at `epsilon_train` before the gradient step.
pub fn adv_train(
    arch: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    data: &Batch,
    epsilon_train: f64,
    alpha: Option<f64>,
    pgd_iters: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Network> {
    let mut net = Network::new(arch, input_shape)?;
    net.init_params(seed);
    let perturb = move |net: &Network, x: &Tensor, label: usize, _seed: u64| {
        pgd_perturb(net, x, label, epsilon_train, alpha, pgd_iters)
    };
    train_network_with(&mut net, data, &[], cfg, seed, None, Some(&perturb))?;
    Ok(net)
}

/// Trains the configured model + defense on `train` data. All randomness is
/// derived from `seed`, so identical inputs give identical parameters.
pub fn build_model(
    model_cfg: &ModelConfig,
    defense: &DefenseConfig,
    train: &Batch,
    tc: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel> {
    let input_len = train.inputs[0].len();
    let arch = build_arch(model_cfg, input_len, train.classes)?;
    let input_shape = train.input_shape().to_vec();
    let train_seed = seed_chain(seed, &[0x6d6f64656c]);

    match defense {
        DefenseConfig::None => {
            let mut net = Network::new(arch, input_shape)?;
            net.init_params(train_seed);
            train_network(&mut net, train, &[], tc, train_seed, None)?;
            Ok(TrainedModel::Net(DefendedNet::plain(net)))
        }
        DefenseConfig::Sap { .. } => {
            // inference-only defense: the base model trains plainly
            let mut net = Network::new(arch.clone(), input_shape)?;
            net.init_params(train_seed);
            train_network(&mut net, train, &[], tc, train_seed, None)?;
            let ins = default_insertions(&arch, defense)?;
            Ok(TrainedModel::Net(DefendedNet::new(net, ins)?))
        }
        DefenseConfig::Dropout { .. } | DefenseConfig::Gaussian { .. } => {
            let ins = default_insertions(&arch, defense)?;
            let mut net = Network::new(arch, input_shape)?;
            net.init_params(train_seed);
            train_network(&mut net, train, &ins, tc, train_seed, None)?;
            Ok(TrainedModel::Net(DefendedNet::new(net, ins)?))
        }
        DefenseConfig::Hrs { channels, splits } => {
            let splits = match splits {
                Some(s) => s.clone(),
                None => default_splits(&arch, channels.len())?,
            };
            let mut model = build_hrs(arch, input_shape, splits, channels.clone())?;
            bottom_up_train(&mut model, train, tc, train_seed)?;
            Ok(TrainedModel::Hrs(model))
        }
        DefenseConfig::Advtrain { epsilon, iters, alpha } => {
            let net = adv_train(
                arch,
                input_shape,
                train,
                epsilon.0,
                *alpha,
                *iters,
                tc,
                train_seed,
            )?;
            Ok(TrainedModel::Net(DefendedNet::plain(net)))
        }
    }
}

// ---------------------------------------------------------------------------
// Report bundle

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub model: String,
    pub clean_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsrRow {
    pub model: String,
    pub attack: String,
    pub mode: String,
    pub epsilon: f64,
    pub attacked: usize,
    pub successes: usize,
    pub asr: f64,
    pub defense_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackExampleRow {
    pub example_id: usize,
    pub attack: String,
    pub epsilon: f64,
    pub success: bool,
    pub linf: f64,
    pub l2: f64,
    pub queries: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesScatterRow {
    pub defense: String,
    pub theta: f64,
    pub delta_t: f64,
    pub delta_d: f64,
    pub des: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesSummaryRow {
    pub family: String,
    pub mean_des: f64,
    pub variance_des: f64,
    /// Least-squares (delta_t, delta_d) line when the family has >= 2 points.
    pub fit_slope: Option<f64>,
    pub fit_intercept: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradStdRow {
    pub model: String,
    pub grad_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReprogramRow {
    pub epoch: usize,
    pub defense: String,
    pub kernel: usize,
    pub accuracy: f64,
}

/// Everything an experiment run produces; regenerable bit-identically
/// from (config, seed).
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ReportBundle {
    pub config_hash: String,
    pub seed: u64,
    pub accuracy: Vec<AccuracyRow>,
    pub asr: Vec<AsrRow>,
    pub attack_examples: Vec<AttackExampleRow>,
    pub des: Vec<DesScatterRow>,
    pub des_summary: Vec<DesSummaryRow>,
    pub grad_std: Vec<GradStdRow>,
    pub reprogramming: Vec<ReprogramRow>,
}

fn push_asr(bundle: &mut ReportBundle, model: &str, mode: &str, report: &AsrReport) {
    bundle.asr.push(AsrRow {
        model: model.into(),
        attack: report.attack.name().into(),
        mode: mode.into(),
        epsilon: report.epsilon,
        attacked: report.attacked,
        successes: report.successes,
        asr: report.asr_percent,
        defense_rate: defense_rate(report.asr_percent),
    });
    for o in &report.outcomes {
        bundle.attack_examples.push(AttackExampleRow {
            example_id: o.example_id,
            attack: report.attack.name().into(),
            epsilon: report.epsilon,
            success: o.success,
            linf: o.linf,
            l2: o.l2,
            queries: o.queries,
        });
    }
}

fn mode_label(spec: &AttackSpec) -> String {
    match spec.mode {
        crate::config::AttackModeConfig::Whitebox => "whitebox".into(),
        crate::config::AttackModeConfig::Eot => format!("eot{}", spec.eot_samples),
        crate::config::AttackModeConfig::Fixed => "fixed".into(),
    }
}

/// Runs every attack spec over its epsilon grid against `model`.
pub fn evaluate_attacks(
    model: &dyn StochasticModel,
    model_label: &str,
    test: &Batch,
    specs: &[AttackSpec],
    bundle: &mut ReportBundle,
    seed: u64,
) -> Result<()> {
    for (si, spec) in specs.iter().enumerate() {
        let subset = match spec.examples {
            Some(n) => test.take(n),
            None => test.take(test.len()),
        };
        for (ei, eps) in spec.epsilons.iter().enumerate() {
            let cfg = spec.attack_config(eps.0);
            let report = evaluate_attack(
                model,
                spec.kind,
                &subset,
                &cfg,
                spec.oracle_mode(),
                seed_chain(seed, &[0xa77ac4, si as u64, ei as u64]),
            )?;
            push_asr(bundle, model_label, &mode_label(spec), &report);
        }
    }
    Ok(())
}

fn defense_family(d: &DefenseConfig) -> &'static str {
    match d {
        DefenseConfig::None => "base",
        DefenseConfig::Sap { .. } => "sap",
        DefenseConfig::Dropout { .. } => "dropout",
        DefenseConfig::Gaussian { .. } => "gaussian",
        DefenseConfig::Hrs { .. } => "hrs",
        DefenseConfig::Advtrain { .. } => "advtrain",
    }
}

/// DES sweep: trains the plain baseline plus every listed defense, attacks
/// each with the sweep's first epsilon, and fills the scatter + summary.
pub fn run_des_sweep(
    cfg: &ExperimentConfig,
    spec: &crate::config::DesSpec,
    train: &Batch,
    test: &Batch,
    bundle: &mut ReportBundle,
) -> Result<()> {
    let eps = spec
        .attack
        .epsilons
        .first()
        .ok_or_else(|| Error::Config("des attack needs at least one epsilon".into()))?;
    let acfg = spec.attack.attack_config(eps.0);
    let tc = cfg.train.to_train_config();
    let subset = match spec.attack.examples {
        Some(n) => test.take(n),
        None => test.take(test.len()),
    };

    let base = build_model(&cfg.model, &DefenseConfig::None, train, &tc, cfg.seed)?;
    let t_base = base.clean_accuracy(test, seed_chain(cfg.seed, &[0xc1ea4]))?;
    let base_report = evaluate_attack(
        base.as_model(),
        spec.attack.kind,
        &subset,
        &acfg,
        spec.attack.oracle_mode(),
        seed_chain(cfg.seed, &[0xde5, 0]),
    )?;
    let d_base = defense_rate(base_report.asr_percent);

    let mut families: Vec<(&'static str, Vec<(f64, f64, f64)>)> = Vec::new();
    for (k, dcfg) in spec.defenses.iter().enumerate() {
        let model = build_model(&cfg.model, dcfg, train, &tc, seed_chain(cfg.seed, &[0xdef, k as u64]))?;
        let t = model.clean_accuracy(test, seed_chain(cfg.seed, &[0xc1ea4]))?;
        let report = evaluate_attack(
            model.as_model(),
            spec.attack.kind,
            &subset,
            &acfg,
            spec.attack.oracle_mode(),
            seed_chain(cfg.seed, &[0xde5, 1 + k as u64]),
        )?;
        let d = defense_rate(report.asr_percent);
        let delta_t = t_base - t;
        let delta_d = d - d_base;
        let score = des(d_base, d, t_base, t);
        bundle.des.push(DesScatterRow {
            defense: dcfg.label(),
            theta: dcfg.theta(),
            delta_t,
            delta_d,
            des: score,
        });
        bundle.accuracy.push(AccuracyRow { model: dcfg.label(), clean_accuracy: t });
        push_asr(bundle, &dcfg.label(), &mode_label(&spec.attack), &report);

        let fam = defense_family(dcfg);
        match families.iter_mut().find(|(f, _)| *f == fam) {
            Some((_, pts)) => pts.push((delta_t, delta_d, score)),
            None => families.push((fam, vec![(delta_t, delta_d, score)])),
        }
    }
    bundle.accuracy.push(AccuracyRow { model: "base".into(), clean_accuracy: t_base });
    push_asr(bundle, "base", &mode_label(&spec.attack), &base_report);

    for (fam, pts) in families {
        let scores: Vec<f64> = pts.iter().map(|p| p.2).collect();
        let (mean, var) = mean_and_population_variance(&scores)?;
        let fit = if pts.len() >= 2 {
            des_fit(&pts.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>()).ok()
        } else {
            None
        };
        bundle.des_summary.push(DesSummaryRow {
            family: fam.into(),
            mean_des: mean,
            variance_des: var,
            fit_slope: fit.map(|f| f.slope),
            fit_intercept: fit.map(|f| f.intercept),
        });
    }
    Ok(())
}

fn square_hw(len: usize) -> Result<(usize, usize)> {
    let side = (len as f64).sqrt().round() as usize;
    if side * side != len {
        return Err(Error::Config(format!("cannot infer square image side from {len} pixels")));
    }
    Ok((side, side))
}

/// Image height/width of a dataset's samples.
pub fn dataset_hw(cfg: &DatasetConfig, sample_len: usize) -> Result<(usize, usize)> {
    match cfg {
        DatasetConfig::Synthetic { height, width, .. } => Ok((*height, *width)),
        DatasetConfig::Idx { .. } => square_hw(sample_len),
    }
}

/// Trains an adversarial program against the trained target and records the
/// per-epoch accuracy curve.
pub fn run_reprogram(
    cfg: &ExperimentConfig,
    spec: &crate::config::ReprogramSpec,
    target: &TrainedModel,
    target_hw: (usize, usize),
    bundle: &mut ReportBundle,
) -> Result<ReprogramReport> {
    let (task_train, task_test) = prepare_data(&spec.task, seed_chain(cfg.seed, &[0x7461736b]))?;
    if task_train.classes > target.as_model().classes() {
        return Err(Error::Config(format!(
            "task has {} classes but the target only has {}",
            task_train.classes,
            target.as_model().classes()
        )));
    }
    let src_hw = dataset_hw(&spec.task, task_train.inputs[0].len())?;
    let mut program = AdversarialProgram::new(src_hw, target_hw, spec.kernel)?;
    program.init(seed_chain(cfg.seed, &[0x7067]));
    let rcfg = spec.to_config();
    let report = crate::reprogram::train_program(
        target.as_model(),
        &mut program,
        &task_train,
        &task_test,
        &rcfg,
        seed_chain(cfg.seed, &[0x7270]),
    )?;
    let label = cfg.defense.label();
    for (e, acc) in report.accuracy_history.iter().enumerate() {
        bundle.reprogramming.push(ReprogramRow {
            epoch: e + 1,
            defense: label.clone(),
            kernel: spec.kernel,
            accuracy: *acc,
        });
    }
    Ok(report)
}

/// Full pipeline: data, model + defense, attack sweeps, metric tables.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ReportBundle> {
    cfg.validate()?;
    let mut bundle = ReportBundle {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        ..Default::default()
    };
    let (train, test) = prepare_data(&cfg.dataset, cfg.seed)?;
    let tc = cfg.train.to_train_config();
    let label = cfg.defense.label();

    let model = build_model(&cfg.model, &cfg.defense, &train, &tc, cfg.seed)?;
    bundle.accuracy.push(AccuracyRow {
        model: label.clone(),
        clean_accuracy: model.clean_accuracy(&test, seed_chain(cfg.seed, &[0xc1ea4]))?,
    });

    evaluate_attacks(model.as_model(), &label, &test, &cfg.attacks, &mut bundle, cfg.seed)?;

    if let Some(spec) = &cfg.des {
        run_des_sweep(cfg, spec, &train, &test, &mut bundle)?;
    }

    if let Some(spec) = &cfg.grad_std {
        let s = gradient_std(
            model.as_model(),
            &test,
            spec.examples,
            spec.samples,
            spec.kappa,
            seed_chain(cfg.seed, &[0x677264]),
        )?;
        bundle.grad_std.push(GradStdRow { model: label.clone(), grad_std: s });
    }

    if let Some(spec) = &cfg.reprogram {
        let hw = dataset_hw(&cfg.dataset, test.inputs[0].len())?;
        run_reprogram(cfg, spec, &model, hw, &mut bundle)?;
    }

    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Emission

fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let tmp = dir.join(format!(".tmp-{name}"));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, dir.join(name))?;
    Ok(())
}

fn csv<R, F: Fn(&R, &mut String)>(header: &str, rows: &[R], f: F) -> String {
    let mut s = String::new();
    s.push_str(header);
    s.push('\n');
    for r in rows {
        f(r, &mut s);
        s.push('\n');
    }
    s
}

/// Writes the bundle as CSV tables plus a JSON summary. Each file lands via
/// temp-file rename; an empty bundle still produces headers-only CSVs.
pub fn emit_report(bundle: &ReportBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    write_atomic(
        dir,
        "accuracy.csv",
        &csv("model,clean_accuracy", &bundle.accuracy, |r, s| {
            let _ = write!(s, "{},{}", r.model, r.clean_accuracy);
        }),
    )?;
    write_atomic(
        dir,
        "asr.csv",
        &csv(
            "model,attack,mode,epsilon,attacked,successes,asr,defense_rate",
            &bundle.asr,
            |r, s| {
                let _ = write!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    r.model, r.attack, r.mode, r.epsilon, r.attacked, r.successes, r.asr, r.defense_rate
                );
            },
        ),
    )?;
    write_atomic(
        dir,
        "attacks.csv",
        &csv(
            "example_id,attack,epsilon,success,linf,l2,queries",
            &bundle.attack_examples,
            |r, s| {
                let _ = write!(
                    s,
                    "{},{},{},{},{},{},{}",
                    r.example_id, r.attack, r.epsilon, r.success, r.linf, r.l2, r.queries
                );
            },
        ),
    )?;
    write_atomic(
        dir,
        "des.csv",
        &csv("defense,theta,delta_t,delta_d,des", &bundle.des, |r, s| {
            let _ = write!(s, "{},{},{},{},{}", r.defense, r.theta, r.delta_t, r.delta_d, r.des);
        }),
    )?;
    write_atomic(
        dir,
        "grad_std.csv",
        &csv("model,grad_std", &bundle.grad_std, |r, s| {
            let _ = write!(s, "{},{}", r.model, r.grad_std);
        }),
    )?;
    write_atomic(
        dir,
        "reprogramming.csv",
        &csv("epoch,defense,kernel,accuracy", &bundle.reprogramming, |r, s| {
            let _ = write!(s, "{},{},{},{}", r.epoch, r.defense, r.kernel, r.accuracy);
        }),
    )?;
    write_atomic(
        dir,
        "des_summary.json",
        &serde_json::to_string_pretty(&bundle.des_summary)?,
    )?;
    write_atomic(dir, "report.json", &serde_json::to_string_pretty(bundle)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Epsilon;

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
            "dataset": {"kind": "synthetic", "classes": 3, "height": 3, "width": 3,
                        "train": 60, "test": 24, "noise": 0.1},
            "model": {"preset": "mlp", "hidden": [12]},
            "train": {"epochs": 8},
            "attacks": [{"kind": "pgd", "epsilons": ["16/255"], "iters": 5, "examples": 8}],
            "seed": 5
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn preset_shapes() {
        let arch = build_arch(&ModelConfig { preset: "mlp".into(), hidden: Some(vec![7]) }, 9, 3).unwrap();
        assert_eq!(arch.len(), 4);
        assert!(build_arch(&ModelConfig { preset: "nope".into(), hidden: None }, 9, 3).is_err());
        assert!(build_arch(&ModelConfig { preset: "mlp-mnist".into(), hidden: None }, 100, 10).is_err());
    }

    #[test]
    fn default_positions() {
        let arch = build_arch(&ModelConfig { preset: "mlp".into(), hidden: Some(vec![8, 8]) }, 9, 3).unwrap();
        let ins = default_insertions(&arch, &DefenseConfig::Dropout { rate: 0.2 }).unwrap();
        assert_eq!(ins.iter().map(|i| i.at).collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(default_splits(&arch, 2).unwrap(), vec![2]);
        assert_eq!(default_splits(&arch, 3).unwrap(), vec![2, 4]);
        assert!(default_splits(&arch, 4).is_err());
    }

    #[test]
    fn adv_train_zero_epsilon_equals_plain_training() {
        let data = gen_synthetic(3, 2, (2, 3), 40, 0.1);
        let tc = TrainConfig { epochs: 3, ..Default::default() };
        let arch = build_arch(&ModelConfig { preset: "mlp".into(), hidden: Some(vec![6]) }, 6, 2).unwrap();
        let adv = adv_train(arch.clone(), vec![6], &data, 0.0, None, 10, &tc, 9).unwrap();
        let mut plain = Network::new(arch, vec![6]).unwrap();
        plain.init_params(9);
        train_network(&mut plain, &data, &[], &tc, 9, None).unwrap();
        assert_eq!(adv.params, plain.params);
    }

    #[test]
    fn pgd_perturb_stays_in_budget_and_raises_loss() {
        let data = gen_synthetic(4, 2, (2, 2), 30, 0.05);
        let arch = build_arch(&ModelConfig { preset: "mlp".into(), hidden: Some(vec![6]) }, 4, 2).unwrap();
        let mut net = Network::new(arch, vec![4]).unwrap();
        net.init_params(1);
        train_network(&mut net, &data, &[], &TrainConfig { epochs: 6, ..Default::default() }, 1, None).unwrap();
        let x = &data.inputs[0];
        let adv = pgd_perturb(&net, x, data.labels[0], 0.1, None, 20).unwrap();
        assert!(adv.linf_distance(x) <= 0.1 + 1e-12);
        let clean_loss = loss_and_grad(&net.logits(x).unwrap(), data.labels[0]).unwrap().0;
        let adv_loss = loss_and_grad(&net.logits(&adv).unwrap(), data.labels[0]).unwrap().0;
        assert!(adv_loss >= clean_loss);
    }

    #[test]
    fn run_experiment_is_deterministic_and_emits_identical_bytes() {
        let cfg = tiny_cfg();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        emit_report(&a, dir_a.path()).unwrap();
        emit_report(&b, dir_b.path()).unwrap();
        for name in [
            "accuracy.csv",
            "asr.csv",
            "attacks.csv",
            "des.csv",
            "grad_std.csv",
            "reprogramming.csv",
            "des_summary.json",
            "report.json",
        ] {
            let x = std::fs::read(dir_a.path().join(name)).unwrap();
            let y = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs between identical runs");
        }
    }

    #[test]
    fn empty_bundle_emits_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&ReportBundle::default(), dir.path()).unwrap();
        let asr = std::fs::read_to_string(dir.path().join("asr.csv")).unwrap();
        assert_eq!(asr, "model,attack,mode,epsilon,attacked,successes,asr,defense_rate\n");
        // JSON round-trips through the schema
        let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let back: ReportBundle = serde_json::from_str(&text).unwrap();
        assert_eq!(back.asr.len(), 0);
    }

    #[test]
    fn reemit_is_byte_identical() {
        let cfg = tiny_cfg();
        let bundle = run_experiment(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_report(&bundle, dir.path()).unwrap();
        let first = std::fs::read(dir.path().join("report.json")).unwrap();
        emit_report(&bundle, dir.path()).unwrap();
        let second = std::fs::read(dir.path().join("report.json")).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn des_sweep_produces_rows_and_summary() {
        let mut cfg = tiny_cfg();
        cfg.attacks.clear();
        cfg.des = Some(crate::config::DesSpec {
            defenses: vec![
                DefenseConfig::Dropout { rate: 0.1 },
                DefenseConfig::Dropout { rate: 0.3 },
            ],
            attack: crate::config::AttackSpec {
                kind: crate::attacks::AttackKind::Pgd,
                epsilons: vec![Epsilon(16.0 / 255.0)],
                iters: 5,
                alpha: None,
                kappa: 0.0,
                mode: crate::config::AttackModeConfig::Whitebox,
                eot_samples: 10,
                examples: Some(8),
            },
        });
        let bundle = run_experiment(&cfg).unwrap();
        assert_eq!(bundle.des.len(), 2);
        let summary = bundle.des_summary.iter().find(|r| r.family == "dropout").unwrap();
        assert!(summary.fit_slope.is_some());
        let scores: Vec<f64> = bundle.des.iter().map(|r| r.des).collect();
        let (m, _) = mean_and_population_variance(&scores).unwrap();
        assert!((summary.mean_des - m).abs() < 1e-12);
    }
}
