//! Python bindings for the switchlab core: tensors, networks, HRS models,
//! the attack suite, and the defense-efficiency metrics.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use switchlab::attacks::{self, AttackConfig, AttackKind, GradientOracle, OracleMode};
use switchlab::data::{gen_synthetic, Batch};
use switchlab::hrs::{build_hrs, bottom_up_train, HrsModel};
use switchlab::model::{accuracy_stochastic, DefendedNet, StochasticModel};
use switchlab::nn::{LayerSpec, Network};
use switchlab::tensor::Tensor;
use switchlab::train::{train_network, TrainConfig};

fn err(e: switchlab::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn mlp_arch(input: usize, hidden: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut prev = input;
    for &h in hidden {
        layers.push(LayerSpec::Dense { input: prev, output: h });
        layers.push(LayerSpec::ReLU);
        prev = h;
    }
    layers.push(LayerSpec::Dense { input: prev, output: classes });
    layers
}

/// A labeled dataset of flat images in [0, 1].
#[pyclass(name = "Batch")]
struct PyBatch {
    inner: Batch,
}

#[pymethods]
impl PyBatch {
    /// Class-conditional Gaussian-blob images, reproducible per seed.
    #[staticmethod]
    #[pyo3(signature = (seed, classes, height, width, n, noise=0.25))]
    fn synthetic(seed: u64, classes: usize, height: usize, width: usize, n: usize, noise: f64) -> Self {
        Self { inner: gen_synthetic(seed, classes, (height, width), n, noise) }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    fn example(&self, i: usize) -> PyResult<Vec<f64>> {
        self.inner
            .inputs
            .get(i)
            .map(|t| t.data().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("example {i} out of range")))
    }
}

/// A fully connected ReLU classifier, optionally trained here.
#[pyclass(name = "Network")]
struct PyNetwork {
    inner: DefendedNet,
}

#[pymethods]
impl PyNetwork {
    #[new]
    fn new(input: usize, hidden: Vec<usize>, classes: usize, seed: u64) -> PyResult<Self> {
        let mut net = Network::new(mlp_arch(input, &hidden, classes), vec![input]).map_err(err)?;
        net.init_params(seed);
        Ok(Self { inner: DefendedNet::plain(net) })
    }

    #[pyo3(signature = (data, epochs=30, learning_rate=0.05, seed=0))]
    fn train(&mut self, data: &PyBatch, epochs: usize, learning_rate: f64, seed: u64) -> PyResult<usize> {
        let cfg = TrainConfig { epochs, learning_rate, ..Default::default() };
        let report =
            train_network(&mut self.inner.net, &data.inner, &[], &cfg, seed, None).map_err(err)?;
        Ok(report.epochs_run)
    }

    fn logits(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let t = Tensor::from_vec(x);
        Ok(self.inner.net.logits(&t).map_err(err)?.into_data())
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<usize> {
        let t = Tensor::from_vec(x);
        Ok(self.inner.net.logits(&t).map_err(err)?.argmax())
    }

    fn accuracy(&self, data: &PyBatch, seed: u64) -> PyResult<f64> {
        accuracy_stochastic(&self.inner, &data.inner, seed).map_err(err)
    }

    fn param_count(&self) -> usize {
        self.inner.net.param_count()
    }

    /// Targeted PGD starting from `x`; returns the adversarial input and
    /// whether the model now predicts `target`.
    #[pyo3(signature = (x, target, epsilon, iters=100, seed=0))]
    fn pgd(&self, x: Vec<f64>, target: usize, epsilon: f64, iters: usize, seed: u64) -> PyResult<(Vec<f64>, bool)> {
        attack(&self.inner, AttackKind::Pgd, x, target, epsilon, iters, seed)
    }

    #[pyo3(signature = (x, target, epsilon, seed=0))]
    fn fgsm(&self, x: Vec<f64>, target: usize, epsilon: f64, seed: u64) -> PyResult<(Vec<f64>, bool)> {
        attack(&self.inner, AttackKind::Fgsm, x, target, epsilon, 1, seed)
    }
}

fn attack(
    model: &dyn StochasticModel,
    kind: AttackKind,
    x: Vec<f64>,
    target: usize,
    epsilon: f64,
    iters: usize,
    seed: u64,
) -> PyResult<(Vec<f64>, bool)> {
    let cfg = AttackConfig { epsilon, iters, ..Default::default() };
    let mut oracle = GradientOracle::new(model, OracleMode::Whitebox, seed).map_err(err)?;
    let r = attacks::run_attack(&mut oracle, kind, &Tensor::from_vec(x), target, &cfg).map_err(err)?;
    Ok((r.x_adv.into_data(), r.success))
}

/// A hierarchical random switching classifier.
#[pyclass(name = "HrsModel")]
struct PyHrs {
    inner: HrsModel,
}

#[pymethods]
impl PyHrs {
    /// MLP base architecture split into one block per channel count.
    #[new]
    fn new(input: usize, hidden: Vec<usize>, classes: usize, channels: Vec<usize>) -> PyResult<Self> {
        let arch = mlp_arch(input, &hidden, classes);
        // split at hidden-layer boundaries: Dense layers past the first
        let boundaries: Vec<usize> = arch
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, l)| matches!(l, LayerSpec::Dense { .. }))
            .map(|(i, _)| i)
            .collect();
        if channels.len() > boundaries.len() + 1 {
            return Err(PyValueError::new_err("more blocks than hidden boundaries"));
        }
        let splits = boundaries[..channels.len() - 1].to_vec();
        let inner = build_hrs(arch, vec![input], splits, channels).map_err(err)?;
        Ok(Self { inner })
    }

    fn path_count(&self) -> usize {
        self.inner.path_count()
    }

    #[pyo3(signature = (data, epochs=30, learning_rate=0.05, seed=0))]
    fn train(&mut self, data: &PyBatch, epochs: usize, learning_rate: f64, seed: u64) -> PyResult<()> {
        let cfg = TrainConfig { epochs, learning_rate, ..Default::default() };
        bottom_up_train(&mut self.inner, &data.inner, &cfg, seed).map_err(err)?;
        Ok(())
    }

    fn accuracy(&self, data: &PyBatch, seed: u64) -> PyResult<f64> {
        accuracy_stochastic(&self.inner, &data.inner, seed).map_err(err)
    }

    #[pyo3(signature = (x, target, epsilon, iters=100, seed=0))]
    fn pgd(&self, x: Vec<f64>, target: usize, epsilon: f64, iters: usize, seed: u64) -> PyResult<(Vec<f64>, bool)> {
        attack(&self.inner, AttackKind::Pgd, x, target, epsilon, iters, seed)
    }
}

/// Defense efficiency score: defense-rate gain per point of accuracy drop.
#[pyfunction]
fn des(base_rate: f64, defended_rate: f64, base_accuracy: f64, defended_accuracy: f64) -> f64 {
    switchlab::metrics::des(base_rate, defended_rate, base_accuracy, defended_accuracy)
}

#[pyfunction]
fn defense_rate(asr_percent: f64) -> f64 {
    switchlab::metrics::defense_rate(asr_percent)
}

#[pymodule]
fn switchlab_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBatch>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyHrs>()?;
    m.add_function(wrap_pyfunction!(des, m)?)?;
    m.add_function(wrap_pyfunction!(defense_rate, m)?)?;
    Ok(())
}
