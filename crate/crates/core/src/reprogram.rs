//! Adversarial reprogramming: a trainable locally connected input transform
//! plus a fixed label map that repurposes a frozen classifier for a new
//! task without touching its weights.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{LossKind, StochasticModel};
use crate::nn::Network;
use crate::rng::{rng, seed_chain};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Maps adversarial-task labels onto target-model classes. The identity map
/// requires the target to have at least as many classes as the new task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelMap {
    Identity,
}

impl LabelMap {
    pub fn to_target(&self, label: usize, task_classes: usize, target_classes: usize) -> Result<usize> {
        if label >= task_classes {
            return Err(Error::LabelOutOfRange { label, classes: task_classes });
        }
        match self {
            LabelMap::Identity => {
                if task_classes > target_classes {
                    return Err(Error::InvalidParameter(format!(
                        "identity label map needs target classes >= task classes ({task_classes} > {target_classes})"
                    )));
                }
                Ok(label)
            }
        }
    }

    pub fn from_target(&self, prediction: usize, task_classes: usize) -> Option<usize> {
        match self {
            LabelMap::Identity => (prediction < task_classes).then_some(prediction),
        }
    }
}

/// Locally connected input transform. Every pixel of the target-model input
/// has its own unshared k x k kernel over the source image (zero padding at
/// borders) plus a bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdversarialProgram {
    pub src_shape: (usize, usize),
    pub out_shape: (usize, usize),
    pub kernel: usize,
    /// [out_h * out_w, kernel * kernel]
    pub weights: Tensor,
    /// [out_h * out_w]
    pub bias: Tensor,
}

impl AdversarialProgram {
    pub fn new(src_shape: (usize, usize), out_shape: (usize, usize), kernel: usize) -> Result<Self> {
        if kernel == 0 || src_shape.0 == 0 || src_shape.1 == 0 || out_shape.0 == 0 || out_shape.1 == 0 {
            return Err(Error::InvalidParameter("program dimensions must be nonzero".into()));
        }
        let out_n = out_shape.0 * out_shape.1;
        Ok(Self {
            src_shape,
            out_shape,
            kernel,
            weights: Tensor::zeros(vec![out_n, kernel * kernel]),
            bias: Tensor::zeros(vec![out_n]),
        })
    }

    /// Identity program: kernel 1, matching shapes, unit weights, zero bias.
    pub fn identity(shape: (usize, usize)) -> Result<Self> {
        let mut p = Self::new(shape, shape, 1)?;
        p.weights.data_mut().fill(1.0);
        Ok(p)
    }

    pub fn init(&mut self, seed: u64) {
        let mut r = rng(seed_chain(seed, &[0x70726f67]));
        let std = (1.0 / (self.kernel * self.kernel) as f64).sqrt() * 0.1;
        for w in self.weights.data_mut() {
            *w = r.gen_range(-std..std);
        }
        self.bias.data_mut().fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Source patch indices feeding output pixel (r, c); `None` marks
    /// zero-padded taps outside the source image.
    fn patch(&self, r: usize, c: usize) -> Vec<Option<usize>> {
        let (sh, sw) = self.src_shape;
        let (oh, ow) = self.out_shape;
        let center_r = (r * sh / oh) as isize;
        let center_c = (c * sw / ow) as isize;
        let half = (self.kernel / 2) as isize;
        let mut taps = Vec::with_capacity(self.kernel * self.kernel);
        for dr in 0..self.kernel as isize {
            for dc in 0..self.kernel as isize {
                let sr = center_r - half + dr;
                let sc = center_c - half + dc;
                if sr >= 0 && sc >= 0 && (sr as usize) < sh && (sc as usize) < sw {
                    taps.push(Some(sr as usize * sw + sc as usize));
                } else {
                    taps.push(None);
                }
            }
        }
        taps
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (sh, sw) = self.src_shape;
        if x.len() != sh * sw {
            return Err(Error::ShapeMismatch(format!(
                "program expects {} source pixels, got {}",
                sh * sw,
                x.len()
            )));
        }
        let (oh, ow) = self.out_shape;
        let kk = self.kernel * self.kernel;
        let mut out = Tensor::zeros(vec![oh * ow]);
        for r in 0..oh {
            for c in 0..ow {
                let o = r * ow + c;
                let mut acc = self.bias.data()[o];
                for (t, tap) in self.patch(r, c).into_iter().enumerate() {
                    if let Some(s) = tap {
                        acc += self.weights.data()[o * kk + t] * x.data()[s];
                    }
                }
                out.data_mut()[o] = acc;
            }
        }
        Ok(out)
    }

    /// Gradients of the loss w.r.t. program weights and bias, given the
    /// source image and the loss gradient at the program output.
    pub fn backward(&self, x: &Tensor, d_out: &Tensor) -> Result<(Tensor, Tensor)> {
        if d_out.len() != self.out_shape.0 * self.out_shape.1 {
            return Err(Error::ShapeMismatch("program output gradient size".into()));
        }
        let (oh, ow) = self.out_shape;
        let kk = self.kernel * self.kernel;
        let mut dw = Tensor::zeros(self.weights.shape().to_vec());
        let mut db = Tensor::zeros(self.bias.shape().to_vec());
        for r in 0..oh {
            for c in 0..ow {
                let o = r * ow + c;
                let g = d_out.data()[o];
                db.data_mut()[o] += g;
                for (t, tap) in self.patch(r, c).into_iter().enumerate() {
                    if let Some(s) = tap {
                        dw.data_mut()[o * kk + t] += g * x.data()[s];
                    }
                }
            }
        }
        Ok((dw, db))
    }

    fn step(&mut self, dw: &Tensor, db: &Tensor, vw: &mut Tensor, vb: &mut Tensor, lr: f64, momentum: f64) {
        for ((v, g), p) in vw.data_mut().iter_mut().zip(dw.data()).zip(self.weights.data_mut()) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
        for ((v, g), p) in vb.data_mut().iter_mut().zip(db.data()).zip(self.bias.data_mut()) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// SHA-256 over a network's parameter buffers, for frozen-target guards.
pub fn param_checksum(net: &Network) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in &net.params {
        for t in [p.weight.as_ref(), p.bias.as_ref()].into_iter().flatten() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReprogramConfig {
    pub kernel: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub label_map: LabelMap,
}

impl Default for ReprogramConfig {
    fn default() -> Self {
        Self {
            kernel: 3,
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            label_map: LabelMap::Identity,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReprogramReport {
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub program_params: usize,
    /// Test accuracy (percent) after each epoch.
    pub accuracy_history: Vec<f64>,
}

/// Accuracy (fraction) of the target on `data` routed through the program,
/// with a fresh stochastic draw per example.
pub fn eval_reprogram(
    target: &dyn StochasticModel,
    program: &AdversarialProgram,
    map: LabelMap,
    data: &Batch,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0usize;
    for (i, (x, &y)) in data.inputs.iter().zip(&data.labels).enumerate() {
        let mut r = rng(seed_chain(seed, &[0x72657631, i as u64]));
        let z = target.logits_fresh(&program.forward(x)?, &mut r)?;
        if map.from_target(z.argmax(), data.classes) == Some(y) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Trains the program against a frozen (possibly stochastic) target by
/// minibatch SGD with momentum. The target is only ever queried for logits
/// and input gradients; its parameters are never touched.
pub fn train_program(
    target: &dyn StochasticModel,
    program: &mut AdversarialProgram,
    train: &Batch,
    test: &Batch,
    cfg: &ReprogramConfig,
    seed: u64,
) -> Result<ReprogramReport> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::InvalidParameter("batch size and learning rate must be positive".into()));
    }
    let target_classes = target.classes();
    let loss_kind = LossKind::CrossEntropy;

    let mut vw = Tensor::zeros(program.weights.shape().to_vec());
    let mut vb = Tensor::zeros(program.bias.shape().to_vec());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng(seed_chain(seed, &[0x72707368]));
    let mut model_rng = rng(seed_chain(seed, &[0x72706d64]));
    let mut last_loss = f64::NAN;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut dw = Tensor::zeros(program.weights.shape().to_vec());
            let mut db = Tensor::zeros(program.bias.shape().to_vec());
            for &i in chunk {
                let x = &train.inputs[i];
                let y = cfg.label_map.to_target(train.labels[i], train.classes, target_classes)?;
                let mapped = program.forward(x)?;
                let (loss, d_input) = target.input_grad_fresh(&mapped, &loss_kind, y, &mut model_rng)?;
                epoch_loss += loss;
                let (gw, gb) = program.backward(x, &d_input)?;
                let scale = 1.0 / chunk.len() as f64;
                for (a, b) in dw.data_mut().iter_mut().zip(gw.data()) {
                    *a += scale * b;
                }
                for (a, b) in db.data_mut().iter_mut().zip(gb.data()) {
                    *a += scale * b;
                }
            }
            program.step(&dw, &db, &mut vw, &mut vb, cfg.learning_rate, cfg.momentum);
        }
        last_loss = epoch_loss / train.len() as f64;
        let acc = eval_reprogram(target, program, cfg.label_map, test, seed_chain(seed, &[0xe0, epoch as u64]))?;
        history.push(acc * 100.0);
    }

    Ok(ReprogramReport {
        epochs_run: cfg.epochs,
        final_train_loss: last_loss,
        train_accuracy: eval_reprogram(target, program, cfg.label_map, train, seed_chain(seed, &[0xe1]))? * 100.0,
        test_accuracy: history.last().copied().unwrap_or(0.0),
        program_params: program.param_count(),
        accuracy_history: history,
    })
}

/// Convenience wrapper for plain networks that additionally verifies the
/// target's parameter checksum is unchanged by training.
pub fn train_program_against_network(
    target: &Network,
    program: &mut AdversarialProgram,
    train: &Batch,
    test: &Batch,
    cfg: &ReprogramConfig,
    seed: u64,
) -> Result<ReprogramReport> {
    let before = param_checksum(target);
    let model = crate::model::DefendedNet::plain(target.clone());
    let report = train_program(&model, program, train, test, cfg, seed)?;
    if param_checksum(target) != before {
        return Err(Error::FrozenMutation("reprogramming target parameters changed".into()));
    }
    Ok(report)
}
