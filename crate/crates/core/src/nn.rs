//! Minimal dense network engine: layer specs, forward/backward passes,
//! parameter initialization, and SGD training.

use crate::error::{Error, Result};
use crate::rng::{rng, seed_chain};
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Conv2D { filters: usize, kernel: (usize, usize), stride: usize },
    MaxPool { size: usize },
    ReLU,
    Flatten,
    /// Output marker; logits are produced raw and the softmax lives in the loss.
    SoftmaxOutput,
}

/// Weight/bias pair for one layer. Parameterless layers hold `None`s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl LayerParams {
    pub fn empty() -> Self {
        Self { weight: None, bias: None }
    }
}

/// Computes the output shape of `layer` applied to `input` shape, validating
/// composition. Conv layers infer their channel count from the input.
pub fn output_shape(layer: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    match layer {
        LayerSpec::Dense { input: d_in, output } => {
            if input.len() != 1 || input[0] != *d_in {
                return Err(Error::InvalidArchitecture(format!(
                    "Dense({d_in}->{output}) cannot take input shape {input:?}"
                )));
            }
            Ok(vec![*output])
        }
        LayerSpec::Conv2D { filters, kernel: (kh, kw), stride } => {
            if input.len() != 3 {
                return Err(Error::InvalidArchitecture(format!(
                    "Conv2D needs [C,H,W] input, got {input:?}"
                )));
            }
            let (h, w) = (input[1], input[2]);
            if *stride == 0 || *kh == 0 || *kw == 0 || *filters == 0 {
                return Err(Error::InvalidArchitecture("zero conv dimension".into()));
            }
            if h < *kh || w < *kw {
                return Err(Error::InvalidArchitecture(format!(
                    "kernel ({kh},{kw}) larger than input ({h},{w})"
                )));
            }
            Ok(vec![*filters, (h - kh) / stride + 1, (w - kw) / stride + 1])
        }
        LayerSpec::MaxPool { size } => {
            if input.len() != 3 {
                return Err(Error::InvalidArchitecture(format!(
                    "MaxPool needs [C,H,W] input, got {input:?}"
                )));
            }
            if *size == 0 || input[1] < *size || input[2] < *size {
                return Err(Error::InvalidArchitecture("bad pool size".into()));
            }
            Ok(vec![input[0], input[1] / size, input[2] / size])
        }
        LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        LayerSpec::ReLU | LayerSpec::SoftmaxOutput => Ok(input.to_vec()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<LayerSpec>,
    pub params: Vec<LayerParams>,
    pub input_shape: Vec<usize>,
    pub rng_seed: u64,
}

impl Network {
    /// Builds a network with zero-valued parameters; call [`Network::init_params`]
    /// (or load a checkpoint) before use.
    pub fn new(layers: Vec<LayerSpec>, input_shape: Vec<usize>) -> Result<Self> {
        let mut shape = input_shape.clone();
        let mut params = Vec::with_capacity(layers.len());
        for layer in &layers {
            params.push(alloc_params(layer, &shape)?);
            shape = output_shape(layer, &shape)?;
        }
        if shape.len() != 1 {
            return Err(Error::InvalidArchitecture(format!(
                "network must end in a logits vector, got shape {shape:?}"
            )));
        }
        Ok(Self { layers, params, input_shape, rng_seed: 0 })
    }

    pub fn num_classes(&self) -> usize {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = output_shape(layer, &shape).expect("validated at construction");
        }
        shape[0]
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| {
                p.weight.as_ref().map_or(0, Tensor::len) + p.bias.as_ref().map_or(0, Tensor::len)
            })
            .sum()
    }

    /// He-style initialization: weights ~ N(0, 2/fan_in), biases zero.
    /// Reproducible given the seed.
    pub fn init_params(&mut self, seed: u64) {
        self.rng_seed = seed;
        let mut rng = rng(seed_chain(seed, &[0x696e6974]));
        let mut shape = self.input_shape.clone();
        for (layer, params) in self.layers.iter().zip(self.params.iter_mut()) {
            if let Some(w) = params.weight.as_mut() {
                let fan_in = fan_in(layer, &shape);
                let std = (2.0 / fan_in as f64).sqrt();
                for v in w.data_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = z * std;
                }
            }
            if let Some(b) = params.bias.as_mut() {
                for v in b.data_mut() {
                    *v = 0.0;
                }
            }
            shape = output_shape(layer, &shape).expect("validated at construction");
        }
    }

    pub fn forward(&self, input: &Tensor, want_cache: bool) -> Result<(Tensor, Option<ForwardCache>)> {
        run_layers(&self.layers, &self.params, input, want_cache)
    }

    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input, false)?.0)
    }

    pub fn backprop(&self, cache: &ForwardCache, d_logits: &Tensor) -> Result<(Vec<LayerParams>, Tensor)> {
        backprop_layers(&self.layers, &self.params, cache, d_logits)
    }
}

fn fan_in(layer: &LayerSpec, input: &[usize]) -> usize {
    match layer {
        LayerSpec::Dense { input: d_in, .. } => *d_in,
        LayerSpec::Conv2D { kernel: (kh, kw), .. } => input[0] * kh * kw,
        _ => 1,
    }
}

fn alloc_params(layer: &LayerSpec, input: &[usize]) -> Result<LayerParams> {
    match layer {
        LayerSpec::Dense { input: d_in, output } => Ok(LayerParams {
            weight: Some(Tensor::zeros(vec![*output, *d_in])),
            bias: Some(Tensor::zeros(vec![*output])),
        }),
        LayerSpec::Conv2D { filters, kernel: (kh, kw), .. } => {
            if input.len() != 3 {
                return Err(Error::InvalidArchitecture(format!(
                    "Conv2D needs [C,H,W] input, got {input:?}"
                )));
            }
            Ok(LayerParams {
                weight: Some(Tensor::zeros(vec![*filters, input[0], *kh, *kw])),
                bias: Some(Tensor::zeros(vec![*filters])),
            })
        }
        _ => Ok(LayerParams::empty()),
    }
}

/// Per-layer inputs recorded during a cached forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layer_inputs: Vec<Tensor>,
}

/// Runs `layers` with `params` over a single example. Shared by plain
/// networks and HRS active-path evaluation so both take the identical
/// floating-point route.
pub fn run_layers(
    layers: &[LayerSpec],
    params: &[LayerParams],
    input: &Tensor,
    want_cache: bool,
) -> Result<(Tensor, Option<ForwardCache>)> {
    let mut cache = want_cache.then(|| ForwardCache { layer_inputs: Vec::with_capacity(layers.len()) });
    let mut x = input.clone();
    for (layer, p) in layers.iter().zip(params) {
        if let Some(c) = cache.as_mut() {
            c.layer_inputs.push(x.clone());
        }
        x = layer_forward(layer, p, &x)?;
    }
    if !x.all_finite() {
        return Err(Error::InvalidParameter("non-finite activation in forward pass".into()));
    }
    Ok((x, cache))
}

fn layer_forward(layer: &LayerSpec, p: &LayerParams, x: &Tensor) -> Result<Tensor> {
    match layer {
        LayerSpec::Dense { input: d_in, output } => {
            if x.shape() != [*d_in] {
                return Err(Error::ShapeMismatch(format!(
                    "Dense({d_in}->{output}) got input shape {:?}",
                    x.shape()
                )));
            }
            let w = p.weight.as_ref().unwrap().data();
            let b = p.bias.as_ref().unwrap().data();
            let xin = x.data();
            let mut out = vec![0.0; *output];
            for (o, out_v) in out.iter_mut().enumerate() {
                let row = &w[o * d_in..(o + 1) * d_in];
                let mut acc = b[o];
                for (wv, xv) in row.iter().zip(xin) {
                    acc += wv * xv;
                }
                *out_v = acc;
            }
            Tensor::new(vec![*output], out)
        }
        LayerSpec::Conv2D { filters, kernel: (kh, kw), stride } => {
            let shp = x.shape().to_vec();
            let (c_in, h, w_in) = (shp[0], shp[1], shp[2]);
            let oh = (h - kh) / stride + 1;
            let ow = (w_in - kw) / stride + 1;
            let wt = p.weight.as_ref().unwrap().data();
            let b = p.bias.as_ref().unwrap().data();
            let xin = x.data();
            let mut out = vec![0.0; filters * oh * ow];
            for f in 0..*filters {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[f];
                        for c in 0..c_in {
                            for ky in 0..*kh {
                                let iy = oy * stride + ky;
                                let xrow = c * h * w_in + iy * w_in + ox * stride;
                                let wrow = ((f * c_in + c) * kh + ky) * kw;
                                for kx in 0..*kw {
                                    acc += wt[wrow + kx] * xin[xrow + kx];
                                }
                            }
                        }
                        out[f * oh * ow + oy * ow + ox] = acc;
                    }
                }
            }
            Tensor::new(vec![*filters, oh, ow], out)
        }
        LayerSpec::MaxPool { size } => {
            let shp = x.shape().to_vec();
            let (c_in, h, w_in) = (shp[0], shp[1], shp[2]);
            let (oh, ow) = (h / size, w_in / size);
            let xin = x.data();
            let mut out = vec![0.0; c_in * oh * ow];
            for c in 0..c_in {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for py in 0..*size {
                            for px in 0..*size {
                                let v = xin[c * h * w_in + (oy * size + py) * w_in + ox * size + px];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out[c * oh * ow + oy * ow + ox] = best;
                    }
                }
            }
            Tensor::new(vec![c_in, oh, ow], out)
        }
        LayerSpec::ReLU => {
            let data = x.data().iter().map(|&v| v.max(0.0)).collect();
            Tensor::new(x.shape().to_vec(), data)
        }
        LayerSpec::Flatten => x.clone().reshape(vec![x.len()]),
        LayerSpec::SoftmaxOutput => Ok(x.clone()),
    }
}

/// Backward pass over a layer stack. Returns parameter gradients (same
/// structure as `params`) and the gradient with respect to the input.
pub fn backprop_layers(
    layers: &[LayerSpec],
    params: &[LayerParams],
    cache: &ForwardCache,
    d_logits: &Tensor,
) -> Result<(Vec<LayerParams>, Tensor)> {
    if cache.layer_inputs.len() != layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "cache holds {} layer inputs for {} layers",
            cache.layer_inputs.len(),
            layers.len()
        )));
    }
    let mut grads: Vec<LayerParams> = Vec::with_capacity(layers.len());
    let mut d_out = d_logits.clone();
    for ((layer, p), x) in layers.iter().zip(params).zip(&cache.layer_inputs).rev() {
        let (g, d_in) = layer_backward(layer, p, x, &d_out)?;
        grads.push(g);
        d_out = d_in;
    }
    grads.reverse();
    Ok((grads, d_out))
}

fn layer_backward(
    layer: &LayerSpec,
    p: &LayerParams,
    x: &Tensor,
    d_out: &Tensor,
) -> Result<(LayerParams, Tensor)> {
    match layer {
        LayerSpec::Dense { input: d_in, output } => {
            if d_out.len() != *output {
                return Err(Error::ShapeMismatch(format!(
                    "Dense backward got gradient of length {}, expected {output}",
                    d_out.len()
                )));
            }
            let w = p.weight.as_ref().unwrap().data();
            let xin = x.data();
            let dout = d_out.data();
            let mut dw = vec![0.0; output * d_in];
            let mut dx = vec![0.0; *d_in];
            for o in 0..*output {
                let g = dout[o];
                let row = &w[o * d_in..(o + 1) * d_in];
                let drow = &mut dw[o * d_in..(o + 1) * d_in];
                for i in 0..*d_in {
                    drow[i] = g * xin[i];
                    dx[i] += g * row[i];
                }
            }
            Ok((
                LayerParams {
                    weight: Some(Tensor::new(vec![*output, *d_in], dw)?),
                    bias: Some(Tensor::new(vec![*output], dout.to_vec())?),
                },
                Tensor::new(vec![*d_in], dx)?,
            ))
        }
        LayerSpec::Conv2D { filters, kernel: (kh, kw), stride } => {
            let shp = x.shape().to_vec();
            let (c_in, h, w_in) = (shp[0], shp[1], shp[2]);
            let oh = (h - kh) / stride + 1;
            let ow = (w_in - kw) / stride + 1;
            let wt = p.weight.as_ref().unwrap().data();
            let xin = x.data();
            let dout = d_out.data();
            let mut dw = vec![0.0; wt.len()];
            let mut db = vec![0.0; *filters];
            let mut dx = vec![0.0; xin.len()];
            for f in 0..*filters {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dout[f * oh * ow + oy * ow + ox];
                        db[f] += g;
                        for c in 0..c_in {
                            for ky in 0..*kh {
                                let iy = oy * stride + ky;
                                let xrow = c * h * w_in + iy * w_in + ox * stride;
                                let wrow = ((f * c_in + c) * kh + ky) * kw;
                                for kx in 0..*kw {
                                    dw[wrow + kx] += g * xin[xrow + kx];
                                    dx[xrow + kx] += g * wt[wrow + kx];
                                }
                            }
                        }
                    }
                }
            }
            Ok((
                LayerParams {
                    weight: Some(Tensor::new(vec![*filters, c_in, *kh, *kw], dw)?),
                    bias: Some(Tensor::new(vec![*filters], db)?),
                },
                Tensor::new(vec![c_in, h, w_in], dx)?,
            ))
        }
        LayerSpec::MaxPool { size } => {
            let shp = x.shape().to_vec();
            let (c_in, h, w_in) = (shp[0], shp[1], shp[2]);
            let (oh, ow) = (h / size, w_in / size);
            let xin = x.data();
            let dout = d_out.data();
            let mut dx = vec![0.0; xin.len()];
            for c in 0..c_in {
                for oy in 0..oh {
                    for ox in 0..ow {
                        // ties go to the first (lowest flat index) element
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for py in 0..*size {
                            for px in 0..*size {
                                let idx = c * h * w_in + (oy * size + py) * w_in + ox * size + px;
                                if xin[idx] > best {
                                    best = xin[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        dx[best_idx] += dout[c * oh * ow + oy * ow + ox];
                    }
                }
            }
            Ok((LayerParams::empty(), Tensor::new(vec![c_in, h, w_in], dx)?))
        }
        LayerSpec::ReLU => {
            let dx = x
                .data()
                .iter()
                .zip(d_out.data())
                .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                .collect();
            Ok((LayerParams::empty(), Tensor::new(x.shape().to_vec(), dx)?))
        }
        LayerSpec::Flatten => Ok((
            LayerParams::empty(),
            d_out.clone().reshape(x.shape().to_vec())?,
        )),
        LayerSpec::SoftmaxOutput => Ok((LayerParams::empty(), d_out.clone())),
    }
}

/// Softmax cross-entropy via log-sum-exp. Returns the loss and the gradient
/// at the logits, `softmax(z) - onehot(label)`.
pub fn loss_and_grad(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::LabelOutOfRange { label, classes: z.len() });
    }
    if !logits.all_finite() {
        return Err(Error::InvalidParameter("non-finite logits".into()));
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    let lse = m + sum_exp.ln();
    let loss = lse - z[label];
    let mut grad: Vec<f64> = z.iter().map(|&v| (v - m).exp() / sum_exp).collect();
    grad[label] -= 1.0;
    Ok((loss.max(0.0), Tensor::new(vec![z.len()], grad)?))
}

/// `p <- p - lr * g`, elementwise over every parameter tensor.
pub fn sgd_update(params: &mut [LayerParams], grads: &[LayerParams], lr: f64) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::InvalidParameter(format!("learning rate {lr} must be positive")));
    }
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch("param/grad layer counts differ".into()));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        apply_pair(p.weight.as_mut(), g.weight.as_ref(), lr)?;
        apply_pair(p.bias.as_mut(), g.bias.as_ref(), lr)?;
    }
    Ok(())
}

fn apply_pair(p: Option<&mut Tensor>, g: Option<&Tensor>, lr: f64) -> Result<()> {
    match (p, g) {
        (Some(p), Some(g)) => {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "param shape {:?} vs grad shape {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
            Ok(())
        }
        (None, None) => Ok(()),
        _ => Err(Error::ShapeMismatch("param/grad structure differs".into())),
    }
}

/// Accumulates `src` into `acc` scaled by `scale`.
pub fn accumulate_grads(acc: &mut [LayerParams], src: &[LayerParams], scale: f64) {
    for (a, s) in acc.iter_mut().zip(src) {
        if let (Some(a), Some(s)) = (a.weight.as_mut(), s.weight.as_ref()) {
            for (av, sv) in a.data_mut().iter_mut().zip(s.data()) {
                *av += scale * sv;
            }
        }
        if let (Some(a), Some(s)) = (a.bias.as_mut(), s.bias.as_ref()) {
            for (av, sv) in a.data_mut().iter_mut().zip(s.data()) {
                *av += scale * sv;
            }
        }
    }
}

pub fn zero_grads_like(params: &[LayerParams]) -> Vec<LayerParams> {
    params
        .iter()
        .map(|p| LayerParams {
            weight: p.weight.as_ref().map(|t| Tensor::zeros(t.shape().to_vec())),
            bias: p.bias.as_ref().map(|t| Tensor::zeros(t.shape().to_vec())),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn dense1(w: f64, b: f64) -> Network {
        let mut net = Network::new(vec![LayerSpec::Dense { input: 1, output: 1 }], vec![1]).unwrap();
        net.params[0].weight.as_mut().unwrap().data_mut()[0] = w;
        net.params[0].bias.as_mut().unwrap().data_mut()[0] = b;
        net
    }

    #[test]
    fn dense_identity() {
        let net = dense1(1.0, 0.0);
        let out = net.logits(&Tensor::from_vec(vec![0.7])).unwrap();
        assert_eq!(out.data(), &[0.7]);
    }

    #[test]
    fn relu_definition() {
        let out = layer_forward(
            &LayerSpec::ReLU,
            &LayerParams::empty(),
            &Tensor::from_vec(vec![-1.0, 2.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[0.0, 2.0]);
    }

    #[test]
    fn dense_affine() {
        let mut net = Network::new(vec![LayerSpec::Dense { input: 2, output: 1 }], vec![2]).unwrap();
        net.params[0].weight.as_mut().unwrap().data_mut().copy_from_slice(&[1.0, 2.0]);
        net.params[0].bias.as_mut().unwrap().data_mut()[0] = 0.5;
        let out = net.logits(&Tensor::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[3.5]);
    }

    #[test]
    fn forward_shape_mismatch_is_error() {
        let net = dense1(1.0, 0.0);
        assert!(net.logits(&Tensor::from_vec(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn loss_symmetric_two_class() {
        let (loss, grad) = loss_and_grad(&Tensor::from_vec(vec![0.0, 0.0]), 0).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_relative_eq!(grad.data()[0], -0.5, epsilon = 1e-12);
        assert_relative_eq!(grad.data()[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn loss_saturated_softmax() {
        let (loss, _) = loss_and_grad(&Tensor::from_vec(vec![20.0, -20.0]), 0).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn loss_label_out_of_range() {
        assert!(loss_and_grad(&Tensor::from_vec(vec![0.0, 0.0]), 2).is_err());
    }

    // independent oracle: naive exp-normalize without the log-sum-exp route
    fn naive_ce(z: &[f64], label: usize) -> (f64, Vec<f64>) {
        let sum: f64 = z.iter().map(|v| v.exp()).sum();
        let probs: Vec<f64> = z.iter().map(|v| v.exp() / sum).collect();
        let loss = -(probs[label].ln());
        let mut grad = probs;
        grad[label] -= 1.0;
        (loss, grad)
    }

    #[test]
    fn loss_matches_independent_derivation() {
        let mut rng = rng(11);
        for _ in 0..50 {
            let z: Vec<f64> = (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let label = rng.gen_range(0..5);
            let (loss, grad) = loss_and_grad(&Tensor::from_vec(z.clone()), label).unwrap();
            let (oloss, ograd) = naive_ce(&z, label);
            assert_relative_eq!(loss, oloss, max_relative = 1e-10);
            for (a, b) in grad.data().iter().zip(&ograd) {
                assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn backprop_zero_dlogits_gives_zero_input_grad() {
        let mut net = Network::new(
            vec![
                LayerSpec::Dense { input: 3, output: 4 },
                LayerSpec::ReLU,
                LayerSpec::Dense { input: 4, output: 2 },
            ],
            vec![3],
        )
        .unwrap();
        net.init_params(5);
        let x = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
        let (_, cache) = net.forward(&x, true).unwrap();
        let (_, dx) = net
            .backprop(cache.as_ref().unwrap(), &Tensor::from_vec(vec![0.0, 0.0]))
            .unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backprop_scalar_chain_rule() {
        // chain of 1x1 dense layers without bias: dx = w1*w2*dlogit
        let mut net = Network::new(
            vec![
                LayerSpec::Dense { input: 1, output: 1 },
                LayerSpec::Dense { input: 1, output: 1 },
            ],
            vec![1],
        )
        .unwrap();
        net.params[0].weight.as_mut().unwrap().data_mut()[0] = 2.0;
        net.params[1].weight.as_mut().unwrap().data_mut()[0] = -3.0;
        let (_, cache) = net.forward(&Tensor::from_vec(vec![0.5]), true).unwrap();
        let (_, dx) = net
            .backprop(cache.as_ref().unwrap(), &Tensor::from_vec(vec![1.5]))
            .unwrap();
        assert_relative_eq!(dx.data()[0], 2.0 * -3.0 * 1.5, epsilon = 1e-12);
    }

    #[test]
    fn sgd_basic_and_zero_grad() {
        let mut p = vec![LayerParams {
            weight: Some(Tensor::from_vec(vec![1.0])),
            bias: None,
        }];
        let g = vec![LayerParams {
            weight: Some(Tensor::from_vec(vec![2.0])),
            bias: None,
        }];
        sgd_update(&mut p, &g, 0.5).unwrap();
        assert_eq!(p[0].weight.as_ref().unwrap().data(), &[0.0]);

        let before = p.clone();
        let zg = vec![LayerParams { weight: Some(Tensor::from_vec(vec![0.0])), bias: None }];
        sgd_update(&mut p, &zg, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_two_steps_equal_summed_step() {
        let g1 = vec![LayerParams { weight: Some(Tensor::from_vec(vec![2.0])), bias: None }];
        let g2 = vec![LayerParams { weight: Some(Tensor::from_vec(vec![-1.0])), bias: None }];
        let mut a = vec![LayerParams { weight: Some(Tensor::from_vec(vec![1.0])), bias: None }];
        sgd_update(&mut a, &g1, 0.25).unwrap();
        sgd_update(&mut a, &g2, 0.25).unwrap();

        let mut b = vec![LayerParams { weight: Some(Tensor::from_vec(vec![1.0])), bias: None }];
        let sum = vec![LayerParams { weight: Some(Tensor::from_vec(vec![1.0])), bias: None }];
        sgd_update(&mut b, &sum, 0.25).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_deterministic_per_seed() {
        let arch = vec![LayerSpec::Dense { input: 4, output: 3 }];
        let mut a = Network::new(arch.clone(), vec![4]).unwrap();
        let mut b = Network::new(arch.clone(), vec![4]).unwrap();
        a.init_params(9);
        b.init_params(9);
        assert_eq!(a.params, b.params);
        let mut c = Network::new(arch, vec![4]).unwrap();
        c.init_params(10);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn init_variance_matches_he_scaling() {
        let mut net = Network::new(vec![LayerSpec::Dense { input: 100, output: 100 }], vec![100]).unwrap();
        net.init_params(77);
        let w = net.params[0].weight.as_ref().unwrap().data();
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / 100.0;
        assert!((var - target).abs() < 0.2 * target, "var {var} vs target {target}");
    }

    #[test]
    fn maxpool_tie_routes_to_first_index() {
        let x = Tensor::new(vec![1, 2, 2], vec![3.0, 3.0, 1.0, 0.0]).unwrap();
        let (_, dx) = layer_backward(
            &LayerSpec::MaxPool { size: 2 },
            &LayerParams::empty(),
            &x,
            &Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
