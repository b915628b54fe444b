//! Hierarchical random switching: switching blocks of parallel channels,
//! uniform run-time path selection, and bottom-up block training.

use crate::error::{Error, Result};
use crate::model::{Frozen, LossKind, StochasticModel};
use crate::nn::{
    backprop_layers, output_shape, run_layers, ForwardCache, LayerParams, LayerSpec, Network,
};
use crate::rng::{rng, seed_chain, SeedRng};
use crate::tensor::Tensor;
use crate::train::{train_network, TrainConfig, TrainReport};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One channel choice per block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathId(pub Vec<usize>);

/// Parallel channels sharing one layer structure. Only parameters differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingBlock {
    pub channels: Vec<Vec<LayerParams>>,
    pub frozen: bool,
}

impl SwitchingBlock {
    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }
}

/// A base architecture divided at `split_points` into switching blocks.
/// Concatenating one channel per block reproduces the base layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrsModel {
    pub base_arch: Vec<LayerSpec>,
    pub input_shape: Vec<usize>,
    pub split_points: Vec<usize>,
    pub blocks: Vec<SwitchingBlock>,
}

/// Uniform, per-block-independent channel selection stream.
pub struct Switcher {
    rng: SeedRng,
}

impl Switcher {
    pub fn new(seed: u64) -> Self {
        Self { rng: rng(seed) }
    }

    pub fn rng_mut(&mut self) -> &mut SeedRng {
        &mut self.rng
    }
}

/// Builds an HRS model with zero-valued (untrained) channel parameters.
pub fn build_hrs(
    base_arch: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    split_points: Vec<usize>,
    channel_counts: Vec<usize>,
) -> Result<HrsModel> {
    if channel_counts.len() != split_points.len() + 1 {
        return Err(Error::InvalidParameter(format!(
            "{} channel counts for {} blocks",
            channel_counts.len(),
            split_points.len() + 1
        )));
    }
    if channel_counts.iter().any(|&n| n == 0) {
        return Err(Error::InvalidParameter("zero channel count".into()));
    }
    let l = base_arch.len();
    for w in split_points.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidParameter("split points must be strictly increasing".into()));
        }
    }
    if split_points.iter().any(|&s| s == 0 || s >= l) {
        return Err(Error::InvalidParameter(format!(
            "split points must lie strictly inside the {l}-layer list"
        )));
    }
    // template network supplies per-layer parameter shapes
    let template = Network::new(base_arch.clone(), input_shape.clone())?;
    let bounds = block_bounds(&split_points, l);
    let blocks = bounds
        .windows(2)
        .zip(&channel_counts)
        .map(|(b, &n)| SwitchingBlock {
            channels: (0..n).map(|_| template.params[b[0]..b[1]].to_vec()).collect(),
            frozen: false,
        })
        .collect();
    Ok(HrsModel { base_arch, input_shape, split_points, blocks })
}

fn block_bounds(split_points: &[usize], layers: usize) -> Vec<usize> {
    let mut b = Vec::with_capacity(split_points.len() + 2);
    b.push(0);
    b.extend_from_slice(split_points);
    b.push(layers);
    b
}

impl HrsModel {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn path_count(&self) -> usize {
        self.blocks.iter().map(SwitchingBlock::channel_count).product()
    }

    pub fn bounds(&self) -> Vec<usize> {
        block_bounds(&self.split_points, self.base_arch.len())
    }

    pub fn validate_path(&self, path: &PathId) -> Result<()> {
        if path.0.len() != self.blocks.len() {
            return Err(Error::InvalidParameter(format!(
                "path length {} for {} blocks",
                path.0.len(),
                self.blocks.len()
            )));
        }
        for (b, (&c, block)) in path.0.iter().zip(&self.blocks).enumerate() {
            if c >= block.channel_count() {
                return Err(Error::InvalidParameter(format!(
                    "channel {c} out of range for block {b} with {} channels",
                    block.channel_count()
                )));
            }
        }
        Ok(())
    }

    /// Independent uniform channel choice per block.
    pub fn sample_path(&self, switcher: &mut Switcher) -> PathId {
        PathId(
            self.blocks
                .iter()
                .map(|b| switcher.rng.gen_range(0..b.channel_count()))
                .collect(),
        )
    }

    fn sample_path_rng(&self, rng: &mut SeedRng) -> PathId {
        PathId(self.blocks.iter().map(|b| rng.gen_range(0..b.channel_count())).collect())
    }

    /// Runs the active path. Identical floating-point route to the assembled
    /// flat network of the same channels.
    pub fn forward_active(
        &self,
        input: &Tensor,
        path: &PathId,
        want_cache: bool,
    ) -> Result<(Tensor, Option<ForwardCache>)> {
        self.validate_path(path)?;
        let bounds = self.bounds();
        let mut cache = want_cache.then(|| ForwardCache { layer_inputs: Vec::new() });
        let mut cur = input.clone();
        for (b, &channel) in path.0.iter().enumerate() {
            let layers = &self.base_arch[bounds[b]..bounds[b + 1]];
            let params = &self.blocks[b].channels[channel];
            let (out, seg_cache) = run_layers(layers, params, &cur, want_cache)?;
            if let (Some(c), Some(seg)) = (cache.as_mut(), seg_cache) {
                c.layer_inputs.extend(seg.layer_inputs);
            }
            cur = out;
        }
        Ok((cur, cache))
    }

    /// Backward pass along the same active path.
    pub fn backprop_active(
        &self,
        path: &PathId,
        cache: &ForwardCache,
        d_logits: &Tensor,
    ) -> Result<(Vec<LayerParams>, Tensor)> {
        self.validate_path(path)?;
        let bounds = self.bounds();
        let mut d_out = d_logits.clone();
        let mut grads: Vec<LayerParams> = Vec::with_capacity(self.base_arch.len());
        for (b, &channel) in path.0.iter().enumerate().rev() {
            let (lo, hi) = (bounds[b], bounds[b + 1]);
            let layers = &self.base_arch[lo..hi];
            let params = &self.blocks[b].channels[channel];
            let seg_cache = ForwardCache { layer_inputs: cache.layer_inputs[lo..hi].to_vec() };
            let (mut seg_grads, dx) = backprop_layers(layers, params, &seg_cache, &d_out)?;
            seg_grads.reverse();
            grads.extend(seg_grads);
            d_out = dx;
        }
        grads.reverse();
        Ok((grads, d_out))
    }

    /// Assembles the flat [`Network`] equivalent to one path (for tests and
    /// fixed-path export).
    pub fn assemble_path(&self, path: &PathId) -> Result<Network> {
        self.validate_path(path)?;
        let mut net = Network::new(self.base_arch.clone(), self.input_shape.clone())?;
        let mut params = Vec::with_capacity(self.base_arch.len());
        for (b, &channel) in path.0.iter().enumerate() {
            params.extend(self.blocks[b].channels[channel].iter().cloned());
        }
        net.params = params;
        Ok(net)
    }

    /// Enumerates every path (use only when `path_count` is small).
    pub fn all_paths(&self) -> Vec<PathId> {
        let mut paths = vec![Vec::new()];
        for block in &self.blocks {
            let mut next = Vec::with_capacity(paths.len() * block.channel_count());
            for p in &paths {
                for c in 0..block.channel_count() {
                    let mut q = p.clone();
                    q.push(c);
                    next.push(q);
                }
            }
            paths = next;
        }
        paths.into_iter().map(PathId).collect()
    }

    fn input_shape_at(&self, layer: usize) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for l in &self.base_arch[..layer] {
            shape = output_shape(l, &shape)?;
        }
        Ok(shape)
    }
}

impl StochasticModel for HrsModel {
    fn classes(&self) -> usize {
        let mut shape = self.input_shape.clone();
        for l in &self.base_arch {
            shape = output_shape(l, &shape).expect("validated at construction");
        }
        shape[0]
    }

    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn logits_fresh(&self, x: &Tensor, rng: &mut SeedRng) -> Result<Tensor> {
        let path = self.sample_path_rng(rng);
        Ok(self.forward_active(x, &path, false)?.0)
    }

    fn logits_frozen(&self, x: &Tensor, frozen: &Frozen) -> Result<Tensor> {
        match frozen {
            Frozen::Path(p) => Ok(self.forward_active(x, p, false)?.0),
            Frozen::Plain => Err(Error::InvalidParameter(
                "HRS frozen randomness requires a fixed path".into(),
            )),
        }
    }

    fn input_grad_fresh(
        &self,
        x: &Tensor,
        loss: &LossKind,
        target: usize,
        rng: &mut SeedRng,
    ) -> Result<(f64, Tensor)> {
        let path = self.sample_path_rng(rng);
        self.path_input_grad(x, loss, target, &path)
    }

    fn input_grad_frozen(
        &self,
        x: &Tensor,
        loss: &LossKind,
        target: usize,
        frozen: &Frozen,
    ) -> Result<(f64, Tensor)> {
        match frozen {
            Frozen::Path(p) => self.path_input_grad(x, loss, target, p),
            Frozen::Plain => Err(Error::InvalidParameter(
                "HRS frozen randomness requires a fixed path".into(),
            )),
        }
    }

    fn freeze(&self, rng: &mut SeedRng) -> Frozen {
        Frozen::Path(self.sample_path_rng(rng))
    }
}

impl HrsModel {
    fn path_input_grad(
        &self,
        x: &Tensor,
        loss: &LossKind,
        target: usize,
        path: &PathId,
    ) -> Result<(f64, Tensor)> {
        let (logits, cache) = self.forward_active(x, path, true)?;
        let (loss_v, d_logits) = loss.at_logits(&logits, target)?;
        let (_, dx) = self.backprop_active(path, cache.as_ref().unwrap(), &d_logits)?;
        Ok((loss_v, dx))
    }
}

/// Outcome of bottom-up training: one report per (block, channel) stage.
#[derive(Debug, Clone)]
pub struct BottomUpReport {
    pub stages: Vec<(usize, usize, TrainReport)>,
}

impl BottomUpReport {
    pub fn all_converged(&self) -> bool {
        self.stages.iter().all(|(_, _, r)| r.converged)
    }
}

/// Bottom-up training: trains blocks in order. For block `i`, each channel
/// `j` is trained as a fresh randomly initialized network suffix on top of
/// the already-frozen lower blocks with their switching active; only the
/// block-`i` segment of the suffix is kept.
pub fn bottom_up_train(
    model: &mut HrsModel,
    data: &crate::data::Batch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<BottomUpReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let bounds = model.bounds();
    let mut stages = Vec::new();
    for i in 0..model.blocks.len() {
        let suffix_arch = model.base_arch[bounds[i]..].to_vec();
        let suffix_input_shape = model.input_shape_at(bounds[i])?;
        let keep = bounds[i + 1] - bounds[i];
        for j in 0..model.blocks[i].channel_count() {
            let stage_seed = seed_chain(seed, &[i as u64, j as u64]);
            let mut suffix = Network::new(suffix_arch.clone(), suffix_input_shape.clone())?;
            suffix.init_params(stage_seed);
            let report = if i == 0 {
                train_network(&mut suffix, data, &[], cfg, stage_seed, None)?
            } else {
                // frozen lower blocks with live switching feed the suffix
                let prefix: &HrsModel = model;
                let switch_rng =
                    std::cell::RefCell::new(rng(seed_chain(stage_seed, &[0x7061_7468])));
                let prefix_blocks = i;
                let preprocess = |x: &Tensor| -> Result<Tensor> {
                    let mut r = switch_rng.borrow_mut();
                    let path = PathId(
                        (0..prefix_blocks)
                            .map(|b| r.gen_range(0..prefix.blocks[b].channel_count()))
                            .collect::<Vec<_>>(),
                    );
                    let mut cur = x.clone();
                    for (b, &c) in path.0.iter().enumerate() {
                        let layers = &prefix.base_arch[bounds[b]..bounds[b + 1]];
                        let (out, _) =
                            run_layers(layers, &prefix.blocks[b].channels[c], &cur, false)?;
                        cur = out;
                    }
                    Ok(cur)
                };
                train_network(&mut suffix, data, &[], cfg, stage_seed, Some(&preprocess))?
            };
            model.blocks[i].channels[j] = suffix.params[..keep].to_vec();
            stages.push((i, j, report));
        }
        model.blocks[i].frozen = true;
    }
    Ok(BottomUpReport { stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    fn toy_arch() -> (Vec<LayerSpec>, Vec<usize>) {
        (
            vec![
                LayerSpec::Dense { input: 4, output: 6 },
                LayerSpec::ReLU,
                LayerSpec::Dense { input: 6, output: 3 },
            ],
            vec![4],
        )
    }

    #[test]
    fn path_count_is_channel_product() {
        let (arch, shape) = toy_arch();
        let m = build_hrs(arch.clone(), shape.clone(), vec![2], vec![10, 10]).unwrap();
        assert_eq!(m.path_count(), 100);
        let m = build_hrs(arch.clone(), shape.clone(), vec![], vec![1]).unwrap();
        assert_eq!(m.path_count(), 1);
        let m = build_hrs(arch, shape, vec![1, 2], vec![2, 3, 4]).unwrap();
        assert_eq!(m.path_count(), 24);
    }

    #[test]
    fn build_rejects_bad_splits() {
        let (arch, shape) = toy_arch();
        assert!(build_hrs(arch.clone(), shape.clone(), vec![0], vec![2, 2]).is_err());
        assert!(build_hrs(arch.clone(), shape.clone(), vec![3], vec![2, 2]).is_err());
        assert!(build_hrs(arch.clone(), shape.clone(), vec![2, 2], vec![2, 2, 2]).is_err());
        assert!(build_hrs(arch, shape, vec![2], vec![2, 0]).is_err());
    }

    #[test]
    fn one_channel_blocks_always_sample_zero_path() {
        let (arch, shape) = toy_arch();
        let m = build_hrs(arch, shape, vec![2], vec![1, 1]).unwrap();
        let mut sw = Switcher::new(5);
        for _ in 0..20 {
            assert_eq!(m.sample_path(&mut sw), PathId(vec![0, 0]));
        }
    }

    #[test]
    fn sample_path_deterministic_per_seed() {
        let (arch, shape) = toy_arch();
        let m = build_hrs(arch, shape, vec![2], vec![7, 4]).unwrap();
        let mut a = Switcher::new(11);
        let mut b = Switcher::new(11);
        for _ in 0..50 {
            assert_eq!(m.sample_path(&mut a), m.sample_path(&mut b));
        }
    }

    #[test]
    fn sample_path_uniform_chi_square() {
        let (arch, shape) = toy_arch();
        let m = build_hrs(arch, shape, vec![2], vec![10, 10]).unwrap();
        let mut sw = Switcher::new(42);
        let draws = 10_000;
        let mut counts = vec![vec![0usize; 10]; 2];
        for _ in 0..draws {
            let p = m.sample_path(&mut sw);
            counts[0][p.0[0]] += 1;
            counts[1][p.0[1]] += 1;
        }
        // chi-square critical value for df=9 at alpha=0.01 is 21.666
        for block in &counts {
            let expected = draws as f64 / 10.0;
            let chi2: f64 = block
                .iter()
                .map(|&c| (c as f64 - expected).powi(2) / expected)
                .sum();
            assert!(chi2 < 21.666, "chi2 {chi2}");
        }
    }

    #[test]
    fn single_channel_hrs_matches_base_network() {
        let (arch, shape) = toy_arch();
        let mut base = Network::new(arch.clone(), shape.clone()).unwrap();
        base.init_params(3);
        let mut m = build_hrs(arch, shape, vec![2], vec![1, 1]).unwrap();
        m.blocks[0].channels[0] = base.params[..2].to_vec();
        m.blocks[1].channels[0] = base.params[2..].to_vec();
        let x = Tensor::from_vec(vec![0.1, -0.4, 0.9, 0.2]);
        let (hrs_logits, _) = m.forward_active(&x, &PathId(vec![0, 0]), false).unwrap();
        assert_eq!(hrs_logits, base.logits(&x).unwrap());
    }

    #[test]
    fn every_path_matches_assembled_flat_network() {
        let (arch, shape) = toy_arch();
        let mut m = build_hrs(arch, shape, vec![2], vec![2, 2]).unwrap();
        // give each channel distinct random weights
        for (b, block) in m.blocks.iter_mut().enumerate() {
            for (c, channel) in block.channels.iter_mut().enumerate() {
                for (l, p) in channel.iter_mut().enumerate() {
                    if let Some(w) = p.weight.as_mut() {
                        let mut r = rng(seed_chain(99, &[b as u64, c as u64, l as u64]));
                        for v in w.data_mut() {
                            *v = r.gen_range(-1.0..1.0);
                        }
                    }
                }
            }
        }
        let x = Tensor::from_vec(vec![0.5, 0.1, -0.3, 0.8]);
        for path in m.all_paths() {
            let (active, _) = m.forward_active(&x, &path, false).unwrap();
            let flat = m.assemble_path(&path).unwrap();
            assert_eq!(active, flat.logits(&x).unwrap());
        }
    }

    #[test]
    fn invalid_channel_index_rejected() {
        let (arch, shape) = toy_arch();
        let m = build_hrs(arch, shape, vec![2], vec![2, 2]).unwrap();
        let x = Tensor::from_vec(vec![0.0; 4]);
        assert!(m.forward_active(&x, &PathId(vec![2, 0]), false).is_err());
        assert!(m.forward_active(&x, &PathId(vec![0]), false).is_err());
    }
}
