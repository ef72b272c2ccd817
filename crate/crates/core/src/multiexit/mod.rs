//! Multi-exit networks: a shared backbone with lightweight classifiers at
//! several depths, cascaded threshold inference and FLOPs accounting.

mod checkpoint;
mod spec;

pub use spec::{Activation, BackboneSpec, BlockSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::{ParamId, Tape, Tensor, Var};

/// Threshold value that no confidence can reach: the exit is never taken.
pub const NEVER_EXIT: f64 = 1.0 + 1e-6;

/// Per-exit confidence thresholds for the first `K - 1` exits; the last exit
/// is unconditional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputStrategy {
    thresholds: Vec<f64>,
}

impl OutputStrategy {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if let Some(t) = thresholds
            .iter()
            .find(|t| !t.is_finite() || **t < 0.0 || **t > NEVER_EXIT)
        {
            return Err(contract(format!(
                "threshold {t} outside [0, {NEVER_EXIT}]"
            )));
        }
        Ok(Self { thresholds })
    }

    /// The same threshold at every early exit.
    pub fn uniform(tau: f64, exit_count: usize) -> Result<Self> {
        Self::new(vec![tau; exit_count.saturating_sub(1)])
    }

    /// Every sample falls through to the last exit.
    pub fn last_exit_only(exit_count: usize) -> Self {
        Self {
            thresholds: vec![NEVER_EXIT; exit_count.saturating_sub(1)],
        }
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn exit_count(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// 1-based exit chosen by the first-exit rule: the first `i < K` whose
    /// confidence reaches `T_i`, else `K`.
    pub fn exit_for(&self, confidences: &[f64]) -> usize {
        self.thresholds
            .iter()
            .zip(confidences)
            .position(|(t, c)| c >= t)
            .map_or(self.exit_count(), |i| i + 1)
    }
}

/// Result of cascaded inference for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitOutcome {
    pub predicted_class: usize,
    /// 1-based index of the exit that produced the output.
    pub exit_index: usize,
    pub probs: Tensor,
    pub flops: u64,
}

/// Backbone blocks with exit heads after selected blocks.
///
/// Parameters are stored in declaration order: `(weight, bias)` for every
/// block, then `(weight, bias)` for every exit head.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiExitNet {
    backbone: BackboneSpec,
    /// 1-based index of the block each exit head follows; strictly increasing.
    exits: Vec<usize>,
    class_count: usize,
    params: Vec<Tensor>,
    block_shapes: Vec<Vec<usize>>,
}

impl MultiExitNet {
    /// Assembles a network from explicit parameters.
    pub fn new(
        backbone: BackboneSpec,
        exits: Vec<usize>,
        class_count: usize,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        let block_shapes = backbone.output_shapes()?;
        let blocks = backbone.block_count();
        if exits.len() < 2 {
            return Err(contract(format!(
                "a multi-exit network needs at least 2 exits, got {}",
                exits.len()
            )));
        }
        if class_count < 2 {
            return Err(contract("at least 2 classes are required"));
        }
        if exits[0] == 0 || exits.windows(2).any(|w| w[0] >= w[1]) {
            return Err(contract(format!(
                "exit positions must be strictly increasing and >= 1: {exits:?}"
            )));
        }
        if *exits.last().unwrap() != blocks {
            return Err(contract(format!(
                "the last exit must follow the final block {blocks}, got {exits:?}"
            )));
        }
        let expected = Self::param_shapes(&backbone, &block_shapes, &exits, class_count);
        if params.len() != expected.len() {
            return Err(contract(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (i, (p, s)) in params.iter().zip(&expected).enumerate() {
            if p.shape() != s.as_slice() {
                return Err(contract(format!(
                    "parameter {i} has shape {:?}, expected {s:?}",
                    p.shape()
                )));
            }
            p.check_finite("network parameter")?;
        }
        Ok(Self {
            backbone,
            exits,
            class_count,
            params,
            block_shapes,
        })
    }

    /// Randomly initialized network with heads after the given blocks.
    pub fn with_exits(
        backbone: BackboneSpec,
        exits: Vec<usize>,
        class_count: usize,
        seed: u64,
    ) -> Result<Self> {
        let block_shapes = backbone.output_shapes()?;
        let shapes = Self::param_shapes(&backbone, &block_shapes, &exits, class_count);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = match backbone.activation {
            Activation::Relu => 2.0,
            Activation::Tanh => 1.0,
        };
        let n_blocks = backbone.block_count();
        let params = shapes
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let is_weight = i % 2 == 0;
                if !is_weight {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = if shape.len() == 4 {
                    shape[1] * shape[2] * shape[3]
                } else {
                    shape[0]
                };
                let g = if i / 2 < n_blocks { gain } else { 1.0 };
                let normal = Normal::new(0.0, (g / fan_in as f64).sqrt()).expect("finite std");
                let n = shape.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                Tensor::new(shape, data).expect("shape")
            })
            .collect();
        Self::new(backbone, exits, class_count, params)
    }

    /// Places `exit_count` heads after blocks `ceil(j * B / K)`, `j = 1..K`.
    pub fn build_evenly_partitioned(
        backbone: BackboneSpec,
        exit_count: usize,
        class_count: usize,
        seed: u64,
    ) -> Result<Self> {
        let blocks = backbone.block_count();
        if exit_count < 2 || exit_count > blocks {
            return Err(contract(format!(
                "cannot place {exit_count} exits on {blocks} blocks"
            )));
        }
        let exits = evenly_partitioned_exits(blocks, exit_count);
        Self::with_exits(backbone, exits, class_count, seed)
    }

    fn param_shapes(
        backbone: &BackboneSpec,
        block_shapes: &[Vec<usize>],
        exits: &[usize],
        classes: usize,
    ) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for block in &backbone.blocks {
            match *block {
                BlockSpec::Dense { input, output } => {
                    shapes.push(vec![input, output]);
                    shapes.push(vec![output]);
                }
                BlockSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    shapes.push(vec![out_channels, in_channels, kernel, kernel]);
                    shapes.push(vec![out_channels]);
                }
            }
        }
        for &e in exits {
            let features = block_shapes
                .get(e.wrapping_sub(1))
                .map_or(0, |s| s[0]);
            shapes.push(vec![features, classes]);
            shapes.push(vec![classes]);
        }
        shapes
    }

    pub fn backbone(&self) -> &BackboneSpec {
        &self.backbone
    }

    pub fn exits(&self) -> &[usize] {
        &self.exits
    }

    pub fn exit_count(&self) -> usize {
        self.exits.len()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutable parameter access for optimizers; shapes must be preserved.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    fn head_param_index(&self, exit: usize) -> usize {
        2 * self.backbone.block_count() + 2 * exit
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.backbone.input_shape.len() + 1
            || x.shape()[1..] != self.backbone.input_shape[..]
        {
            return Err(contract(format!(
                "input batch shape {:?} does not match [n, {:?}]",
                x.shape(),
                self.backbone.input_shape
            )));
        }
        x.check_finite("network input")
    }

    /// Records a batch forward pass; returns one `[b, C]` probability var per exit.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        self.check_batch(tape.value(x))?;
        let batch = tape.value(x).rows();
        let mut h = x;
        let mut outputs = Vec::with_capacity(self.exits.len());
        let mut next_exit = 0;
        for (bi, block) in self.backbone.blocks.iter().enumerate() {
            let w = tape.param(ParamId(2 * bi), &self.params[2 * bi]);
            let b = tape.param(ParamId(2 * bi + 1), &self.params[2 * bi + 1]);
            h = match *block {
                BlockSpec::Dense { input, .. } => {
                    if tape.value(h).shape().len() != 2 {
                        h = tape.reshape(h, vec![batch, input])?;
                    }
                    let z = tape.matmul(h, w)?;
                    tape.add_bias(z, b)?
                }
                BlockSpec::Conv { kernel, stride, .. } => tape.conv2d(h, w, b, stride, kernel / 2)?,
            };
            h = match self.backbone.activation {
                Activation::Relu => tape.relu(h),
                Activation::Tanh => tape.tanh(h),
            };
            while next_exit < self.exits.len() && self.exits[next_exit] == bi + 1 {
                let hi = self.head_param_index(next_exit);
                let hw = tape.param(ParamId(hi), &self.params[hi]);
                let hb = tape.param(ParamId(hi + 1), &self.params[hi + 1]);
                let feats = if tape.value(h).shape().len() == 4 {
                    tape.global_avg_pool(h)?
                } else {
                    h
                };
                let logits = tape.matmul(feats, hw)?;
                let logits = tape.add_bias(logits, hb)?;
                outputs.push(tape.softmax(logits)?);
                next_exit += 1;
            }
        }
        Ok(outputs)
    }

    /// Probabilities of every exit for a batch; one `[b, C]` tensor per exit.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let outs = self.forward_on_tape(&mut tape, xv)?;
        Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Probability vectors of all `K` exits for a single sample.
    pub fn forward_all_exits(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let batch = self.single_as_batch(x)?;
        Ok(self
            .forward_batch(&batch)?
            .into_iter()
            .map(|t| t.row_tensor(0))
            .collect())
    }

    fn single_as_batch(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.backbone.input_shape.as_slice() {
            return Err(contract(format!(
                "input shape {:?} does not match {:?}",
                x.shape(),
                self.backbone.input_shape
            )));
        }
        Tensor::stack(std::slice::from_ref(x))
    }

    /// Max-confidence of every exit for each row of a batch (`[b][K]`).
    pub fn confidences(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let outs = self.forward_batch(x)?;
        Ok((0..x.rows())
            .map(|r| {
                outs.iter()
                    .map(|o| o.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .collect()
            })
            .collect())
    }

    /// Cascaded inference for a single sample.
    pub fn infer_with_strategy(&self, x: &Tensor, strategy: &OutputStrategy) -> Result<ExitOutcome> {
        let batch = self.single_as_batch(x)?;
        Ok(self.infer_batch(&batch, strategy)?.remove(0))
    }

    /// Cascaded inference for every row of a batch.
    pub fn infer_batch(&self, x: &Tensor, strategy: &OutputStrategy) -> Result<Vec<ExitOutcome>> {
        if strategy.exit_count() != self.exit_count() {
            return Err(contract(format!(
                "strategy has {} thresholds for a {}-exit network",
                strategy.thresholds().len(),
                self.exit_count()
            )));
        }
        let outs = self.forward_batch(x)?;
        Ok(self.cascade(&outs, strategy))
    }

    /// Applies a strategy to precomputed per-exit probabilities (as returned
    /// by [`forward_batch`](Self::forward_batch)).
    pub fn cascade(&self, exit_probs: &[Tensor], strategy: &OutputStrategy) -> Vec<ExitOutcome> {
        let flops = self.exit_flops_table();
        let rows = exit_probs.first().map_or(0, Tensor::rows);
        (0..rows)
            .map(|r| {
                let conf: Vec<f64> = exit_probs
                    .iter()
                    .map(|o| o.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .collect();
                let exit = strategy.exit_for(&conf);
                let probs = exit_probs[exit - 1].row_tensor(r);
                ExitOutcome {
                    predicted_class: probs.argmax(),
                    exit_index: exit,
                    probs,
                    flops: flops[exit - 1],
                }
            })
            .collect()
    }

    /// FLOPs of every backbone block.
    pub fn block_flops(&self) -> Vec<u64> {
        self.backbone
            .blocks
            .iter()
            .zip(&self.block_shapes)
            .map(|(b, s)| spec::block_flops(b, s))
            .collect()
    }

    /// FLOPs of every exit head.
    pub fn head_flops(&self) -> Vec<u64> {
        self.exits
            .iter()
            .map(|&e| spec::head_flops(&self.block_shapes[e - 1], self.class_count))
            .collect()
    }

    /// Cost of producing an output at exit `k` (1-based): all blocks up to
    /// that exit plus every head evaluated on the way.
    pub fn flops_to_exit(&self, k: usize) -> Result<u64> {
        if k == 0 || k > self.exit_count() {
            return Err(contract(format!(
                "exit {k} out of range 1..={}",
                self.exit_count()
            )));
        }
        Ok(self.exit_flops_table()[k - 1])
    }

    /// `flops_to_exit` for every exit.
    pub fn exit_flops_table(&self) -> Vec<u64> {
        let blocks = self.block_flops();
        let heads = self.head_flops();
        self.exits
            .iter()
            .enumerate()
            .map(|(k, &e)| blocks[..e].iter().sum::<u64>() + heads[..=k].iter().sum::<u64>())
            .collect()
    }
}

/// Exit positions `ceil(j * blocks / exits)` for `j = 1..=exits`.
pub fn evenly_partitioned_exits(blocks: usize, exits: usize) -> Vec<usize> {
    (1..=exits).map(|j| (j * blocks).div_ceil(exits)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_net(seed: u64) -> MultiExitNet {
        let spec = BackboneSpec::dense(6, &[8, 8, 8], Activation::Relu);
        MultiExitNet::build_evenly_partitioned(spec, 3, 4, seed).unwrap()
    }

    #[test]
    fn even_partition_positions() {
        assert_eq!(evenly_partitioned_exits(8, 4), vec![2, 4, 6, 8]);
        assert_eq!(evenly_partitioned_exits(7, 4), vec![2, 4, 6, 7]);
    }

    #[test]
    fn too_many_exits_is_a_contract_error() {
        let spec = BackboneSpec::dense(6, &[8, 8], Activation::Relu);
        assert!(MultiExitNet::build_evenly_partitioned(spec, 3, 4, 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(toy_net(11).params(), toy_net(11).params());
        assert_ne!(toy_net(11).params(), toy_net(12).params());
    }

    #[test]
    fn forward_all_exits_shapes_and_normalization() {
        let net = toy_net(1);
        let x = Tensor::from_slice(&[0.1, -0.3, 0.5, 1.0, -2.0, 0.0]);
        let outs = net.forward_all_exits(&x).unwrap();
        assert_eq!(outs.len(), 3);
        for p in &outs {
            assert_eq!(p.len(), 4);
            assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(outs, net.forward_all_exits(&x).unwrap());
    }

    #[test]
    fn zero_heads_give_uniform_outputs() {
        let mut net = toy_net(2);
        let first_head = 2 * net.backbone().block_count();
        for p in &mut net.params_mut()[first_head..] {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::from_slice(&[1.0; 6]);
        for p in net.forward_all_exits(&x).unwrap() {
            assert!(p.data().iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = toy_net(3);
        assert!(net.forward_all_exits(&Tensor::from_slice(&[1.0; 5])).is_err());
    }

    #[test]
    fn first_exit_rule_hand_trace() {
        let t = OutputStrategy::new(vec![0.95, 0.95]).unwrap();
        assert_eq!(t.exit_for(&[0.80, 0.96, 0.99]), 2);
        let floor = OutputStrategy::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(floor.exit_for(&[0.3, 0.3, 0.3]), 1);
        assert_eq!(t.exit_for(&[0.5, 0.6, 0.7]), 3);
        // inclusive comparison
        assert_eq!(t.exit_for(&[0.95, 0.2, 0.2]), 1);
    }

    #[test]
    fn strategy_validation() {
        assert!(OutputStrategy::new(vec![0.5, NEVER_EXIT]).is_ok());
        assert!(OutputStrategy::new(vec![1.5]).is_err());
        assert!(OutputStrategy::new(vec![f64::NAN]).is_err());
        let net = toy_net(0);
        let x = Tensor::new(vec![1, 6], vec![0.0; 6]).unwrap();
        assert!(net
            .infer_batch(&x, &OutputStrategy::uniform(0.5, 4).unwrap())
            .is_err());
    }

    #[test]
    fn floor_thresholds_always_exit_first() {
        let net = toy_net(4);
        let x = Tensor::from_slice(&[0.3, 0.1, -0.4, 0.9, 0.2, -0.6]);
        let out = net
            .infer_with_strategy(&x, &OutputStrategy::uniform(0.0, 3).unwrap())
            .unwrap();
        assert_eq!(out.exit_index, 1);
        assert_eq!(out.flops, net.flops_to_exit(1).unwrap());
        let out = net
            .infer_with_strategy(&x, &OutputStrategy::last_exit_only(3))
            .unwrap();
        assert_eq!(out.exit_index, 3);
    }

    #[test]
    fn flops_hand_table() {
        // 16 -> 32 -> 32 -> 32 -> 32, four exits to 4 classes.
        let spec = BackboneSpec::dense(16, &[32, 32, 32, 32], Activation::Relu);
        let net = MultiExitNet::build_evenly_partitioned(spec, 4, 4, 0).unwrap();
        let block1 = 2 * 16 * 32 + 32; // 1056
        let block = 2 * 32 * 32 + 32; // 2080
        let head = 2 * 32 * 4 + 4; // 260
        assert_eq!(net.block_flops(), vec![1056, 2080, 2080, 2080]);
        assert_eq!(net.head_flops(), vec![260; 4]);
        assert_eq!(
            net.exit_flops_table(),
            vec![
                block1 + head,
                block1 + block + 2 * head,
                block1 + 2 * block + 3 * head,
                block1 + 3 * block + 4 * head,
            ]
        );
        assert_eq!(net.exit_flops_table(), vec![1316, 3656, 5996, 8336]);
        assert!(net.flops_to_exit(0).is_err());
        assert!(net.flops_to_exit(5).is_err());
    }

    #[test]
    fn conv_backbone_runs() {
        let spec = BackboneSpec {
            input_shape: vec![1, 6, 6],
            blocks: vec![
                BlockSpec::Conv {
                    in_channels: 1,
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                },
                BlockSpec::Conv {
                    in_channels: 3,
                    out_channels: 4,
                    kernel: 3,
                    stride: 2,
                },
            ],
            activation: Activation::Relu,
        };
        let net = MultiExitNet::build_evenly_partitioned(spec, 2, 3, 5).unwrap();
        let x = Tensor::new(vec![1, 6, 6], (0..36).map(|i| i as f64 / 36.0).collect()).unwrap();
        let outs = net.forward_all_exits(&x).unwrap();
        assert_eq!(outs.len(), 2);
        // conv 1->3 k3 on 6x6: 36 * 3 * (2*9+1); head: pool 108 + 2*3*3 + 3
        assert_eq!(net.block_flops()[0], 36 * 3 * 19);
        assert_eq!(net.head_flops()[0], 108 + 18 + 3);
    }
}
