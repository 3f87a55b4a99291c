//! Densely connected convolutional classifier with a sigmoid multi-label head.
//!
//! Layout: 3×3 stem convolution, then dense blocks separated by transitions
//! (1×1 conv with 0.5 compression, 2×2 average pool), global average pooling,
//! dropout, and a linear head whose logits go through independent sigmoids.
//! Each dense layer is the pre-activation bottleneck
//! `BN → ReLU → 1×1 conv → BN → ReLU → 3×3 conv` producing `growth_rate`
//! channels that are concatenated onto its input.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TRANSITION_COMPRESSION: f64 = 0.5;
pub const BN_EPS: f64 = 1e-5;
/// Weight kept by the running statistics on each update.
pub const BN_MOMENTUM: f64 = 0.9;
/// Bottleneck (1×1 conv) width as a multiple of the growth rate.
pub const BOTTLENECK_FACTOR: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_size: (usize, usize),
    pub initial_channels: usize,
    pub growth_rate: usize,
    pub block_layout: Vec<usize>,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub use_batch_norm: bool,
}

impl ModelConfig {
    /// CPU-sized default: 1×32×32 input, stem 16, growth 8, blocks [2,2].
    pub fn desk(num_classes: usize) -> Self {
        ModelConfig {
            input_channels: 1,
            input_size: (32, 32),
            initial_channels: 16,
            growth_rate: 8,
            block_layout: vec![2, 2],
            num_classes,
            dropout_rate: 0.10,
            use_batch_norm: true,
        }
    }

    /// DenseNet-121 layout ([6,12,24,16], growth 32, stem 64).
    pub fn densenet121(num_classes: usize, input_channels: usize, input_size: (usize, usize)) -> Self {
        ModelConfig {
            input_channels,
            input_size,
            initial_channels: 64,
            growth_rate: 32,
            block_layout: vec![6, 12, 24, 16],
            num_classes,
            dropout_rate: 0.10,
            use_batch_norm: true,
        }
    }

    pub fn bottleneck_width(&self) -> usize {
        BOTTLENECK_FACTOR * self.growth_rate
    }

    /// Convolution and dense layers carrying trainable weights
    /// (batch-norm affine parameters are not counted).
    pub fn weighted_layer_count(&self) -> usize {
        let dense: usize = self.block_layout.iter().sum();
        1 + 2 * dense + self.block_layout.len().saturating_sub(1) + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.channel_plan().map(|_| ())
    }

    /// Channel and spatial bookkeeping for every block; fails on invalid configs.
    pub fn channel_plan(&self) -> Result<ChannelPlan> {
        let positive = [
            ("input_channels", self.input_channels),
            ("input height", self.input_size.0),
            ("input width", self.input_size.1),
            ("initial_channels", self.initial_channels),
            ("growth_rate", self.growth_rate),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.block_layout.is_empty() {
            return Err(Error::Config("block_layout must not be empty".into()));
        }
        if let Some(b) = self.block_layout.iter().position(|&l| l == 0) {
            return Err(Error::Config(format!("block {b} has zero layers")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0,1)", self.dropout_rate)));
        }
        let mut channels = self.initial_channels;
        let (mut h, mut w) = self.input_size;
        let last = self.block_layout.len() - 1;
        let mut blocks = Vec::with_capacity(self.block_layout.len());
        for (b, &layers) in self.block_layout.iter().enumerate() {
            let out = channels + layers * self.growth_rate;
            let transition_out = if b < last {
                if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
                    return Err(Error::Config(format!(
                        "transition after block {b} cannot halve spatial size {h}x{w}"
                    )));
                }
                let c = (out as f64 * TRANSITION_COMPRESSION).floor() as usize;
                if c == 0 {
                    return Err(Error::Config(format!("transition after block {b} compresses to zero channels")));
                }
                Some(c)
            } else {
                None
            };
            blocks.push(BlockPlan {
                in_channels: channels,
                out_channels: out,
                size: (h, w),
                transition_out,
            });
            if let Some(c) = transition_out {
                channels = c;
                h /= 2;
                w /= 2;
            } else {
                channels = out;
            }
        }
        Ok(ChannelPlan {
            blocks,
            final_channels: channels,
            final_size: (h, w),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: (usize, usize),
    /// Channels after the following transition, if there is one.
    pub transition_out: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelPlan {
    pub blocks: Vec<BlockPlan>,
    pub final_channels: usize,
    pub final_size: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BnSlot {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct DenseLayerSlots {
    bn1: Option<BnSlot>,
    conv1: usize,
    bn2: Option<BnSlot>,
    conv2: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    stem: usize,
    blocks: Vec<Vec<DenseLayerSlots>>,
    transitions: Vec<usize>,
    head_weight: usize,
    head_bias: usize,
}

/// Forward-pass behaviour.
pub enum Mode<'a> {
    /// Batch statistics in batch norm, dropout drawn from `rng`.
    Train { rng: &'a mut dyn RngCore },
    /// Running statistics, no dropout.
    Eval,
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Everything a forward pass exposes.
#[derive(Debug)]
pub struct ForwardPass<T> {
    /// One graph variable per model parameter, same order as [`Model::params`].
    pub param_vars: Vec<Var>,
    /// Output of the final dense block, `[N, C, h, w]` (the Grad-CAM target).
    pub features: Var,
    pub logits: Var,
    pub probabilities: Var,
    /// Per running-stats slot, the batch statistics seen in training mode.
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    plan: ChannelPlan,
    params: Vec<Parameter<T>>,
    running: Vec<RunningStats<T>>,
    layout: Layout,
}

struct Builder<T> {
    rng: ChaCha8Rng,
    params: Vec<Parameter<T>>,
    running: Vec<RunningStats<T>>,
}

impl<T: Scalar> Builder<T> {
    fn push(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Parameter { name, value });
        self.params.len() - 1
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(dist.sample(rng)));
        self.push(name, t)
    }

    /// He (fan-in) initialization.
    fn conv(&mut self, name: String, c_out: usize, c_in: usize, k: usize) -> usize {
        let fan_in = (c_in * k * k) as f64;
        self.normal(name, &[c_out, c_in, k, k], (2.0 / fan_in).sqrt())
    }

    fn bn(&mut self, prefix: &str, channels: usize) -> BnSlot {
        let gamma = self.push(format!("{prefix}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = self.push(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
        self.running.push(RunningStats {
            name: prefix.to_string(),
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        BnSlot {
            gamma,
            beta,
            stats: self.running.len() - 1,
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Builds a model with seeded random weights; identical `(config, seed)`
    /// pairs give bit-identical parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let plan = config.channel_plan()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            running: Vec::new(),
        };
        let stem = b.conv("stem.conv".into(), config.initial_channels, config.input_channels, 3);
        let bw = config.bottleneck_width();
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (bi, bp) in plan.blocks.iter().enumerate() {
            let mut layers = Vec::new();
            for l in 0..config.block_layout[bi] {
                let c_in = bp.in_channels + l * config.growth_rate;
                let p = format!("block{bi}.layer{l}");
                let bn1 = config.use_batch_norm.then(|| b.bn(&format!("{p}.bn1"), c_in));
                let conv1 = b.conv(format!("{p}.conv1"), bw, c_in, 1);
                let bn2 = config.use_batch_norm.then(|| b.bn(&format!("{p}.bn2"), bw));
                let conv2 = b.conv(format!("{p}.conv2"), config.growth_rate, bw, 3);
                layers.push(DenseLayerSlots { bn1, conv1, bn2, conv2 });
            }
            blocks.push(layers);
            if let Some(c_out) = bp.transition_out {
                transitions.push(b.conv(format!("transition{bi}.conv"), c_out, bp.out_channels, 1));
            }
        }
        let f = plan.final_channels;
        let head_weight = b.normal("head.weight".into(), &[config.num_classes, f], (1.0 / f as f64).sqrt());
        let head_bias = b.push("head.bias".into(), Tensor::zeros(&[config.num_classes]));
        Ok(Model {
            config,
            plan,
            params: b.params,
            running: b.running,
            layout: Layout {
                stem,
                blocks,
                transitions,
                head_weight,
                head_bias,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &ChannelPlan {
        &self.plan
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn register(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.value.clone())).collect()
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        let m = T::of(BN_MOMENTUM);
        let one_m = T::one() - m;
        for (slot, s) in stats {
            let r = &mut self.running[*slot];
            for (rm, &bm) in r.mean.iter_mut().zip(&s.mean) {
                *rm = m * *rm + one_m * bm;
            }
            for (rv, &bv) in r.var.iter_mut().zip(&s.var) {
                *rv = m * *rv + one_m * bv;
            }
        }
    }

    fn norm_relu(
        &self,
        g: &mut Graph<T>,
        x: Var,
        bn: Option<BnSlot>,
        vars: &[Var],
        training: bool,
        stats: &mut Vec<(usize, BatchStats<T>)>,
    ) -> Result<Var> {
        let x = match bn {
            Some(s) if training => {
                let (y, st) = g.batch_norm_train(x, vars[s.gamma], vars[s.beta], T::of(BN_EPS))?;
                stats.push((s.stats, st));
                y
            }
            Some(s) => {
                let r = &self.running[s.stats];
                g.batch_norm_eval(x, vars[s.gamma], vars[s.beta], &r.mean, &r.var, T::of(BN_EPS))?
            }
            None => x,
        };
        g.relu(x)
    }

    /// Runs dense block `block` on `input` (`[N, C, H, W]` with `C` the
    /// block's configured input channels); output has `C + L·growth` channels.
    pub fn dense_block_forward(
        &self,
        g: &mut Graph<T>,
        block: usize,
        input: Var,
        vars: &[Var],
        training: bool,
    ) -> Result<(Var, Vec<(usize, BatchStats<T>)>)> {
        let bp = self
            .plan
            .blocks
            .get(block)
            .ok_or_else(|| Error::Range(format!("block {block} of {}", self.plan.blocks.len())))?;
        let shape = g.value(input)?.shape().to_vec();
        if shape.len() != 4 || shape[1] != bp.in_channels {
            return Err(Error::InvalidShape(format!(
                "block {block} expects {} input channels, got shape {shape:?}",
                bp.in_channels
            )));
        }
        let mut stats = Vec::new();
        let mut x = input;
        for layer in &self.layout.blocks[block] {
            let h = self.norm_relu(g, x, layer.bn1, vars, training, &mut stats)?;
            let h = g.conv2d(h, vars[layer.conv1], None, 1, 0)?;
            let h = self.norm_relu(g, h, layer.bn2, vars, training, &mut stats)?;
            let h = g.conv2d(h, vars[layer.conv2], None, 1, 1)?;
            x = g.concat(&[x, h])?;
        }
        Ok((x, stats))
    }

    /// Full forward pass from a `[N, C, H, W]` batch to per-class probabilities.
    pub fn forward(&self, g: &mut Graph<T>, batch: &Tensor<T>, mode: Mode<'_>) -> Result<ForwardPass<T>> {
        let vars = self.register(g);
        self.forward_with_params(g, batch, vars, mode)
    }

    /// [`Model::forward`] over caller-provided parameter variables (one per
    /// [`Model::params`] entry, same shapes); their current graph values are used.
    pub fn forward_with_params(
        &self,
        g: &mut Graph<T>,
        batch: &Tensor<T>,
        vars: Vec<Var>,
        mut mode: Mode<'_>,
    ) -> Result<ForwardPass<T>> {
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        for (v, p) in vars.iter().zip(&self.params) {
            if g.value(*v)?.shape() != p.value.shape() {
                return Err(Error::InvalidShape(format!(
                    "variable for {} has shape {:?}, expected {:?}",
                    p.name,
                    g.value(*v)?.shape(),
                    p.value.shape()
                )));
            }
        }
        let (_, c, h, w) = batch.dims4()?;
        if c != self.config.input_channels || (h, w) != self.config.input_size {
            return Err(Error::InvalidShape(format!(
                "model expects [N, {}, {}, {}], got {:?}",
                self.config.input_channels,
                self.config.input_size.0,
                self.config.input_size.1,
                batch.shape()
            )));
        }
        let training = mode.is_training();
        let input = g.constant(batch.clone());
        let mut x = g.conv2d(input, vars[self.layout.stem], None, 1, 1)?;
        let mut batch_stats = Vec::new();
        for b in 0..self.layout.blocks.len() {
            let (y, st) = self.dense_block_forward(g, b, x, &vars, training)?;
            batch_stats.extend(st);
            x = match self.layout.transitions.get(b) {
                Some(&t) => transition_forward(g, y, vars[t])?,
                None => y,
            };
        }
        let features = x;
        let (logits, probabilities) = self.head(g, features, &vars, &mut mode)?;
        Ok(ForwardPass {
            param_vars: vars,
            features,
            logits,
            probabilities,
            batch_stats,
        })
    }

    /// Pooling, dropout (training only), linear layer and sigmoid on top of
    /// final-block features; returns `(logits, probabilities)`.
    pub fn head(&self, g: &mut Graph<T>, features: Var, vars: &[Var], mode: &mut Mode<'_>) -> Result<(Var, Var)> {
        let mut pooled = g.global_avg_pool(features)?;
        if let Mode::Train { rng } = mode {
            if self.config.dropout_rate > 0.0 {
                pooled = g.dropout(pooled, self.config.dropout_rate, &mut **rng)?;
            }
        }
        let logits = g.linear(
            pooled,
            vars[self.layout.head_weight],
            Some(vars[self.layout.head_bias]),
        )?;
        let probabilities = g.sigmoid(logits)?;
        Ok((logits, probabilities))
    }

    /// Evaluation-mode probabilities for a batch, `[N, num_classes]`.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let fp = self.forward(&mut g, batch, Mode::Eval)?;
        Ok(g.value(fp.probabilities)?.clone())
    }
}

/// 1×1 convolution followed by 2×2 average pooling with stride 2.
pub fn transition_forward<T: Scalar>(g: &mut Graph<T>, input: Var, kernel: Var) -> Result<Var> {
    let (_, _, h, w) = g.value(input)?.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape(format!(
            "transition needs even spatial dims, got {h}x{w}"
        )));
    }
    let y = g.conv2d(input, kernel, None, 1, 0)?;
    g.avg_pool2d(y, 2)
}
