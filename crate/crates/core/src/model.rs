//! Pre-activation bottleneck ResNet with GELU activations.

use serde::{Deserialize, Serialize};

use crate::augment::Rng;
use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, BatchStats, Gradients, RunningStats, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const EXPANSION: usize = 4;
pub const INPUT_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stem {
    /// 3x3 stride-1 convolution.
    Cifar,
    /// 7x7 stride-2 convolution (no pooling).
    Imagenet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResNetConfig {
    pub stage_blocks: [usize; 4],
    pub base_width: usize,
    pub num_classes: usize,
    pub stem: Stem,
    /// Zero the last convolution of every residual branch at init.
    #[serde(default)]
    pub zero_init_residual: bool,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        Self::resnet50()
    }
}

impl ResNetConfig {
    pub fn resnet50() -> Self {
        Self {
            stage_blocks: [3, 4, 6, 3],
            base_width: 64,
            num_classes: 10,
            stem: Stem::Cifar,
            zero_init_residual: false,
        }
    }

    pub fn tiny() -> Self {
        Self {
            stage_blocks: [1, 1, 1, 1],
            base_width: 16,
            ..Self::resnet50()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "resnet50" => Ok(Self::resnet50()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected resnet50 or tiny)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_blocks.contains(&0) {
            return Err(Error::Config(format!(
                "every stage needs at least one block, got {:?}",
                self.stage_blocks
            )));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.stage_blocks.iter().sum()
    }

    /// Weighted layers: stem, three convolutions per block, classifier.
    pub fn depth(&self) -> usize {
        3 * self.num_blocks() + 2
    }

    pub fn feature_channels(&self) -> usize {
        self.base_width * 8 * EXPANSION
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    running: usize,
}

/// BN -> GELU -> conv, three times, plus a shortcut on the block input.
#[derive(Clone, Debug)]
pub struct PreActBottleneck {
    bn1: Norm,
    conv1: Conv,
    bn2: Norm,
    conv2: Conv,
    bn3: Norm,
    conv3: Conv,
    shortcut: Option<Conv>,
    pub in_channels: usize,
    pub width: usize,
    pub stride: usize,
}

impl PreActBottleneck {
    pub fn out_channels(&self) -> usize {
        self.width * EXPANSION
    }

    pub fn has_projection(&self) -> bool {
        self.shortcut.is_some()
    }
}

/// Output of a forward pass.
pub struct Forward {
    pub logits: Var,
    /// Tape handles of every parameter, in declaration order.
    pub params: Vec<Var>,
    /// Batch statistics of every batch-norm layer (training mode only).
    pub bn_stats: Vec<BatchStats>,
}

#[derive(Clone, Debug)]
pub struct ResNet {
    config: ResNetConfig,
    params: Vec<Tensor<f32>>,
    names: Vec<String>,
    running: Vec<RunningStats<f32>>,
    stem: Conv,
    blocks: Vec<PreActBottleneck>,
    final_bn: Norm,
    fc_weight: usize,
    fc_bias: usize,
}

struct Builder {
    params: Vec<Tensor<f32>>,
    names: Vec<String>,
    running: Vec<RunningStats<f32>>,
    rng: Rng,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor<f32>) -> usize {
        self.params.push(t.with_requires_grad(true));
        self.names.push(name);
        self.params.len() - 1
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| (std * rng.normal()) as f32);
        self.push(name, t)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> Conv {
        let shape = [cout, cin, k, k];
        let weight = if zero {
            self.push(format!("{name}.weight"), Tensor::zeros(&shape))
        } else {
            self.normal(format!("{name}.weight"), &shape, (2.0 / (cin * k * k) as f64).sqrt())
        };
        Conv {
            weight,
            stride,
            padding: k / 2,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self.push(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.running.push(RunningStats::new(c));
        Norm {
            gamma,
            beta,
            running: self.running.len() - 1,
        }
    }
}

impl ResNet {
    pub fn new(config: &ResNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            names: Vec::new(),
            running: Vec::new(),
            rng: Rng::seed(seed),
        };
        let w0 = config.base_width;
        let stem = match config.stem {
            Stem::Cifar => b.conv("stem", 3, w0, 3, 1, false),
            Stem::Imagenet => b.conv("stem", 3, w0, 7, 2, false),
        };
        let mut blocks = Vec::new();
        let mut in_ch = w0;
        for (stage, &count) in config.stage_blocks.iter().enumerate() {
            let width = w0 << stage;
            for i in 0..count {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let p = format!("stage{}.{i}", stage + 1);
                let out = width * EXPANSION;
                let bn1 = b.norm(&format!("{p}.bn1"), in_ch);
                let conv1 = b.conv(&format!("{p}.conv1"), in_ch, width, 1, 1, false);
                let bn2 = b.norm(&format!("{p}.bn2"), width);
                let conv2 = b.conv(&format!("{p}.conv2"), width, width, 3, stride, false);
                let bn3 = b.norm(&format!("{p}.bn3"), width);
                let conv3 = b.conv(&format!("{p}.conv3"), width, out, 1, 1, config.zero_init_residual);
                let shortcut = (in_ch != out || stride != 1)
                    .then(|| b.conv(&format!("{p}.shortcut"), in_ch, out, 1, stride, false));
                blocks.push(PreActBottleneck {
                    bn1,
                    conv1,
                    bn2,
                    conv2,
                    bn3,
                    conv3,
                    shortcut,
                    in_channels: in_ch,
                    width,
                    stride,
                });
                in_ch = out;
            }
        }
        let final_bn = b.norm("final_bn", in_ch);
        let k = config.num_classes;
        let fc_weight = b.normal("fc.weight".into(), &[k, in_ch], (1.0 / in_ch as f64).sqrt());
        let fc_bias = b.push("fc.bias".into(), Tensor::zeros(&[k]));
        Ok(Self {
            config: config.clone(),
            params: b.params,
            names: b.names,
            running: b.running,
            stem,
            blocks,
            final_bn,
            fc_weight,
            fc_bias,
        })
    }

    pub fn config(&self) -> &ResNetConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[PreActBottleneck] {
        &self.blocks
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn running_stats(&self) -> &[RunningStats<f32>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<f32>] {
        &mut self.running
    }

    fn norm(
        &self,
        tape: &mut Tape,
        x: Var,
        n: Norm,
        params: &[Var],
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let bn_mode = match mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval(&self.running[n.running]),
        };
        let (y, s) = tape.batch_norm2d(x, params[n.gamma], params[n.beta], bn_mode, BN_EPS)?;
        stats.extend(s);
        Ok(y)
    }

    fn conv(&self, tape: &mut Tape, x: Var, c: Conv, params: &[Var]) -> Result<Var> {
        tape.conv2d(x, params[c.weight], None, c.stride, c.padding)
    }

    fn preact(
        &self,
        tape: &mut Tape,
        x: Var,
        n: Norm,
        c: Conv,
        params: &[Var],
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let y = self.norm(tape, x, n, params, mode, stats)?;
        let y = tape.gelu(y);
        self.conv(tape, y, c, params)
    }

    fn block(
        &self,
        tape: &mut Tape,
        x: Var,
        b: &PreActBottleneck,
        params: &[Var],
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let c = tape.value(x).shape()[1];
        if c != b.in_channels {
            return Err(Error::Dimension(format!(
                "block expects {} input channels, got {c}",
                b.in_channels
            )));
        }
        let y = self.preact(tape, x, b.bn1, b.conv1, params, mode, stats)?;
        let y = self.preact(tape, y, b.bn2, b.conv2, params, mode, stats)?;
        let y = self.preact(tape, y, b.bn3, b.conv3, params, mode, stats)?;
        let skip = match b.shortcut {
            Some(proj) => self.conv(tape, x, proj, params)?,
            None => x,
        };
        tape.add(skip, y)
    }

    /// Records every parameter on `tape`, in declaration order.
    pub fn bind_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p)).collect()
    }

    /// Runs block `index` alone on `x`, with `params` from [`ResNet::bind_params`].
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        index: usize,
        x: Var,
        params: &[Var],
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let b = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::Usage(format!("block {index} of {}", self.blocks.len())))?;
        let mut stats = Vec::new();
        let y = self.block(tape, x, b, params, mode, &mut stats)?;
        Ok((y, stats))
    }

    /// Records the network on `tape` for images `N x 3 x 32 x 32`.
    pub fn forward(&self, tape: &mut Tape, images: &Tensor<f32>, mode: Mode) -> Result<Forward> {
        match images.shape() {
            &[_, 3, INPUT_SIDE, INPUT_SIDE] => {}
            other => {
                return Err(Error::Dimension(format!(
                    "model expects N x 3 x {INPUT_SIDE} x {INPUT_SIDE} images, got {other:?}"
                )))
            }
        }
        let params = self.bind_params(tape);
        let mut stats = Vec::new();
        let x = tape.constant(images.clone());
        let mut h = self.conv(tape, x, self.stem, &params)?;
        for b in &self.blocks {
            h = self.block(tape, h, b, &params, mode, &mut stats)?;
        }
        let h = self.norm(tape, h, self.final_bn, &params, mode, &mut stats)?;
        let h = tape.gelu(h);
        let pooled = tape.global_avg_pool(h)?;
        let logits = tape.linear(pooled, params[self.fc_weight], params[self.fc_bias])?;
        Ok(Forward {
            logits,
            params,
            bn_stats: stats,
        })
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn apply_bn_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(Error::Usage(format!(
                "{} batch statistics for {} batch-norm layers",
                stats.len(),
                self.running.len()
            )));
        }
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s, BN_MOMENTUM);
        }
        Ok(())
    }

    /// Gradient of every parameter, zeros where none reached it.
    pub fn param_grads(&self, forward: &Forward, grads: &Gradients<f32>) -> Vec<Vec<f32>> {
        forward
            .params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.get_or_zeros(v, p.numel()))
            .collect()
    }

    /// Eval-mode logits `N x K`.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, images, Mode::Eval)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Replaces parameters and running statistics from a flat snapshot.
    pub fn load_state(&mut self, params: Vec<Tensor<f32>>, running: Vec<RunningStats<f32>>) -> Result<()> {
        let shapes_match = params.len() == self.params.len()
            && params.iter().zip(&self.params).all(|(a, b)| a.shape() == b.shape())
            && running.len() == self.running.len()
            && running
                .iter()
                .zip(&self.running)
                .all(|(a, b)| a.channels() == b.channels() && a.var.len() == b.var.len());
        if !shapes_match {
            return Err(Error::Checkpoint("parameter shapes do not match the model".into()));
        }
        self.params = params.into_iter().map(|p| p.with_requires_grad(true)).collect();
        self.running = running;
        Ok(())
    }
}
