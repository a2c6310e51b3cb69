use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Elem, Tape, Tensor, Var};

/// Epsilon used by every instance-norm layer.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockSpec {
    /// conv → instance norm → relu.
    ConvINRelu { in_ch: usize, out_ch: usize, kernel: usize, stride: usize },
    /// conv → relu, without normalization.
    ConvRelu { in_ch: usize, out_ch: usize, kernel: usize },
    /// `x + IN(conv(relu(IN(conv(x)))))`.
    Residual { channels: usize, kernel: usize },
    /// nearest upsample → conv → instance norm → relu.
    UpsampleConv { in_ch: usize, out_ch: usize, kernel: usize, factor: usize },
    /// conv → `0.5·(tanh + 1)`.
    OutputConv { in_ch: usize, out_ch: usize, kernel: usize },
    /// conv → relu → conv → relu → conv, channel- and size-preserving.
    Tuning { channels: usize, kernel: usize },
}

impl BlockSpec {
    pub fn in_channels(&self) -> usize {
        match *self {
            BlockSpec::ConvINRelu { in_ch, .. }
            | BlockSpec::ConvRelu { in_ch, .. }
            | BlockSpec::UpsampleConv { in_ch, .. }
            | BlockSpec::OutputConv { in_ch, .. } => in_ch,
            BlockSpec::Residual { channels, .. } | BlockSpec::Tuning { channels, .. } => channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            BlockSpec::ConvINRelu { out_ch, .. }
            | BlockSpec::ConvRelu { out_ch, .. }
            | BlockSpec::UpsampleConv { out_ch, .. }
            | BlockSpec::OutputConv { out_ch, .. } => out_ch,
            BlockSpec::Residual { channels, .. } | BlockSpec::Tuning { channels, .. } => channels,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            BlockSpec::ConvINRelu { .. } => "conv_in_relu",
            BlockSpec::ConvRelu { .. } => "conv_relu",
            BlockSpec::Residual { .. } => "residual",
            BlockSpec::UpsampleConv { .. } => "upsample_conv",
            BlockSpec::OutputConv { .. } => "output_conv",
            BlockSpec::Tuning { .. } => "tuning",
        }
    }

    /// `(suffix, in, out, kernel)` for every conv in the block.
    fn convs(&self) -> Vec<(&'static str, usize, usize, usize)> {
        match *self {
            BlockSpec::ConvINRelu { in_ch, out_ch, kernel, .. }
            | BlockSpec::ConvRelu { in_ch, out_ch, kernel }
            | BlockSpec::UpsampleConv { in_ch, out_ch, kernel, .. }
            | BlockSpec::OutputConv { in_ch, out_ch, kernel } => vec![("conv", in_ch, out_ch, kernel)],
            BlockSpec::Residual { channels: c, kernel: k } => vec![("conv1", c, c, k), ("conv2", c, c, k)],
            BlockSpec::Tuning { channels: c, kernel: k } => {
                vec![("conv0", c, c, k), ("conv1", c, c, k), ("conv2", c, c, k)]
            }
        }
    }

    fn norms(&self) -> Vec<(&'static str, usize)> {
        match *self {
            BlockSpec::ConvINRelu { out_ch, .. } | BlockSpec::UpsampleConv { out_ch, .. } => vec![("norm", out_ch)],
            BlockSpec::Residual { channels, .. } => vec![("norm1", channels), ("norm2", channels)],
            _ => Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, i, o, k) in self.convs() {
            if i == 0 || o == 0 || k == 0 {
                return bad(format!("{} {name}: channels and kernel must be positive", self.kind_name()));
            }
        }
        match *self {
            BlockSpec::ConvINRelu { stride: 0, .. } => bad("conv stride must be positive".into()),
            BlockSpec::UpsampleConv { factor: 0, .. } => bad("upsample factor must be positive".into()),
            BlockSpec::Residual { kernel, .. } | BlockSpec::Tuning { kernel, .. } if kernel % 2 == 0 => {
                bad(format!("{} needs an odd kernel to preserve size", self.kind_name()))
            }
            _ => Ok(()),
        }
    }
}

/// Main-network layout plus the positions where tuning-blocks attach.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneSpec {
    pub blocks: Vec<BlockSpec>,
    /// Insertion point `i` sits after the first `i` main blocks.
    pub insertion_points: Vec<usize>,
    pub tuning_kernel: usize,
}

impl BackboneSpec {
    pub fn new(blocks: Vec<BlockSpec>, insertion_points: Vec<usize>, tuning_kernel: usize) -> Result<Self> {
        let spec = BackboneSpec { blocks, insertion_points, tuning_kernel };
        spec.validate()?;
        Ok(spec)
    }

    /// Encoder / two residual blocks / decoder image transformer, with
    /// tuning-blocks after the last downsampling block and after each
    /// residual block.
    pub fn stylization() -> Self {
        use BlockSpec::*;
        let blocks = vec![
            ConvINRelu { in_ch: 3, out_ch: 16, kernel: 3, stride: 1 },
            ConvINRelu { in_ch: 16, out_ch: 32, kernel: 3, stride: 2 },
            ConvINRelu { in_ch: 32, out_ch: 32, kernel: 3, stride: 2 },
            Residual { channels: 32, kernel: 3 },
            Residual { channels: 32, kernel: 3 },
            UpsampleConv { in_ch: 32, out_ch: 16, kernel: 3, factor: 2 },
            UpsampleConv { in_ch: 16, out_ch: 16, kernel: 3, factor: 2 },
            OutputConv { in_ch: 16, out_ch: 3, kernel: 3 },
        ];
        BackboneSpec::new(blocks, vec![3, 4, 5], 3).expect("built-in spec is valid")
    }

    /// Pointwise network for 1×1×N coordinate inputs.
    pub fn regression() -> Self {
        use BlockSpec::*;
        let blocks = vec![
            ConvRelu { in_ch: 1, out_ch: 16, kernel: 1 },
            ConvRelu { in_ch: 16, out_ch: 16, kernel: 1 },
            ConvRelu { in_ch: 16, out_ch: 16, kernel: 1 },
            ConvRelu { in_ch: 16, out_ch: 16, kernel: 1 },
            OutputConv { in_ch: 16, out_ch: 1, kernel: 1 },
        ];
        BackboneSpec::new(blocks, vec![1, 2, 3], 1).expect("built-in spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("backbone has no blocks".into()));
        }
        for b in &self.blocks {
            b.validate()?;
        }
        for pair in self.blocks.windows(2) {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(Error::Config(format!(
                    "{} outputs {} channels but {} expects {}",
                    pair[0].kind_name(),
                    pair[0].out_channels(),
                    pair[1].kind_name(),
                    pair[1].in_channels()
                )));
            }
        }
        let n = self.blocks.len();
        let ip = &self.insertion_points;
        if ip.iter().any(|&i| i < 1 || i > n) || ip.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "insertion points {ip:?} must be strictly increasing within [1, {n}]"
            )));
        }
        if self.tuning_kernel % 2 == 0 {
            return Err(Error::Config("tuning kernel must be odd".into()));
        }
        Ok(())
    }

    /// One tuning-block per insertion point, matching the channel count
    /// of the latent there.
    pub fn tuning_blocks(&self) -> Vec<BlockSpec> {
        self.insertion_points
            .iter()
            .map(|&i| BlockSpec::Tuning { channels: self.blocks[i - 1].out_channels(), kernel: self.tuning_kernel })
            .collect()
    }
}

pub fn main_prefix(index: usize) -> String {
    format!("main.{index}")
}

pub fn tuning_prefix(index: usize) -> String {
    format!("tune.{index}")
}

fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as Elem)
}

/// Adds the parameters of one block under `prefix`, drawing kernels from
/// `rng`. Biases start at zero, norms at identity, and the last conv of a
/// tuning-block at zero so that the block initially outputs zeros.
pub fn init_block(spec: &BlockSpec, prefix: &str, rng: &mut ChaCha8Rng, store: &mut ParamStore) -> Result<()> {
    spec.validate()?;
    for (name, i, o, k) in spec.convs() {
        let shape = vec![o, i, k, k];
        let weight = if matches!(spec, BlockSpec::Tuning { .. }) && name == "conv2" {
            Tensor::zeros(shape)
        } else {
            he_normal(shape, i * k * k, rng)
        };
        store.insert(format!("{prefix}.{name}.weight"), weight, true)?;
        store.insert(format!("{prefix}.{name}.bias"), Tensor::zeros(vec![o]), true)?;
    }
    for (name, c) in spec.norms() {
        store.insert(format!("{prefix}.{name}.gain"), Tensor::full(vec![c], 1.0), true)?;
        store.insert(format!("{prefix}.{name}.shift"), Tensor::zeros(vec![c]), true)?;
    }
    Ok(())
}

/// Main-network parameters (`main.*`), deterministic in `seed`.
pub fn init_backbone(spec: &BackboneSpec, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (i, b) in spec.blocks.iter().enumerate() {
        init_block(b, &main_prefix(i), &mut rng, &mut store)?;
    }
    Ok(store)
}

/// Tuning-block parameters (`tune.*`), deterministic in `seed`.
pub fn init_tuning(spec: &BackboneSpec, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (i, b) in spec.tuning_blocks().iter().enumerate() {
        init_block(b, &tuning_prefix(i), &mut rng, &mut store)?;
    }
    Ok(store)
}

fn conv(tape: &mut Tape, p: &Bound, prefix: &str, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.get(&format!("{prefix}.{name}.weight"))?;
    let b = p.get(&format!("{prefix}.{name}.bias"))?;
    let k = tape.value(w).shape()[2];
    tape.conv2d(x, w, b, stride, k / 2)
}

fn norm(tape: &mut Tape, p: &Bound, prefix: &str, name: &str, x: Var) -> Result<Var> {
    let g = p.get(&format!("{prefix}.{name}.gain"))?;
    let s = p.get(&format!("{prefix}.{name}.shift"))?;
    tape.instance_norm(x, g, s, NORM_EPS)
}

/// Runs one block on the tape. Parameters are looked up under `prefix`.
pub fn forward_block(tape: &mut Tape, spec: &BlockSpec, prefix: &str, params: &Bound, x: Var) -> Result<Var> {
    let (c, _, _) = tape.value(x).chw()?;
    if c != spec.in_channels() {
        return Err(Error::shape(format!(
            "{} block `{prefix}` expects {} channels, got {c}",
            spec.kind_name(),
            spec.in_channels()
        )));
    }
    match *spec {
        BlockSpec::ConvINRelu { stride, .. } => {
            let y = conv(tape, params, prefix, "conv", x, stride)?;
            let y = norm(tape, params, prefix, "norm", y)?;
            Ok(tape.relu(y))
        }
        BlockSpec::ConvRelu { .. } => {
            let y = conv(tape, params, prefix, "conv", x, 1)?;
            Ok(tape.relu(y))
        }
        BlockSpec::Residual { .. } => {
            let y = conv(tape, params, prefix, "conv1", x, 1)?;
            let y = norm(tape, params, prefix, "norm1", y)?;
            let y = tape.relu(y);
            let y = conv(tape, params, prefix, "conv2", y, 1)?;
            let y = norm(tape, params, prefix, "norm2", y)?;
            tape.add(x, y)
        }
        BlockSpec::UpsampleConv { factor, .. } => {
            let y = tape.upsample_nearest(x, factor)?;
            let y = conv(tape, params, prefix, "conv", y, 1)?;
            let y = norm(tape, params, prefix, "norm", y)?;
            Ok(tape.relu(y))
        }
        BlockSpec::OutputConv { .. } => {
            let y = conv(tape, params, prefix, "conv", x, 1)?;
            Ok(tape.squash(y))
        }
        BlockSpec::Tuning { .. } => {
            let y = conv(tape, params, prefix, "conv0", x, 1)?;
            let y = tape.relu(y);
            let y = conv(tape, params, prefix, "conv1", y, 1)?;
            let y = tape.relu(y);
            conv(tape, params, prefix, "conv2", y, 1)
        }
    }
}
