//! U-Net with per-layer SVD replacement.

mod checkpoint;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Manifest};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::svd::{factorize_conv, TruncationPolicy};
use crate::tensor::{Real, Tensor};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Sigmoid,
    Linear,
}

impl OutputActivation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "linear" => Ok(Self::Linear),
            _ => Err(Error::invalid(format!("unknown output activation {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sigmoid => "sigmoid",
            Self::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    /// Feature channels of the down and up blocks at each scale.
    pub channels: Vec<usize>,
    /// Skip widths for scales `0..num_scales-1`; 0 disables that skip.
    pub skip_channels: Vec<usize>,
    pub kernel_size: usize,
    pub leaky_slope: f64,
    pub output: OutputActivation,
    /// Upper bound on group-norm groups; 0 disables normalization.
    pub norm_groups: usize,
}

impl UNetConfig {
    /// Uniform widths over `num_scales` scales.
    pub fn uniform(num_scales: usize, channels: usize, skip: usize) -> Self {
        Self {
            channels: vec![channels; num_scales],
            skip_channels: vec![skip; num_scales.saturating_sub(1)],
            kernel_size: 3,
            leaky_slope: 0.2,
            output: OutputActivation::Sigmoid,
            norm_groups: 32,
        }
    }

    /// 3 scales of 32 channels, skip width 4.
    pub fn desk() -> Self {
        Self::uniform(3, 32, 4)
    }

    /// 5 scales of 128 channels, skip width 4.
    pub fn paper() -> Self {
        Self::uniform(5, 128, 4)
    }

    pub fn num_scales(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::invalid("U-Net needs at least one scale"));
        }
        if self.channels.contains(&0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.skip_channels.len() + 1 != self.channels.len() {
            return Err(Error::invalid(format!(
                "{} skip widths given for {} scales (expected one fewer)",
                self.skip_channels.len(),
                self.channels.len()
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::invalid(format!("leaky slope {}", self.leaky_slope)));
        }
        Ok(())
    }

    /// Groups used for a layer with `c` channels: the largest divisor of `c`
    /// not above `norm_groups`.
    pub fn groups_for(&self, c: usize) -> usize {
        (1..=self.norm_groups.min(c)).rev().find(|g| c.is_multiple_of(*g)).unwrap_or(1)
    }

    /// Canonical one-line description; identical configs give identical text.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "channels={} skip={} kernel={} slope={} output={} norm_groups={}",
            list(&self.channels),
            list(&self.skip_channels),
            self.kernel_size,
            self.leaky_slope,
            self.output.name(),
            self.norm_groups
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("model config", d);
        let list = |s: &str| -> Result<Vec<usize>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|p| p.parse().map_err(|_| bad(format!("bad list entry {p:?}"))))
                .collect()
        };
        let mut cfg = Self::desk();
        for field in text.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad(format!("bad field {field:?}")))?;
            match k {
                "channels" => cfg.channels = list(v)?,
                "skip" => cfg.skip_channels = list(v)?,
                "kernel" => cfg.kernel_size = v.parse().map_err(|_| bad(format!("kernel {v:?}")))?,
                "slope" => cfg.leaky_slope = v.parse().map_err(|_| bad(format!("slope {v:?}")))?,
                "output" => cfg.output = OutputActivation::parse(v)?,
                "norm_groups" => cfg.norm_groups = v.parse().map_err(|_| bad(format!("groups {v:?}")))?,
                _ => return Err(bad(format!("unknown field {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Short SHA-256 digest of [`Self::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockKind {
    Down,
    Up,
    Skip,
    Out,
}

/// Names one conv layer: block kind, scale, and conv index within the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerAddress {
    pub kind: BlockKind,
    pub scale: usize,
    pub conv: usize,
}

impl LayerAddress {
    pub fn new(kind: BlockKind, scale: usize, conv: usize) -> Self {
        Self { kind, scale, conv }
    }

    /// Parses `down.1.0`, `up.0.1`, `skip.0.0` or `out.0.0`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('.').collect();
        let [kind, scale, conv] = parts.as_slice() else {
            return Err(Error::invalid(format!("layer address {s:?} is not kind.scale.conv")));
        };
        let kind = match *kind {
            "down" => BlockKind::Down,
            "up" => BlockKind::Up,
            "skip" => BlockKind::Skip,
            "out" => BlockKind::Out,
            _ => return Err(Error::invalid(format!("unknown block kind in {s:?}"))),
        };
        let num = |v: &str| v.parse().map_err(|_| Error::invalid(format!("bad index in {s:?}")));
        Ok(Self::new(kind, num(scale)?, num(conv)?))
    }
}

impl fmt::Display for LayerAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            BlockKind::Down => "down",
            BlockKind::Up => "up",
            BlockKind::Skip => "skip",
            BlockKind::Out => "out",
        };
        write!(f, "{kind}.{}.{}", self.scale, self.conv)
    }
}

/// Which layers an SVD replacement touches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSelection {
    /// Every conv of every down and up block.
    AllBlocks,
    /// All down/up convs except those in the first `n` down blocks.
    SkipFirstDown(usize),
    List(Vec<LayerAddress>),
}

impl LayerSelection {
    /// Parses `all`, `skip-first-<n>-down`, or a comma-separated address list.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "all" {
            return Ok(Self::AllBlocks);
        }
        if let Some(n) = s.strip_prefix("skip-first-").and_then(|r| r.strip_suffix("-down")) {
            let n = n.parse().map_err(|_| Error::invalid(format!("bad layer selection {s:?}")))?;
            return Ok(Self::SkipFirstDown(n));
        }
        s.split(',').map(LayerAddress::parse).collect::<Result<_>>().map(Self::List)
    }

    pub fn to_text(&self) -> String {
        match self {
            Self::AllBlocks => "all".into(),
            Self::SkipFirstDown(n) => format!("skip-first-{n}-down"),
            Self::List(v) => v.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(","),
        }
    }

    pub fn resolve<T: Real>(&self, net: &UNet<T>) -> Vec<LayerAddress> {
        let blocks = net
            .addresses()
            .into_iter()
            .filter(|a| matches!(a.kind, BlockKind::Down | BlockKind::Up));
        match self {
            Self::AllBlocks => blocks.collect(),
            Self::SkipFirstDown(n) => blocks
                .filter(|a| !(a.kind == BlockKind::Down && a.scale < *n))
                .collect(),
            Self::List(v) => v.clone(),
        }
    }
}

/// Which parameter groups receive optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainability {
    /// Weights and biases of layers that are still plain convs.
    pub plain_convs: bool,
    /// Affine parameters of normalization layers.
    pub norms: bool,
    /// Singular values of factorized layers.
    pub singular_values: bool,
}

impl Trainability {
    pub const ALL: Self = Self {
        plain_convs: true,
        norms: true,
        singular_values: true,
    };

    pub const SINGULAR_VALUES_ONLY: Self = Self {
        plain_convs: false,
        norms: false,
        singular_values: true,
    };
}

#[derive(Debug, Clone)]
enum ConvParams {
    Plain {
        weight: ParamId,
        bias: ParamId,
    },
    /// `u` and `v` reuse ids; `bias` is the original, now frozen.
    Svd {
        u: ParamId,
        s: ParamId,
        v: ParamId,
        bias: ParamId,
        initial_s: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct ConvUnit {
    address: LayerAddress,
    stride: usize,
    padding: usize,
    params: ConvParams,
}

#[derive(Debug, Clone)]
struct NormUnit {
    groups: usize,
    gamma: ParamId,
    beta: ParamId,
}

/// conv, then optional group norm with affine parameters, then leaky ReLU.
#[derive(Debug, Clone)]
struct Stage {
    conv: ConvUnit,
    norm: Option<NormUnit>,
}

#[derive(Debug, Clone)]
struct UpBlock {
    skip: Option<Stage>,
    stages: [Stage; 2],
}

/// Singular values of one factorized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularValueTrace {
    pub address: LayerAddress,
    pub initial: Vec<f64>,
    pub current: Vec<f64>,
}

/// U-Net: stride-2 conv down path, bilinear up path with skip concatenation,
/// and a 1x1 output conv.
#[derive(Debug, Clone)]
pub struct UNet<T: Real = f32> {
    config: UNetConfig,
    params: ParamStore<T>,
    down: Vec<[Stage; 2]>,
    /// `up[i]` produces scale `i` from scale `i + 1`.
    up: Vec<UpBlock>,
    out: ConvUnit,
}

struct Builder<'a, T: Real> {
    params: ParamStore<T>,
    rng: ChaCha8Rng,
    config: &'a UNetConfig,
}

impl<T: Real> Builder<'_, T> {
    /// Kaiming-normal weights for leaky ReLU, zero bias.
    fn conv(&mut self, address: LayerAddress, c_in: usize, c_out: usize, k: usize, stride: usize) -> ConvUnit {
        let fan_in = (c_in * k * k) as f64;
        let a = self.config.leaky_slope;
        let std = (2.0 / ((1.0 + a * a) * fan_in)).sqrt();
        let normal = Normal::new(0.0, std).expect("std is positive");
        let w = Tensor::from_fn([c_out, c_in, k, k], |_| T::from_f64(normal.sample(&mut self.rng)));
        let weight = self.params.add(format!("{address}.weight"), w, true);
        let bias = self.params.add(format!("{address}.bias"), Tensor::zeros([c_out]), true);
        ConvUnit {
            address,
            stride,
            padding: k / 2,
            params: ConvParams::Plain { weight, bias },
        }
    }

    fn stage(&mut self, address: LayerAddress, c_in: usize, c_out: usize, k: usize, stride: usize) -> Stage {
        let conv = self.conv(address, c_in, c_out, k, stride);
        let norm = (self.config.norm_groups > 0).then(|| NormUnit {
            groups: self.config.groups_for(c_out),
            gamma: self.params.add(format!("{address}.norm.gamma"), Tensor::full([c_out], T::ONE), true),
            beta: self.params.add(format!("{address}.norm.beta"), Tensor::zeros([c_out]), true),
        });
        Stage { conv, norm }
    }
}

impl<T: Real> UNet<T> {
    /// Builds a freshly initialized network; identical seeds give identical weights.
    pub fn build(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            config,
        };
        let k = config.kernel_size;
        let ch = &config.channels;
        let s = config.num_scales();
        let mut down = Vec::with_capacity(s);
        for i in 0..s {
            let c_in = if i == 0 { 1 } else { ch[i - 1] };
            let stride = if i == 0 { 1 } else { 2 };
            down.push([
                b.stage(LayerAddress::new(BlockKind::Down, i, 0), c_in, ch[i], k, stride),
                b.stage(LayerAddress::new(BlockKind::Down, i, 1), ch[i], ch[i], k, 1),
            ]);
        }
        let mut up = Vec::with_capacity(s.saturating_sub(1));
        for i in 0..s - 1 {
            let skip_w = config.skip_channels[i];
            let skip = (skip_w > 0).then(|| b.stage(LayerAddress::new(BlockKind::Skip, i, 0), ch[i], skip_w, 1, 1));
            up.push(UpBlock {
                skip,
                stages: [
                    b.stage(LayerAddress::new(BlockKind::Up, i, 0), ch[i + 1] + skip_w, ch[i], k, 1),
                    b.stage(LayerAddress::new(BlockKind::Up, i, 1), ch[i], ch[i], k, 1),
                ],
            });
        }
        let out = b.conv(LayerAddress::new(BlockKind::Out, 0, 0), ch[0], 1, 1, 1);
        Ok(Self {
            config: config.clone(),
            params: b.params,
            down,
            up,
            out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Side lengths must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.config.num_scales() - 1)
    }

    fn units(&self) -> Vec<&ConvUnit> {
        let mut v = Vec::new();
        for block in &self.down {
            v.extend(block.iter().map(|s| &s.conv));
        }
        for block in &self.up {
            v.extend(block.skip.iter().map(|s| &s.conv));
            v.extend(block.stages.iter().map(|s| &s.conv));
        }
        v.push(&self.out);
        v
    }

    fn unit_mut(&mut self, address: LayerAddress) -> Option<&mut ConvUnit> {
        let (kind, i, j) = (address.kind, address.scale, address.conv);
        match kind {
            BlockKind::Down => self.down.get_mut(i)?.get_mut(j).map(|s| &mut s.conv),
            BlockKind::Up => self.up.get_mut(i)?.stages.get_mut(j).map(|s| &mut s.conv),
            BlockKind::Skip if j == 0 => self.up.get_mut(i)?.skip.as_mut().map(|s| &mut s.conv),
            BlockKind::Out if i == 0 && j == 0 => Some(&mut self.out),
            _ => None,
        }
    }

    fn norms(&self) -> Vec<&NormUnit> {
        let mut v: Vec<&NormUnit> = self.down.iter().flatten().filter_map(|s| s.norm.as_ref()).collect();
        for block in &self.up {
            v.extend(block.skip.iter().chain(&block.stages).filter_map(|s| s.norm.as_ref()));
        }
        v
    }

    /// Addresses of every conv layer.
    pub fn addresses(&self) -> Vec<LayerAddress> {
        self.units().iter().map(|u| u.address).collect()
    }

    pub fn is_factorized(&self, address: LayerAddress) -> bool {
        self.units()
            .iter()
            .any(|u| u.address == address && matches!(u.params, ConvParams::Svd { .. }))
    }

    /// Replaces plain convs by `V` conv, diagonal `s` scaling and 1x1 `U` conv.
    ///
    /// `U`, `V` and the bias become frozen, `s` trainable. Without truncation
    /// the network function is unchanged up to rounding.
    pub fn replace_with_svd(&mut self, addresses: &[LayerAddress], policy: TruncationPolicy) -> Result<()> {
        policy.validate()?;
        for (n, a) in addresses.iter().enumerate() {
            if addresses[..n].contains(a) {
                return Err(Error::invalid(format!("layer {a} listed twice")));
            }
            match self.units().iter().find(|u| u.address == *a) {
                None => return Err(Error::invalid(format!("no conv layer at {a}"))),
                Some(u) if matches!(u.params, ConvParams::Svd { .. }) => {
                    return Err(Error::invalid(format!("layer {a} is already factorized")))
                }
                Some(_) => {}
            }
        }
        for &a in addresses {
            let ConvParams::Plain { weight, bias } = self.unit_mut(a).expect("checked above").params else {
                unreachable!("checked above");
            };
            let f = factorize_conv(self.params.get(weight).value(), policy)?;
            let initial_s = f.s.data().iter().map(|v| v.to_f64()).collect();
            self.params.replace(weight, format!("{a}.v"), f.v, false);
            let u = self.params.add(format!("{a}.u"), f.u, false);
            let s = self.params.add(format!("{a}.s"), f.s, true);
            self.params.get_mut(bias).set_trainable(false);
            self.unit_mut(a).expect("checked above").params = ConvParams::Svd {
                u,
                s,
                v: weight,
                bias,
                initial_s,
            };
        }
        Ok(())
    }

    /// Sets trainable flags by parameter group. Factor matrices and the
    /// biases of factorized layers stay frozen.
    pub fn set_trainability(&mut self, t: Trainability) {
        let mut flags: Vec<(ParamId, bool)> = Vec::new();
        for u in self.units() {
            match &u.params {
                ConvParams::Plain { weight, bias } => {
                    flags.push((*weight, t.plain_convs));
                    flags.push((*bias, t.plain_convs));
                }
                ConvParams::Svd { u, s, v, bias, .. } => {
                    flags.extend([(*u, false), (*v, false), (*bias, false), (*s, t.singular_values)]);
                }
            }
        }
        for n in self.norms() {
            flags.extend([(n.gamma, t.norms), (n.beta, t.norms)]);
        }
        for (id, on) in flags {
            self.params.get_mut(id).set_trainable(on);
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params.trainable_ids()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Total active rank over factorized layers.
    pub fn active_rank(&self) -> usize {
        self.units()
            .iter()
            .map(|u| match &u.params {
                ConvParams::Svd { s, .. } => self.params.get(*s).value().len(),
                ConvParams::Plain { .. } => 0,
            })
            .sum()
    }

    /// Initial and current singular values of a factorized layer.
    pub fn singular_values(&self, address: LayerAddress) -> Result<SingularValueTrace> {
        let unit = self
            .units()
            .into_iter()
            .find(|u| u.address == address)
            .ok_or_else(|| Error::invalid(format!("no conv layer at {address}")))?;
        match &unit.params {
            ConvParams::Svd { s, initial_s, .. } => Ok(SingularValueTrace {
                address,
                initial: initial_s.clone(),
                current: self.params.get(*s).value().data().iter().map(|v| v.to_f64()).collect(),
            }),
            ConvParams::Plain { .. } => Err(Error::invalid(format!("layer {address} is not factorized"))),
        }
    }

    /// Zeroes the output conv so the network outputs `activation(0)` everywhere.
    pub fn zero_output_layer(&mut self) {
        if let ConvParams::Plain { weight, bias } = self.out.params {
            for id in [weight, bias] {
                let shape = self.params.get(id).value().shape().to_vec();
                self.params.get_mut(id).set_value(Tensor::zeros(shape)).expect("same shape");
            }
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (c, h, w) = x.dims3()?;
        let m = self.size_multiple();
        if c != 1 || h == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::invalid(format!(
                "input {:?} must be one channel with sides divisible by {m}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn conv(&self, tape: &mut Tape<T>, x: Var, unit: &ConvUnit) -> Result<Var> {
        match &unit.params {
            ConvParams::Plain { weight, bias } => {
                let w = tape.param(&self.params, *weight);
                let b = tape.param(&self.params, *bias);
                tape.conv2d(x, w, Some(b), unit.stride, unit.padding)
            }
            ConvParams::Svd { u, s, v, bias, .. } => {
                let vv = tape.param(&self.params, *v);
                let h = tape.conv2d(x, vv, None, unit.stride, unit.padding)?;
                let sv = tape.param(&self.params, *s);
                let h = tape.channel_mul(h, sv)?;
                let uv = tape.param(&self.params, *u);
                let b = tape.param(&self.params, *bias);
                tape.conv2d(h, uv, Some(b), 1, 0)
            }
        }
    }

    fn stage(&self, tape: &mut Tape<T>, x: Var, stage: &Stage) -> Result<Var> {
        let mut y = self.conv(tape, x, &stage.conv)?;
        if let Some(n) = &stage.norm {
            y = tape.group_norm(y, n.groups, T::from_f64(NORM_EPS))?;
            let g = tape.param(&self.params, n.gamma);
            y = tape.channel_mul(y, g)?;
            let b = tape.param(&self.params, n.beta);
            y = tape.channel_add(y, b)?;
        }
        Ok(tape.leaky_relu(y, T::from_f64(self.config.leaky_slope)))
    }

    /// Records the forward pass of a `[1, H, W]` (or `[H, W]`) input; returns a `[1, H, W]` node.
    pub fn forward(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        self.check_input(tape.value(z))?;
        let (_, h, w) = tape.value(z).dims3()?;
        let mut x = tape.reshape(z, [1, h, w])?;
        let mut skips = Vec::with_capacity(self.down.len());
        for block in &self.down {
            x = self.stage(tape, x, &block[0])?;
            x = self.stage(tape, x, &block[1])?;
            skips.push(x);
        }
        for (i, block) in self.up.iter().enumerate().rev() {
            x = tape.upsample2x(x)?;
            if let Some(skip) = &block.skip {
                let sk = self.stage(tape, skips[i], skip)?;
                x = tape.concat_channels(&[x, sk])?;
            }
            x = self.stage(tape, x, &block.stages[0])?;
            x = self.stage(tape, x, &block.stages[1])?;
        }
        let y = self.conv(tape, x, &self.out)?;
        Ok(match self.config.output {
            OutputActivation::Sigmoid => tape.sigmoid(y),
            OutputActivation::Linear => y,
        })
    }

    /// Forward pass without gradient bookkeeping beyond a throwaway tape.
    pub fn predict(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::trainable_only();
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, zv)?;
        Ok(tape.value(out).clone())
    }

    /// Same network in another precision; optimizer state is not carried over.
    pub fn cast<U: Real>(&self) -> UNet<U> {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            params.add(p.name(), p.value().cast::<U>(), p.trainable());
        }
        UNet {
            config: self.config.clone(),
            params,
            down: self.down.clone(),
            up: self.up.clone(),
            out: self.out.clone(),
        }
    }

    pub(crate) fn install_svd(&mut self, address: LayerAddress, rank: usize) -> Result<()> {
        let k = self.config.kernel_size;
        let unit = self
            .unit_mut(address)
            .ok_or_else(|| Error::invalid(format!("no conv layer at {address}")))?;
        let ConvParams::Plain { weight, bias } = unit.params else {
            return Err(Error::invalid(format!("layer {address} is already factorized")));
        };
        let shape = self.params.get(weight).value().shape().to_vec();
        let (c_out, c_in, kk) = (shape[0], shape[1], shape[2]);
        debug_assert!(kk == k || kk == 1);
        self.params.replace(weight, format!("{address}.v"), Tensor::zeros([rank, c_in, kk, kk]), false);
        let u = self.params.add(format!("{address}.u"), Tensor::zeros([c_out, rank, 1, 1]), false);
        let s = self.params.add(format!("{address}.s"), Tensor::zeros([rank]), true);
        self.params.get_mut(bias).set_trainable(false);
        self.unit_mut(address).expect("exists").params = ConvParams::Svd {
            u,
            s,
            v: weight,
            bias,
            initial_s: Vec::new(),
        };
        Ok(())
    }

    pub(crate) fn set_initial_s(&mut self, address: LayerAddress, values: Vec<f64>) {
        if let Some(unit) = self.unit_mut(address) {
            if let ConvParams::Svd { initial_s, .. } = &mut unit.params {
                *initial_s = values;
            }
        }
    }

    pub(crate) fn factorized_layers(&self) -> Vec<(LayerAddress, usize)> {
        self.units()
            .iter()
            .filter_map(|u| match &u.params {
                ConvParams::Svd { s, .. } => Some((u.address, self.params.get(*s).value().len())),
                ConvParams::Plain { .. } => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> UNetConfig {
        UNetConfig {
            channels: vec![4, 6, 8],
            skip_channels: vec![2, 0],
            kernel_size: 3,
            leaky_slope: 0.2,
            output: OutputActivation::Sigmoid,
            norm_groups: 4,
        }
    }

    fn input(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, n, n], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn shapes_and_range() {
        let net = UNet::<f64>::build(&small(), 1).unwrap();
        let y = net.predict(&input(16, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 16, 16]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(net.predict(&input(10, 2)).is_err());
        let flat = net.predict(&input(8, 2).reshape([8, 8]).unwrap()).unwrap();
        assert_eq!(flat.shape(), &[1, 8, 8]);
    }

    #[test]
    fn deterministic_build_and_forward() {
        let a = UNet::<f32>::build(&UNetConfig::desk(), 5).unwrap();
        let b = UNet::<f32>::build(&UNetConfig::desk(), 5).unwrap();
        for ((_, p), (_, q)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(p.value(), q.value());
        }
        let z = input(16, 3).cast::<f32>();
        assert_eq!(a.predict(&z).unwrap(), a.predict(&z).unwrap());
        let c = UNet::<f32>::build(&UNetConfig::desk(), 6).unwrap();
        assert_ne!(a.params().get(ParamId(0)).value(), c.params().get(ParamId(0)).value());
    }

    #[test]
    fn zero_output_gives_activation_of_zero() {
        let mut net = UNet::<f64>::build(&small(), 1).unwrap();
        net.zero_output_layer();
        let y = net.predict(&input(8, 4)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
        let mut cfg = small();
        cfg.output = OutputActivation::Linear;
        let mut lin = UNet::<f64>::build(&cfg, 1).unwrap();
        lin.zero_output_layer();
        assert!(lin.predict(&input(8, 4)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation_and_text() {
        let mut bad = small();
        bad.kernel_size = 2;
        assert!(UNet::<f64>::build(&bad, 0).is_err());
        bad = small();
        bad.skip_channels = vec![1];
        assert!(bad.validate().is_err());
        let cfg = small();
        assert_eq!(UNetConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.hash(), small().hash());
        assert_ne!(cfg.hash(), UNetConfig::desk().hash());
        assert_eq!(UNetConfig::desk().groups_for(32), 32);
        let mut g = small();
        g.norm_groups = 32;
        assert_eq!(g.groups_for(36), 18);
        assert_eq!(g.groups_for(6), 6);
    }

    #[test]
    fn addresses_resolve() {
        let net = UNet::<f64>::build(&small(), 1).unwrap();
        let all = net.addresses();
        assert_eq!(all.len(), 3 * 2 + 2 * 2 + 1 + 1);
        assert!(all.contains(&LayerAddress::parse("skip.0.0").unwrap()));
        assert!(!all.contains(&LayerAddress::new(BlockKind::Skip, 1, 0)));
        let sel = LayerSelection::parse("skip-first-2-down").unwrap().resolve(&net);
        assert_eq!(sel.len(), 2 + 4);
        assert_eq!(LayerSelection::parse("all").unwrap().resolve(&net).len(), 10);
        let list = LayerSelection::parse("down.1.0,up.0.1").unwrap();
        assert_eq!(LayerSelection::parse(&list.to_text()).unwrap(), list);
        assert!(LayerAddress::parse("side.0.0").is_err());
    }

    #[test]
    fn replacement_preserves_function_and_partitions_params() {
        let mut net = UNet::<f64>::build(&small(), 7).unwrap();
        let z = input(16, 8);
        let before = net.predict(&z).unwrap();
        let addrs = LayerSelection::AllBlocks.resolve(&net);
        net.replace_with_svd(&addrs, TruncationPolicy::None).unwrap();
        net.set_trainability(Trainability::SINGULAR_VALUES_ONLY);
        let after = net.predict(&z).unwrap();
        assert!(before.max_abs_diff(&after).unwrap() < 1e-9);
        assert_eq!(net.trainable_count(), net.active_rank());
        let trainable = net.trainable_ids();
        assert!(trainable.iter().all(|id| net.params().get(*id).name().ends_with(".s")));
        assert_eq!(trainable.len() + net.params().frozen_ids().len(), net.params().len());
        assert!(net.replace_with_svd(&addrs[..1], TruncationPolicy::None).is_err());
        assert!(net
            .replace_with_svd(&[LayerAddress::new(BlockKind::Down, 9, 0)], TruncationPolicy::None)
            .is_err());
        let trace = net.singular_values(addrs[0]).unwrap();
        assert_eq!(trace.initial, trace.current);
        assert!(net.singular_values(LayerAddress::new(BlockKind::Out, 0, 0)).is_err());
    }

    #[test]
    fn truncated_trace_has_active_rank_only() {
        let mut net = UNet::<f64>::build(&small(), 7).unwrap();
        let a = LayerAddress::new(BlockKind::Down, 2, 1);
        net.replace_with_svd(&[a], TruncationPolicy::RankFraction(0.5)).unwrap();
        assert_eq!(net.singular_values(a).unwrap().current.len(), 4);
    }
}
