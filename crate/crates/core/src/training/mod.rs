//! Supervised pretraining of the FBP post-processor and the DIP fine-tuning loop.

pub mod metrics;

pub use metrics::{
    aggregate, aggregate_traces, summarize, Aggregate, IterationRecord, RunMetrics, Summary, TracePoint,
};

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Adam, LinearMap, Tape};
use crate::ct::{generate_ellipses, measure, CtOperator, NoiseModel, RampFilter, Sinogram};
use crate::error::{Error, Result};
use crate::losses::{psnr, DataTerm, Objective};
use crate::model::{save_checkpoint, LayerAddress, LayerSelection, SingularValueTrace, Trainability, UNet, UNetConfig};
use crate::svd::TruncationPolicy;
use crate::tensor::{Real, Tensor};

/// Metrics are written to disk at least this often.
pub const FLUSH_EVERY: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub dataset_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub max_ellipses: usize,
    pub noise: NoiseModel,
    pub filter: RampFilter,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            dataset_size: 200,
            epochs: 20,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
            max_ellipses: 12,
            noise: NoiseModel::Gaussian { rel_level: 0.05 },
            filter: RampFilter::RamLak,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset_size == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("dataset size, epochs and batch size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if self.max_ellipses == 0 {
            return Err(Error::invalid("max_ellipses must be >= 1"));
        }
        Ok(())
    }
}

/// One training pair: network input and target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub phantom: Tensor<f64>,
    pub sinogram: Sinogram,
    pub fbp: Tensor<f64>,
}

/// Draws a phantom, measures it and reconstructs it; fully determined by `seed`.
pub fn make_sample(
    op: &CtOperator,
    noise: NoiseModel,
    filter: RampFilter,
    max_ellipses: usize,
    seed: u64,
) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phantom = generate_ellipses(op.n_px(), max_ellipses, rng.random())?;
    let sinogram = measure(op, &phantom, noise, rng.random())?;
    let fbp = op.reconstruct(&sinogram.data, filter)?;
    Ok(Sample {
        phantom,
        sinogram,
        fbp,
    })
}

/// Per-sample seeds of the training set.
pub fn dataset_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random()).collect()
}

/// A seed disjoint from the training stream of `seed`.
pub fn holdout_seed(seed: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng.random()
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub net: UNet<f32>,
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

impl PretrainOutcome {
    pub fn loss_csv(&self, steps_per_epoch: usize) -> String {
        let mut s = String::from("step,epoch,loss\n");
        for (i, l) in self.step_losses.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{l}", i / steps_per_epoch.max(1));
        }
        s
    }
}

fn mse_step(net: &mut UNet<f32>, batch: &[(Tensor<f32>, Tensor<f32>)]) -> Result<f64> {
    let mut total = 0.0;
    let inv = 1.0 / batch.len() as f32;
    for (input, target) in batch {
        let mut tape = Tape::trainable_only();
        let z = tape.constant(input.clone());
        let out = net.forward(&mut tape, z)?;
        let t = tape.constant(target.clone());
        let r = tape.sub(out, t)?;
        let sq = tape.mul(r, r)?;
        let loss = tape.mean(sq);
        total += tape.value(loss).item()?.to_f64();
        let scaled = tape.scale(loss, inv);
        tape.backward(scaled, net.params_mut())?;
    }
    Ok(total / batch.len() as f64)
}

/// Trains a freshly initialized U-Net to map FBPs of noisy data to phantoms.
///
/// With `checkpoint_dir` set, a checkpoint is written after every epoch; on a
/// non-finite loss the last one written is left in place.
pub fn pretrain(
    cfg: &PretrainConfig,
    model: &UNetConfig,
    op: &CtOperator,
    checkpoint_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let pairs = dataset_seeds(cfg.seed, cfg.dataset_size)
        .into_iter()
        .map(|s| {
            let sample = make_sample(op, cfg.noise, cfg.filter, cfg.max_ellipses, s)?;
            Ok((sample.fbp, sample.phantom))
        })
        .collect::<Result<Vec<_>>>()?;
    pretrain_on(cfg, model, &pairs, checkpoint_dir)
}

/// [`pretrain`] on given `(input, target)` image pairs; `dataset_size` is ignored.
pub fn pretrain_on(
    cfg: &PretrainConfig,
    model: &UNetConfig,
    pairs: &[(Tensor<f64>, Tensor<f64>)],
    checkpoint_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    let mut net = UNet::<f32>::build(model, cfg.seed)?;
    let data = pairs
        .iter()
        .map(|(input, target)| {
            let (h, w) = input.dims2()?;
            input.check_same_shape(target)?;
            Ok((input.reshape([1, h, w])?.cast(), target.reshape([1, h, w])?.cast()))
        })
        .collect::<Result<Vec<(Tensor<f32>, Tensor<f32>)>>>()?;

    let adam = Adam::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| data[i].clone()).collect();
            net.params_mut().zero_grad();
            let loss = mse_step(&mut net, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "pretraining loss became {loss} in epoch {epoch}"
                )));
            }
            adam.step(net.params_mut());
            step_losses.push(loss);
            sum += loss;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
        log::info!("pretrain epoch {epoch}: loss {:.6}", sum / batches as f64);
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(&net, dir)?;
        }
    }
    net.params_mut().zero_grad();
    Ok(PretrainOutcome {
        net,
        step_losses,
        epoch_losses,
    })
}

/// PSNR of the post-processed and of the raw FBP on one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldoutScore {
    pub network_psnr: f64,
    pub fbp_psnr: f64,
}

pub fn evaluate_postprocessor(
    net: &UNet<f32>,
    op: &CtOperator,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<HoldoutScore> {
    let n = op.n_px();
    let s = make_sample(op, cfg.noise, cfg.filter, cfg.max_ellipses, seed)?;
    let out = net.predict(&s.fbp.reshape([1, n, n])?.cast())?.cast::<f64>().into_reshaped([n, n])?;
    Ok(HoldoutScore {
        network_psnr: psnr(&out, &s.phantom, None)?,
        fbp_psnr: psnr(&s.fbp, &s.phantom, None)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Random initialization, noise input.
    Dip,
    /// Pretrained initialization, every parameter trained.
    Edip,
    /// Pretrained and factorized; singular values trained.
    SvdDip,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "dip" => Ok(Self::Dip),
            "edip" => Ok(Self::Edip),
            "svd-dip" => Ok(Self::SvdDip),
            other => Err(Error::invalid(format!("unknown variant {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Dip => "dip",
            Self::Edip => "edip",
            Self::SvdDip => "svd-dip",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        self != Self::Dip
    }

    pub fn default_input(self) -> InputSource {
        match self {
            Self::Dip => InputSource::Noise,
            _ => InputSource::Fbp,
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Self::SvdDip => 1e-3,
            _ => 1e-4,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSource {
    /// Fixed i.i.d. Gaussian image.
    Noise,
    /// Reconstruction of the measured data.
    Fbp,
}

impl InputSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "noise" => Ok(Self::Noise),
            "fbp" => Ok(Self::Fbp),
            other => Err(Error::invalid(format!("unknown input source {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Noise => "noise",
            Self::Fbp => "fbp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DipRunConfig {
    pub variant: Variant,
    pub input: InputSource,
    pub iterations: usize,
    pub lr: f64,
    pub gamma: f64,
    pub data_term: DataTerm,
    /// Layers factorized by svd-dip.
    pub selection: LayerSelection,
    pub truncation: TruncationPolicy,
    /// svd-dip: also train convs that were not factorized.
    pub train_unreplaced: bool,
    /// svd-dip: also train normalization affines.
    pub train_norms: bool,
    pub seed: u64,
    /// Standard deviation of the noise input.
    pub input_std: f64,
    pub filter: RampFilter,
    /// PSNR peak value; `None` uses the maximum of the ground truth.
    pub psnr_range: Option<f64>,
    /// Where metrics are flushed during the run.
    pub metrics_path: Option<PathBuf>,
}

impl DipRunConfig {
    /// Defaults for `variant`.
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            input: variant.default_input(),
            iterations: 5000,
            lr: variant.default_lr(),
            gamma: 1e-4,
            data_term: DataTerm::MeanSquared,
            selection: LayerSelection::AllBlocks,
            truncation: TruncationPolicy::None,
            train_unreplaced: false,
            train_norms: false,
            seed: 0,
            input_std: 0.1,
            filter: RampFilter::RamLak,
            psnr_range: None,
            metrics_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.input_std > 0.0 && self.input_std.is_finite()) {
            return Err(Error::invalid(format!("input std {} must be positive", self.input_std)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma {} must be finite and >= 0", self.gamma)));
        }
        self.truncation.validate()
    }
}

#[derive(Debug, Clone)]
pub struct DipOutcome<T: Real> {
    /// Last iterate, `[n, n]`.
    pub reconstruction: Tensor<f64>,
    pub metrics: RunMetrics,
    pub net: UNet<T>,
    /// Trainable scalars at the start of the run.
    pub trainable_count: usize,
}

/// Gaussian input image with the given standard deviation.
pub fn noise_input<T: Real>(n: usize, std: f64, seed: u64) -> Result<Tensor<T>> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    Ok(Tensor::from_fn([1, n, n], |_| T::from_f64(normal.sample(&mut rng))))
}

/// Prepares the network of a run: fresh for dip, copied and adapted otherwise.
pub fn prepare_network<T: Real>(
    cfg: &DipRunConfig,
    model: &UNetConfig,
    checkpoint: Option<&UNet<T>>,
) -> Result<UNet<T>> {
    let mut net = match (cfg.variant, checkpoint) {
        (Variant::Dip, _) => UNet::build(model, cfg.seed)?,
        (_, Some(c)) => c.clone(),
        (v, None) => return Err(Error::invalid(format!("variant {v} needs a pretrained checkpoint"))),
    };
    for p in net.params_mut().iter_mut() {
        p.zero_grad();
        p.reset_optimizer_state();
    }
    match cfg.variant {
        Variant::Dip | Variant::Edip => net.params_mut().set_all_trainable(true),
        Variant::SvdDip => {
            let addrs = cfg.selection.resolve(&net);
            net.replace_with_svd(&addrs, cfg.truncation)?;
            net.set_trainability(Trainability {
                plain_convs: cfg.train_unreplaced,
                norms: cfg.train_norms,
                singular_values: true,
            });
        }
    }
    Ok(net)
}

/// Fits the network output to `y` under the regularized objective.
///
/// Records iterations `0..=iterations`, where record `k` describes the output
/// after `k` optimizer steps. The returned reconstruction is the last iterate.
pub fn run_dip<T: Real>(
    cfg: &DipRunConfig,
    model: &UNetConfig,
    y: &Sinogram,
    op: Arc<CtOperator>,
    x_gt: Option<&Tensor<f64>>,
    checkpoint: Option<&UNet<T>>,
) -> Result<DipOutcome<T>> {
    cfg.validate()?;
    let n = op.n_px();
    if let Some(gt) = x_gt {
        if gt.len() != n * n {
            return Err(Error::invalid(format!("ground truth {:?} is not {n}x{n}", gt.shape())));
        }
    }
    let gt = x_gt.map(|g| g.reshape([n, n])).transpose()?;
    let mut net = prepare_network(cfg, model, checkpoint)?;
    let trainable_count = net.trainable_count();
    let z: Tensor<T> = match cfg.input {
        InputSource::Noise => noise_input(n, cfg.input_std, cfg.seed)?,
        InputSource::Fbp => op.reconstruct(&y.data, cfg.filter)?.reshape([1, n, n])?.cast(),
    };
    let map: Arc<dyn LinearMap<T>> = op.clone();
    let objective = Objective::new(cfg.data_term, cfg.gamma, map, y.data.cast())?;
    let adam = Adam::with_lr(cfg.lr);
    let mut metrics = RunMetrics::default();
    let mut last = Tensor::zeros([n, n]);

    for it in 0..=cfg.iterations {
        let mut tape = Tape::trainable_only();
        let zv = tape.constant(z.clone());
        let out = net.forward(&mut tape, zv)?;
        let (loss, value) = objective.record(&mut tape, out)?;
        last = tape.value(out).cast::<f64>().into_reshaped([n, n])?;
        let psnr = gt.as_ref().map(|g| psnr(&last, g, cfg.psnr_range)).transpose()?;
        metrics.push(IterationRecord {
            iteration: it,
            objective: value.total,
            data_term: value.data,
            tv: value.tv,
            psnr,
        })?;
        if !value.total.is_finite() {
            flush(cfg, &metrics)?;
            return Err(Error::Diverged {
                iteration: it,
                metrics: Box::new(metrics),
            });
        }
        if it % FLUSH_EVERY == 0 {
            flush(cfg, &metrics)?;
        }
        if it == cfg.iterations {
            break;
        }
        net.params_mut().zero_grad();
        tape.backward(loss, net.params_mut())?;
        adam.step(net.params_mut());
    }
    flush(cfg, &metrics)?;
    net.params_mut().zero_grad();
    Ok(DipOutcome {
        reconstruction: last,
        metrics,
        net,
        trainable_count,
    })
}

fn flush(cfg: &DipRunConfig, metrics: &RunMetrics) -> Result<()> {
    match &cfg.metrics_path {
        Some(p) => metrics.write_csv(p),
        None => Ok(()),
    }
}

/// Singular values of the given factorized layers, in descending-index order.
pub fn trace_singular_values<T: Real>(net: &UNet<T>, addresses: &[LayerAddress]) -> Result<Vec<SingularValueTrace>> {
    addresses.iter().map(|&a| net.singular_values(a)).collect()
}

/// CSV with header `layer,index,initial,current`.
pub fn singular_value_csv(traces: &[SingularValueTrace]) -> String {
    let mut s = String::from("layer,index,initial,current\n");
    for t in traces {
        for (i, (a, b)) in t.initial.iter().zip(&t.current).enumerate() {
            let _ = writeln!(s, "{},{i},{a},{b}", t.address);
        }
    }
    s
}
