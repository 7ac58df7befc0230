//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 2 3`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use svddip::ct::{
    add_gaussian_noise, disk, simulate_poisson_prelog, CountMode, CtOperator, GeometryPreset, NoiseModel,
    ParallelGeometry, RampFilter, Sinogram, SparseMatrix, MU_MAX,
};
use svddip::losses::psnr;
use svddip::model::{OutputActivation, UNet, UNetConfig};
use svddip::svd::{count_trainable_raw, count_trainable_svd, factorize_conv, TruncationPolicy};
use svddip::tensor::Tensor;
use svddip::training::metrics::METRICS_HEADER;
use svddip::training::{
    evaluate_postprocessor, holdout_seed, make_sample, pretrain, run_dip, summarize, DipRunConfig, PretrainConfig,
    RunMetrics, Sample, Summary, Variant,
};

type Check = Result<String, String>;

fn ensure(cond: bool, detail: String) -> Check {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

/// Plain loop convolution with zero padding.
fn reference_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (c_in, h, wd) = x.dims3().unwrap();
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = b[o];
                for c in 0..c_in {
                    for ki in 0..k {
                        for kj in 0..k {
                            let (r, s) = ((i * stride + ki) as isize - pad as isize, (j * stride + kj) as isize - pad as isize);
                            if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < wd {
                                acc += w.data()[((o * c_in + c) * k + ki) * k + kj]
                                    * x.data()[(c * h + r as usize) * wd + s as usize];
                            }
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c_out = rng.random_range(1..=6);
        let c_in = rng.random_range(1..=6);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let (h, w) = (rng.random_range(k..=9), rng.random_range(k..=9));
        let weight = normal_tensor(&[c_out, c_in, k, k], &mut rng);
        let bias = normal_tensor(&[c_out], &mut rng);
        let x = normal_tensor(&[c_in, h, w], &mut rng);
        let pad = k / 2;
        let factors = factorize_conv::<f64>(&weight, TruncationPolicy::None).map_err(|e| e.to_string())?;
        let composed = factors.conv2d(&x, Some(&bias), stride, pad).map_err(|e| e.to_string())?;
        let direct = x.conv2d(&weight, Some(&bias), stride, pad).map_err(|e| e.to_string())?;
        let oracle = reference_conv(&x, &weight, bias.data(), stride, pad);
        worst = worst.max(max_abs_diff(composed.data(), direct.data()));
        worst = worst.max(max_abs_diff(composed.data(), &oracle));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst < 1e-9 && secs < 10.0,
        format!("100 instances, max abs error {worst:.2e} (< 1e-9), {secs:.2} s (< 10 s)"),
    )
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut parts = Vec::new();
    let mut pass = true;
    for output in [OutputActivation::Sigmoid, OutputActivation::Linear] {
        let model = UNetConfig {
            output,
            ..UNetConfig::desk()
        };
        let net = UNet::<f32>::build(&model, 2).map_err(|e| e.to_string())?;
        let mut factored = net.clone();
        let addrs = factored.addresses();
        factored.replace_with_svd(&addrs, TruncationPolicy::None).map_err(|e| e.to_string())?;
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let z = Tensor::<f32>::from_fn([1, 64, 64], |_| rng.random_range(0.0..1.0));
            let a = net.predict(&z).map_err(|e| e.to_string())?;
            let b = factored.predict(&z).map_err(|e| e.to_string())?;
            let d = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max);
            worst = worst.max(d);
        }
        pass &= worst < 1e-4;
        parts.push(format!("{} output max abs diff {worst:.2e}", output.name()));
    }
    ensure(pass, format!("{} over 10 inputs each (< 1e-4)", parts.join(", ")))
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = normal_tensor(&[128, 128, 3, 3], &mut rng);
    let raw = count_trainable_raw(w.shape());
    let factors = factorize_conv::<f64>(&w, TruncationPolicy::None).map_err(|e| e.to_string())?;
    let svd = count_trainable_svd(&factors);
    ensure(
        raw == 147456 && svd == 128,
        format!("raw {raw} (expect 147456), after replacement {svd} (expect 128), ratio {}", raw / svd.max(1)),
    )
}

fn criterion_4() -> Check {
    let start = Instant::now();
    let cases = common::all_cases(4);
    let mut worst = (String::new(), 0.0f64);
    let mut failures = Vec::new();
    for case in &cases {
        let err = common::max_relative_error(case, 20, 40);
        if !(err < 1e-5) {
            failures.push(format!("{} {err:.2e}", case.name));
        }
        if err > worst.1 {
            worst = (case.name.clone(), err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        failures.is_empty() && secs < 60.0,
        format!(
            "{} ops and losses x 20 probes, worst relative error {:.2e} ({}), {secs:.2} s (< 60 s){}",
            cases.len(),
            worst.1,
            worst.0,
            if failures.is_empty() { String::new() } else { format!(", failing: {failures:?}") }
        ),
    )
}

fn criterion_5() -> Check {
    const SAMPLES: usize = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clean = Tensor::from_fn([1000, 1000], |_| rng.random_range(0.0..2.0));
    let rel = 0.05;
    let target = rel * clean.abs().mean();
    let noisy = add_gaussian_noise(&Sinogram::clean(clean.clone()), rel, 17).map_err(|e| e.to_string())?;
    let resid: Vec<f64> = noisy.data.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
    let (_, var) = mean_var(&resid);
    let sigma_err = (var.sqrt() / target - 1.0).abs();

    let identity = SparseMatrix::identity(SAMPLES).map_err(|e| e.to_string())?;
    let photons = 4096.0;
    let zeros = Tensor::zeros([SAMPLES]);
    let y = simulate_poisson_prelog(&zeros, &identity, photons, MU_MAX, CountMode::Sampled { seed: 23 })
        .map_err(|e| e.to_string())?;
    let counts: Vec<f64> = y.data.data().iter().map(|&v| (photons * (-v * MU_MAX).exp()).round()).collect();
    let (count_mean, count_var) = mean_var(&counts);
    let var_err = (count_var / photons - 1.0).abs();
    ensure(
        sigma_err < 0.01 && var_err < 0.02,
        format!(
            "gaussian sigma relative error {:.3}% (< 1%), poisson count mean {count_mean:.1}, variance {count_var:.1} relative error {:.3}% (< 2%)",
            100.0 * sigma_err,
            100.0 * var_err
        ),
    )
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

fn criterion_8() -> Check {
    let geom = ParallelGeometry::uniform(180, 95, 64).map_err(|e| e.to_string())?;
    let op = CtOperator::parallel(geom).map_err(|e| e.to_string())?;
    let x = disk(64, 24.0, 1.0);
    let y = op.forward(&x).map_err(|e| e.to_string())?;
    let rec = op.reconstruct(&y, RampFilter::RamLak).map_err(|e| e.to_string())?;
    let p = psnr(&rec, &x, Some(1.0)).map_err(|e| e.to_string())?;
    ensure(p > 25.0, format!("disk radius 24 px, 180 angles, Ram-Lak FBP PSNR {p:.2} dB (> 25 dB)"))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_svddip")
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin()).args(args).env("RUST_LOG", "warn").output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("svddip {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn criterion_9() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let spec = root.join("spec.txt");
    fs::write(
        &spec,
        "[model]\nchannels = 8,8\nskip = 2\nnorm_groups = 8\n\n[dip]\niterations = 12\n\n[output]\npgm = false\n",
    )
    .map_err(|e| e.to_string())?;
    let data = root.join("data");
    cli(&["gen-data", "--spec", &s(&spec), "--out", &s(&data), "--count", "1", "--seed", "9"])?;
    let sample = data.join("sample_0000");
    let mut run_dirs = Vec::new();
    for seed in ["0", "1"] {
        let out = root.join(format!("run{seed}"));
        cli(&[
            "reconstruct",
            "--spec",
            &s(&spec),
            "--variant",
            "dip",
            "--sino",
            &s(&sample.join("noisy.tensor")),
            "--gt",
            &s(&sample.join("phantom.tensor")),
            "--out",
            &s(&out),
            "--seed",
            seed,
        ])?;
        let metrics = RunMetrics::read_csv(out.join("metrics.csv")).map_err(|e| e.to_string())?;
        let text = fs::read_to_string(out.join("metrics.csv")).map_err(|e| e.to_string())?;
        if !text.starts_with(METRICS_HEADER) {
            return Err(format!("metrics header {:?}", text.lines().next()));
        }
        let per_iteration = metrics.records.iter().map(|r| r.iteration).eq(0..=12);
        if !per_iteration || metrics.records.iter().any(|r| !r.tv.is_finite()) {
            return Err("metrics lack a finite TV value for every iteration".into());
        }
        run_dirs.push(s(&out));
    }
    let cmp = root.join("cmp");
    let mut args = vec!["compare".to_string(), "--runs".into()];
    args.extend(run_dirs);
    args.extend(["--out".into(), s(&cmp)]);
    cli(&args.iter().map(String::as_str).collect::<Vec<_>>())?;
    let trace = fs::read_to_string(cmp.join("trace.csv")).map_err(|e| e.to_string())?;
    let header = trace.lines().next().unwrap_or_default();
    let expected = "iteration,mean_psnr_dip,sd_psnr_dip,mean_tv_dip,sd_tv_dip";
    let rows = trace.lines().skip(1).count();
    ensure(
        header == expected && rows == 13,
        format!("every run logs TV per iteration; compare trace header {header:?}, {rows} rows (expect 13)"),
    )
}

const RUN_SEEDS: usize = 3;
const ITERATIONS: usize = 5000;

/// Pretrained network, test problems and cached runs shared by criteria 6, 7 and 10.
struct Experiment {
    op: Arc<CtOperator>,
    model: UNetConfig,
    net: UNet<f32>,
    samples: Vec<Sample>,
    runs: BTreeMap<String, (Summary, String)>,
    out_dir: PathBuf,
}

/// Test images come from their own seed stream, disjoint from pretraining and hold-out data.
fn test_image_seed(k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
    rng.set_stream(4);
    rng.random()
}

fn run_config(variant: Variant, seed: usize, truncation: TruncationPolicy) -> DipRunConfig {
    let mut cfg = DipRunConfig::new(variant);
    cfg.iterations = ITERATIONS;
    cfg.seed = seed as u64;
    cfg.truncation = truncation;
    cfg
}

impl Experiment {
    fn new() -> Result<Self, String> {
        let start = Instant::now();
        let op = Arc::new(
            CtOperator::parallel(GeometryPreset::Desk.parallel().map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?,
        );
        let model = UNetConfig::desk();
        let cfg = PretrainConfig::default();
        assert_eq!(cfg.noise, NoiseModel::Gaussian { rel_level: 0.05 });
        let outcome = pretrain(&cfg, &model, &op, None).map_err(|e| e.to_string())?;
        let score = evaluate_postprocessor(&outcome.net, &op, &cfg, holdout_seed(cfg.seed)).map_err(|e| e.to_string())?;
        println!(
            "  pretraining: {} samples x {} epochs in {:.0} s; hold-out PSNR {:.2} dB (FBP {:.2} dB)",
            cfg.dataset_size,
            cfg.epochs,
            start.elapsed().as_secs_f64(),
            score.network_psnr,
            score.fbp_psnr
        );
        let samples = (0..RUN_SEEDS)
            .map(|k| make_sample(&op, cfg.noise, cfg.filter, cfg.max_ellipses, test_image_seed(k)))
            .collect::<svddip::error::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let out_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        fs::create_dir_all(&out_dir).map_err(|e| e.to_string())?;
        Ok(Self {
            op,
            model,
            net: outcome.net,
            samples,
            runs: BTreeMap::new(),
            out_dir,
        })
    }

    /// Runs one configuration; returns its summary and metrics CSV text.
    fn execute(&self, variant: Variant, seed: usize, truncation: TruncationPolicy) -> Result<(Summary, String), String> {
        let start = Instant::now();
        let cfg = run_config(variant, seed, truncation);
        let sample = &self.samples[seed];
        let ckpt = (variant != Variant::Dip).then_some(&self.net);
        let outcome = run_dip(&cfg, &self.model, &sample.sinogram, self.op.clone(), Some(&sample.phantom), ckpt)
            .map_err(|e| e.to_string())?;
        let summary = summarize(&outcome.metrics).map_err(|e| e.to_string())?;
        println!(
            "  run {variant} seed {seed} truncation {truncation} lr {}: init {:.2} max {:.2} @ {} final {:.2} gap {:.3} dB ({:.0} s)",
            cfg.lr,
            summary.init_psnr,
            summary.max_psnr,
            summary.max_iteration,
            summary.final_psnr,
            summary.max_minus_final(),
            start.elapsed().as_secs_f64()
        );
        Ok((summary, outcome.metrics.to_csv()))
    }

    fn key(variant: Variant, seed: usize, truncation: TruncationPolicy) -> String {
        format!("{variant}_seed{seed}_{}", truncation.to_string().replace(' ', ""))
    }

    fn run(&mut self, variant: Variant, seed: usize, truncation: TruncationPolicy) -> Result<Summary, String> {
        let key = Self::key(variant, seed, truncation);
        if let Some((s, _)) = self.runs.get(&key) {
            return Ok(*s);
        }
        let (summary, csv) = self.execute(variant, seed, truncation)?;
        fs::write(self.out_dir.join(format!("{key}.csv")), &csv).map_err(|e| e.to_string())?;
        self.runs.insert(key, (summary, csv));
        Ok(summary)
    }

    fn means(&mut self, variant: Variant, truncation: TruncationPolicy) -> Result<(f64, f64), String> {
        let mut gap = 0.0;
        let mut fin = 0.0;
        for seed in 0..RUN_SEEDS {
            let s = self.run(variant, seed, truncation)?;
            gap += s.max_minus_final() / RUN_SEEDS as f64;
            fin += s.final_psnr / RUN_SEEDS as f64;
        }
        Ok((gap, fin))
    }
}

fn experiment(slot: &mut Option<Result<Experiment, String>>) -> Result<&mut Experiment, String> {
    slot.get_or_insert_with(Experiment::new).as_mut().map_err(|e| format!("pretraining failed: {e}"))
}

fn criterion_6(slot: &mut Option<Result<Experiment, String>>) -> Check {
    let exp = experiment(slot)?;
    let none = TruncationPolicy::None;
    let (svd_gap, svd_final) = exp.means(Variant::SvdDip, none)?;
    let (edip_gap, edip_final) = exp.means(Variant::Edip, none)?;
    let (dip_gap, dip_final) = exp.means(Variant::Dip, none)?;
    let a = svd_gap < 0.3;
    let b = svd_gap < dip_gap && svd_gap < edip_gap;
    let c = svd_final >= edip_final;
    let verdict = |ok: bool| if ok { "ok" } else { "violated" };
    ensure(
        a && b && c,
        format!(
            "mean gap (max - final): svd-dip {svd_gap:.3}, edip {edip_gap:.3}, dip {dip_gap:.3} dB; \
             mean final: svd-dip {svd_final:.2}, edip {edip_final:.2}, dip {dip_final:.2} dB; \
             (a) svd-dip gap < 0.3 {}, (b) svd-dip gap smallest {}, (c) svd-dip final >= edip final {}",
            verdict(a),
            verdict(b),
            verdict(c)
        ),
    )
}

fn criterion_7(slot: &mut Option<Result<Experiment, String>>) -> Check {
    let exp = experiment(slot)?;
    let (_, full) = exp.means(Variant::SvdDip, TruncationPolicy::None)?;
    let (_, half) = exp.means(Variant::SvdDip, TruncationPolicy::RankFraction(0.5))?;
    let diff = (full - half).abs();
    ensure(
        diff <= 1.0,
        format!("mean final PSNR untruncated {full:.2} dB, 50% rank {half:.2} dB, difference {diff:.3} dB (<= 1.0)"),
    )
}

fn criterion_10(slot: &mut Option<Result<Experiment, String>>) -> Check {
    let exp = experiment(slot)?;
    let none = TruncationPolicy::None;
    let mut lines = Vec::new();
    let mut pass = true;
    for variant in [Variant::Dip, Variant::Edip, Variant::SvdDip] {
        exp.run(variant, 0, none)?;
        let first = exp.runs[&Experiment::key(variant, 0, none)].1.clone();
        let (_, again) = exp.execute(variant, 0, none)?;
        let same = first.as_bytes() == again.as_bytes();
        pass &= same;
        lines.push(format!("{variant} {}", if same { "identical" } else { "DIFFERENT" }));
    }
    ensure(pass, format!("seed 0 rerun metrics CSVs: {}", lines.join(", ")))
}

const NAMES: [&str; 10] = [
    "SVD conv identity",
    "function preservation",
    "compression ratio",
    "gradient checks",
    "noise models",
    "stability experiment",
    "truncation equivalence",
    "FBP sanity",
    "TV trace logging",
    "determinism",
];

fn main() -> ExitCode {
    // Harness flags such as --nocapture are ignored; numeric arguments select criteria.
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut slot: Option<Result<Experiment, String>> = None;
    let mut failed = Vec::new();
    for n in 1..=10 {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(&mut slot),
            7 => criterion_7(&mut slot),
            8 => criterion_8(),
            9 => criterion_9(),
            _ => criterion_10(&mut slot),
        }))
        .unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {tag} [{}] {detail} ({secs:.1} s)", NAMES[n - 1]);
        if result.is_err() {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
