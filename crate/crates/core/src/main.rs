use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use svddip::config::RunSpec;
use svddip::error::{Error, Result};
use svddip::model::{load_checkpoint, save_checkpoint};
use svddip::tensor::{read_tensor_file, write_tensor_file, Tensor};
use svddip::training::{
    aggregate, aggregate_traces, dataset_seeds, evaluate_postprocessor, holdout_seed, make_sample,
    pretrain, pretrain_on, run_dip, singular_value_csv, summarize, trace_singular_values, RunMetrics, Summary,
    Variant,
};

#[derive(Parser)]
#[command(name = "svddip", version, about = "Deep-image-prior CT reconstruction with SVD-adapted fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write phantoms, clean and noisy sinograms and FBPs.
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the FBP post-processing U-Net.
    Pretrain {
        #[arg(long)]
        spec: Option<PathBuf>,
        /// A gen-data directory; without it pairs are generated on the fly.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run DIP, EDIP or SVD-DIP on one sinogram.
    Reconstruct {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        variant: String,
        #[arg(long)]
        sino: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate run directories into mean/SD tables.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { spec, out, count, seed } => gen_data(spec.as_deref(), &out, count, seed),
        Command::Pretrain { spec, data, out } => cmd_pretrain(spec.as_deref(), data.as_deref(), &out),
        Command::Reconstruct {
            spec,
            variant,
            sino,
            checkpoint,
            gt,
            out,
            seed,
        } => reconstruct(spec.as_deref(), &variant, &sino, checkpoint.as_deref(), gt.as_deref(), &out, seed),
        Command::Compare { runs, out } => compare(&runs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 2,
        Error::NumericalFailure(_) | Error::Diverged { .. } => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
    }
}

fn load_spec(path: Option<&Path>) -> Result<RunSpec> {
    match path {
        Some(p) => RunSpec::load(p),
        None => Ok(RunSpec::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// 16-bit binary PGM of `image` clipped to [0, 1].
fn write_pgm(path: &Path, image: &Tensor<f64>) -> Result<()> {
    let (h, w) = image.dims2()?;
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    write(path, bytes)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn load_image(path: &Path) -> Result<Tensor<f64>> {
    Ok(read_tensor_file(path)?.into_tensor::<f64>())
}

fn gen_data(spec_path: Option<&Path>, out: &Path, count: usize, seed: u64) -> Result<()> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be >= 1".into()));
    }
    let spec = load_spec(spec_path)?;
    let op = spec.operator()?;
    create_dir(out)?;
    write(&out.join("spec.txt"), spec.to_text())?;
    let mut manifest = format!("noise {}\ncount {count}\nseed {seed}\n", spec.noise);
    for (i, s) in dataset_seeds(seed, count).into_iter().enumerate() {
        let dir = out.join(format!("sample_{i:04}"));
        create_dir(&dir)?;
        let sample = make_sample(&op, spec.noise, spec.geometry.filter, spec.pretrain.max_ellipses, s)?;
        let (phantom, noisy, fbp) = (sample.phantom, sample.sinogram, sample.fbp);
        let clean = op.forward(&phantom)?;
        for (name, t) in [("phantom", &phantom), ("clean", &clean), ("noisy", &noisy.data), ("fbp", &fbp)] {
            let path = dir.join(format!("{name}.tensor"));
            write_tensor_file(&path, t)?;
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let _ = writeln!(manifest, "file sample_{i:04}/{name}.tensor {}", hex(&Sha256::digest(&bytes)));
        }
        if spec.output.pgm {
            write_pgm(&dir.join("phantom.pgm"), &phantom)?;
            write_pgm(&dir.join("fbp.pgm"), &fbp)?;
        }
    }
    let hash = hex(&Sha256::digest(manifest.as_bytes()));
    write(&out.join("manifest.txt"), format!("{manifest}manifest_hash {hash}\n"))?;
    println!("{hash}");
    Ok(())
}

fn sample_dirs(data: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(data)
        .map_err(|e| Error::io(data, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("sample_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no sample directories", data.display())));
    }
    Ok(dirs)
}

fn cmd_pretrain(spec_path: Option<&Path>, data: Option<&Path>, out: &Path) -> Result<()> {
    let spec = load_spec(spec_path)?;
    let op = spec.operator()?;
    create_dir(out)?;
    write(&out.join("spec.txt"), spec.to_text())?;
    let ckpt = out.join("checkpoint");
    let cfg = &spec.pretrain;
    let outcome = match data {
        Some(d) => {
            let pairs = sample_dirs(d)?
                .iter()
                .map(|s| Ok((load_image(&s.join("fbp.tensor"))?, load_image(&s.join("phantom.tensor"))?)))
                .collect::<Result<Vec<_>>>()?;
            pretrain_on(cfg, &spec.model, &pairs, Some(&ckpt))?
        }
        None => pretrain(cfg, &spec.model, &op, Some(&ckpt))?,
    };
    let steps = outcome.step_losses.len() / outcome.epoch_losses.len().max(1);
    write(&out.join("loss.csv"), outcome.loss_csv(steps))?;
    save_checkpoint(&outcome.net, &ckpt)?;
    let score = evaluate_postprocessor(&outcome.net, &op, cfg, holdout_seed(cfg.seed))?;
    println!(
        "hold-out PSNR: network {:.3} dB, FBP {:.3} dB",
        score.network_psnr, score.fbp_psnr
    );
    Ok(())
}

fn reconstruct(
    spec_path: Option<&Path>,
    variant: &str,
    sino: &Path,
    checkpoint: Option<&Path>,
    gt: Option<&Path>,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let spec = load_spec(spec_path)?;
    let variant = Variant::parse(variant)?;
    let checkpoint = match (variant, checkpoint) {
        (Variant::Dip, Some(_)) => {
            log::warn!("variant dip starts from random weights; ignoring --checkpoint");
            None
        }
        (v, None) if v.needs_checkpoint() => {
            return Err(Error::InvalidArgument(format!("variant {v} requires --checkpoint")));
        }
        (_, c) => c,
    };
    let net = checkpoint.map(load_checkpoint::<f32>).transpose()?;
    if let Some(n) = &net {
        if n.config() != &spec.model {
            return Err(Error::InvalidArgument(format!(
                "checkpoint model ({}) does not match spec model ({})",
                n.config().to_text(),
                spec.model.to_text()
            )));
        }
    }
    let op = spec.operator()?;
    let y = svddip::ct::Sinogram {
        data: load_image(sino)?,
        noise: spec.noise,
    };
    let x_gt = gt.map(load_image).transpose()?;
    create_dir(out)?;
    write(&out.join("spec.txt"), spec.to_text())?;
    write(&out.join("run.txt"), format!("variant {variant}\nseed {seed}\n"))?;
    let mut cfg = spec.dip_config(variant, seed)?;
    cfg.metrics_path = Some(out.join("metrics.csv"));
    let outcome = run_dip(&cfg, &spec.model, &y, op, x_gt.as_ref(), net.as_ref())?;
    write_tensor_file(out.join("reconstruction.tensor"), &outcome.reconstruction)?;
    if spec.output.pgm {
        write_pgm(&out.join("reconstruction.pgm"), &outcome.reconstruction)?;
    }
    if x_gt.is_some() {
        let s = summarize(&outcome.metrics)?;
        write(&out.join("summary.csv"), s.to_csv())?;
        println!(
            "{variant}: Final {:.3} dB, Max {:.3} dB (iteration {}), Init {:.3} dB",
            s.final_psnr, s.max_psnr, s.max_iteration, s.init_psnr
        );
    }
    if variant == Variant::SvdDip {
        let addrs = cfg.selection.resolve(&outcome.net);
        let traces = trace_singular_values(&outcome.net, &addrs)?;
        write(&out.join("singular_values.csv"), singular_value_csv(&traces))?;
    }
    Ok(())
}

fn run_variant(dir: &Path) -> Result<String> {
    let path = dir.join("run.txt");
    match fs::read_to_string(&path) {
        Ok(text) => Ok(text
            .lines()
            .find_map(|l| l.strip_prefix("variant "))
            .unwrap_or("run")
            .trim()
            .to_string()),
        Err(_) => Ok("run".into()),
    }
}

fn compare(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut groups: BTreeMap<String, Vec<RunMetrics>> = BTreeMap::new();
    for dir in runs {
        let metrics = RunMetrics::read_csv(dir.join("metrics.csv"))?;
        groups.entry(run_variant(dir)?).or_default().push(metrics);
    }
    create_dir(out)?;
    let mut summary = String::from("variant,runs,statistic,Final,Max,MaxIteration,Init,MaxMinusFinal,FinalMinusInit\n");
    let mut traces = Vec::new();
    for (variant, metrics) in &groups {
        let sums: Vec<Summary> = metrics.iter().map(summarize).collect::<Result<_>>()?;
        let agg = aggregate(&sums)?;
        for (label, row) in [("mean", agg.mean), ("sd", agg.sd)] {
            let cols: Vec<String> = row.iter().map(f64::to_string).collect();
            let _ = writeln!(summary, "{variant},{},{label},{}", agg.runs, cols.join(","));
        }
        traces.push((variant, aggregate_traces(metrics)?));
    }
    let grid: Vec<usize> = traces[0].1.iter().map(|p| p.iteration).collect();
    for (variant, t) in &traces {
        if t.iter().map(|p| p.iteration).ne(grid.iter().copied()) {
            return Err(Error::InvalidArgument(format!(
                "variant {variant} uses a different iteration grid"
            )));
        }
    }
    let mut trace = String::from("iteration");
    for (v, _) in &traces {
        let _ = write!(trace, ",mean_psnr_{v},sd_psnr_{v},mean_tv_{v},sd_tv_{v}");
    }
    trace.push('\n');
    for (i, it) in grid.iter().enumerate() {
        let _ = write!(trace, "{it}");
        for (_, t) in &traces {
            let p = t[i];
            let _ = write!(trace, ",{},{},{},{}", p.mean_psnr, p.sd_psnr, p.mean_tv, p.sd_tv);
        }
        trace.push('\n');
    }
    write(&out.join("summary.csv"), summary)?;
    write(&out.join("trace.csv"), trace)?;
    Ok(())
}
