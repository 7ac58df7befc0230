//! Run configuration: a `key = value` document with `[section]` headers.
//!
//! Every key has a desk-scale default; unknown sections and keys are rejected.
//! [`RunSpec::to_text`] writes the fully resolved document back out.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::ct::noise::DEFAULT_PHOTONS;
use crate::ct::{CtOperator, GeometryPreset, NoiseModel, RampFilter, SparseMatrix, MU_MAX};
use crate::error::{Error, Result};
use crate::losses::DataTerm;
use crate::model::{LayerSelection, OutputActivation, UNetConfig};
use crate::svd::TruncationPolicy;
use crate::training::{DipRunConfig, InputSource, PretrainConfig, Variant};

#[derive(Debug, Clone, PartialEq)]
pub struct GeometrySpec {
    pub preset: GeometryPreset,
    pub pixel_size: f64,
    /// System matrix file; required for fan-beam presets.
    pub matrix: Option<PathBuf>,
    pub filter: RampFilter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DipSpec {
    pub iterations: usize,
    /// `None` picks the variant default.
    pub lr: Option<f64>,
    pub gamma: f64,
    pub data_loss: String,
    /// `None` picks the variant default.
    pub input: Option<InputSource>,
    pub layers: LayerSelection,
    pub truncation: TruncationPolicy,
    pub train_unreplaced: bool,
    pub train_norms: bool,
    pub input_std: f64,
    pub psnr_range: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub pgm: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub geometry: GeometrySpec,
    pub noise: NoiseModel,
    pub model: UNetConfig,
    pub pretrain: PretrainConfig,
    pub dip: DipSpec,
    pub output: OutputSpec,
}

impl Default for RunSpec {
    fn default() -> Self {
        let pretrain = PretrainConfig::default();
        Self {
            geometry: GeometrySpec {
                preset: GeometryPreset::Desk,
                pixel_size: 1.0,
                matrix: None,
                filter: RampFilter::RamLak,
            },
            noise: pretrain.noise,
            model: UNetConfig::desk(),
            pretrain,
            dip: DipSpec {
                iterations: 5000,
                lr: None,
                gamma: 1e-4,
                data_loss: "mse".into(),
                input: None,
                layers: LayerSelection::AllBlocks,
                truncation: TruncationPolicy::None,
                train_unreplaced: false,
                train_norms: false,
                input_std: 0.1,
                psnr_range: None,
            },
            output: OutputSpec { pgm: true },
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::invalid(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::invalid(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        let mut section = String::new();
        let mut noise_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !["geometry", "noise", "model", "pretrain", "dip", "output"].contains(&section.as_str()) {
                    return Err(Error::invalid(format!("line {}: unknown section [{section}]", n + 1)));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected key = value", n + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            let full = format!("{section}.{key}");
            if section == "noise" && key == "model" {
                noise_set = true;
            }
            spec.set(&full, v)
                .map_err(|e| Error::invalid(format!("line {}: {e}", n + 1)))?;
        }
        if !noise_set {
            spec.noise = spec.pretrain.noise;
        }
        spec.pretrain.noise = spec.noise;
        spec.pretrain.filter = spec.geometry.filter;
        spec.validate()?;
        Ok(spec)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let g = &mut self.geometry;
        let m = &mut self.model;
        let p = &mut self.pretrain;
        let d = &mut self.dip;
        match key {
            "geometry.preset" => g.preset = GeometryPreset::parse(v)?,
            "geometry.pixel_size" => g.pixel_size = parse_num(key, v)?,
            "geometry.matrix" => g.matrix = (!v.is_empty()).then(|| PathBuf::from(v)),
            "geometry.filter" => g.filter = RampFilter::parse(v)?,
            "noise.model" => self.noise = NoiseModel::parse(v)?,
            "model.channels" => m.channels = parse_list(key, v)?,
            "model.skip" => m.skip_channels = parse_list(key, v)?,
            "model.kernel" => m.kernel_size = parse_num(key, v)?,
            "model.slope" => m.leaky_slope = parse_num(key, v)?,
            "model.output" => m.output = OutputActivation::parse(v)?,
            "model.norm_groups" => m.norm_groups = parse_num(key, v)?,
            "pretrain.dataset_size" => p.dataset_size = parse_num(key, v)?,
            "pretrain.epochs" => p.epochs = parse_num(key, v)?,
            "pretrain.batch_size" => p.batch_size = parse_num(key, v)?,
            "pretrain.lr" => p.lr = parse_num(key, v)?,
            "pretrain.seed" => p.seed = parse_num(key, v)?,
            "pretrain.max_ellipses" => p.max_ellipses = parse_num(key, v)?,
            "dip.iterations" => d.iterations = parse_num(key, v)?,
            "dip.lr" => d.lr = if v == "default" { None } else { Some(parse_num(key, v)?) },
            "dip.gamma" => d.gamma = parse_num(key, v)?,
            "dip.data_loss" => d.data_loss = v.to_string(),
            "dip.input" => d.input = if v == "default" { None } else { Some(InputSource::parse(v)?) },
            "dip.layers" => d.layers = LayerSelection::parse(v)?,
            "dip.truncation" => d.truncation = TruncationPolicy::parse(v)?,
            "dip.train_unreplaced" => d.train_unreplaced = parse_bool(key, v)?,
            "dip.train_norms" => d.train_norms = parse_bool(key, v)?,
            "dip.input_std" => d.input_std = parse_num(key, v)?,
            "dip.psnr_range" => d.psnr_range = if v == "max" { None } else { Some(parse_num(key, v)?) },
            "output.pgm" => self.output.pgm = parse_bool(key, v)?,
            _ => return Err(Error::invalid(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.dip.truncation.validate()?;
        self.data_term()?;
        let g = &self.geometry;
        if !(g.pixel_size > 0.0 && g.pixel_size.is_finite()) {
            return Err(Error::invalid(format!("pixel_size {} must be positive", g.pixel_size)));
        }
        if g.preset.is_fan_beam() && g.matrix.is_none() {
            return Err(Error::invalid(format!(
                "preset {} needs geometry.matrix",
                g.preset.name()
            )));
        }
        let (_, _, n) = g.preset.dimensions();
        let mult = 1 << (self.model.num_scales() - 1);
        if n % mult != 0 {
            return Err(Error::invalid(format!(
                "image side {n} is not divisible by {mult} for a {}-scale U-Net",
                self.model.num_scales()
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn data_term(&self) -> Result<DataTerm> {
        match self.dip.data_loss.as_str() {
            "mse" => Ok(DataTerm::MeanSquared),
            "l2" => Ok(DataTerm::SquaredL2),
            "poisson" => {
                let photons = match self.noise {
                    NoiseModel::Poisson { photons } => photons,
                    _ => DEFAULT_PHOTONS,
                };
                Ok(DataTerm::Poisson {
                    photons,
                    mu_max: MU_MAX,
                })
            }
            other => Err(Error::invalid(format!("unknown data loss {other:?}"))),
        }
    }

    /// The forward operator this spec describes.
    pub fn operator(&self) -> Result<Arc<CtOperator>> {
        let g = &self.geometry;
        let op = match &g.matrix {
            Some(path) => {
                let (angles, detectors, _) = g.preset.dimensions();
                CtOperator::from_matrix(SparseMatrix::read_file(path)?, angles, detectors)?
            }
            None => CtOperator::parallel(g.preset.parallel()?)?,
        };
        Ok(Arc::new(op.with_pixel_size(g.pixel_size)?))
    }

    pub fn dip_config(&self, variant: Variant, seed: u64) -> Result<DipRunConfig> {
        let d = &self.dip;
        let mut c = DipRunConfig::new(variant);
        c.iterations = d.iterations;
        c.lr = d.lr.unwrap_or(variant.default_lr());
        c.gamma = d.gamma;
        c.data_term = self.data_term()?;
        c.input = d.input.unwrap_or(variant.default_input());
        c.selection = d.layers.clone();
        c.truncation = d.truncation;
        c.train_unreplaced = d.train_unreplaced;
        c.train_norms = d.train_norms;
        c.seed = seed;
        c.input_std = d.input_std;
        c.filter = self.geometry.filter;
        c.psnr_range = d.psnr_range;
        c.validate()?;
        Ok(c)
    }

    /// The resolved document; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let g = &self.geometry;
        let m = &self.model;
        let p = &self.pretrain;
        let d = &self.dip;
        let mut s = String::new();
        let _ = writeln!(s, "[geometry]");
        let _ = writeln!(s, "preset = {}", g.preset.name());
        let _ = writeln!(s, "pixel_size = {}", g.pixel_size);
        let _ = writeln!(
            s,
            "matrix = {}",
            g.matrix.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        );
        let _ = writeln!(s, "filter = {}", g.filter.name());
        let _ = writeln!(s, "\n[noise]\nmodel = {}", self.noise);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "channels = {}", join(&m.channels));
        let _ = writeln!(s, "skip = {}", join(&m.skip_channels));
        let _ = writeln!(s, "kernel = {}", m.kernel_size);
        let _ = writeln!(s, "slope = {}", m.leaky_slope);
        let _ = writeln!(s, "output = {}", m.output.name());
        let _ = writeln!(s, "norm_groups = {}", m.norm_groups);
        let _ = writeln!(s, "\n[pretrain]");
        let _ = writeln!(s, "dataset_size = {}", p.dataset_size);
        let _ = writeln!(s, "epochs = {}", p.epochs);
        let _ = writeln!(s, "batch_size = {}", p.batch_size);
        let _ = writeln!(s, "lr = {}", p.lr);
        let _ = writeln!(s, "seed = {}", p.seed);
        let _ = writeln!(s, "max_ellipses = {}", p.max_ellipses);
        let _ = writeln!(s, "\n[dip]");
        let _ = writeln!(s, "iterations = {}", d.iterations);
        let _ = writeln!(s, "lr = {}", d.lr.map(|v| v.to_string()).unwrap_or("default".into()));
        let _ = writeln!(s, "gamma = {}", d.gamma);
        let _ = writeln!(s, "data_loss = {}", d.data_loss);
        let _ = writeln!(s, "input = {}", d.input.map(|i| i.name()).unwrap_or("default"));
        let _ = writeln!(s, "layers = {}", d.layers.to_text());
        let _ = writeln!(s, "truncation = {}", d.truncation);
        let _ = writeln!(s, "train_unreplaced = {}", d.train_unreplaced);
        let _ = writeln!(s, "train_norms = {}", d.train_norms);
        let _ = writeln!(s, "input_std = {}", d.input_std);
        let _ = writeln!(
            s,
            "psnr_range = {}",
            d.psnr_range.map(|v| v.to_string()).unwrap_or("max".into())
        );
        let _ = writeln!(s, "\n[output]\npgm = {}", self.output.pgm);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_desk_default() {
        let spec = RunSpec::parse("").unwrap();
        assert_eq!(spec, RunSpec::default());
        assert_eq!(spec.model, UNetConfig::desk());
        assert_eq!(spec.geometry.preset, GeometryPreset::Desk);
    }

    #[test]
    fn resolved_text_roundtrips() {
        let text = "[noise]\nmodel = poisson 4096\n[dip]\nlr = 0.002\ntruncation = rank 0.5\ndata_loss = poisson\npsnr_range = 1\n[model]\noutput = linear # comment\n";
        let spec = RunSpec::parse(text).unwrap();
        assert_eq!(spec.noise, NoiseModel::Poisson { photons: 4096.0 });
        assert_eq!(spec.pretrain.noise, spec.noise);
        assert_eq!(spec.dip.lr, Some(0.002));
        assert_eq!(RunSpec::parse(&spec.to_text()).unwrap(), spec);
        assert_eq!(RunSpec::parse(&RunSpec::default().to_text()).unwrap(), RunSpec::default());
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        assert!(RunSpec::parse("[dip]\nlearning_rate = 1").is_err());
        assert!(RunSpec::parse("[misc]\n").is_err());
        assert!(RunSpec::parse("iterations = 5").is_err());
        assert!(RunSpec::parse("[dip]\niterations five").is_err());
        assert!(RunSpec::parse("[dip]\ndata_loss = l1").is_err());
    }

    #[test]
    fn fan_beam_needs_matrix() {
        assert!(RunSpec::parse("[geometry]\npreset = lotus-like").is_err());
    }

    #[test]
    fn dip_config_uses_variant_defaults() {
        let spec = RunSpec::default();
        let c = spec.dip_config(Variant::SvdDip, 7).unwrap();
        assert_eq!((c.lr, c.input, c.seed), (1e-3, InputSource::Fbp, 7));
        let c = spec.dip_config(Variant::Dip, 0).unwrap();
        assert_eq!((c.lr, c.input), (1e-4, InputSource::Noise));
    }
}
