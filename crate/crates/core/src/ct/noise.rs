use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::Sinogram;
use crate::autograd::LinearMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Photons per detector pixel of an empty scan in the medical presets.
pub const DEFAULT_PHOTONS: f64 = 4096.0;
/// Attenuation normalization constant for the medical presets.
pub const MU_MAX: f64 = 81.35858;
/// Pre-log counts are clamped here before taking the logarithm.
pub const COUNT_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum NoiseModel {
    #[default]
    None,
    /// Additive white noise with `sigma = rel_level * mean(|Ax|)`.
    Gaussian { rel_level: f64 },
    /// Pre-log photon counting with `photons` per bin for an empty scan.
    Poisson { photons: f64 },
}

impl fmt::Display for NoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseModel::None => write!(f, "none"),
            NoiseModel::Gaussian { rel_level } => write!(f, "gaussian {rel_level}"),
            NoiseModel::Poisson { photons } => write!(f, "poisson {photons}"),
        }
    }
}

impl NoiseModel {
    /// Parses `none`, `gaussian <rel_level>` or `poisson <photons>`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split_whitespace().collect();
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::invalid(format!("bad noise parameter {s:?}")))
        };
        match parts.as_slice() {
            ["none"] => Ok(Self::None),
            ["gaussian", level] => {
                let rel_level = num(level)?;
                if rel_level < 0.0 {
                    return Err(Error::invalid("gaussian noise level must be >= 0"));
                }
                Ok(Self::Gaussian { rel_level })
            }
            ["poisson", photons] => {
                let photons = num(photons)?;
                if photons <= 0.0 {
                    return Err(Error::invalid("photon count must be > 0"));
                }
                Ok(Self::Poisson { photons })
            }
            _ => Err(Error::invalid(format!("unknown noise spec {text:?}"))),
        }
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise with `sigma = rel_level * mean(|y|)`.
pub fn add_gaussian_noise(sino: &Sinogram, rel_level: f64, seed: u64) -> Result<Sinogram> {
    if !(rel_level >= 0.0 && rel_level.is_finite()) {
        return Err(Error::invalid(format!("noise level {rel_level}")));
    }
    let mut data = sino.data.clone();
    if rel_level > 0.0 {
        let sigma = rel_level * sino.data.abs().mean();
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in data.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(Sinogram {
        data,
        noise: NoiseModel::Gaussian { rel_level },
    })
}

/// How pre-log counts are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMode {
    Sampled { seed: u64 },
    /// Counts equal their expectation, so the data are noise-free.
    Expectation,
}

/// Draws `N1 ~ Pois(rate)` per entry.
pub fn sample_poisson_counts(rates: &[f64], seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rates
        .iter()
        .map(|&rate| {
            if rate == 0.0 {
                return Ok(0.0);
            }
            Poisson::new(rate)
                .map(|p| p.sample(&mut rng))
                .map_err(|e| Error::invalid(format!("poisson rate {rate}: {e}")))
        })
        .collect()
}

/// Simulates post-log data `y = -ln(N1/N0) / mu_max` with `N1 ~ Pois(N0 exp(-Ax))`.
///
/// Counts are clamped to [`COUNT_FLOOR`] before the logarithm. In expectation
/// mode the result is exactly `Ax / mu_max`.
pub fn simulate_poisson_prelog(
    image_mu: &Tensor<f64>,
    op: &dyn LinearMap<f64>,
    photons: f64,
    mu_max: f64,
    mode: CountMode,
) -> Result<Sinogram> {
    if !(photons > 0.0 && photons.is_finite()) {
        return Err(Error::invalid(format!("photon count {photons}")));
    }
    if !(mu_max > 0.0 && mu_max.is_finite()) {
        return Err(Error::invalid(format!("mu_max {mu_max}")));
    }
    let expected_in: usize = op.input_shape().iter().product();
    if image_mu.len() != expected_in {
        return Err(Error::invalid(format!(
            "image of shape {:?} does not fit operator input {:?}",
            image_mu.shape(),
            op.input_shape()
        )));
    }
    let proj = op.apply(image_mu.data());
    if let Some(v) = proj.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid(format!("projection value {v} is negative or not finite")));
    }
    let y = match mode {
        CountMode::Expectation => proj.iter().map(|&p| p / mu_max).collect(),
        CountMode::Sampled { seed } => {
            let rates: Vec<f64> = proj.iter().map(|&p| photons * (-p).exp()).collect();
            sample_poisson_counts(&rates, seed)?
                .into_iter()
                .map(|n1| -(n1.max(COUNT_FLOOR) / photons).ln() / mu_max)
                .collect()
        }
    };
    Ok(Sinogram {
        data: Tensor::new(op.output_shape(), y)?,
        noise: NoiseModel::Poisson { photons },
    })
}

/// Hounsfield units to linear attenuation, `x = (20 - 0.02) x_HU / 1000 + 20`.
pub fn hu_to_mu(x_hu: f64) -> f64 {
    (20.0 - 0.02) * x_hu / 1000.0 + 20.0
}

pub fn hu_image_to_mu(image: &Tensor<f64>) -> Tensor<f64> {
    image.map(hu_to_mu)
}
