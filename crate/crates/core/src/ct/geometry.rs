use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::sparse::SparseMatrix;

/// Parallel-beam acquisition over `[0, pi)` with a centered flat detector.
///
/// Image pixels have unit size; pixel `(i, j)` of an `n x n` image sits at
/// `x = j - (n-1)/2`, `y = (n-1)/2 - i`. Detector bin `d` measures the line
/// `x cos(theta) + y sin(theta) = (d - (m-1)/2) * spacing`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelGeometry {
    angles: Vec<f64>,
    num_detectors: usize,
    detector_spacing: f64,
    n_px: usize,
}

impl ParallelGeometry {
    /// `num_angles` angles spaced uniformly over `[0, pi)`.
    pub fn uniform(num_angles: usize, num_detectors: usize, n_px: usize) -> Result<Self> {
        if num_angles == 0 {
            return Err(Error::invalid("geometry needs at least one angle"));
        }
        let angles = (0..num_angles)
            .map(|k| PI * k as f64 / num_angles as f64)
            .collect();
        Self::with_angles(angles, num_detectors, 1.0, n_px)
    }

    pub fn with_angles(
        angles: Vec<f64>,
        num_detectors: usize,
        detector_spacing: f64,
        n_px: usize,
    ) -> Result<Self> {
        if angles.is_empty() || num_detectors == 0 || n_px == 0 {
            return Err(Error::invalid("geometry dimensions must be positive"));
        }
        if angles.windows(2).any(|w| w[1] <= w[0]) || angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("angles must be finite and strictly increasing"));
        }
        if !(detector_spacing > 0.0 && detector_spacing.is_finite()) {
            return Err(Error::invalid(format!("detector spacing {detector_spacing}")));
        }
        let span = num_detectors as f64 * detector_spacing;
        let diagonal = n_px as f64 * std::f64::consts::SQRT_2;
        if span < diagonal {
            return Err(Error::invalid(format!(
                "detector span {span} does not cover the image diagonal {diagonal:.3}"
            )));
        }
        Ok(Self {
            angles,
            num_detectors,
            detector_spacing,
            n_px,
        })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn num_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn num_detectors(&self) -> usize {
        self.num_detectors
    }

    pub fn detector_spacing(&self) -> f64 {
        self.detector_spacing
    }

    pub fn n_px(&self) -> usize {
        self.n_px
    }

    pub fn sinogram_shape(&self) -> [usize; 2] {
        [self.num_angles(), self.num_detectors]
    }

    /// Signed detector coordinate of bin `d`.
    pub fn detector_position(&self, d: usize) -> f64 {
        (d as f64 - (self.num_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }

    /// System matrix of Joseph's method: each ray is sampled once per row (or
    /// column, whichever the ray crosses more steeply) with linear
    /// interpolation between the two nearest pixel centers.
    pub fn joseph_matrix(&self) -> Result<SparseMatrix> {
        const SNAP: f64 = 1e-9;
        let n = self.n_px;
        let half = (n as f64 - 1.0) / 2.0;
        let mut triplets = Vec::new();
        for (a, &theta) in self.angles.iter().enumerate() {
            let (s, c) = theta.sin_cos();
            let steep = c.abs() >= s.abs();
            let step = 1.0 / if steep { c.abs() } else { s.abs() };
            for d in 0..self.num_detectors {
                let row = a * self.num_detectors + d;
                let t = self.detector_position(d);
                for lane in 0..n {
                    // Position of the ray along the interpolated axis at this lane.
                    let pos = if steep {
                        let y = half - lane as f64;
                        (t - y * s) / c + half
                    } else {
                        let x = lane as f64 - half;
                        half - (t - x * c) / s
                    };
                    let mut base = pos.floor();
                    let mut frac = pos - base;
                    if frac > 1.0 - SNAP {
                        base += 1.0;
                        frac = 0.0;
                    } else if frac < SNAP {
                        frac = 0.0;
                    }
                    for (offset, w) in [(0.0, 1.0 - frac), (1.0, frac)] {
                        let idx = base + offset;
                        if w == 0.0 || idx < 0.0 || idx > (n - 1) as f64 {
                            continue;
                        }
                        let idx = idx as usize;
                        let pixel = if steep { lane * n + idx } else { idx * n + lane };
                        triplets.push((row, pixel, w * step));
                    }
                }
            }
        }
        SparseMatrix::from_triplets(self.num_angles() * self.num_detectors, n * n, triplets)
    }
}

/// Named acquisition setups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometryPreset {
    /// 20 parallel angles, 95 detector pixels, 64x64 images.
    Desk,
    /// Fan-beam, 20 angles, 429 detector pixels, 128x128; needs a matrix file.
    LotusLike,
    /// 200 parallel angles, 513 detector pixels, 362x362.
    LodopabLike,
    /// 1000 parallel angles, 513 detector pixels, 362x362.
    MayoLike,
}

impl GeometryPreset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::Desk),
            "lotus-like" => Ok(Self::LotusLike),
            "lodopab-like" => Ok(Self::LodopabLike),
            "mayo-like" => Ok(Self::MayoLike),
            _ => Err(Error::invalid(format!("unknown geometry preset {name:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::LotusLike => "lotus-like",
            Self::LodopabLike => "lodopab-like",
            Self::MayoLike => "mayo-like",
        }
    }

    /// `(angles, detectors, image side)`.
    pub fn dimensions(self) -> (usize, usize, usize) {
        match self {
            Self::Desk => (20, 95, 64),
            Self::LotusLike => (20, 429, 128),
            Self::LodopabLike => (200, 513, 362),
            Self::MayoLike => (1000, 513, 362),
        }
    }

    pub fn is_fan_beam(self) -> bool {
        matches!(self, Self::LotusLike)
    }

    /// Parallel geometry for the preset; fan-beam presets have none.
    pub fn parallel(self) -> Result<ParallelGeometry> {
        if self.is_fan_beam() {
            return Err(Error::invalid(format!(
                "preset {} is fan-beam and needs a matrix operator file",
                self.name()
            )));
        }
        let (a, d, n) = self.dimensions();
        ParallelGeometry::uniform(a, d, n)
    }
}
