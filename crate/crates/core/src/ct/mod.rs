//! CT forward models, reconstruction baselines and synthetic data.

pub mod fbp;
pub mod geometry;
pub mod noise;
pub mod phantom;
pub mod sparse;

pub use fbp::{fbp, RampFilter};
pub use geometry::{GeometryPreset, ParallelGeometry};
pub use noise::{
    add_gaussian_noise, hu_to_mu, simulate_poisson_prelog, CountMode, NoiseModel, MU_MAX,
};
pub use phantom::{disk, generate_ellipses};
pub use sparse::SparseMatrix;

use crate::autograd::LinearMap;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Measured projections together with how they were corrupted.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub data: Tensor<f64>,
    pub noise: NoiseModel,
}

impl Sinogram {
    pub fn clean(data: Tensor<f64>) -> Self {
        Self {
            data,
            noise: NoiseModel::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Parallel(ParallelGeometry),
    /// Filtered adjoint stands in for FBP; `scale` calibrates it.
    Matrix { scale: f64 },
}

/// A linear map from `[n, n]` images to `[angles, detectors]` sinograms.
#[derive(Debug, Clone, PartialEq)]
pub struct CtOperator {
    matrix: SparseMatrix,
    sinogram_shape: [usize; 2],
    n_px: usize,
    /// Physical side of one pixel; projections scale with it.
    pixel_size: f64,
    kind: Kind,
}

impl CtOperator {
    /// Joseph projector for a parallel geometry.
    pub fn parallel(geometry: ParallelGeometry) -> Result<Self> {
        Ok(Self {
            matrix: geometry.joseph_matrix()?,
            sinogram_shape: geometry.sinogram_shape(),
            n_px: geometry.n_px(),
            pixel_size: 1.0,
            kind: Kind::Parallel(geometry),
        })
    }

    /// Wraps an explicit system matrix whose rows are ordered angle-major.
    pub fn from_matrix(matrix: SparseMatrix, num_angles: usize, num_detectors: usize) -> Result<Self> {
        if num_angles * num_detectors != matrix.rows() {
            return Err(Error::invalid(format!(
                "matrix has {} rows, expected {num_angles}x{num_detectors}",
                matrix.rows()
            )));
        }
        let n_px = (matrix.cols() as f64).sqrt().round() as usize;
        if n_px * n_px != matrix.cols() {
            return Err(Error::invalid(format!(
                "matrix has {} columns, which is not a square image",
                matrix.cols()
            )));
        }
        let mut op = Self {
            matrix,
            sinogram_shape: [num_angles, num_detectors],
            n_px,
            pixel_size: 1.0,
            kind: Kind::Matrix { scale: 1.0 },
        };
        let phantom = disk(n_px, n_px as f64 / 2.0 - 1.0, 1.0);
        let raw = op.filtered_adjoint(&op.forward(&phantom)?, RampFilter::RamLak)?;
        let scale = phantom.mean() / raw.mean();
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::NumericalFailure(format!(
                "filtered adjoint calibration gave scale {scale}"
            )));
        }
        op.kind = Kind::Matrix { scale };
        Ok(op)
    }

    /// Measures line integrals in physical units with pixels of side `size`.
    pub fn with_pixel_size(mut self, size: f64) -> Result<Self> {
        if !(size > 0.0 && size.is_finite()) {
            return Err(Error::invalid(format!("pixel size {size} must be positive")));
        }
        self.pixel_size = size;
        Ok(self)
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn n_px(&self) -> usize {
        self.n_px
    }

    pub fn sinogram_shape(&self) -> [usize; 2] {
        self.sinogram_shape
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn geometry(&self) -> Option<&ParallelGeometry> {
        match &self.kind {
            Kind::Parallel(g) => Some(g),
            Kind::Matrix { .. } => None,
        }
    }

    pub fn forward(&self, image: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (h, w) = image.dims2()?;
        if h != self.n_px || w != self.n_px {
            return Err(Error::invalid(format!(
                "image {:?} does not match operator side {}",
                image.shape(),
                self.n_px
            )));
        }
        Ok(Tensor::new(self.sinogram_shape, self.matrix.matvec(image.data())?)?.scale(self.pixel_size))
    }

    pub fn adjoint(&self, sino: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.check_sinogram(sino)?;
        Ok(Tensor::new([self.n_px, self.n_px], self.matrix.matvec_transpose(sino.data())?)?
            .scale(self.pixel_size))
    }

    /// Analytic FBP for parallel operators, calibrated filtered adjoint otherwise.
    pub fn reconstruct(&self, sino: &Tensor<f64>, filter: RampFilter) -> Result<Tensor<f64>> {
        let raw = match &self.kind {
            Kind::Parallel(g) => fbp(sino, g, filter)?,
            Kind::Matrix { scale } => self.filtered_adjoint(sino, filter)?.scale(*scale),
        };
        Ok(raw.scale(1.0 / self.pixel_size))
    }

    fn filtered_adjoint(&self, sino: &Tensor<f64>, filter: RampFilter) -> Result<Tensor<f64>> {
        self.check_sinogram(sino)?;
        let filtered = fbp::ramp_filter_rows(sino.data(), self.sinogram_shape[1], 1.0, filter);
        Tensor::new([self.n_px, self.n_px], self.matrix.matvec_transpose(&filtered)?)
    }

    fn check_sinogram(&self, sino: &Tensor<f64>) -> Result<()> {
        let (a, d) = sino.dims2()?;
        if [a, d] != self.sinogram_shape {
            return Err(Error::invalid(format!(
                "sinogram {:?} does not match operator {:?}",
                sino.shape(),
                self.sinogram_shape
            )));
        }
        Ok(())
    }
}

impl<T: Real> LinearMap<T> for CtOperator {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.n_px, self.n_px]
    }

    fn output_shape(&self) -> Vec<usize> {
        self.sinogram_shape.to_vec()
    }

    fn apply(&self, x: &[T]) -> Vec<T> {
        let s = T::from_f64(self.pixel_size);
        let mut out = LinearMap::<T>::apply(&self.matrix, x);
        if self.pixel_size != 1.0 {
            out.iter_mut().for_each(|v| *v *= s);
        }
        out
    }

    fn apply_adjoint(&self, y: &[T]) -> Vec<T> {
        let s = T::from_f64(self.pixel_size);
        let mut out = LinearMap::<T>::apply_adjoint(&self.matrix, y);
        if self.pixel_size != 1.0 {
            out.iter_mut().for_each(|v| *v *= s);
        }
        out
    }
}

/// Simulated measurement of `image` under `noise`.
///
/// For Poisson noise the image holds attenuation in units of [`MU_MAX`], so the
/// post-log data approximate `A image`.
pub fn measure(op: &CtOperator, image: &Tensor<f64>, noise: NoiseModel, seed: u64) -> Result<Sinogram> {
    match noise {
        NoiseModel::None => Ok(Sinogram::clean(op.forward(image)?)),
        NoiseModel::Gaussian { rel_level } => {
            add_gaussian_noise(&Sinogram::clean(op.forward(image)?), rel_level, seed)
        }
        NoiseModel::Poisson { photons } => simulate_poisson_prelog(
            &image.reshape([op.n_px(), op.n_px()])?.scale(MU_MAX),
            op,
            photons,
            MU_MAX,
            CountMode::Sampled { seed },
        ),
    }
}

/// Noise-free parallel projections of `image`.
pub fn radon_forward(image: &Tensor<f64>, geom: &ParallelGeometry) -> Result<Sinogram> {
    let (h, w) = image.dims2()?;
    if h != w || h != geom.n_px() {
        return Err(Error::invalid(format!(
            "image {:?} does not match geometry side {}",
            image.shape(),
            geom.n_px()
        )));
    }
    let a = geom.joseph_matrix()?;
    Ok(Sinogram::clean(Tensor::new(geom.sinogram_shape(), a.matvec(image.data())?)?))
}
