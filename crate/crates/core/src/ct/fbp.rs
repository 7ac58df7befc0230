use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::geometry::ParallelGeometry;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Apodization applied on top of the ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RampFilter {
    #[default]
    RamLak,
    Hann,
}

impl RampFilter {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ramlak" | "ram-lak" => Ok(Self::RamLak),
            "hann" => Ok(Self::Hann),
            _ => Err(Error::invalid(format!("unknown filter {name:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::RamLak => "ramlak",
            Self::Hann => "hann",
        }
    }
}

/// Frequency response of the band-limited discrete ramp for FFT length `len`.
///
/// Built from the spatial Ram-Lak kernel (`1/(4s^2)` at 0, `-1/(k pi s)^2` at odd
/// `k`) rather than `|f|`, which avoids the DC offset of a sampled ramp.
fn ramp_response(len: usize, spacing: f64, filter: RampFilter) -> Vec<Complex<f64>> {
    let mut kernel = vec![Complex::new(0.0, 0.0); len];
    kernel[0].re = 1.0 / (4.0 * spacing * spacing);
    for k in (1..len / 2).step_by(2) {
        let v = -1.0 / ((k as f64 * PI * spacing).powi(2));
        kernel[k].re = v;
        kernel[len - k].re = v;
    }
    FftPlanner::new().plan_fft_forward(len).process(&mut kernel);
    for (k, h) in kernel.iter_mut().enumerate() {
        // Discrete convolution approximates the integral, hence the spacing factor.
        let mut gain = h.re * spacing;
        if filter == RampFilter::Hann {
            let f = if k <= len / 2 { k as f64 } else { k as f64 - len as f64 } / len as f64;
            gain *= 0.5 * (1.0 + (2.0 * PI * f).cos());
        }
        *h = Complex::new(gain, 0.0);
    }
    kernel
}

/// Ramp-filters each row of an `[angles, detectors]` sinogram.
pub fn ramp_filter_rows(
    sino: &[f64],
    num_detectors: usize,
    spacing: f64,
    filter: RampFilter,
) -> Vec<f64> {
    let len = (2 * num_detectors).next_power_of_two();
    let response = ramp_response(len, spacing, filter);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut out = Vec::with_capacity(sino.len());
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for row in sino.chunks(num_detectors) {
        buf.fill(Complex::new(0.0, 0.0));
        for (b, &v) in buf.iter_mut().zip(row) {
            b.re = v;
        }
        fwd.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&response) {
            *b *= h;
        }
        inv.process(&mut buf);
        out.extend(buf[..num_detectors].iter().map(|c| c.re / len as f64));
    }
    out
}

/// Filtered back-projection for a parallel geometry.
pub fn fbp(sino: &Tensor<f64>, geom: &ParallelGeometry, filter: RampFilter) -> Result<Tensor<f64>> {
    if geom.num_angles() < 2 {
        return Err(Error::invalid("filtered back-projection needs at least 2 angles"));
    }
    let (a, d) = sino.dims2()?;
    if [a, d] != geom.sinogram_shape() {
        return Err(Error::invalid(format!(
            "sinogram {:?} does not match geometry {:?}",
            sino.shape(),
            geom.sinogram_shape()
        )));
    }
    let filtered = ramp_filter_rows(sino.data(), d, geom.detector_spacing(), filter);
    Ok(backproject(&filtered, geom).scale(PI / geom.num_angles() as f64))
}

/// Unscaled back-projection with linear interpolation along the detector.
pub fn backproject(sino: &[f64], geom: &ParallelGeometry) -> Tensor<f64> {
    let n = geom.n_px();
    let d = geom.num_detectors();
    let half = (n as f64 - 1.0) / 2.0;
    let center = (d as f64 - 1.0) / 2.0;
    let inv_spacing = 1.0 / geom.detector_spacing();
    let mut image = Tensor::zeros([n, n]);
    let trig: Vec<(f64, f64)> = geom.angles().iter().map(|t| t.sin_cos()).collect();
    for i in 0..n {
        let y = half - i as f64;
        for j in 0..n {
            let x = j as f64 - half;
            let mut acc = 0.0;
            for (row, &(s, c)) in sino.chunks(d).zip(&trig) {
                let u = (x * c + y * s) * inv_spacing + center;
                let u0 = u.floor();
                let f = u - u0;
                let k = u0 as isize;
                if k >= 0 && (k as usize) < d {
                    acc += row[k as usize] * (1.0 - f);
                }
                if k + 1 >= 0 && ((k + 1) as usize) < d {
                    acc += row[(k + 1) as usize] * f;
                }
            }
            image.data_mut()[i * n + j] = acc;
        }
    }
    image
}
