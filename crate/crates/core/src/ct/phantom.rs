use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One ellipse in normalized coordinates, where the image spans `[-1, 1]^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let u = (dx * c + dy * s) / self.semi_axes.0;
        let v = (-dx * s + dy * c) / self.semi_axes.1;
        u * u + v * v <= 1.0
    }
}

/// Normalized coordinates of pixel `(i, j)`, y pointing up.
fn pixel_coords(n: usize, i: usize, j: usize) -> (f64, f64) {
    let half = (n as f64 - 1.0) / 2.0;
    let scale = n as f64 / 2.0;
    ((j as f64 - half) / scale, (half - i as f64) / scale)
}

/// Sums ellipse indicators and clips the result to `[0, 1]`.
pub fn rasterize(n_px: usize, ellipses: &[Ellipse]) -> Tensor<f64> {
    Tensor::from_fn([n_px, n_px], |k| {
        let (x, y) = pixel_coords(n_px, k / n_px, k % n_px);
        ellipses
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.intensity)
            .sum::<f64>()
            .clamp(0.0, 1.0)
    })
}

/// Random ellipses phantom, kept inside the inscribed circle.
///
/// Draws between 3 and `max_ellipses` ellipses (fewer if `max_ellipses < 3`).
/// Roughly one in five ellipses subtracts intensity.
pub fn generate_ellipses(n_px: usize, max_ellipses: usize, seed: u64) -> Result<Tensor<f64>> {
    if n_px < 16 {
        return Err(Error::invalid(format!("phantom side {n_px} is below 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = if max_ellipses == 0 {
        0
    } else {
        rng.random_range(max_ellipses.min(3)..=max_ellipses)
    };
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| {
            let a: f64 = rng.random_range(0.05..0.45);
            let b: f64 = rng.random_range(0.05..0.45);
            let reach = 0.9 - a.max(b);
            let r = reach * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..2.0 * PI);
            let intensity = if rng.random_bool(0.2) {
                -rng.random_range(0.1..0.5)
            } else {
                rng.random_range(0.2..1.0)
            };
            Ellipse {
                center: (r * phi.cos(), r * phi.sin()),
                semi_axes: (a, b),
                angle: rng.random_range(0.0..PI),
                intensity,
            }
        })
        .collect();
    Ok(rasterize(n_px, &ellipses))
}

/// Centered disk of the given value, radius in pixels.
pub fn disk(n_px: usize, radius: f64, value: f64) -> Tensor<f64> {
    let half = (n_px as f64 - 1.0) / 2.0;
    Tensor::from_fn([n_px, n_px], |k| {
        let (i, j) = ((k / n_px) as f64 - half, (k % n_px) as f64 - half);
        if i * i + j * j <= radius * radius {
            value
        } else {
            0.0
        }
    })
}
