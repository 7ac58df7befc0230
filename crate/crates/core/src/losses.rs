//! Data-fidelity terms, total variation, the composite objective and PSNR.

use std::sync::Arc;

use crate::autograd::{LinearMap, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Anisotropic TV: absolute forward differences along both axes, no wrap.
pub fn tv_aniso<T: Real>(x: &Tensor<T>) -> Result<T> {
    let (rows, cols) = x.dims2()?;
    let mut total = T::ZERO;
    if rows >= 2 {
        total += x.diff(0)?.abs().sum();
    }
    if cols >= 2 {
        total += x.diff(1)?.abs().sum();
    }
    Ok(total)
}

/// Records anisotropic TV of a 2-D (or single-channel) node.
pub fn tv_aniso_var<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (rows, cols) = tape.value(x).dims2()?;
    let flat = tape.reshape(x, [rows, cols])?;
    let mut parts = Vec::new();
    for (axis, len) in [(0, rows), (1, cols)] {
        if len >= 2 {
            let d = tape.diff(flat, axis)?;
            let a = tape.abs(d);
            parts.push(tape.sum(a));
        }
    }
    Ok(match parts.as_slice() {
        [] => {
            let zero = tape.scale(flat, T::ZERO);
            tape.sum(zero)
        }
        [p] => *p,
        [p, q] => tape.add(*p, *q)?,
        _ => unreachable!(),
    })
}

/// `||ax - y||^2`.
pub fn data_loss_l2<T: Real>(ax: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    Ok(ax.sub(y)?.map(|r| r * r).sum())
}

/// `||ax - y||^2 / n`.
pub fn data_loss_mean<T: Real>(ax: &Tensor<T>, y: &Tensor<T>, n: usize) -> Result<T> {
    if n == 0 {
        return Err(Error::invalid("mean data loss needs n > 0"));
    }
    Ok(data_loss_l2(ax, y)? / T::from_usize(n))
}

/// Negative Poisson log-likelihood of post-log data:
/// `-sum_j [N0 exp(-y_j mu) (-a_j mu + ln N0) - N0 exp(-a_j mu)]`.
pub fn poisson_loss<T: Real>(ax: &Tensor<T>, y: &Tensor<T>, n0: T, mu: T) -> Result<T> {
    ax.check_same_shape(y)?;
    let ln_n0 = n0.ln();
    let total: T = ax
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &yj)| n0 * (-yj * mu).exp() * (-a * mu + ln_n0) - n0 * (-a * mu).exp())
        .sum();
    Ok(-total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DataTerm {
    SquaredL2,
    /// Squared residual norm divided by the number of measurements.
    MeanSquared,
    Poisson { photons: f64, mu_max: f64 },
}

impl DataTerm {
    pub fn name(&self) -> &'static str {
        match self {
            DataTerm::SquaredL2 => "l2",
            DataTerm::MeanSquared => "mse",
            DataTerm::Poisson { .. } => "poisson",
        }
    }
}

/// Values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub data: f64,
    pub tv: f64,
}

/// `data_term(A x, y) + gamma * TV(x)`.
#[derive(Clone)]
pub struct Objective<T: Real> {
    data_term: DataTerm,
    gamma: f64,
    op: Arc<dyn LinearMap<T>>,
    y: Tensor<T>,
}

impl<T: Real> Objective<T> {
    pub fn new(data_term: DataTerm, gamma: f64, op: Arc<dyn LinearMap<T>>, y: Tensor<T>) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma {gamma} must be finite and >= 0")));
        }
        if let DataTerm::Poisson { photons, mu_max } = data_term {
            if !(photons > 0.0 && mu_max > 0.0) {
                return Err(Error::invalid("poisson loss needs positive N0 and mu_max"));
            }
        }
        let expected: usize = op.output_shape().iter().product();
        if y.len() != expected {
            return Err(Error::invalid(format!(
                "observation {:?} does not match operator output {:?}",
                y.shape(),
                op.output_shape()
            )));
        }
        let y = y.into_reshaped(op.output_shape())?;
        Ok(Self {
            data_term,
            gamma,
            op,
            y,
        })
    }

    pub fn data_term(&self) -> DataTerm {
        self.data_term
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn observation(&self) -> &Tensor<T> {
        &self.y
    }

    fn data_of(&self, ax: &Tensor<T>) -> Result<T> {
        match self.data_term {
            DataTerm::SquaredL2 => data_loss_l2(ax, &self.y),
            DataTerm::MeanSquared => data_loss_mean(ax, &self.y, self.y.len()),
            DataTerm::Poisson { photons, mu_max } => {
                poisson_loss(ax, &self.y, T::from_f64(photons), T::from_f64(mu_max))
            }
        }
    }

    fn project(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let expected: usize = self.op.input_shape().iter().product();
        if x.len() != expected {
            return Err(Error::invalid(format!(
                "image {:?} does not match operator input {:?}",
                x.shape(),
                self.op.input_shape()
            )));
        }
        Tensor::new(self.op.output_shape(), self.op.apply(x.data()))
    }

    pub fn eval(&self, x: &Tensor<T>) -> Result<ObjectiveValue> {
        let data = self.data_of(&self.project(x)?)?.to_f64();
        let tv = tv_aniso(x)?.to_f64();
        Ok(ObjectiveValue {
            total: data + self.gamma * tv,
            data,
            tv,
        })
    }

    /// Records the objective of image node `x`; returns the scalar node and its parts.
    pub fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, ObjectiveValue)> {
        let shape = self.op.input_shape();
        let img = tape.reshape(x, shape)?;
        let ax = tape.linear(img, self.op.clone())?;
        let data = match self.data_term {
            DataTerm::SquaredL2 | DataTerm::MeanSquared => {
                let yv = tape.constant(self.y.clone());
                let r = tape.sub(ax, yv)?;
                let sq = tape.mul(r, r)?;
                if self.data_term == DataTerm::SquaredL2 {
                    tape.sum(sq)
                } else {
                    tape.mean(sq)
                }
            }
            DataTerm::Poisson { photons, mu_max } => {
                tape.poisson_nll(ax, &self.y, T::from_f64(photons), T::from_f64(mu_max))?
            }
        };
        let tv = tv_aniso_var(tape, x)?;
        let weighted = tape.scale(tv, T::from_f64(self.gamma));
        let total = tape.add(data, weighted)?;
        let value = ObjectiveValue {
            total: tape.value(total).item()?.to_f64(),
            data: tape.value(data).item()?.to_f64(),
            tv: tape.value(tv).item()?.to_f64(),
        };
        Ok((total, value))
    }
}

/// `10 log10(range^2 / MSE)`; `range` defaults to `max(x_ref)`.
///
/// Returns `f64::INFINITY` when the images are identical.
pub fn psnr<T: Real>(x: &Tensor<T>, x_ref: &Tensor<T>, data_range: Option<f64>) -> Result<f64> {
    x.check_same_shape(x_ref)?;
    let range = data_range.unwrap_or_else(|| x_ref.max_value().to_f64());
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::invalid(format!("PSNR data range {range} must be positive")));
    }
    let mse = x
        .data()
        .iter()
        .zip(x_ref.data())
        .map(|(&a, &b)| {
            let d = a.to_f64() - b.to_f64();
            d * d
        })
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}
