//! Folding conv kernels into matrices, their SVD, and truncation.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAX_SWEEPS: usize = 60;
const ORTHO_TOL: f64 = 1e-12;

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        f64::gemm(
            self.rows,
            self.cols,
            other.cols,
            1.0,
            &self.data,
            self.cols as isize,
            1,
            &other.data,
            other.cols as isize,
            1,
            0.0,
            &mut out,
            other.cols as isize,
            1,
        );
        Self::new(self.rows, other.cols, out)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A conv weight `[C_out, C_in, K, K]` folded to `C_out x (C_in K^2)`.
///
/// Column index of `(m, k1, k2)` is `(m K + k1) K + k2`, which coincides with
/// the row-major layout of the weight, so folding never reorders values.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedMatrix {
    pub matrix: Matrix,
    pub in_channels: usize,
    pub kernel: usize,
}

pub fn fold<T: Real>(w: &Tensor<T>) -> Result<FoldedMatrix> {
    let &[c_out, c_in, k1, k2] = w.shape() else {
        return Err(Error::invalid(format!("expected [C_out,C_in,K,K], got {:?}", w.shape())));
    };
    if k1 != k2 {
        return Err(Error::invalid(format!("kernel {k1}x{k2} is not square")));
    }
    Ok(FoldedMatrix {
        matrix: Matrix::new(c_out, c_in * k1 * k1, w.data().iter().map(|v| v.to_f64()).collect())?,
        in_channels: c_in,
        kernel: k1,
    })
}

/// Inverse of [`fold`] for a matrix whose rows are kernels, giving `[R, C_in, K, K]`.
pub fn unfold_v<T: Real>(b: &Matrix, in_channels: usize, kernel: usize) -> Result<Tensor<T>> {
    if b.cols != in_channels * kernel * kernel {
        return Err(Error::invalid(format!(
            "{} columns do not match {in_channels} channels of {kernel}x{kernel} kernels",
            b.cols
        )));
    }
    Tensor::new(
        [b.rows, in_channels, kernel, kernel],
        b.data.iter().map(|&v| T::from_f64(v)).collect(),
    )
}

/// `C_out x R` matrix as 1x1 kernels `[C_out, R, 1, 1]`.
pub fn unfold_u<T: Real>(a: &Matrix) -> Tensor<T> {
    Tensor::from_parts(
        vec![a.rows, a.cols, 1, 1],
        a.data.iter().map(|&v| T::from_f64(v)).collect(),
    )
}

/// Thin SVD `W' = U diag(s) V` with `s` descending.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// `C_out x R`.
    pub u: Matrix,
    pub s: Vec<f64>,
    /// `R x cols`.
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let r = self.rank();
        let us = Matrix::from_fn(self.u.rows, r, |i, j| self.u.get(i, j) * self.s[j]);
        us.matmul(&self.v).expect("factor shapes agree")
    }
}

/// Columns of a column-major working array.
struct Columns {
    len: usize,
    data: Vec<f64>,
}

impl Columns {
    fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.len..(j + 1) * self.len]
    }

    fn pair_mut(&mut self, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert!(p < q);
        let (a, b) = self.data.split_at_mut(q * self.len);
        (&mut a[p * self.len..(p + 1) * self.len], &mut b[..self.len])
    }

    fn rotate(&mut self, p: usize, q: usize, c: f64, s: f64) {
        let (xp, xq) = self.pair_mut(p, q);
        for (a, b) in xp.iter_mut().zip(xq.iter_mut()) {
            let (u, v) = (*a, *b);
            *a = c * u - s * v;
            *b = s * u + c * v;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-sided Jacobi: orthogonalizes the columns of `x`, accumulating rotations in `j`.
fn jacobi(x: &mut Columns, j: &mut Columns, n: usize) -> Result<()> {
    let total: f64 = x.data.iter().map(|v| v * v).sum();
    // Columns this small are replaced during completion, so they need no rotations.
    let negligible = total * 1e-30;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(x.col(p), x.col(p));
                let beta = dot(x.col(q), x.col(q));
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(x.col(p), x.col(q));
                if gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                x.rotate(p, q, c, s);
                j.rotate(p, q, c, s);
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(Error::NumericalFailure(format!(
        "Jacobi SVD did not converge in {MAX_SWEEPS} sweeps"
    )))
}

/// Normalizes `x` columns by their norms; columns with negligible norm are
/// replaced by Gram-Schmidt completions so that the result is orthonormal.
fn orthonormal_columns(x: &Columns, sigma: &[f64], n: usize) -> Vec<Vec<f64>> {
    let len = x.len;
    let cutoff = sigma.first().copied().unwrap_or(0.0) * 1e-13;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        if sigma[k] > cutoff && sigma[k] > 0.0 {
            out.push(x.col(k).iter().map(|v| v / sigma[k]).collect());
            continue;
        }
        let basis = (0..len).map(|e| {
            let mut v = vec![0.0; len];
            v[e] = 1.0;
            v
        });
        let picked = basis
            .filter_map(|mut v| {
                for _ in 0..2 {
                    for prev in &out {
                        let d = dot(&v, prev);
                        v.iter_mut().zip(prev).for_each(|(a, b)| *a -= d * b);
                    }
                }
                let norm = dot(&v, &v).sqrt();
                (norm > 0.5).then(|| v.into_iter().map(|a| a / norm).collect::<Vec<_>>())
            })
            .next()
            .expect("an orthogonal completion exists while k < len");
        out.push(picked);
    }
    out
}

/// Thin SVD by one-sided Jacobi.
///
/// Singular values are sorted descending and the largest-magnitude entry of
/// every left singular vector is made positive.
pub fn svd_decompose(m: &Matrix) -> Result<SvdFactors> {
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("SVD input has non-finite entries".into()));
    }
    // Orthogonalize whichever side is shorter: for wide matrices work on M^T.
    let wide = m.rows <= m.cols;
    let (len, n) = if wide { (m.cols, m.rows) } else { (m.rows, m.cols) };
    let mut x = Columns {
        len,
        data: if wide {
            m.data.clone()
        } else {
            m.transpose().data
        },
    };
    let mut j = Columns {
        len: n,
        data: Matrix::identity(n).data,
    };
    jacobi(&mut x, &mut j, n)?;

    let norms: Vec<f64> = (0..n).map(|k| dot(x.col(k), x.col(k)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let sigma: Vec<f64> = order.iter().map(|&k| norms[k]).collect();
    let sorted_x = Columns {
        len,
        data: order.iter().flat_map(|&k| x.col(k).to_vec()).collect(),
    };
    let q = orthonormal_columns(&sorted_x, &sigma, n);
    let jcols: Vec<&[f64]> = order.iter().map(|&k| j.col(k)).collect();

    // wide: M = J S Q^T, so U = J and V = Q^T; tall: M = Q S J^T.
    let (mut u, mut v) = if wide {
        (
            Matrix::from_fn(m.rows, n, |r, c| jcols[c][r]),
            Matrix::from_fn(n, m.cols, |r, c| q[r][c]),
        )
    } else {
        (
            Matrix::from_fn(m.rows, n, |r, c| q[c][r]),
            Matrix::from_fn(n, m.cols, |r, c| jcols[r][c]),
        )
    };
    for k in 0..n {
        let lead = (0..u.rows)
            .map(|r| u.get(r, k))
            .fold(0.0f64, |best, val| if val.abs() > best.abs() { val } else { best });
        if lead < 0.0 {
            for r in 0..u.rows {
                u.data[r * n + k] = -u.data[r * n + k];
            }
            for c in 0..v.cols {
                v.data[k * v.cols + c] = -v.data[k * v.cols + c];
            }
        }
    }
    Ok(SvdFactors { u, s: sigma, v })
}

/// Which singular values survive replacement.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum TruncationPolicy {
    #[default]
    None,
    /// Keep the top `ceil(p R)` values, `p` in `(0, 1]`.
    RankFraction(f64),
    /// Drop values below `t s_1`, `t` in `[0, 1)`.
    ThresholdFraction(f64),
}

impl fmt::Display for TruncationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TruncationPolicy::None => write!(f, "none"),
            TruncationPolicy::RankFraction(p) => write!(f, "rank {p}"),
            TruncationPolicy::ThresholdFraction(t) => write!(f, "threshold {t}"),
        }
    }
}

impl TruncationPolicy {
    /// Parses `none`, `rank <p>` or `threshold <t>`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split_whitespace().collect();
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad truncation parameter {s:?}")))
        };
        let policy = match parts.as_slice() {
            ["none"] => Self::None,
            ["rank", p] => Self::RankFraction(num(p)?),
            ["threshold", t] => Self::ThresholdFraction(num(t)?),
            _ => return Err(Error::invalid(format!("unknown truncation policy {text:?}"))),
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::None => Ok(()),
            Self::RankFraction(p) if p > 0.0 && p <= 1.0 => Ok(()),
            Self::ThresholdFraction(t) if (0.0..1.0).contains(&t) => Ok(()),
            _ => Err(Error::invalid(format!("truncation policy {self} out of range"))),
        }
    }

    /// Number of leading values kept out of descending `s`.
    pub fn keep_count(&self, s: &[f64]) -> Result<usize> {
        self.validate()?;
        let keep = match *self {
            Self::None => s.len(),
            Self::RankFraction(p) => (p * s.len() as f64 - 1e-9).ceil() as usize,
            Self::ThresholdFraction(t) => {
                let cut = t * s.first().copied().unwrap_or(0.0);
                s.iter().take_while(|&&v| v >= cut).count()
            }
        };
        if keep == 0 {
            return Err(Error::invalid(format!("policy {self} removes every singular value")));
        }
        Ok(keep)
    }
}

/// Drops the factors removed by `policy`; the remaining order is unchanged.
pub fn apply_truncation(factors: &SvdFactors, policy: TruncationPolicy) -> Result<SvdFactors> {
    let keep = policy.keep_count(&factors.s)?;
    let u = &factors.u;
    let v = &factors.v;
    Ok(SvdFactors {
        u: Matrix::from_fn(u.rows, keep, |r, c| u.get(r, c)),
        s: factors.s[..keep].to_vec(),
        v: Matrix::from_fn(keep, v.cols, |r, c| v.get(r, c)),
    })
}

/// A conv layer rewritten as `K x K` conv by `v`, channel scaling by `s`, then 1x1 conv by `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFactors<T: Real = f64> {
    /// `[C_out, R, 1, 1]`.
    pub u: Tensor<T>,
    /// `[R]`.
    pub s: Tensor<T>,
    /// `[R, C_in, K, K]`.
    pub v: Tensor<T>,
}

impl<T: Real> ConvFactors<T> {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Applies the factorized convolution.
    pub fn conv2d(&self, x: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        let h = x.conv2d(&self.v, None, stride, padding)?;
        h.channel_mul(&self.s)?.conv2d(&self.u, bias, 1, 0)
    }
}

/// Factorizes a conv weight; the layer `conv(W, .)` equals `conv(U diag(s), conv(V, .))`.
pub fn factorize_conv<T: Real>(w: &Tensor<T>, policy: TruncationPolicy) -> Result<ConvFactors<T>> {
    let folded = fold(w)?;
    if folded.kernel % 2 == 0 {
        return Err(Error::invalid(format!("kernel size {} is even", folded.kernel)));
    }
    let factors = apply_truncation(&svd_decompose(&folded.matrix)?, policy)?;
    Ok(ConvFactors {
        u: unfold_u(&factors.u),
        s: Tensor::from_parts(vec![factors.rank()], factors.s.iter().map(|&v| T::from_f64(v)).collect()),
        v: unfold_v(&factors.v, folded.in_channels, folded.kernel)?,
    })
}

/// Trainable entries of a plain conv weight of this shape.
pub fn count_trainable_raw(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Trainable entries of a factorized layer: its active singular values.
pub fn count_trainable_svd<T: Real>(factors: &ConvFactors<T>) -> usize {
    factors.rank()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn check_orthonormal(f: &SvdFactors, tol: f64) {
        let r = f.rank();
        let utu = f.u.transpose().matmul(&f.u).unwrap();
        let vvt = f.v.matmul(&f.v.transpose()).unwrap();
        assert!(utu.max_abs_diff(&Matrix::identity(r)) < tol);
        assert!(vvt.max_abs_diff(&Matrix::identity(r)) < tol);
        assert!(f.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(f.s.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn fold_shapes_and_roundtrip() {
        let w = Tensor::from_fn([4, 3, 3, 3], |k| (k as f64 * 0.731).sin());
        let f = fold(&w).unwrap();
        assert_eq!((f.matrix.rows(), f.matrix.cols()), (4, 27));
        assert_eq!(unfold_v::<f64>(&f.matrix, 3, 3).unwrap(), w);
        let big = Tensor::<f32>::zeros([128, 128, 3, 3]);
        assert_eq!(fold(&big).unwrap().matrix.cols(), 1152);
        assert!(fold(&Tensor::<f64>::zeros([4, 3, 3])).is_err());
        assert!(unfold_v::<f64>(&f.matrix, 3, 2).is_err());
    }

    #[test]
    fn unfold_u_identity_is_passthrough() {
        let u = unfold_u::<f64>(&Matrix::identity(2));
        assert_eq!(u.shape(), &[2, 2, 1, 1]);
        let x = Tensor::from_fn([2, 3, 3], |k| k as f64);
        assert_eq!(x.conv2d(&u, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn diagonal_matrix() {
        let m = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let f = svd_decompose(&m).unwrap();
        assert_eq!(f.s, vec![3.0, 1.0]);
        assert_eq!(f.u.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(f.v.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn random_reconstruction_both_orientations() {
        for (rows, cols, seed) in [(8, 18, 1), (18, 8, 2), (7, 7, 3), (1, 9, 4), (9, 1, 5)] {
            let m = random_matrix(rows, cols, seed);
            let f = svd_decompose(&m).unwrap();
            assert_eq!(f.rank(), rows.min(cols));
            assert!(f.reconstruct().max_abs_diff(&m) < 1e-10);
            assert!(f.reconstruct().transpose().max_abs_diff(&m.transpose()) / m.frobenius() < 1e-8);
            check_orthonormal(&f, 1e-8);
        }
    }

    #[test]
    fn rank_one_has_single_value() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 0.1, -0.7, 0.2, 0.9, -0.4];
        let m = Matrix::from_fn(4, 6, |i, j| u[i] * v[j]);
        let f = svd_decompose(&m).unwrap();
        assert!(f.s[0] > 1.0);
        assert!(f.s[1..].iter().all(|&s| s < 1e-10));
        check_orthonormal(&f, 1e-8);
        assert!(f.reconstruct().max_abs_diff(&m) < 1e-10);
        let zero = svd_decompose(&Matrix::new(3, 5, vec![0.0; 15]).unwrap()).unwrap();
        assert_eq!(zero.s, vec![0.0; 3]);
        check_orthonormal(&zero, 1e-12);
    }

    #[test]
    fn sign_convention() {
        let f = svd_decompose(&random_matrix(5, 12, 9)).unwrap();
        for k in 0..f.rank() {
            let lead = (0..5).map(|r| f.u.get(r, k)).fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(lead > 0.0);
        }
        let g = svd_decompose(&random_matrix(5, 12, 9)).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn values_invariant_under_column_permutation() {
        let m = random_matrix(6, 20, 11);
        let perm: Vec<usize> = (0..20).map(|j| (j * 7 + 3) % 20).collect();
        let p = Matrix::from_fn(6, 20, |i, j| m.get(i, perm[j]));
        let (a, b) = (svd_decompose(&m).unwrap(), svd_decompose(&p).unwrap());
        for (x, y) in a.s.iter().zip(&b.s) {
            assert!((x - y).abs() < 1e-12 * a.s[0]);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let m = Matrix::new(1, 2, vec![f64::NAN, 1.0]).unwrap();
        assert!(svd_decompose(&m).unwrap_err().is_numerical());
    }

    fn factors_with(s: Vec<f64>) -> SvdFactors {
        let r = s.len();
        SvdFactors {
            u: Matrix::identity(r),
            s,
            v: Matrix::identity(r),
        }
    }

    #[test]
    fn truncation_examples() {
        let f = factors_with(vec![10.0, 5.0, 2.0, 0.5]);
        let half = apply_truncation(&f, TruncationPolicy::RankFraction(0.5)).unwrap();
        assert_eq!(half.s, vec![10.0, 5.0]);
        assert_eq!((half.u.cols(), half.v.rows()), (2, 2));
        let thresh = apply_truncation(&f, TruncationPolicy::ThresholdFraction(0.1)).unwrap();
        assert_eq!(thresh.s, vec![10.0, 5.0, 2.0]);
        assert_eq!(apply_truncation(&f, TruncationPolicy::None).unwrap(), f);
        assert!(TruncationPolicy::RankFraction(0.0).validate().is_err());
        assert!(TruncationPolicy::ThresholdFraction(1.0).validate().is_err());
        let zero = factors_with(vec![0.0, 0.0]);
        assert!(apply_truncation(&zero, TruncationPolicy::ThresholdFraction(0.5)).is_ok());
        assert_eq!(TruncationPolicy::parse("rank 0.5").unwrap(), TruncationPolicy::RankFraction(0.5));
        assert!(TruncationPolicy::parse("rank 2").is_err());
    }

    #[test]
    fn threshold_monotone() {
        let f = svd_decompose(&random_matrix(10, 30, 4)).unwrap();
        let mut prev = usize::MAX;
        for t in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9] {
            let k = TruncationPolicy::ThresholdFraction(t).keep_count(&f.s).unwrap();
            assert!(k <= prev);
            prev = k;
        }
    }

    #[test]
    fn trainable_counts() {
        assert_eq!(count_trainable_raw(&[128, 128, 3, 3]), 147_456);
        let w = Tensor::<f64>::from_fn([128, 128, 3, 3], |k| ((k * 2654435761) % 1000) as f64 / 1000.0 - 0.5);
        let full = factorize_conv(&w, TruncationPolicy::None).unwrap();
        assert_eq!(count_trainable_svd(&full), 128);
        assert_eq!(count_trainable_raw(w.shape()) / count_trainable_svd(&full), 1152);
        let half = factorize_conv(&w, TruncationPolicy::RankFraction(0.5)).unwrap();
        assert_eq!(count_trainable_svd(&half), 64);
        let tiny = Tensor::new([1, 1, 1, 1], vec![2.0]).unwrap();
        assert_eq!(count_trainable_raw(tiny.shape()), 1);
        assert_eq!(count_trainable_svd(&factorize_conv(&tiny, TruncationPolicy::None).unwrap()), 1);
    }

    #[test]
    fn identity_kernel_factorizes_exactly() {
        let w = Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap();
        let f = factorize_conv(&w, TruncationPolicy::None).unwrap();
        let x = Tensor::from_fn([1, 4, 4], |k| k as f64 - 3.0);
        assert_eq!(f.conv2d(&x, None, 1, 0).unwrap(), x);
        assert!(factorize_conv(&Tensor::<f64>::zeros([2, 2, 2, 2]), TruncationPolicy::None).is_err());
    }
}
