//! Barlow Twins objective: per-branch batch normalisation, the
//! cross-correlation matrix, the redundancy-reduction loss, the L2,1
//! projector penalty, and their analytic gradients.
//!
//! Everything here is generic over the float type so the same code runs in
//! `f32` during training and in `f64` for gradient checks.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;

/// Lower bound on the per-column standard deviation used when normalising.
pub const STD_FLOOR: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum SslError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("expected a {0} batch")]
    Normalization(&'static str),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Float> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, SslError> {
        if data.len() != rows * cols {
            return Err(SslError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, SslError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(SslError::Shape("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, T::one());
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

/// `scale * aᵀ b` for `a: n×p`, `b: n×q`, giving `p×q`.
fn scaled_at_b<T: Float + Send + Sync>(a: &Matrix<T>, b: &Matrix<T>, scale: T) -> Matrix<T> {
    let (n, p, q) = (a.rows, a.cols, b.cols);
    let rows: Vec<Vec<T>> = exec::map_indexed(p, |i| {
        let mut out = vec![T::zero(); q];
        for k in 0..n {
            let aik = a.data[k * p + i];
            if aik == T::zero() {
                continue;
            }
            let brow = &b.data[k * q..(k + 1) * q];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
        out.into_iter().map(|v| v * scale).collect()
    });
    Matrix { rows: p, cols: q, data: rows.concat() }
}

/// `scale * a b` for `a: n×p`, `b: p×q`.
fn scaled_a_b<T: Float + Send + Sync>(a: &Matrix<T>, b: &Matrix<T>, scale: T) -> Matrix<T> {
    let (n, p, q) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(p, b.rows);
    let rows: Vec<Vec<T>> = exec::map_indexed(n, |k| {
        let mut out = vec![T::zero(); q];
        for i in 0..p {
            let aki = a.data[k * p + i];
            let brow = &b.data[i * q..(i + 1) * q];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o = *o + aki * bv;
            }
        }
        out.into_iter().map(|v| v * scale).collect()
    });
    Matrix { rows: n, cols: q, data: rows.concat() }
}

/// One branch's projector outputs, `n` samples by `d` features.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch<T> {
    pub values: Matrix<T>,
    pub normalized: bool,
}

impl<T: Float> EmbeddingBatch<T> {
    pub fn new(values: Matrix<T>) -> Self {
        Self { values, normalized: false }
    }

    pub fn n(&self) -> usize {
        self.values.rows
    }

    pub fn d(&self) -> usize {
        self.values.cols
    }
}

/// Per-column statistics kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    /// Divisor actually used, `max(σ, STD_FLOOR)`.
    pub scale: Vec<T>,
    /// Whether the floor was active for the column.
    pub floored: Vec<bool>,
}

/// Normalise each column to zero mean and unit population std.
pub fn normalize_batch<T: Float>(z: &EmbeddingBatch<T>) -> Result<EmbeddingBatch<T>, SslError> {
    normalize_with_stats(z).map(|(b, _)| b)
}

pub fn normalize_with_stats<T: Float>(
    z: &EmbeddingBatch<T>,
) -> Result<(EmbeddingBatch<T>, NormStats<T>), SslError> {
    if z.normalized {
        return Err(SslError::Normalization("raw"));
    }
    let (n, d) = (z.n(), z.d());
    if n < 2 {
        return Err(SslError::Shape(format!("batch size {n} < 2")));
    }
    let nf = T::from(n).unwrap();
    let floor = T::from(STD_FLOOR).unwrap();
    let mut out = z.values.clone();
    let mut scale = Vec::with_capacity(d);
    let mut floored = Vec::with_capacity(d);
    for c in 0..d {
        let mean = (0..n).fold(T::zero(), |s, r| s + z.values.get(r, c)) / nf;
        let var = (0..n).fold(T::zero(), |s, r| {
            let dv = z.values.get(r, c) - mean;
            s + dv * dv
        }) / nf;
        let sigma = var.sqrt();
        let s = if sigma > floor { sigma } else { floor };
        for r in 0..n {
            out.set(r, c, (z.values.get(r, c) - mean) / s);
        }
        scale.push(s);
        floored.push(sigma <= floor);
    }
    Ok((EmbeddingBatch { values: out, normalized: true }, NormStats { scale, floored }))
}

/// Backward pass of [`normalize_batch`]: maps `dL/dẑ` to `dL/dz`.
pub fn normalize_backward<T: Float>(
    normalized: &Matrix<T>,
    stats: &NormStats<T>,
    grad_out: &Matrix<T>,
) -> Matrix<T> {
    let (n, d) = (normalized.rows, normalized.cols);
    let nf = T::from(n).unwrap();
    let mut grad = Matrix::zeros(n, d);
    for c in 0..d {
        let mean_g = (0..n).fold(T::zero(), |s, r| s + grad_out.get(r, c)) / nf;
        let mean_gy = if stats.floored[c] {
            T::zero()
        } else {
            (0..n).fold(T::zero(), |s, r| s + grad_out.get(r, c) * normalized.get(r, c)) / nf
        };
        for r in 0..n {
            let g = grad_out.get(r, c) - mean_g - normalized.get(r, c) * mean_gy;
            grad.set(r, c, g / stats.scale[c]);
        }
    }
    grad
}

/// `d×d` cross-correlation between two normalised branches.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCorrelation<T> {
    pub values: Matrix<T>,
}

impl<T: Float> CrossCorrelation<T> {
    pub fn from_matrix(values: Matrix<T>) -> Result<Self, SslError> {
        if values.rows != values.cols {
            return Err(SslError::Shape(format!(
                "cross-correlation must be square, got {}x{}",
                values.rows, values.cols
            )));
        }
        Ok(Self { values })
    }

    pub fn transpose(&self) -> Self {
        Self { values: self.values.transpose() }
    }
}

/// `C = (1/n) z′ᵀ z`; entry `(i, j)` correlates feature `i` of `z′` with feature `j` of `z`.
pub fn cross_correlation<T: Float + Send + Sync>(
    z: &EmbeddingBatch<T>,
    z_prime: &EmbeddingBatch<T>,
) -> Result<CrossCorrelation<T>, SslError> {
    if !z.normalized || !z_prime.normalized {
        return Err(SslError::Normalization("normalized"));
    }
    if z.n() != z_prime.n() || z.d() != z_prime.d() {
        return Err(SslError::Shape(format!(
            "branches differ: {}x{} vs {}x{}",
            z.n(),
            z.d(),
            z_prime.n(),
            z_prime.d()
        )));
    }
    let inv_n = T::one() / T::from(z.n()).unwrap();
    Ok(CrossCorrelation { values: scaled_at_b(&z_prime.values, &z.values, inv_n) })
}

/// Which slices of the final projector weight form one L2,1 group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L21Grouping {
    /// One group per output unit (row of an `out×in` weight).
    #[default]
    Rows,
    Columns,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the off-diagonal (redundancy reduction) term.
    pub lambda: f64,
    /// Weight of the L2,1 penalty on the final projector layer.
    pub alpha: f64,
    pub grouping: L21Grouping,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1.0 / 8192.0, alpha: 0.01, grouping: L21Grouping::Rows }
    }
}

/// `Σᵢ (Cᵢᵢ − 1)² + λ Σ_{i≠j} Cᵢⱼ²`.
pub fn barlow_twins_loss<T: Float>(c: &CrossCorrelation<T>, cfg: &LossConfig) -> T {
    let d = c.values.rows;
    let lambda = T::from(cfg.lambda).unwrap();
    let mut on = T::zero();
    let mut off = T::zero();
    for i in 0..d {
        for j in 0..d {
            let v = c.values.get(i, j);
            if i == j {
                on = on + (v - T::one()) * (v - T::one());
            } else {
                off = off + v * v;
            }
        }
    }
    on + lambda * off
}

/// `dL/dC` for [`barlow_twins_loss`].
pub fn barlow_twins_loss_grad<T: Float>(c: &CrossCorrelation<T>, cfg: &LossConfig) -> Matrix<T> {
    let d = c.values.rows;
    let two = T::from(2.0).unwrap();
    let lambda = T::from(cfg.lambda).unwrap();
    let mut g = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let v = c.values.get(i, j);
            g.set(i, j, if i == j { two * (v - T::one()) } else { two * lambda * v });
        }
    }
    g
}

fn group_norms<T: Float>(w: &Matrix<T>, grouping: L21Grouping) -> Vec<T> {
    match grouping {
        L21Grouping::Rows => (0..w.rows)
            .map(|r| (0..w.cols).fold(T::zero(), |s, c| s + w.get(r, c) * w.get(r, c)).sqrt())
            .collect(),
        L21Grouping::Columns => (0..w.cols)
            .map(|c| (0..w.rows).fold(T::zero(), |s, r| s + w.get(r, c) * w.get(r, c)).sqrt())
            .collect(),
    }
}

/// Sum of the Euclidean norms of the rows of `w`.
pub fn l21_norm<T: Float>(w: &Matrix<T>) -> T {
    l21_norm_grouped(w, L21Grouping::Rows)
}

pub fn l21_norm_grouped<T: Float>(w: &Matrix<T>, grouping: L21Grouping) -> T {
    group_norms(w, grouping).into_iter().fold(T::zero(), |s, v| s + v)
}

/// Gradient of the L2,1 norm. Zero groups get the zero subgradient.
pub fn l21_grad<T: Float>(w: &Matrix<T>, grouping: L21Grouping) -> Matrix<T> {
    let norms = group_norms(w, grouping);
    let mut g = Matrix::zeros(w.rows, w.cols);
    for r in 0..w.rows {
        for c in 0..w.cols {
            let norm = match grouping {
                L21Grouping::Rows => norms[r],
                L21Grouping::Columns => norms[c],
            };
            if norm > T::zero() {
                g.set(r, c, w.get(r, c) / norm);
            }
        }
    }
    g
}

/// Barlow Twins loss plus `α‖W‖₂,₁`.
pub fn sparse_bt_loss<T: Float>(c: &CrossCorrelation<T>, w_final: &Matrix<T>, cfg: &LossConfig) -> T {
    barlow_twins_loss(c, cfg) + T::from(cfg.alpha).unwrap() * l21_norm_grouped(w_final, cfg.grouping)
}

/// Loss value and gradients of the composed normalise → correlate → loss map.
#[derive(Debug, Clone)]
pub struct BranchGradients<T> {
    pub loss: T,
    pub correlation: CrossCorrelation<T>,
    /// `dL/dz` for the first branch (raw, pre-normalisation).
    pub grad_z: Matrix<T>,
    /// `dL/dz′` for the second branch.
    pub grad_z_prime: Matrix<T>,
}

/// Forward and backward through the Barlow Twins loss (without the L2,1 term).
pub fn barlow_twins_forward_backward<T: Float + Send + Sync>(
    z: &EmbeddingBatch<T>,
    z_prime: &EmbeddingBatch<T>,
    cfg: &LossConfig,
) -> Result<BranchGradients<T>, SslError> {
    let (zn, zs) = normalize_with_stats(z)?;
    let (zpn, zps) = normalize_with_stats(z_prime)?;
    let c = cross_correlation(&zn, &zpn)?;
    let loss = barlow_twins_loss(&c, cfg);
    let g = barlow_twins_loss_grad(&c, cfg);
    let inv_n = T::one() / T::from(z.n()).unwrap();
    // dL/dẑ = (1/n) ẑ′ G ;  dL/dẑ′ = (1/n) ẑ Gᵀ
    let d_zn = scaled_a_b(&zpn.values, &g, inv_n);
    let d_zpn = scaled_a_b(&zn.values, &g.transpose(), inv_n);
    Ok(BranchGradients {
        loss,
        correlation: c,
        grad_z: normalize_backward(&zn.values, &zs, &d_zn),
        grad_z_prime: normalize_backward(&zpn.values, &zps, &d_zpn),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn col(v: &[f64]) -> EmbeddingBatch<f64> {
        EmbeddingBatch::new(Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap())
    }

    #[test]
    fn normalize_two_point_column_is_fixed() {
        let out = normalize_batch(&col(&[1.0, -1.0])).unwrap();
        assert!(out.normalized);
        assert_eq!(out.values.as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn normalize_three_point_column() {
        let out = normalize_batch(&col(&[2.0, 0.0, -2.0])).unwrap();
        // σ = sqrt(8/3), 2/σ = sqrt(3/2)
        let e = (1.5f64).sqrt();
        let v = out.values.as_slice();
        assert!(close(v[0], e, 1e-12) && close(v[1], 0.0, 1e-12) && close(v[2], -e, 1e-12));
        assert!(close(e, 1.2247, 1e-4));
    }

    #[test]
    fn normalize_constant_column_hits_floor() {
        let out = normalize_batch(&col(&[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(out.values.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_single_row_and_double_normalisation() {
        assert!(matches!(normalize_batch(&col(&[1.0])), Err(SslError::Shape(_))));
        let n = normalize_batch(&col(&[1.0, 2.0])).unwrap();
        assert!(normalize_batch(&n).is_err());
    }

    #[test]
    fn cross_correlation_fixture() {
        let z = EmbeddingBatch {
            values: Matrix::from_rows(&[vec![1.0, 1.0], vec![-1.0, -1.0]]).unwrap(),
            normalized: true,
        };
        let c = cross_correlation(&z, &z).unwrap();
        assert_eq!(c.values.as_slice(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(barlow_twins_loss(&c, &LossConfig { lambda: 1.0, ..Default::default() }), 2.0);
        assert_eq!(barlow_twins_loss(&c, &LossConfig { lambda: 0.5, ..Default::default() }), 1.0);
    }

    #[test]
    fn decorrelated_self_and_negated() {
        // Columns of a 4×2 Hadamard-like block are orthogonal with unit population std.
        let rows = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]];
        let z = EmbeddingBatch { values: Matrix::from_rows(&rows).unwrap(), normalized: true };
        let c = cross_correlation(&z, &z).unwrap();
        assert_eq!(c.values, Matrix::identity(2));
        let neg = EmbeddingBatch { values: z.values.map(|v| -v), normalized: true };
        let cn = cross_correlation(&z, &neg).unwrap();
        assert_eq!(cn.values, Matrix::<f64>::identity(2).map(|v| -v));
        assert_eq!(barlow_twins_loss(&c, &LossConfig::default()), 0.0);
    }

    #[test]
    fn cross_correlation_rejects_mismatch() {
        let a = EmbeddingBatch { values: Matrix::<f64>::zeros(4, 2), normalized: true };
        let b = EmbeddingBatch { values: Matrix::<f64>::zeros(4, 3), normalized: true };
        assert!(matches!(cross_correlation(&a, &b), Err(SslError::Shape(_))));
        let c = EmbeddingBatch { values: Matrix::<f64>::zeros(3, 2), normalized: true };
        assert!(cross_correlation(&a, &c).is_err());
    }

    #[test]
    fn l21_fixtures() {
        assert_eq!(l21_norm(&Matrix::<f64>::identity(2)), 2.0);
        assert_eq!(l21_norm(&Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap()), 5.0);
        assert_eq!(l21_norm(&Matrix::<f64>::zeros(3, 3)), 0.0);
        let w = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(l21_norm_grouped(&w, L21Grouping::Columns), 7.0);
    }

    #[test]
    fn sparse_loss_fixtures() {
        let c = CrossCorrelation::from_matrix(Matrix::<f64>::identity(2)).unwrap();
        let cfg = LossConfig { alpha: 0.01, ..Default::default() };
        assert_eq!(sparse_bt_loss(&c, &Matrix::zeros(2, 2), &cfg), 0.0);
        assert!(close(sparse_bt_loss(&c, &Matrix::identity(2), &cfg), 0.02, 1e-15));
        let c2 = CrossCorrelation::from_matrix(
            Matrix::from_rows(&[vec![0.7, 0.2], vec![-0.1, 1.3]]).unwrap(),
        )
        .unwrap();
        let no_alpha = LossConfig { alpha: 0.0, ..cfg };
        assert_eq!(
            sparse_bt_loss(&c2, &Matrix::identity(2), &no_alpha),
            barlow_twins_loss(&c2, &no_alpha)
        );
    }

    #[test]
    fn loss_is_zero_only_at_identity() {
        let cfg = LossConfig { lambda: 0.3, ..Default::default() };
        for i in 0..3 {
            for j in 0..3 {
                let mut m = Matrix::<f64>::identity(3);
                m.set(i, j, m.get(i, j) + 1e-3);
                let l = barlow_twins_loss(&CrossCorrelation { values: m }, &cfg);
                assert!(l > 0.0, "perturbing ({i},{j}) gave {l}");
            }
        }
    }
}
