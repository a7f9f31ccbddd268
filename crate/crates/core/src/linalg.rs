//! Dense row-major linear algebra and seeded random streams.
//!
//! Everything is `f64`. Vectors are plain slices / `Vec<f64>`; [`Matrix`] owns a
//! row-major buffer. The SPD solver is a Cholesky factorization that reports
//! the failing pivot instead of producing garbage on indefinite input.
//!
//! Randomness comes from [`RngState`], a ChaCha20 stream (RFC 7539 block
//! function, 20 rounds) keyed by `seed_from_u64(seed)`. Sub-streams are derived
//! by label: the label is hashed with 64-bit FNV-1a together with the parent
//! stream id and used as the ChaCha stream id, so two labels never share
//! keystream for the same seed. Normals use the ziggurat sampler of
//! `rand_distr::StandardNormal`.

use std::ops::{Index, IndexMut};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Wraps a row-major buffer. Fails if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("Matrix::from_vec", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim("Matrix::from_rows", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a 0-column matrix still has `rows` rows
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        check_dim("Matrix::add_scaled", self.data.len(), other.data.len())?;
        check_dim("Matrix::add_scaled", self.rows, other.rows)?;
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_dim("matmul", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), o_row);
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, i.e. row-by-row dot products.
    pub fn matmul_transpose(&self, other: &Matrix) -> Result<Matrix> {
        check_dim("matmul_transpose", self.cols, other.cols)?;
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn transpose_matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_dim("transpose_matmul", self.rows, other.rows)?;
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a != 0.0 {
                    axpy(a, b_row, &mut out.data[i * other.cols..(i + 1) * other.cols]);
                }
            }
        }
        Ok(out)
    }

    /// Adds `alpha · x xᵀ` to a square matrix, touching the upper triangle
    /// and mirroring so the result stays exactly symmetric.
    pub fn add_outer_symmetric(&mut self, alpha: f64, x: &[f64]) -> Result<()> {
        check_dim("add_outer_symmetric", self.rows, x.len())?;
        check_dim("add_outer_symmetric", self.rows, self.cols)?;
        self.add_outer_upper(alpha, x);
        self.mirror_upper();
        Ok(())
    }

    /// Adds `alpha · x xᵀ` to the upper triangle (diagonal included) only.
    /// Call [`Matrix::mirror_upper`] once after a batch of these.
    pub fn add_outer_upper(&mut self, alpha: f64, x: &[f64]) {
        let n = self.rows;
        for i in 0..n {
            let ax = alpha * x[i];
            if ax == 0.0 {
                continue;
            }
            axpy(ax, &x[i..], &mut self.data[i * n + i..(i + 1) * n]);
        }
    }

    pub fn add_to_diagonal(&mut self, alpha: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += alpha;
        }
    }

    /// Copies the upper triangle onto the lower one.
    pub fn mirror_upper(&mut self) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            for j in (i + 1)..n {
                self.data[j * self.cols + i] = self.data[i * self.cols + j];
            }
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// `log Σ exp(z)`, shifted by the maximum.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    check_dim("matvec", m.cols, v.len())?;
    Ok(m.row_iter().map(|r| dot(r, v)).collect())
}

/// `mᵀ v`.
pub fn matvec_transpose(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    check_dim("matvec_transpose", m.rows, v.len())?;
    let mut out = vec![0.0; m.cols];
    for (r, &vi) in m.row_iter().zip(v) {
        axpy(vi, r, &mut out);
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factors a symmetric matrix, reading only its lower triangle.
    pub fn factor(a: &Matrix) -> Result<Self> {
        check_dim("Cholesky::factor", a.rows(), a.cols())?;
        let n = a.rows();
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let (head, tail) = l.split_at_mut((j + 1) * n);
            let lj = &mut head[j * n..];
            let d = a[(j, j)] - dot(&lj[..j], &lj[..j]);
            if d.is_nan() || d <= 0.0 {
                return Err(Error::NotSpd { index: j, pivot: d });
            }
            let d = d.sqrt();
            lj[j] = d;
            let lj = &lj[..j];
            for (r, li) in tail.chunks_exact_mut(n).enumerate() {
                let i = j + 1 + r;
                li[j] = (a[(i, j)] - dot(&li[..j], lj)) / d;
            }
        }
        Ok(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn forward(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let s = y[i] - dot(row, &y[..i]);
            y[i] = s / self.l[i * n + i];
        }
        y
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_dim("Cholesky::solve", self.n, b.len())?;
        let n = self.n;
        let mut x = self.forward(b);
        for i in (0..n).rev() {
            let mut s = x[i];
            for (k, xk) in x.iter().enumerate().skip(i + 1) {
                s -= self.l[k * n + i] * xk;
            }
            x[i] = s / self.l[i * n + i];
        }
        Ok(x)
    }

    /// `bᵀ A⁻¹ b = ‖L⁻¹ b‖²`, using only the forward substitution.
    pub fn inv_quad_form(&self, b: &[f64]) -> Result<f64> {
        check_dim("Cholesky::inv_quad_form", self.n, b.len())?;
        let y = self.forward(b);
        Ok(dot(&y, &y))
    }
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    check_dim("solve_spd", a.rows(), b.len())?;
    Cholesky::factor(a)?.solve(b)
}

/// Power iteration for the largest singular value.
///
/// Each iteration does `v = Wᵀu/‖Wᵀu‖`, `u = Wv/‖Wv‖`, and the estimate is
/// `σ̂ = uᵀWv = ‖Wv‖`. The returned `u` is meant to be stored and passed back
/// in on the next call. With `iters == 0` the estimate is `‖Wᵀu0‖/‖u0‖`.
/// A zero matrix yields `σ̂ = 0` and returns `u0` unchanged.
pub fn power_iteration(w: &Matrix, iters: usize, u0: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_dim("power_iteration", w.rows(), u0.len())?;
    let u0_norm = norm(u0);
    if u0_norm == 0.0 {
        return Err(Error::InvalidArgument(
            "power iteration start vector is zero".into(),
        ));
    }
    let mut u: Vec<f64> = u0.iter().map(|x| x / u0_norm).collect();
    if iters == 0 {
        return Ok((norm(&matvec_transpose(w, &u)?), u));
    }
    let mut sigma = 0.0;
    for _ in 0..iters {
        let mut v = matvec_transpose(w, &u)?;
        let vn = norm(&v);
        if vn == 0.0 {
            return Ok((0.0, u0.to_vec()));
        }
        v.iter_mut().for_each(|x| *x /= vn);
        let mut wv = matvec(w, &v)?;
        sigma = norm(&wv);
        if sigma == 0.0 {
            return Ok((0.0, u0.to_vec()));
        }
        wv.iter_mut().for_each(|x| *x /= sigma);
        u = wv;
    }
    Ok((sigma, u))
}

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Seeded deterministic random stream.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: u64,
    rng: ChaCha20Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Independent stream for the same seed, identified by `label`.
    /// Does not consume anything from `self`.
    pub fn derive(&self, label: &str) -> Self {
        let stream = fnv1a(&[&self.stream.to_le_bytes(), label.as_bytes()]);
        Self::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    pub fn sample_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform draws on `[lo, hi)`.
    pub fn sample_uniform(&mut self, n: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
        if !(lo < hi) {
            return Err(Error::InvalidArgument(format!(
                "uniform bounds must satisfy lo < hi, got [{lo}, {hi})"
            )));
        }
        Ok((0..n).map(|_| self.uniform(lo, hi)).collect())
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, sd: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| sd * self.normal()).collect();
        Matrix { rows, cols, data }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.rng.random::<f64>() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_examples() {
        let v = matvec(&Matrix::identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(v, vec![1.0, 2.0, 3.0]);
        let v = matvec(&Matrix::zeros(2, 2), &[5.0, 7.0]).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matvec(&m, &[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn matvec_rejects_mismatch() {
        let err = matvec(&Matrix::identity(3), &[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn products_agree() {
        let mut rng = RngState::new(3);
        let a = rng.normal_matrix(3, 4, 1.0);
        let b = rng.normal_matrix(4, 2, 1.0);
        let ab = a.matmul(&b).unwrap();
        let ab2 = a.matmul_transpose(&b.transpose()).unwrap();
        let ab3 = a.transpose().transpose_matmul(&b).unwrap();
        for ((x, y), z) in ab.as_slice().iter().zip(ab2.as_slice()).zip(ab3.as_slice()) {
            assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn solve_spd_examples() {
        let x = solve_spd(&Matrix::identity(4), &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0, 4.0]);
        let a = Matrix::from_diag(&[2.0, 4.0]);
        let x = solve_spd(&a, &[2.0, 8.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn solve_spd_random_multiply_back() {
        let mut rng = RngState::new(11);
        let g = rng.normal_matrix(5, 5, 1.0);
        let mut a = g.matmul_transpose(&g).unwrap();
        a.add_scaled(1.0, &Matrix::identity(5)).unwrap();
        let b = rng.sample_normal(5);
        let x = solve_spd(&a, &b).unwrap();
        let back = matvec(&a, &x).unwrap();
        let resid = norm(&sub(&back, &b)) / norm(&b);
        assert!(resid <= 1e-10, "residual {resid}");
    }

    #[test]
    fn solve_spd_rejects_indefinite() {
        let a = Matrix::from_diag(&[1.0, -1.0]);
        assert!(matches!(solve_spd(&a, &[1.0, 1.0]), Err(Error::NotSpd { index: 1, .. })));
        assert!(matches!(
            solve_spd(&Matrix::zeros(2, 2), &[1.0, 1.0]),
            Err(Error::NotSpd { index: 0, .. })
        ));
    }

    #[test]
    fn inv_quad_form_matches_solve() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let b = [1.0, 2.0];
        let c = Cholesky::factor(&a).unwrap();
        let q = c.inv_quad_form(&b).unwrap();
        let x = c.solve(&b).unwrap();
        assert!((q - dot(&b, &x)).abs() < 1e-14);
    }

    #[test]
    fn power_iteration_identity_and_diag() {
        let (s, u) = power_iteration(&Matrix::identity(3), 1, &[0.3, -1.0, 2.0]).unwrap();
        assert!((s - 1.0).abs() <= 1e-12);
        assert!((norm(&u) - 1.0).abs() < 1e-12);
        let (s, _) = power_iteration(&Matrix::from_diag(&[3.0, 1.0]), 50, &[1.0, 1.0]).unwrap();
        assert!((s - 3.0).abs() <= 1e-9);
    }

    #[test]
    fn power_iteration_zero_matrix() {
        let u0 = [1.0, 2.0];
        let (s, u) = power_iteration(&Matrix::zeros(2, 3), 5, &u0).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(u, u0.to_vec());
    }

    #[test]
    fn power_iteration_monotone_in_iters() {
        let mut rng = RngState::new(5);
        let w = rng.normal_matrix(6, 4, 1.0);
        let u0 = rng.sample_normal(6);
        let mut prev = 0.0;
        for it in 0..30 {
            let (s, _) = power_iteration(&w, it, &u0).unwrap();
            assert!(s + 1e-12 >= prev, "iters {it}: {s} < {prev}");
            prev = s;
        }
    }

    #[test]
    fn rng_is_deterministic_and_streams_differ() {
        let a = RngState::new(42).sample_normal(16);
        let b = RngState::new(42).sample_normal(16);
        assert_eq!(a, b);
        let root = RngState::new(42);
        let c = root.derive("init").sample_normal(16);
        let d = root.derive("shuffle").sample_normal(16);
        assert_ne!(c, d);
        assert_eq!(c, RngState::new(42).derive("init").sample_normal(16));
    }

    #[test]
    fn normal_moments() {
        let n = 100_000;
        let x = RngState::new(7).sample_normal(n);
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        // sd of the mean is 1/sqrt(n) ≈ 0.0032, of the variance sqrt(2/n) ≈ 0.0045
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((0.97..1.03).contains(&var), "var {var}");
    }

    #[test]
    fn uniform_moments() {
        let n = 100_000;
        let two_pi = 2.0 * std::f64::consts::PI;
        let x = RngState::new(8).sample_uniform(n, 0.0, two_pi).unwrap();
        let mean = x.iter().sum::<f64>() / n as f64;
        assert!(x.iter().all(|&v| (0.0..=two_pi).contains(&v)));
        // sd of the mean is 2π/sqrt(12 n) ≈ 0.0057
        assert!((mean - std::f64::consts::PI).abs() < 0.03, "mean {mean}");
        assert!(RngState::new(0).sample_uniform(3, 1.0, 1.0).is_err());
    }
}
