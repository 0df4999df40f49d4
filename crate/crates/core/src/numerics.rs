//! Dense double-precision matrices, a seeded random generator and weight
//! initialization.
//!
//! Every matrix product accumulates each output entry as a single running
//! sum over the inner index in increasing order, starting from `0.0`. The
//! blocked kernel below only changes which entries are computed together,
//! never the order of additions into one entry, so results are bitwise equal
//! to the textbook triple loop.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(
                    "Matrix::from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a 0-column matrix has no data anyway
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    /// Rows `idx[0], idx[1], ...` copied into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Matrix, factor: f64) -> Result<()> {
        self.check_same_shape(other, "Matrix::add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "Matrix::sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }
}

const MR: usize = 4;
const NR: usize = 8;
const KC: usize = 256;

/// Matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dim(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(c);
    }

    // Pack B into column panels of width NR (zero padded), and A into row
    // blocks of height MR (zero padded), both with the inner index outermost.
    let n_panels = n.div_ceil(NR);
    let m_blocks = m.div_ceil(MR);
    let mut bpack = vec![0.0; n_panels * k * NR];
    for jp in 0..n_panels {
        let panel = &mut bpack[jp * k * NR..(jp + 1) * k * NR];
        let j0 = jp * NR;
        let w = NR.min(n - j0);
        for p in 0..k {
            panel[p * NR..p * NR + w].copy_from_slice(&b.data[p * n + j0..p * n + j0 + w]);
        }
    }
    let mut apack = vec![0.0; m_blocks * k * MR];
    for ib in 0..m_blocks {
        let block = &mut apack[ib * k * MR..(ib + 1) * k * MR];
        let i0 = ib * MR;
        for r in 0..MR.min(m - i0) {
            let arow = a.row(i0 + r);
            for p in 0..k {
                block[p * MR + r] = arow[p];
            }
        }
    }

    let mut k0 = 0;
    while k0 < k {
        let k1 = (k0 + KC).min(k);
        for jp in 0..n_panels {
            let panel = &bpack[jp * k * NR..(jp + 1) * k * NR];
            let j0 = jp * NR;
            let w = NR.min(n - j0);
            for ib in 0..m_blocks {
                let block = &apack[ib * k * MR..(ib + 1) * k * MR];
                let i0 = ib * MR;
                let h = MR.min(m - i0);
                let mut acc = [[0.0f64; NR]; MR];
                for r in 0..h {
                    acc[r][..w].copy_from_slice(&c.data[(i0 + r) * n + j0..(i0 + r) * n + j0 + w]);
                }
                tile_kernel(&mut acc, &block[k0 * MR..k1 * MR], &panel[k0 * NR..k1 * NR]);
                for r in 0..h {
                    c.data[(i0 + r) * n + j0..(i0 + r) * n + j0 + w].copy_from_slice(&acc[r][..w]);
                }
            }
        }
        k0 = k1;
    }
    Ok(c)
}

#[inline(always)]
fn tile_kernel(acc: &mut [[f64; NR]; MR], a: &[f64], b: &[f64]) {
    for (av, bv) in a.chunks_exact(MR).zip(b.chunks_exact(NR)) {
        for r in 0..MR {
            let x = av[r];
            for c in 0..NR {
                acc[r][c] += x * bv[c];
            }
        }
    }
}

/// Seeded ChaCha8 generator. Identical `(seed, stream)` pairs produce
/// identical draw sequences; the word position can be saved and restored.
#[derive(Clone, Debug, PartialEq)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn restore(seed: u64, stream: u64, word_pos: u128) -> Self {
        let mut rng = Self::with_stream(seed, stream);
        rng.inner.set_word_pos(word_pos);
        rng
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniformly random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.inner);
        idx
    }
}

/// Standard deviation of the leaky-ReLU-adjusted He initialization.
pub fn init_std(fan_in: usize, slope: f64) -> f64 {
    (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt()
}

/// `fan_out x fan_in` weight matrix with i.i.d. `N(0, init_std^2)` entries.
pub fn init_weights(fan_in: usize, fan_out: usize, slope: f64, rng: &mut Rng) -> Result<Matrix> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidArgument(format!(
            "init_weights needs fan_in, fan_out >= 1 (got {fan_in}, {fan_out})"
        )));
    }
    let std = init_std(fan_in, slope);
    let data = (0..fan_in * fan_out).map(|_| std * rng.normal()).collect();
    Matrix::new(fan_out, fan_in, data)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    #[test]
    fn identity_times_a_is_a() {
        let mut rng = Rng::new(3);
        let a = random(3, 3, &mut rng);
        assert_eq!(Matrix::identity(3).matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&Matrix::identity(3)).unwrap(), a);
    }

    #[test]
    fn small_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matches_triple_loop_bitwise() {
        let mut rng = Rng::new(11);
        for &(m, k, n) in &[(5, 4, 3), (1, 1, 1), (9, 300, 17), (13, 513, 8), (4, 8, 9)] {
            let a = random(m, k, &mut rng);
            let b = random(k, n, &mut rng);
            let fast = matmul(&a, &b).unwrap();
            let slow = naive(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{m}x{k}x{n}");
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn init_std_matches_formula() {
        let mut rng = Rng::new(7);
        let w = init_weights(1024, 1000, 0.01, &mut rng).unwrap();
        let n = w.data().len() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected = (2.0 / (1.0001 * 1024.0f64)).sqrt();
        assert!((expected - 0.0442).abs() < 1e-4);
        assert!((var.sqrt() / expected - 1.0).abs() < 0.05);
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn init_fan_in_one() {
        assert!((init_std(1, 0.01) - (2.0 / 1.0001f64).sqrt()).abs() < 1e-15);
        assert!(init_weights(0, 3, 0.01, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = init_weights(20, 10, 0.01, &mut Rng::new(42)).unwrap();
        let b = init_weights(20, 10, 0.01, &mut Rng::new(42)).unwrap();
        let c = init_weights(20, 10, 0.01, &mut Rng::new(43)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rng_restores_position() {
        let mut rng = Rng::with_stream(5, 2);
        for _ in 0..17 {
            rng.normal();
        }
        let mut resumed = Rng::restore(5, 2, rng.word_pos());
        for _ in 0..10 {
            assert_eq!(rng.next_u64(), resumed.next_u64());
        }
    }
}
