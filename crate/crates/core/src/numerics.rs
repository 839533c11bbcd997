//! Dense row-major linear algebra and seeded sampling.
//!
//! Every reduction sums its terms in ascending index order starting from
//! `0.0`, so a given sequence of operations yields the same bits on every run.
//! `matvec` and `matmul` share that order, which makes a batched forward pass
//! bit-identical to the equivalent per-sample pass.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Plain vectors are `Vec<f64>` / `&[f64]`.
pub type Vector = Vec<f64>;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} entries", rows * cols),
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. Panics on ragged input; meant
    /// for literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vector {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v * v)
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Matrix) -> Option<f64> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(0.0, |m: f64, (a, b)| m.max((a - b).abs())),
        )
    }

    /// Copy of the block starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |r, c| self[(r0 + r, c0 + c)])
    }

    /// Keeps the listed rows, in the order given.
    pub fn select_rows(&self, keep: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(keep.len() * self.cols);
        for &r in keep {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: keep.len(),
            cols: self.cols,
            data,
        }
    }

    /// Keeps the listed columns, in the order given.
    pub fn select_cols(&self, keep: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, keep.len(), |r, c| self[(r, keep[c])])
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("dot", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y))
}

pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vector> {
    if m.cols != v.len() {
        return Err(Error::shape("matvec", m.cols, v.len()));
    }
    Ok((0..m.rows)
        .map(|r| m.row(r).iter().zip(v).fold(0.0, |acc, (a, b)| acc + a * b))
        .collect())
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Result<Vector> {
    if a.len() != b.len() {
        return Err(Error::shape("hadamard", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

/// `a · b`. Each entry accumulates over the inner index in ascending order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{} rows on the right", a.cols),
            b.rows,
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let layout = Gemm {
        m: a.rows,
        n: b.cols,
        depth: a.cols,
        stride_i: a.cols,
        stride_k: 1,
    };
    layout.run(&mut out.data, &a.data, &b.data);
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_tn",
            format!("{} rows on the right", a.rows),
            b.rows,
        ));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    let layout = Gemm {
        m: a.cols,
        n: b.cols,
        depth: a.rows,
        stride_i: 1,
        stride_k: a.cols,
    };
    layout.run(&mut out.data, &a.data, &b.data);
    Ok(out)
}

const LANES: usize = 8;

/// `out[i][j] = Σ_k a[i·stride_i + k·stride_k] · b[k][j]`, every sum taken
/// in ascending `k` starting from zero. Blocking only changes which sums are
/// in flight together, never the order inside one sum, so results equal a
/// left-to-right dot product bit for bit.
#[derive(Clone, Copy)]
struct Gemm {
    m: usize,
    n: usize,
    depth: usize,
    stride_i: usize,
    stride_k: usize,
}

impl Gemm {
    fn run(self, out: &mut [f64], a: &[f64], b: &[f64]) {
        if self.m == 0 || self.n == 0 {
            return;
        }
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: the feature was detected at runtime just above.
            unsafe { self.run_avx(out, a, b) };
            return;
        }
        self.run_generic(out, a, b);
    }

    // No FMA: separate multiply and add keep the rounding identical to the
    // generic path.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx")]
    unsafe fn run_avx(self, out: &mut [f64], a: &[f64], b: &[f64]) {
        self.run_generic(out, a, b);
    }

    #[inline(always)]
    fn run_generic(self, out: &mut [f64], a: &[f64], b: &[f64]) {
        let mut i = 0;
        while i + 4 <= self.m {
            self.block::<4>(out, a, b, i);
            i += 4;
        }
        while i < self.m {
            self.block::<1>(out, a, b, i);
            i += 1;
        }
    }

    #[inline(always)]
    fn block<const R: usize>(self, out: &mut [f64], a: &[f64], b: &[f64], i0: usize) {
        let n = self.n;
        // packed[k] holds the R left-hand coefficients for inner index k.
        let mut packed = vec![[0.0; R]; self.depth];
        for (k, p) in packed.iter_mut().enumerate() {
            for (r, v) in p.iter_mut().enumerate() {
                *v = a[(i0 + r) * self.stride_i + k * self.stride_k];
            }
        }
        let b = &b[..self.depth * n];
        let mut j0 = 0;
        while j0 + LANES <= n {
            self.chunk::<R, LANES>(out, &packed, b, i0, j0);
            j0 += LANES;
        }
        if j0 + LANES / 2 <= n {
            self.chunk::<R, { LANES / 2 }>(out, &packed, b, i0, j0);
            j0 += LANES / 2;
        }
        while j0 < n {
            self.chunk::<R, 1>(out, &packed, b, i0, j0);
            j0 += 1;
        }
    }

    #[inline(always)]
    fn chunk<const R: usize, const W: usize>(
        self,
        out: &mut [f64],
        packed: &[[f64; R]],
        b: &[f64],
        i0: usize,
        j0: usize,
    ) {
        let n = self.n;
        let mut acc = [[0.0; W]; R];
        for (coef, row) in packed.iter().zip(b.chunks_exact(n)) {
            let row: &[f64; W] = row[j0..j0 + W].try_into().unwrap();
            for (acc_r, &s) in acc.iter_mut().zip(coef) {
                for t in 0..W {
                    acc_r[t] += s * row[t];
                }
            }
        }
        for (r, acc_r) in acc.iter().enumerate() {
            let o = (i0 + r) * n + j0;
            out[o..o + W].copy_from_slice(acc_r);
        }
    }
}

/// ChaCha8 stream cipher generator (`rand_chacha`), seeded from a `u64`.
///
/// Independent sub-streams are obtained with [`SeededRng::with_stream`]
/// rather than by sharing one generator.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        self.inner.random_range(low..=high)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `fan_out × fan_in` matrix with entries uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Result<Matrix> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidArgument(format!(
            "glorot_uniform needs positive fans, got fan_in={fan_in}, fan_out={fan_out}"
        )));
    }
    let limit = glorot_limit(fan_in, fan_out);
    Ok(Matrix::from_fn(fan_out, fan_in, |_, _| {
        rng.uniform(-limit, limit)
    }))
}

/// `n × dim` matrix of i.i.d. standard normal rows.
pub fn sample_standard_gaussian(rng: &mut SeededRng, dim: usize, n: usize) -> Result<Matrix> {
    if dim == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "sample_standard_gaussian needs dim, n >= 1, got dim={dim}, n={n}"
        )));
    }
    Ok(Matrix::from_fn(n, dim, |_, _| rng.standard_normal()))
}
