//! Dense N-way tensors with mode-n matricization, folding and mode-n products.
//!
//! Storage is row-major (last index fastest). Matricization uses the survey
//! convention: the mode-n unfolding has `shape[n]` rows, and the remaining
//! modes index the columns with the lowest-numbered mode varying fastest.
//! Modes are 0-based throughout the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Dense N-way array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape("tensor order must be >= 1".into()));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!(
                "tensor extents must be >= 1: {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Build from a closure over the multi-index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for flat in 0..t.data.len() {
            t.data[flat] = f(&idx);
            Self::advance(&mut idx, shape);
        }
        t
    }

    fn advance(idx: &mut [usize], shape: &[usize]) {
        for m in (0..idx.len()).rev() {
            idx[m] += 1;
            if idx[m] < shape[m] {
                return;
            }
            idx[m] = 0;
        }
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Flat offset of a multi-index (row-major, last index fastest).
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (m, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[m]);
            off = off * self.shape[m] + i;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Relative Frobenius distance `||self - other||_F / ||self||_F`.
    pub fn rel_error(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        let denom = self.frobenius_norm();
        let diff = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if denom == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / denom
        }
    }

    /// Column weights of the mode-`mode` unfolding: the remaining modes index
    /// the columns with the lowest-numbered mode varying fastest.
    fn unfold_weights(&self, mode: usize) -> Vec<usize> {
        let mut w = vec![0usize; self.order()];
        let mut acc = 1usize;
        for m in 0..self.order() {
            if m == mode {
                continue;
            }
            w[m] = acc;
            acc *= self.shape[m];
        }
        w
    }

    /// Mode-n matricization: `shape[mode]` rows, one column per fiber.
    pub fn unfold(&self, mode: usize) -> Result<Matrix> {
        if mode >= self.order() {
            return Err(Error::InvalidArgument(format!(
                "mode {mode} out of range for order-{} tensor",
                self.order()
            )));
        }
        let rows = self.shape[mode];
        let cols = self.len() / rows;
        let w = self.unfold_weights(mode);
        let mut out = Matrix::zeros(rows, cols);
        let mut idx = vec![0usize; self.order()];
        for flat in 0..self.len() {
            let mut col = 0;
            for m in 0..self.order() {
                if m != mode {
                    col += idx[m] * w[m];
                }
            }
            out.set(idx[mode], col, self.data[flat]);
            Self::advance(&mut idx, &self.shape);
        }
        Ok(out)
    }

    /// Inverse of [`Tensor::unfold`] for the given mode and target shape.
    pub fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<Tensor> {
        if mode >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "mode {mode} out of range for shape {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || shape.is_empty() {
            return Err(Error::Shape(format!("invalid target shape {shape:?}")));
        }
        if m.rows() != shape[mode] || m.rows() * m.cols() != len {
            return Err(Error::Shape(format!(
                "matrix {}x{} inconsistent with shape {shape:?} at mode {mode}",
                m.rows(),
                m.cols()
            )));
        }
        let mut t = Tensor::zeros(shape);
        let w = t.unfold_weights(mode);
        let mut idx = vec![0usize; shape.len()];
        for flat in 0..len {
            let mut col = 0;
            for mm in 0..shape.len() {
                if mm != mode {
                    col += idx[mm] * w[mm];
                }
            }
            t.data[flat] = m.get(idx[mode], col);
            Self::advance(&mut idx, shape);
        }
        Ok(t)
    }

    /// Mode-n product: contracts `m` (`r x shape[mode]`) against mode `mode`,
    /// replacing that extent by `m.rows()`.
    pub fn mode_product(&self, m: &Matrix, mode: usize) -> Result<Tensor> {
        if mode >= self.order() {
            return Err(Error::InvalidArgument(format!(
                "mode {mode} out of range for order-{} tensor",
                self.order()
            )));
        }
        if m.cols() != self.shape[mode] {
            return Err(Error::Shape(format!(
                "mode-{} product needs {} columns, matrix is {}x{}",
                mode,
                self.shape[mode],
                m.rows(),
                m.cols()
            )));
        }
        let unfolded = self.unfold(mode)?;
        let product = m.matmul(&unfolded);
        let mut new_shape = self.shape.clone();
        new_shape[mode] = m.rows();
        Tensor::fold(&product, mode, &new_shape)
    }
}


pub mod test_support {
    //! Deterministic random tensors and matrices, used by tests and the
    //! synthetic-model generator.
    use super::Tensor;
    use crate::matrix::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng(seed);
        tensor_from_rng(shape, &mut rng)
    }

    pub fn tensor_from_rng(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rng(seed);
        matrix_from_rng(rows, cols, &mut rng)
    }

    pub fn matrix_from_rng(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Standard normal sample (Box-Muller; two uniforms per draw).
    pub fn normal(rng: &mut impl Rng) -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn unit_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        let v: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    /// Rank-`k` planted matrix: sum of `signal * u_i v_i^T` over k unit-vector
    /// pairs, plus iid Gaussian noise of the given standard deviation.
    pub fn planted_matrix(
        rows: usize,
        cols: usize,
        k: usize,
        signal: f64,
        noise: f64,
        seed: u64,
    ) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for comp in 0..k {
            let u = unit_vec(rows, seed * 1000 + comp as u64);
            let v = unit_vec(cols, seed * 1000 + 500 + comp as u64);
            for i in 0..rows {
                for j in 0..cols {
                    m.set(i, j, m.get(i, j) + signal * u[i] * v[j]);
                }
            }
        }
        let mut r = rng(seed * 7 + 13);
        for i in 0..rows {
            for j in 0..cols {
                let z = normal(&mut r);
                m.set(i, j, m.get(i, j) + noise * z);
            }
        }
        m
    }
}
