//! Dense row-major f64 tensors plus the raw math the tape ops delegate to.
//!
//! Everything is 64-bit: at desk scale the cost is irrelevant and the
//! gradient checks need the precision.

use crate::error::{Error, Result};

pub const GELU_CUBIC: f64 = 0.044715;

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!("zero dimension in {dims:?}")));
        }
        if n != data.len() {
            return Err(Error::Contract(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(dims: &[usize], v: f64) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { dims: vec![1], data: vec![v] }
    }

    /// Identity matrix n×n.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(r > 0 && c > 0, "from_rows needs a non-empty matrix");
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor { dims: vec![r, c], data }
    }

    /// Fresh tensor with entries drawn uniform in [lo, hi).
    pub fn uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut crate::rng::Rng) -> Self {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        Tensor { dims: dims.to_vec(), data }
    }

    /// Xavier/Glorot uniform init for a fan_in×fan_out matrix.
    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut crate::rng::Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::uniform(&[fan_in, fan_out], -limit, limit, rng)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() needs rank 2, got {:?}", self.dims);
        self.dims[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() needs rank 2, got {:?}", self.dims);
        self.dims[1]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    /// One value; panics unless numel == 1.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() needs a scalar, got {:?}", self.dims);
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshaped(&self, dims: Vec<usize>) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if n != self.numel() {
            return Err(Error::Contract(format!(
                "cannot reshape {:?} ({} values) to {dims:?}",
                self.dims,
                self.numel()
            )));
        }
        Ok(Tensor { dims, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.dims, other.dims, "elementwise op dims {:?} vs {:?}", self.dims, other.dims);
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor { dims: vec![m, n], data: out }
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor { dims: vec![n, m], data: out }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// GELU via the tanh approximation 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
pub fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_CUBIC * x * x * x)).tanh())
}

/// Derivative of the tanh-approximation GELU.
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    assert_eq!(x.rank(), 2, "softmax_rows needs rank 2, got {:?}", x.dims());
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = x.row_slice(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let dst = &mut out[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = (v - max).exp();
            *d = e;
            sum += e;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Tensor { dims: vec![m, n], data: out }
}

/// Per-row statistics used by layer norm: (mean, 1/sqrt(var + eps)).
pub fn row_norm_stats(x: &Tensor, eps: f64) -> Vec<(f64, f64)> {
    let (m, n) = (x.rows(), x.cols());
    (0..m)
        .map(|i| {
            let row = x.row_slice(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

/// Layer norm: per-row standardization followed by an affine map.
/// `gain` and `bias` must both have `x.cols()` values.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    assert_eq!(gain.numel(), n, "layer_norm gain length {} vs {n}", gain.numel());
    assert_eq!(bias.numel(), n, "layer_norm bias length {} vs {n}", bias.numel());
    let stats = row_norm_stats(x, eps);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let (mean, inv_std) = stats[i];
        let row = x.row_slice(i);
        let dst = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            dst[j] = (row[j] - mean) * inv_std * gain.data()[j] + bias.data()[j];
        }
    }
    Tensor { dims: vec![m, n], data: out }
}
