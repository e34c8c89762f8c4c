//! Dense row-major tensors and the raw kernels the autodiff graph is built on.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape {
        op,
        detail: detail.into(),
    })
}

/// Maximum supported rank (batch x rows x cols).
pub const MAX_RANK: usize = 3;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return shape_err("new", format!("rank {} outside 1..={MAX_RANK}", shape.len()));
        }
        if shape.iter().any(|&s| s == 0) {
            return shape_err("new", format!("zero extent in {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err("new", format!("{shape:?} needs {n} elements, got {}", data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("valid shape")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("from_rows", "ragged rows");
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// (rows, cols) view of a rank-1 or rank-2 tensor; vectors are one row.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Some((1, *n)),
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map_or(0, |d| d.0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map_or(0, |d| d.1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() || shape.len() > MAX_RANK {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Round every element through 32-bit storage.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => return shape_err("transpose", format!("needs rank 2, got {:?}", self.shape)),
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

// Raw kernels on row-major slices.

/// `c += a0·b0 + a1·b1 + a2·b2 + a3·b3`, elementwise.
#[inline(always)]
fn axpy4(c: &mut [f64], a: [f64; 4], b: [&[f64]; 4]) {
    let n = c.len();
    let (b0, b1, b2, b3) = (&b[0][..n], &b[1][..n], &b[2][..n], &b[3][..n]);
    for j in 0..n {
        c[j] += a[0] * b0[j] + a[1] * b1[j] + a[2] * b2[j] + a[3] * b3[j];
    }
}

#[inline(always)]
fn axpy(c: &mut [f64], a: f64, b: &[f64]) {
    for (cv, bv) in c.iter_mut().zip(b) {
        *cv += a * bv;
    }
}

/// C[m×n] = A[m×k] · B[k×n]
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let k4 = k - k % 4;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for p in (0..k4).step_by(4) {
            let rows = [0, 1, 2, 3].map(|q| &b[(p + q) * n..(p + q + 1) * n]);
            axpy4(crow, [arow[p], arow[p + 1], arow[p + 2], arow[p + 3]], rows);
        }
        for p in k4..k {
            axpy(crow, arow[p], &b[p * n..(p + 1) * n]);
        }
    }
    c
}

/// C[m×k] = A[m×n] · B[k×n]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut bt = vec![0.0; n * k];
    for j in 0..k {
        for p in 0..n {
            bt[p * k + j] = b[j * n + p];
        }
    }
    gemm(a, &bt, m, n, k)
}

/// C[k×n] = A[m×k]ᵀ · B[m×n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    let m4 = m - m % 4;
    for i in (0..m4).step_by(4) {
        let rows = [0, 1, 2, 3].map(|q| &b[(i + q) * n..(i + q + 1) * n]);
        for p in 0..k {
            let av = [0, 1, 2, 3].map(|q| a[(i + q) * k + p]);
            axpy4(&mut c[p * n..(p + 1) * n], av, rows);
        }
    }
    for i in m4..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(&mut c[p * n..(p + 1) * n], a[i * k + p], brow);
        }
    }
    c
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn tanh_fast(u: f64) -> f64 {
    // tanh(±20) rounds to ±1 in f64
    let e = (2.0 * u.clamp(-20.0, 20.0)).exp_m1();
    e / (e + 2.0)
}

/// The inner `tanh(√(2/π)(x + 0.044715x³))` shared by value and derivative.
pub fn gelu_tanh(x: f64) -> f64 {
    tanh_fast(GELU_C * (x + GELU_A * x * x * x))
}

pub fn gelu_from_tanh(x: f64, t: f64) -> f64 {
    0.5 * x * (1.0 + t)
}

pub fn gelu_derivative_from_tanh(x: f64, t: f64) -> f64 {
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    gelu_from_tanh(x, gelu_tanh(x))
}

pub fn gelu_derivative(x: f64) -> f64 {
    gelu_derivative_from_tanh(x, gelu_tanh(x))
}
