//! Dense row-major `f64` tensors and the handful of numeric kernels the rest
//! of the crate is built on.
//!
//! Spatial tensors are channel-first: `K x H x W`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Dense N-dimensional array of finite `f64` values, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Summary norms of a tensor viewed as a flat vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub l2: f64,
    pub maxabs: f64,
    pub sum: f64,
    /// Sum of the positive part, `sum(max(x, 0))`.
    pub possum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(invalid(format!("shape {:?} needs {} values, got {}", shape, numel, data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("tensor values must be finite"));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernels whose output shape is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(K, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [k, h, w] => Ok((k, h, w)),
            _ => Err(invalid(format!("expected a K x H x W tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(invalid(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn elementwise(&self, other: &Tensor, op: BinaryOp) -> Result<Self> {
        if self.shape != other.shape {
            return Err(invalid(format!("shape mismatch: {:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| match op {
                BinaryOp::Add => a + b,
                BinaryOp::Mul => a * b,
            })
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.elementwise(other, BinaryOp::Add)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.elementwise(other, BinaryOp::Mul)
    }

    /// `self + c * other`, used for parameter updates.
    pub fn axpy(&self, c: f64, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(invalid(format!("shape mismatch: {:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + c * b).collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn norms(&self) -> Norms {
        norms(&self.data)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(invalid("dot of tensors with different shapes"));
        }
        Ok(dot(&self.data, &other.data))
    }

    /// Row-major matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = match self.shape[..] {
            [m, k] => (m, k),
            _ => return Err(invalid("matmul lhs must be rank 2")),
        };
        let n = match other.shape[..] {
            [k2, n] if k2 == k => n,
            _ => return Err(invalid(format!("matmul shapes {:?} x {:?} are incompatible", self.shape, other.shape))),
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let rhs = &other.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(rhs) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// Channel vector at spatial location `u = y * W + x` of a `K x H x W` tensor.
    pub fn column(&self, u: usize) -> Vec<f64> {
        let (k, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let hw = h * w;
        (0..k).map(|c| self.data[c * hw + u]).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn norms(v: &[f64]) -> Norms {
    let mut sq = 0.0;
    let mut maxabs = 0.0f64;
    let mut sum = 0.0;
    let mut possum = 0.0;
    for &x in v {
        sq += x * x;
        maxabs = maxabs.max(x.abs());
        sum += x;
        possum += x.max(0.0);
    }
    Norms { l2: sq.sqrt(), maxabs, sum, possum }
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(invalid(format!("kernel size must be odd and positive, got {kernel}")));
    }
    Ok(())
}

/// Unfolds every `N x N` zero-padded patch of a `K x H x W` tensor into a
/// column, giving a `(N*N*K) x (H*W)` matrix.
///
/// Row index is `c * N*N + ky * N + kx` (channel-major, then kernel rows).
pub fn unfold_patches(input: &Tensor, kernel: usize) -> Result<Tensor> {
    check_kernel(kernel)?;
    let (k, h, w) = input.dims3()?;
    let hw = h * w;
    let r = (kernel / 2) as isize;
    let rows = kernel * kernel * k;
    let src = input.data();
    let mut out = vec![0.0; rows * hw];
    for c in 0..k {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = c * kernel * kernel + ky * kernel + kx;
                let dst = &mut out[row * hw..(row + 1) * hw];
                let dy = ky as isize - r;
                let dx = kx as isize - r;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + x] = src[c * hw + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![rows, hw], out))
}

/// Adjoint of [`unfold_patches`]: scatters a `(N*N*K) x (H*W)` matrix back onto
/// a `K x H x W` tensor, summing overlapping contributions.
pub fn fold_patches(cols: &Tensor, kernel: usize, channels: usize, h: usize, w: usize) -> Result<Tensor> {
    check_kernel(kernel)?;
    let hw = h * w;
    if cols.shape() != [kernel * kernel * channels, hw] {
        return Err(invalid(format!("fold expects [{}, {}], got {:?}", kernel * kernel * channels, hw, cols.shape())));
    }
    let r = (kernel / 2) as isize;
    let src = cols.data();
    let mut out = vec![0.0; channels * hw];
    for c in 0..channels {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = c * kernel * kernel + ky * kernel + kx;
                let col = &src[row * hw..(row + 1) * hw];
                let dy = ky as isize - r;
                let dx = kx as isize - r;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[c * hw + sy as usize * w + sx as usize] += col[y * w + x];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![channels, h, w], out))
}
