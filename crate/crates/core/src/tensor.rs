//! Dense row-major `f32` tensors and the few kernels the decoder needs.
//!
//! Every dot product accumulates left to right starting from `0.0`, so a
//! row computed alone and the same row computed inside a larger batch are
//! bitwise identical. Operations never mutate their inputs.

use crate::error::{Error, Result};

/// Base of the rotary embedding frequency ladder.
pub const ROPE_THETA: f32 = 10_000.0;

/// Epsilon inside the RMS normalization square root.
pub const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "every dimension must be at least 1".into(),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("data holds {} values, shape needs {expected}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// A `[n]` vector.
    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.last_dim();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// `[m×n] · [n×p] -> [m×p]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, n, p) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0f32; m * p];
    for i in 0..m {
        matvec_into(&a.data[i * n..(i + 1) * n], &b.data, p, &mut out[i * p..(i + 1) * p]);
    }
    Tensor::new(vec![m, p], out)
}

/// `out = x · w` for a row vector `x` and a row-major `[x.len() × p]`
/// matrix `w`. Each output accumulates over `k` in ascending order.
pub(crate) fn matvec_into(x: &[f32], w: &[f32], p: usize, out: &mut [f32]) {
    out.fill(0.0);
    for (k, &xk) in x.iter().enumerate() {
        let w_row = &w[k * p..(k + 1) * p];
        for (o, &wkj) in out.iter_mut().zip(w_row) {
            *o += xk * wkj;
        }
    }
}

/// Softmax along the trailing axis. Entries whose `admissible` flag is
/// false are left out of the max and the sum and come back as exactly 0.
/// `admissible`, when given, has one flag per element of `x`.
pub fn softmax_stable(x: &Tensor, admissible: Option<&[bool]>) -> Result<Tensor> {
    if let Some(mask) = admissible {
        if mask.len() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_stable",
                lhs: x.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
    }
    let n = x.last_dim();
    let mut out = x.data.clone();
    for (r, row) in out.chunks_mut(n).enumerate() {
        softmax_in_place(row, admissible.map(|m| &m[r * n..(r + 1) * n]))?;
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f32], admissible: Option<&[bool]>) -> Result<()> {
    let keep = |i: usize| admissible.is_none_or(|m| m[i]);
    let max = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| keep(i))
        .map(|(_, &v)| v)
        .fold(None, |acc: Option<f32>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or(Error::DegenerateAttentionRow)?;

    let mut sum = 0.0f32;
    for (i, v) in row.iter_mut().enumerate() {
        if keep(i) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// `x / sqrt(mean(x²) + eps) * gain` over each trailing-axis slice.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    if gain.shape.len() != 1 || gain.len() != x.last_dim() {
        return Err(Error::ShapeMismatch {
            op: "rms_norm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data.chunks(gain.len()).zip(out.chunks_mut(gain.len())) {
        rms_norm_into(src, &gain.data, eps, dst);
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn rms_norm_into(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    let mut sum_sq = 0.0f32;
    for &v in x {
        sum_sq += v * v;
    }
    let inv = 1.0 / (sum_sq / x.len() as f32 + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

/// Rotary position embedding: pairs `(x[2j], x[2j+1])` of every trailing
/// slice are rotated by `position * theta_base^(-2j/head_dim)`.
pub fn rope_apply(x: &Tensor, position: usize, theta_base: f32) -> Result<Tensor> {
    let head_dim = x.last_dim();
    if !head_dim.is_multiple_of(2) {
        return Err(Error::OddHeadDim(head_dim));
    }
    let mut out = x.data.clone();
    rope_in_place(&mut out, head_dim, position, theta_base);
    Tensor::new(x.shape.clone(), out)
}

/// Rotates every `head_dim`-long chunk of `data` in place.
pub(crate) fn rope_in_place(data: &mut [f32], head_dim: usize, position: usize, theta_base: f32) {
    debug_assert!(head_dim.is_multiple_of(2) && data.len().is_multiple_of(head_dim));
    let pairs = head_dim / 2;
    let rotations: Vec<(f32, f32)> = (0..pairs)
        .map(|j| {
            let freq = (theta_base as f64).powf(-2.0 * j as f64 / head_dim as f64);
            let angle = position as f64 * freq;
            (angle.cos() as f32, angle.sin() as f32)
        })
        .collect();
    for head in data.chunks_mut(head_dim) {
        for (pair, &(cos, sin)) in head.chunks_mut(2).zip(&rotations) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * cos - b * sin;
            pair[1] = a * sin + b * cos;
        }
    }
}

pub(crate) fn silu(t: f32) -> f32 {
    t / (1.0 + (-t).exp())
}

/// Elementwise `silu(x1) * x3`.
pub fn silu_gate(x1: &Tensor, x3: &Tensor) -> Result<Tensor> {
    if x1.shape != x3.shape {
        return Err(Error::ShapeMismatch {
            op: "silu_gate",
            lhs: x1.shape.clone(),
            rhs: x3.shape.clone(),
        });
    }
    let data = x1
        .data
        .iter()
        .zip(&x3.data)
        .map(|(&a, &b)| silu(a) * b)
        .collect();
    Tensor::new(x1.shape.clone(), data)
}
