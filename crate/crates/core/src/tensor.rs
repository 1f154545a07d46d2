//! Dense row-major `f32` tensors and the handful of differentiable operations
//! the encoder and trainer are built from.
//!
//! There is no autodiff graph. Every forward operation has a matching
//! `*_backward` function that maps an output gradient (plus whatever the
//! forward pass produced) to input gradients, and callers chain them by hand
//! over the fixed encoder graph. Gradients are plain [`Tensor`]s with the shape
//! of the value they belong to.
//!
//! Dot products accumulate in `f64`.

use crate::error::{Error, Result};

/// Epsilon used by every layer normalization in the encoder.
pub const LAYER_NORM_EPS: f32 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// A gradient buffer; always shaped like the tensor it belongs to.
pub type Gradient = Tensor;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(&other.shape)
    }

    /// Builds a `rows × cols` matrix from row-major values.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from nested rows; panics on ragged input. Test and fixture helper.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::Shape {
                op: "dims2",
                left: self.shape.clone(),
                right: vec![0, 0],
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Contiguous block of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    /// Contiguous block of columns `[start, end)` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor {
            shape: vec![r, w],
            data: out,
        }
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_cols(&mut self, start: usize, block: &Tensor) {
        let c = self.cols();
        let w = block.cols();
        for i in 0..self.rows() {
            self.data[i * c + start..i * c + start + w].copy_from_slice(block.row(i));
        }
    }

    /// Rows selected by index, in the given order.
    pub fn gather_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![rows.len(), c],
            data: out,
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        check_same("add_assign", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f32) {
        self.data.fill(v);
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum::<f64>() as f32
}

/// `a · b` for `a: n×k`, `b: k×m`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, k) = a.dims2()?;
    let (k2, _) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    matmul_nt(a, &b.transpose())
}

/// `a · bᵀ` for `a: n×k`, `b: m×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (m, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ar = a.row(i);
        for j in 0..m {
            out.push(dot(ar, b.row(j)));
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// Gradients of `a · b` with respect to `a` and `b`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, _) = a.dims2()?;
    let (_, m) = b.dims2()?;
    if grad.shape != [n, m] {
        return Err(Error::Shape {
            op: "matmul_backward",
            left: vec![n, m],
            right: grad.shape.clone(),
        });
    }
    // dA = G Bᵀ, dB = Aᵀ G
    let ga = matmul_nt(grad, b)?;
    let gb = matmul(&a.transpose(), grad)?;
    Ok((ga, gb))
}

/// `x · wᵀ + b` with `w: out×in` (the usual stored weight layout).
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut y = matmul_nt(x, w)?;
    if let Some(b) = b {
        let out = w.rows();
        if b.len() != out {
            return Err(Error::Shape {
                op: "linear",
                left: w.shape.clone(),
                right: b.shape.clone(),
            });
        }
        for i in 0..y.rows() {
            for (v, bias) in y.row_mut(i).iter_mut().zip(b.data()) {
                *v += bias;
            }
        }
    }
    Ok(y)
}

/// Gradient of `linear` with respect to its input.
pub fn linear_backward_input(grad: &Tensor, w: &Tensor) -> Result<Tensor> {
    matmul(grad, w)
}

/// Gradients of `linear` with respect to weight and bias.
pub fn linear_backward_params(x: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (rows, out) = grad.dims2()?;
    if x.rows() != rows {
        return Err(Error::Shape {
            op: "linear_backward_params",
            left: x.shape.clone(),
            right: grad.shape.clone(),
        });
    }
    let gw = matmul(&grad.transpose(), x)?;
    let mut gb = vec![0.0f64; out];
    for i in 0..rows {
        for (acc, g) in gb.iter_mut().zip(grad.row(i)) {
            *acc += *g as f64;
        }
    }
    Ok((gw, Tensor::vector(gb.into_iter().map(|v| v as f32).collect())))
}

/// Softmax over each row, stabilized by subtracting the row maximum.
pub fn row_softmax(s: &Tensor) -> Result<Tensor> {
    let (r, c) = s.dims2()?;
    check_finite("row_softmax", s)?;
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = s.row(i);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / sum) as f32));
    }
    Ok(Tensor {
        shape: vec![r, c],
        data: out,
    })
}

/// Given `y = row_softmax(x)` and `dL/dy`, returns `dL/dx`.
pub fn row_softmax_backward(y: &Tensor, grad: &Tensor) -> Result<Tensor> {
    check_same("row_softmax_backward", y, grad)?;
    let (r, c) = y.dims2()?;
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let (yr, gr) = (y.row(i), grad.row(i));
        let inner = dot(yr, gr) as f64;
        out.extend(
            yr.iter()
                .zip(gr)
                .map(|(&yv, &gv)| (yv as f64 * (gv as f64 - inner)) as f32),
        );
    }
    Ok(Tensor {
        shape: vec![r, c],
        data: out,
    })
}

/// Softmax over each column. Defined as `transpose ∘ row_softmax ∘ transpose`.
pub fn col_softmax(s: &Tensor) -> Result<Tensor> {
    s.dims2()?;
    check_finite("col_softmax", s)?;
    Ok(row_softmax(&s.transpose())?.transpose())
}

pub fn col_softmax_backward(y: &Tensor, grad: &Tensor) -> Result<Tensor> {
    check_same("col_softmax_backward", y, grad)?;
    Ok(row_softmax_backward(&y.transpose(), &grad.transpose())?.transpose())
}

pub fn tanh(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|v| v.tanh()).collect(),
    }
}

/// Given `y = tanh(x)` and `dL/dy`, returns `dL/dx`.
pub fn tanh_backward(y: &Tensor, grad: &Tensor) -> Result<Tensor> {
    check_same("tanh_backward", y, grad)?;
    Ok(Tensor {
        shape: y.shape.clone(),
        data: y
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&yv, &g)| g * (1.0 - yv * yv))
            .collect(),
    })
}

/// Elementwise sum. The backward pass routes `grad` unchanged to both inputs.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same("add", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

/// Multiplication by a constant; backward is `scale(grad, k)`.
pub fn scale(a: &Tensor, k: f32) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|v| v * k).collect(),
    }
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .map(|&v| {
                let v = v as f64;
                (0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))) as f32
            })
            .collect(),
    }
}

/// Given the GELU input `x` and `dL/dy`, returns `dL/dx`.
pub fn gelu_backward(x: &Tensor, grad: &Tensor) -> Result<Tensor> {
    check_same("gelu_backward", x, grad)?;
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    Ok(Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&v, &g)| {
                let v = v as f64;
                let cdf = 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
                let pdf = inv_sqrt_2pi * (-0.5 * v * v).exp();
                (g as f64 * (cdf + v * pdf)) as f32
            })
            .collect(),
    })
}

/// Saved forward quantities needed by [`layer_norm_backward`].
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Tensor,
    inv_std: Vec<f32>,
}

/// Normalizes the last dimension, then applies `gain` and `bias`.
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f32,
) -> Result<(Tensor, LayerNormCache)> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            left: x.shape.clone(),
            right: gain.shape.clone(),
        });
    }
    let rows = x.len() / d.max(1);
    let mut normalized = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = &x.data[i * d..(i + 1) * d];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let istd = 1.0 / (var + eps as f64).sqrt();
        inv_std.push(istd as f32);
        for (k, &v) in row.iter().enumerate() {
            let n = ((v as f64 - mean) * istd) as f32;
            normalized.push(n);
            out.push(n * gain.data[k] + bias.data[k]);
        }
    }
    let cache = LayerNormCache {
        normalized: Tensor {
            shape: x.shape.clone(),
            data: normalized,
        },
        inv_std,
    };
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        cache,
    ))
}

#[derive(Clone, Debug)]
pub struct LayerNormGrads {
    pub input: Tensor,
    pub gain: Tensor,
    pub bias: Tensor,
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    grad: &Tensor,
) -> Result<LayerNormGrads> {
    check_same("layer_norm_backward", &cache.normalized, grad)?;
    let d = grad.cols();
    let rows = grad.len() / d.max(1);
    let mut gx = Vec::with_capacity(grad.len());
    let mut g_gain = vec![0.0f64; d];
    let mut g_bias = vec![0.0f64; d];
    for i in 0..rows {
        let xhat = &cache.normalized.data[i * d..(i + 1) * d];
        let g = &grad.data[i * d..(i + 1) * d];
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for k in 0..d {
            let gn = g[k] as f64 * gain.data[k] as f64;
            sum_g += gn;
            sum_gx += gn * xhat[k] as f64;
            g_gain[k] += g[k] as f64 * xhat[k] as f64;
            g_bias[k] += g[k] as f64;
        }
        let istd = cache.inv_std[i] as f64;
        for k in 0..d {
            let gn = g[k] as f64 * gain.data[k] as f64;
            let v = istd / d as f64 * (d as f64 * gn - sum_g - xhat[k] as f64 * sum_gx);
            gx.push(v as f32);
        }
    }
    Ok(LayerNormGrads {
        input: Tensor {
            shape: grad.shape.clone(),
            data: gx,
        },
        gain: Tensor::vector(g_gain.into_iter().map(|v| v as f32).collect()),
        bias: Tensor::vector(g_bias.into_iter().map(|v| v as f32).collect()),
    })
}
