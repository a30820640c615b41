//! Dense row-major `f64` tensors and the small numeric kernel the models use:
//! affine maps, valid 2-D cross-correlation, 2x2 max pooling with argmax
//! tracking, and elementwise activations with their derivatives.
//!
//! Every operation here is a pure function of its inputs. Tensors are never
//! mutated through a shared reference, so they are safe to hand to concurrent
//! readers.

use crate::error::{Error, Result};

/// Dense multi-dimensional array of 64-bit floats in row-major order.
///
/// Invariant: `data.len()` equals the product of `shape`, and every dimension
/// is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Zero-filled tensor. Panics if any dimension is zero (programmer error).
    pub fn zeros(shape: &[usize]) -> Tensor {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Builds a tensor from raw data, checking the length/shape invariant.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "Tensor::from_vec",
                message: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Dimension {
                op: "Tensor::from_vec",
                message: format!(
                    "shape {shape:?} needs {expected} elements, got {}",
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
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

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // shapes have positive dimensions, so tensors are never empty
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}

/// out[i] = sum_j w[i, j] * x[j] + b[i], with `w` of shape m x n.
pub fn matvec(w: &Tensor, x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = match w.shape() {
        [m, n] => (*m, *n),
        other => {
            return Err(Error::Dimension {
                op: "matvec",
                message: format!("weight must be 2-D, got {}", shape_str(other)),
            })
        }
    };
    if x.shape() != [n] || b.shape() != [m] {
        return Err(Error::Dimension {
            op: "matvec",
            message: format!(
                "weight {} needs input [{n}] and bias [{m}], got input {} and bias {}",
                shape_str(w.shape()),
                shape_str(x.shape()),
                shape_str(b.shape()),
            ),
        });
    }
    let mut out = vec![0.0; m];
    affine_into(w.data(), b.data(), x.data(), &mut out);
    Tensor::from_vec(&[m], out)
}

/// Affine kernel on raw slices: out[i] = b[i] + row_i(w) . x.
///
/// `w` is row-major with `out.len()` rows of `x.len()` columns. Shape checking
/// is the caller's job; this is the hot path shared by `matvec` and the model
/// forward passes.
pub(crate) fn affine_into(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    debug_assert_eq!(w.len(), b.len() * n);
    debug_assert_eq!(b.len(), out.len());
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        let mut acc = b[i];
        for (wj, xj) in row.iter().zip(x) {
            acc += wj * xj;
        }
        *o = acc;
    }
}

/// Valid (no padding, stride 1) 2-D cross-correlation.
///
/// `input` is C x H x W, `kernels` is K x C x kh x kw, `bias` is K; the output
/// is K x (H-kh+1) x (W-kw+1). No kernel flip is performed.
pub fn conv2d_valid(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match input.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::Dimension {
                op: "conv2d_valid",
                message: format!("input must be C x H x W, got {}", shape_str(other)),
            })
        }
    };
    let (k, kc, kh, kw) = match kernels.shape() {
        [k, kc, kh, kw] => (*k, *kc, *kh, *kw),
        other => {
            return Err(Error::Dimension {
                op: "conv2d_valid",
                message: format!("kernels must be K x C x kh x kw, got {}", shape_str(other)),
            })
        }
    };
    if kc != c || bias.shape() != [k] {
        return Err(Error::Dimension {
            op: "conv2d_valid",
            message: format!(
                "input {} is incompatible with kernels {} / bias {}",
                shape_str(input.shape()),
                shape_str(kernels.shape()),
                shape_str(bias.shape()),
            ),
        });
    }
    if kh > h || kw > w {
        return Err(Error::Dimension {
            op: "conv2d_valid",
            message: format!(
                "kernel {} is larger than input {}",
                shape_str(kernels.shape()),
                shape_str(input.shape()),
            ),
        });
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0.0; k * oh * ow];
    conv2d_valid_into(
        input.data(),
        (c, h, w),
        kernels.data(),
        (k, kh, kw),
        bias.data(),
        &mut out,
    );
    Tensor::from_vec(&[k, oh, ow], out)
}

/// Cross-correlation kernel on raw slices; shapes are trusted.
pub(crate) fn conv2d_valid_into(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    kernels: &[f64],
    (k, kh, kw): (usize, usize, usize),
    bias: &[f64],
    out: &mut [f64],
) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    debug_assert_eq!(out.len(), k * oh * ow);
    for ko in 0..k {
        let kernel = &kernels[ko * c * kh * kw..(ko + 1) * c * kh * kw];
        let plane = &mut out[ko * oh * ow..(ko + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[ko];
                for ci in 0..c {
                    let in_plane = &input[ci * h * w..(ci + 1) * h * w];
                    let k_plane = &kernel[ci * kh * kw..(ci + 1) * kh * kw];
                    for i in 0..kh {
                        let in_row = &in_plane[(oy + i) * w + ox..(oy + i) * w + ox + kw];
                        let k_row = &k_plane[i * kw..i * kw + kw];
                        for (iv, kv) in in_row.iter().zip(k_row) {
                            acc += iv * kv;
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    }
}

/// 2x2 max pooling with stride 2 over a C x H x W tensor.
///
/// Returns the pooled tensor plus, for each output cell, the flat index into
/// the input data of the winning element (first occurrence in row-major
/// window order on ties); backward passes route gradients through these
/// indices. Trailing odd rows/columns are dropped.
pub fn maxpool2d(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = match input.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::Dimension {
                op: "maxpool2d",
                message: format!("input must be C x H x W, got {}", shape_str(other)),
            })
        }
    };
    if h < 2 || w < 2 {
        return Err(Error::Dimension {
            op: "maxpool2d",
            message: format!(
                "input {} is smaller than the 2x2 window",
                shape_str(input.shape())
            ),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    maxpool2d_into(input.data(), (c, h, w), &mut out, &mut argmax);
    Ok((Tensor::from_vec(&[c, oh, ow], out)?, argmax))
}

pub(crate) fn maxpool2d_into(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let (oh, ow) = (h / 2, w / 2);
    debug_assert_eq!(out.len(), c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + (2 * oy) * w + 2 * ox;
                // First occurrence wins ties: strict > comparisons only.
                let mut best_idx = top;
                let mut best = input[top];
                for &idx in &[top + 1, top + w, top + w + 1] {
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                let o = ci * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

/// Elementwise activation kinds used by the model architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    /// Derivative with respect to the pre-activation. The relu derivative at
    /// exactly 0 is defined as 0.
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }

    pub fn apply(self, x: &Tensor) -> Tensor {
        Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| self.eval(v)).collect(),
        }
    }

    pub fn derivative(self, x: &Tensor) -> Tensor {
        Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| self.deriv(v)).collect(),
        }
    }
}
