//! Primitive operations: forward evaluation, reverse-mode adjoints, and
//! forward-mode tangents.
//!
//! Each primitive implements all three directions against the same
//! linearization, which is what makes reverse gradients and forward Jacobian
//! columns agree to machine precision.
//!
//! Derivative conventions at non-smooth points: `relu` uses sub-gradient 0 at
//! the origin, `sqrt` uses derivative 0 at exactly 0, and `clamp` passes
//! gradients only strictly inside its bounds. All three conventions are
//! exercised by tests.

use super::conv;
use super::tensor::Tensor;
use super::warp;
use super::{DiffError, DiffResult};

/// A primitive operation with its static parameters. Input tensors are
/// supplied by the tape at evaluation time.
#[derive(Debug, Clone)]
pub enum Op {
    /// `[m,k] x [k,n] -> [m,n]`.
    MatMul,
    /// NCHW convolution with zero padding: `[B,C,H,W] * [O,C,kh,kw]`.
    Conv2d { stride: usize, pad: usize },
    /// 2x2 average pooling with stride 2.
    AvgPool2,
    /// Nearest-neighbour 2x upsampling.
    Upsample2,
    /// Elementwise sum; the second operand may be a trailing-suffix broadcast.
    Add,
    /// Elementwise difference with the same broadcast rule.
    Sub,
    /// Elementwise product with the same broadcast rule.
    Mul,
    /// Elementwise quotient with the same broadcast rule.
    Div,
    AddScalar(f64),
    MulScalar(f64),
    Relu,
    Sigmoid,
    Tanh,
    Cos,
    Sin,
    Exp,
    Log,
    Sqrt,
    /// `ln(1 + e^x)` evaluated stably.
    Softplus,
    /// Clamp into `[lo, hi]`; gradients pass only strictly inside.
    Clamp { lo: f64, hi: f64 },
    /// Softmax over the last axis with max-shift.
    Softmax,
    /// Batch normalization with batch statistics. Inputs: x, gamma, beta.
    /// Per-feature stats for rank-2 input, per-channel for rank-4.
    BatchNorm { eps: f64 },
    Reshape { shape: Vec<usize> },
    /// Rank-2 transpose.
    Transpose2,
    /// Contiguous slab along one axis.
    Slice { axis: usize, start: usize, len: usize },
    /// Concatenation of all inputs along one axis.
    Concat { axis: usize },
    /// Sum over one axis (removing it) or over everything (`None` -> scalar).
    ReduceSum { axis: Option<usize> },
    ReduceMean { axis: Option<usize> },
    /// Affine sampling grid from a 2x3 matrix (row-major 6-vector) in
    /// normalized [-1,1] coordinates. `[6] -> [2,H,W]` or `[B,6] -> [B,2,H,W]`.
    AffineGrid { h: usize, w: usize },
    /// Bilinear sampling of an image at grid coordinates, zero padding
    /// outside. `([C,H,W], [2,Ho,Wo]) -> [C,Ho,Wo]`, with an optional batch
    /// axis on both operands.
    GridSample,
    /// First two rows of the matrix exponential of a lifted 2x3 velocity
    /// field. `[6] -> [6]` or `[B,6] -> [B,6]`.
    VelocityMatrix,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2 => "avg_pool2",
            Op::Upsample2 => "upsample2",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "multiply",
            Op::Div => "divide",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Cos => "cos",
            Op::Sin => "sin",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Softplus => "softplus",
            Op::Clamp { .. } => "clamp",
            Op::Softmax => "softmax",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Reshape { .. } => "reshape",
            Op::Transpose2 => "transpose",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::ReduceSum { .. } => "reduce_sum",
            Op::ReduceMean { .. } => "reduce_mean",
            Op::AffineGrid { .. } => "affine_grid",
            Op::GridSample => "grid_sample",
            Op::VelocityMatrix => "velocity_matrix",
        }
    }

    pub fn forward(&self, inputs: &[&Tensor]) -> DiffResult<Tensor> {
        match self {
            Op::MatMul => {
                let (a, b) = two(inputs);
                let ([m, k], [k2, n]) = (dims2("matmul", a)?, dims2("matmul", b)?);
                if k != k2 {
                    return Err(shape_err("matmul", a, b));
                }
                let mut out = vec![0.0; m * n];
                matmul_acc(a.data(), b.data(), &mut out, m, k, n, false, false);
                Tensor::new(vec![m, n], out)
            }
            Op::Conv2d { stride, pad } => {
                let (x, k) = two(inputs);
                conv::conv2d_forward(x, k, *stride, *pad)
            }
            Op::AvgPool2 => conv::avg_pool2_forward(one(inputs)),
            Op::Upsample2 => conv::upsample2_forward(one(inputs)),
            Op::Add => broadcast_binary("add", inputs, |a, b| a + b),
            Op::Sub => broadcast_binary("sub", inputs, |a, b| a - b),
            Op::Mul => broadcast_binary("multiply", inputs, |a, b| a * b),
            Op::Div => broadcast_binary("divide", inputs, |a, b| a / b),
            Op::AddScalar(c) => Ok(one(inputs).map(|v| v + c)),
            Op::MulScalar(c) => Ok(one(inputs).map(|v| v * c)),
            Op::Relu => Ok(one(inputs).map(|v| v.max(0.0))),
            Op::Sigmoid => Ok(one(inputs).map(sigmoid)),
            Op::Tanh => Ok(one(inputs).map(f64::tanh)),
            Op::Cos => Ok(one(inputs).map(f64::cos)),
            Op::Sin => Ok(one(inputs).map(f64::sin)),
            Op::Exp => Ok(one(inputs).map(f64::exp)),
            Op::Log => Ok(one(inputs).map(f64::ln)),
            Op::Sqrt => Ok(one(inputs).map(f64::sqrt)),
            Op::Softplus => Ok(one(inputs).map(softplus)),
            Op::Clamp { lo, hi } => Ok(one(inputs).map(|v| v.clamp(*lo, *hi))),
            Op::Softmax => softmax_forward(one(inputs)),
            Op::BatchNorm { eps } => batch_norm_forward(inputs, *eps),
            Op::Reshape { shape } => one(inputs).reshaped(shape),
            Op::Transpose2 => transpose2(one(inputs)),
            Op::Slice { axis, start, len } => slice_forward(one(inputs), *axis, *start, *len),
            Op::Concat { axis } => concat_forward(inputs, *axis),
            Op::ReduceSum { axis } => reduce_forward(one(inputs), *axis, false),
            Op::ReduceMean { axis } => reduce_forward(one(inputs), *axis, true),
            Op::AffineGrid { h, w } => warp::affine_grid_forward(one(inputs), *h, *w),
            Op::GridSample => {
                let (img, grid) = two(inputs);
                warp::grid_sample_forward(img, grid)
            }
            Op::VelocityMatrix => warp::velocity_matrix_forward(one(inputs)),
        }
    }

    /// Adjoint contributions for every wanted input given the output adjoint.
    /// Returns one buffer per input; `None` where `wants` is false.
    pub fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        out_grad: &[f64],
        wants: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        match self {
            Op::MatMul => {
                let (a, b) = two(inputs);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let mut grads = vec![None, None];
                if wants[0] {
                    // dA = dY B^T
                    let mut g = vec![0.0; m * k];
                    matmul_acc(out_grad, b.data(), &mut g, m, n, k, false, true);
                    grads[0] = Some(g);
                }
                if wants[1] {
                    // dB = A^T dY
                    let mut g = vec![0.0; k * n];
                    matmul_acc(a.data(), out_grad, &mut g, k, m, n, true, false);
                    grads[1] = Some(g);
                }
                grads
            }
            Op::Conv2d { stride, pad } => {
                let (x, k) = two(inputs);
                conv::conv2d_backward(x, k, *stride, *pad, out_grad, wants)
            }
            Op::AvgPool2 => vec![wants[0].then(|| conv::avg_pool2_backward(one(inputs), out_grad))],
            Op::Upsample2 => vec![wants[0].then(|| conv::upsample2_backward(one(inputs), out_grad))],
            Op::Add => binary_backward(inputs, out_grad, wants, |_, _, g| (g, g)),
            Op::Sub => binary_backward(inputs, out_grad, wants, |_, _, g| (g, -g)),
            Op::Mul => binary_backward(inputs, out_grad, wants, |a, b, g| (g * b, g * a)),
            Op::Div => binary_backward(inputs, out_grad, wants, |a, b, g| (g / b, -g * a / (b * b))),
            Op::AddScalar(_) => unary_backward(out_grad, wants, |_i, g| g, one(inputs)),
            Op::MulScalar(c) => {
                let c = *c;
                unary_backward(out_grad, wants, move |_i, g| g * c, one(inputs))
            }
            Op::Relu => {
                let x = one(inputs);
                unary_backward_idx(out_grad, wants, |i, g| if x.data()[i] > 0.0 { g } else { 0.0 })
            }
            Op::Sigmoid => {
                let y = output;
                unary_backward_idx(out_grad, wants, |i, g| {
                    let s = y.data()[i];
                    g * s * (1.0 - s)
                })
            }
            Op::Tanh => {
                let y = output;
                unary_backward_idx(out_grad, wants, |i, g| {
                    let t = y.data()[i];
                    g * (1.0 - t * t)
                })
            }
            Op::Cos => {
                let x = one(inputs);
                unary_backward_idx(out_grad, wants, |i, g| -g * x.data()[i].sin())
            }
            Op::Sin => {
                let x = one(inputs);
                unary_backward_idx(out_grad, wants, |i, g| g * x.data()[i].cos())
            }
            Op::Exp => {
                let y = output;
                unary_backward_idx(out_grad, wants, |i, g| g * y.data()[i])
            }
            Op::Log => {
                let x = one(inputs);
                unary_backward_idx(out_grad, wants, |i, g| g / x.data()[i])
            }
            Op::Sqrt => {
                let y = output;
                unary_backward_idx(out_grad, wants, |i, g| {
                    let s = y.data()[i];
                    if s == 0.0 {
                        0.0
                    } else {
                        g * 0.5 / s
                    }
                })
            }
            Op::Softplus => {
                let x = one(inputs);
                unary_backward_idx(out_grad, wants, |i, g| g * sigmoid(x.data()[i]))
            }
            Op::Clamp { lo, hi } => {
                let x = one(inputs);
                let (lo, hi) = (*lo, *hi);
                unary_backward_idx(out_grad, wants, move |i, g| {
                    let v = x.data()[i];
                    if v > lo && v < hi {
                        g
                    } else {
                        0.0
                    }
                })
            }
            Op::Softmax => vec![wants[0].then(|| softmax_backward(output, out_grad))],
            Op::BatchNorm { eps } => batch_norm_backward(inputs, *eps, out_grad, wants),
            Op::Reshape { .. } => vec![wants[0].then(|| out_grad.to_vec())],
            Op::Transpose2 => {
                // Output is [c,r]; transposing the grad lands it back on [r,c].
                let [r, c] = [one(inputs).shape()[0], one(inputs).shape()[1]];
                vec![wants[0].then(|| transpose_flat(out_grad, c, r))]
            }
            Op::Slice { axis, start, len } => {
                vec![wants[0].then(|| slice_backward(one(inputs), *axis, *start, *len, out_grad))]
            }
            Op::Concat { axis } => concat_backward(inputs, *axis, out_grad, wants),
            Op::ReduceSum { axis } => {
                vec![wants[0].then(|| reduce_backward(one(inputs), *axis, false, out_grad))]
            }
            Op::ReduceMean { axis } => {
                vec![wants[0].then(|| reduce_backward(one(inputs), *axis, true, out_grad))]
            }
            Op::AffineGrid { h, w } => {
                vec![wants[0].then(|| warp::affine_grid_backward(one(inputs), *h, *w, out_grad))]
            }
            Op::GridSample => {
                let (img, grid) = two(inputs);
                warp::grid_sample_backward(img, grid, out_grad, wants)
            }
            Op::VelocityMatrix => {
                vec![wants[0].then(|| warp::velocity_matrix_backward(one(inputs), out_grad))]
            }
        }
    }

    /// Output tangent from input tangents (`None` means zero).
    pub fn jvp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        tangents: &[Option<&Vec<f64>>],
    ) -> Vec<f64> {
        match self {
            Op::MatMul => {
                let (a, b) = two(inputs);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let mut out = vec![0.0; m * n];
                if let Some(at) = tangents[0] {
                    matmul_acc(at, b.data(), &mut out, m, k, n, false, false);
                }
                if let Some(bt) = tangents[1] {
                    matmul_acc(a.data(), bt, &mut out, m, k, n, false, false);
                }
                out
            }
            Op::Conv2d { stride, pad } => {
                let (x, k) = two(inputs);
                conv::conv2d_jvp(x, k, *stride, *pad, output, tangents)
            }
            Op::AvgPool2 => match tangents[0] {
                Some(t) => {
                    let x = one(inputs);
                    let tx = Tensor::new(x.shape().to_vec(), t.clone()).unwrap();
                    conv::avg_pool2_forward(&tx).unwrap().into_data()
                }
                None => vec![0.0; output.len()],
            },
            Op::Upsample2 => match tangents[0] {
                Some(t) => {
                    let x = one(inputs);
                    let tx = Tensor::new(x.shape().to_vec(), t.clone()).unwrap();
                    conv::upsample2_forward(&tx).unwrap().into_data()
                }
                None => vec![0.0; output.len()],
            },
            Op::Add => binary_jvp(inputs, output, tangents, |_, _, ta, tb| ta + tb),
            Op::Sub => binary_jvp(inputs, output, tangents, |_, _, ta, tb| ta - tb),
            Op::Mul => binary_jvp(inputs, output, tangents, |a, b, ta, tb| ta * b + a * tb),
            Op::Div => binary_jvp(inputs, output, tangents, |a, b, ta, tb| {
                (ta * b - a * tb) / (b * b)
            }),
            Op::AddScalar(_) => unary_jvp(output, tangents, |_i, t| t),
            Op::MulScalar(c) => {
                let c = *c;
                unary_jvp(output, tangents, move |_i, t| t * c)
            }
            Op::Relu => {
                let x = one(inputs);
                unary_jvp(output, tangents, |i, t| if x.data()[i] > 0.0 { t } else { 0.0 })
            }
            Op::Sigmoid => unary_jvp(output, tangents, |i, t| {
                let s = output.data()[i];
                t * s * (1.0 - s)
            }),
            Op::Tanh => unary_jvp(output, tangents, |i, t| {
                let y = output.data()[i];
                t * (1.0 - y * y)
            }),
            Op::Cos => {
                let x = one(inputs);
                unary_jvp(output, tangents, |i, t| -t * x.data()[i].sin())
            }
            Op::Sin => {
                let x = one(inputs);
                unary_jvp(output, tangents, |i, t| t * x.data()[i].cos())
            }
            Op::Exp => unary_jvp(output, tangents, |i, t| t * output.data()[i]),
            Op::Log => {
                let x = one(inputs);
                unary_jvp(output, tangents, |i, t| t / x.data()[i])
            }
            Op::Sqrt => unary_jvp(output, tangents, |i, t| {
                let s = output.data()[i];
                if s == 0.0 {
                    0.0
                } else {
                    t * 0.5 / s
                }
            }),
            Op::Softplus => {
                let x = one(inputs);
                unary_jvp(output, tangents, |i, t| t * sigmoid(x.data()[i]))
            }
            Op::Clamp { lo, hi } => {
                let x = one(inputs);
                let (lo, hi) = (*lo, *hi);
                unary_jvp(output, tangents, move |i, t| {
                    let v = x.data()[i];
                    if v > lo && v < hi {
                        t
                    } else {
                        0.0
                    }
                })
            }
            Op::Softmax => match tangents[0] {
                Some(t) => softmax_jvp(output, t),
                None => vec![0.0; output.len()],
            },
            Op::BatchNorm { eps } => batch_norm_jvp(inputs, *eps, tangents),
            Op::Reshape { .. } => match tangents[0] {
                Some(t) => t.clone(),
                None => vec![0.0; output.len()],
            },
            Op::Transpose2 => match tangents[0] {
                Some(t) => {
                    let [r, c] = [one(inputs).shape()[0], one(inputs).shape()[1]];
                    transpose_flat(t, r, c)
                }
                None => vec![0.0; output.len()],
            },
            Op::Slice { axis, start, len } => match tangents[0] {
                Some(t) => {
                    let x = one(inputs);
                    let tx = Tensor::new(x.shape().to_vec(), t.clone()).unwrap();
                    slice_forward(&tx, *axis, *start, *len).unwrap().into_data()
                }
                None => vec![0.0; output.len()],
            },
            Op::Concat { axis } => concat_jvp(inputs, *axis, output, tangents),
            Op::ReduceSum { axis } => reduce_jvp(one(inputs), *axis, false, output, tangents[0]),
            Op::ReduceMean { axis } => reduce_jvp(one(inputs), *axis, true, output, tangents[0]),
            Op::AffineGrid { h, w } => match tangents[0] {
                Some(t) => {
                    let x = one(inputs);
                    let tx = Tensor::new(x.shape().to_vec(), t.clone()).unwrap();
                    warp::affine_grid_forward(&tx, *h, *w).unwrap().into_data()
                }
                None => vec![0.0; output.len()],
            },
            Op::GridSample => {
                let (img, grid) = two(inputs);
                warp::grid_sample_jvp(img, grid, output, tangents)
            }
            Op::VelocityMatrix => warp::velocity_matrix_jvp(one(inputs), output, tangents[0]),
        }
    }

    /// Validate input shapes eagerly so tape construction fails at the site of
    /// the mistake. Forward recomputes shapes anyway; this is for error
    /// quality only and covers the cases cheap to state.
    pub fn check_arity(&self, inputs: &[&Tensor]) -> DiffResult<()> {
        let need = match self {
            Op::MatMul
            | Op::Conv2d { .. }
            | Op::Add
            | Op::Sub
            | Op::Mul
            | Op::Div
            | Op::GridSample => 2,
            Op::BatchNorm { .. } => 3,
            Op::Concat { .. } => {
                if inputs.is_empty() {
                    return Err(DiffError::Domain {
                        op: "concat",
                        detail: "needs at least one input".into(),
                    });
                }
                inputs.len()
            }
            _ => 1,
        };
        if inputs.len() != need {
            return Err(DiffError::Domain {
                op: self.name(),
                detail: format!("expected {need} inputs, got {}", inputs.len()),
            });
        }
        Ok(())
    }
}

fn one<'a>(inputs: &[&'a Tensor]) -> &'a Tensor {
    inputs[0]
}

fn two<'a>(inputs: &[&'a Tensor]) -> (&'a Tensor, &'a Tensor) {
    (inputs[0], inputs[1])
}

fn dims2(op: &'static str, t: &Tensor) -> DiffResult<[usize; 2]> {
    match t.shape() {
        [a, b] => Ok([*a, *b]),
        other => Err(DiffError::InvalidShape {
            op,
            shape: other.to_vec(),
            detail: "expected rank 2".into(),
        }),
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `out += op(A, B)` over 2-D operands with optional transposes: the workhorse
/// behind matmul forward and both adjoints. `m, k, n` are the logical
/// dimensions of `A (m x k)` and `B (k x n)` after transposition.
fn matmul_acc(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    for i in 0..m {
        for p in 0..k {
            let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            if trans_b {
                for j in 0..n {
                    row[j] += av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    row[j] += av * brow[j];
                }
            }
        }
    }
}

/// Broadcast check: `b` must equal `a`'s shape or be a trailing suffix of it
/// (including the scalar `[]`). In row-major order this makes the broadcast a
/// simple modulo on the flat index.
fn check_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> DiffResult<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb {
        return Err(shape_err(op, a, b));
    }
    Ok(())
}

fn broadcast_binary(
    op: &'static str,
    inputs: &[&Tensor],
    f: impl Fn(f64, f64) -> f64,
) -> DiffResult<Tensor> {
    let (a, b) = two(inputs);
    check_broadcast(op, a, b)?;
    let bl = b.len().max(1);
    let data: Vec<f64> = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &av)| f(av, b.data()[i % bl]))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Adjoints for a broadcast binary op. `f(a, b, g)` returns the pair of
/// pointwise adjoint contributions; the `b` side is reduced over the broadcast.
fn binary_backward(
    inputs: &[&Tensor],
    out_grad: &[f64],
    wants: &[bool],
    f: impl Fn(f64, f64, f64) -> (f64, f64),
) -> Vec<Option<Vec<f64>>> {
    let (a, b) = two(inputs);
    let bl = b.len().max(1);
    let mut ga = wants[0].then(|| vec![0.0; a.len()]);
    let mut gb = wants[1].then(|| vec![0.0; b.len()]);
    for i in 0..a.len() {
        let (da, db) = f(a.data()[i], b.data()[i % bl], out_grad[i]);
        if let Some(g) = ga.as_mut() {
            g[i] = da;
        }
        if let Some(g) = gb.as_mut() {
            g[i % bl] += db;
        }
    }
    vec![ga, gb]
}

fn binary_jvp(
    inputs: &[&Tensor],
    output: &Tensor,
    tangents: &[Option<&Vec<f64>>],
    f: impl Fn(f64, f64, f64, f64) -> f64,
) -> Vec<f64> {
    let (a, b) = two(inputs);
    let bl = b.len().max(1);
    (0..output.len())
        .map(|i| {
            let ta = tangents[0].map_or(0.0, |t| t[i]);
            let tb = tangents[1].map_or(0.0, |t| t[i % bl]);
            f(a.data()[i], b.data()[i % bl], ta, tb)
        })
        .collect()
}

fn unary_backward(
    out_grad: &[f64],
    wants: &[bool],
    f: impl Fn(usize, f64) -> f64,
    _x: &Tensor,
) -> Vec<Option<Vec<f64>>> {
    vec![wants[0].then(|| out_grad.iter().enumerate().map(|(i, &g)| f(i, g)).collect())]
}

fn unary_backward_idx(
    out_grad: &[f64],
    wants: &[bool],
    f: impl Fn(usize, f64) -> f64,
) -> Vec<Option<Vec<f64>>> {
    vec![wants[0].then(|| out_grad.iter().enumerate().map(|(i, &g)| f(i, g)).collect())]
}

fn unary_jvp(
    output: &Tensor,
    tangents: &[Option<&Vec<f64>>],
    f: impl Fn(usize, f64) -> f64,
) -> Vec<f64> {
    match tangents[0] {
        Some(t) => t.iter().enumerate().map(|(i, &v)| f(i, v)).collect(),
        None => vec![0.0; output.len()],
    }
}

fn transpose_flat(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

fn transpose2(x: &Tensor) -> DiffResult<Tensor> {
    match *x.shape() {
        [r, c] => Tensor::new(vec![c, r], transpose_flat(x.data(), r, c)),
        _ => Err(DiffError::InvalidShape {
            op: "transpose",
            shape: x.shape().to_vec(),
            detail: "expected rank 2".into(),
        }),
    }
}

fn softmax_forward(x: &Tensor) -> DiffResult<Tensor> {
    if x.shape().is_empty() {
        return Err(DiffError::InvalidShape {
            op: "softmax",
            shape: vec![],
            detail: "needs at least rank 1".into(),
        });
    }
    let m = *x.shape().last().unwrap();
    if m == 0 {
        return Err(DiffError::InvalidShape {
            op: "softmax",
            shape: x.shape().to_vec(),
            detail: "empty last axis".into(),
        });
    }
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(m) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

fn softmax_backward(y: &Tensor, out_grad: &[f64]) -> Vec<f64> {
    let m = *y.shape().last().unwrap();
    let mut grad = vec![0.0; y.len()];
    for (r, (yrow, grow)) in y.data().chunks(m).zip(out_grad.chunks(m)).enumerate() {
        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
        for j in 0..m {
            grad[r * m + j] = yrow[j] * (grow[j] - dot);
        }
    }
    grad
}

fn softmax_jvp(y: &Tensor, tangent: &[f64]) -> Vec<f64> {
    let m = *y.shape().last().unwrap();
    let mut out = vec![0.0; y.len()];
    for (r, (yrow, trow)) in y.data().chunks(m).zip(tangent.chunks(m)).enumerate() {
        let dot: f64 = yrow.iter().zip(trow).map(|(a, b)| a * b).sum();
        for j in 0..m {
            out[r * m + j] = yrow[j] * (trow[j] - dot);
        }
    }
    out
}

/// Decompose a batch-norm input into (group count, group layout). Rank 2
/// normalizes each feature over the batch; rank 4 normalizes each channel
/// over batch and space. Returns (features, index map closure inputs).
struct BnLayout {
    features: usize,
    group_size: usize,
}

fn bn_layout(x: &Tensor) -> DiffResult<BnLayout> {
    match *x.shape() {
        [b, f] => Ok(BnLayout {
            features: f,
            group_size: b,
        }),
        [b, c, h, w] => Ok(BnLayout {
            features: c,
            group_size: b * h * w,
        }),
        _ => Err(DiffError::InvalidShape {
            op: "batch_norm",
            shape: x.shape().to_vec(),
            detail: "expected rank 2 or 4".into(),
        }),
    }
}

/// Iterate flat indices belonging to feature `f`.
fn bn_indices<'a>(x: &'a Tensor, f: usize) -> Box<dyn Iterator<Item = usize> + 'a> {
    match *x.shape() {
        [b, nf] => Box::new((0..b).map(move |i| i * nf + f)),
        [b, c, h, w] => {
            let plane = h * w;
            Box::new((0..b).flat_map(move |i| {
                let base = (i * c + f) * plane;
                (0..plane).map(move |p| base + p)
            }))
        }
        _ => unreachable!("layout validated"),
    }
}

fn batch_norm_forward(inputs: &[&Tensor], eps: f64) -> DiffResult<Tensor> {
    let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
    let layout = bn_layout(x)?;
    if gamma.len() != layout.features || beta.len() != layout.features {
        return Err(DiffError::ShapeMismatch {
            op: "batch_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let n = layout.group_size as f64;
    let mut out = vec![0.0; x.len()];
    for f in 0..layout.features {
        let idx: Vec<usize> = bn_indices(x, f).collect();
        let mean = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / n;
        let var = idx
            .iter()
            .map(|&i| {
                let d = x.data()[i] - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let inv = 1.0 / (var + eps).sqrt();
        let (g, b) = (gamma.data()[f], beta.data()[f]);
        for &i in &idx {
            out[i] = g * (x.data()[i] - mean) * inv + b;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn batch_norm_backward(
    inputs: &[&Tensor],
    eps: f64,
    out_grad: &[f64],
    wants: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let (x, gamma, _) = (inputs[0], inputs[1], inputs[2]);
    let layout = bn_layout(x).expect("validated in forward");
    let n = layout.group_size as f64;
    let mut gx = wants[0].then(|| vec![0.0; x.len()]);
    let mut gg = wants[1].then(|| vec![0.0; layout.features]);
    let mut gb = wants[2].then(|| vec![0.0; layout.features]);
    for f in 0..layout.features {
        let idx: Vec<usize> = bn_indices(x, f).collect();
        let mean = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / n;
        let var = idx
            .iter()
            .map(|&i| {
                let d = x.data()[i] - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let inv = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = idx.iter().map(|&i| (x.data()[i] - mean) * inv).collect();
        let dy: Vec<f64> = idx.iter().map(|&i| out_grad[i]).collect();
        if let Some(g) = gb.as_mut() {
            g[f] = dy.iter().sum();
        }
        if let Some(g) = gg.as_mut() {
            g[f] = dy.iter().zip(&xhat).map(|(d, h)| d * h).sum();
        }
        if let Some(g) = gx.as_mut() {
            let mean_dy = dy.iter().sum::<f64>() / n;
            let mean_dy_xhat = dy.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / n;
            let scale = gamma.data()[f] * inv;
            for (k, &i) in idx.iter().enumerate() {
                g[i] = scale * (dy[k] - mean_dy - xhat[k] * mean_dy_xhat);
            }
        }
    }
    vec![gx, gg, gb]
}

fn batch_norm_jvp(inputs: &[&Tensor], eps: f64, tangents: &[Option<&Vec<f64>>]) -> Vec<f64> {
    let (x, gamma, _) = (inputs[0], inputs[1], inputs[2]);
    let layout = bn_layout(x).expect("validated in forward");
    let n = layout.group_size as f64;
    let mut out = vec![0.0; x.len()];
    for f in 0..layout.features {
        let idx: Vec<usize> = bn_indices(x, f).collect();
        let mean = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / n;
        let var = idx
            .iter()
            .map(|&i| {
                let d = x.data()[i] - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let s = (var + eps).sqrt();
        let xt: Vec<f64> = idx
            .iter()
            .map(|&i| tangents[0].map_or(0.0, |t| t[i]))
            .collect();
        let mean_t = xt.iter().sum::<f64>() / n;
        let dvar = idx
            .iter()
            .zip(&xt)
            .map(|(&i, &t)| 2.0 * (x.data()[i] - mean) * (t - mean_t))
            .sum::<f64>()
            / n;
        let ds = dvar / (2.0 * s);
        let g = gamma.data()[f];
        let gt = tangents[1].map_or(0.0, |t| t[f]);
        let bt = tangents[2].map_or(0.0, |t| t[f]);
        for (k, &i) in idx.iter().enumerate() {
            let xc = x.data()[i] - mean;
            let xhat = xc / s;
            let dxhat = (xt[k] - mean_t) / s - xc * ds / (s * s);
            out[i] = g * dxhat + gt * xhat + bt;
        }
    }
    out
}

/// Split a shape at `axis` into (outer, axis_len, inner) block sizes.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn slice_forward(x: &Tensor, axis: usize, start: usize, len: usize) -> DiffResult<Tensor> {
    if axis >= x.shape().len() {
        return Err(DiffError::InvalidShape {
            op: "slice",
            shape: x.shape().to_vec(),
            detail: format!("axis {axis} out of range"),
        });
    }
    let (outer, alen, inner) = axis_blocks(x.shape(), axis);
    if start + len > alen || len == 0 {
        return Err(DiffError::Domain {
            op: "slice",
            detail: format!("range {start}..{} exceeds axis length {alen}", start + len),
        });
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * alen + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::new(shape, data)
}

fn slice_backward(x: &Tensor, axis: usize, start: usize, len: usize, out_grad: &[f64]) -> Vec<f64> {
    let (outer, alen, inner) = axis_blocks(x.shape(), axis);
    let mut grad = vec![0.0; x.len()];
    for o in 0..outer {
        let src = o * len * inner;
        let dst = (o * alen + start) * inner;
        grad[dst..dst + len * inner].copy_from_slice(&out_grad[src..src + len * inner]);
    }
    grad
}

fn concat_forward(inputs: &[&Tensor], axis: usize) -> DiffResult<Tensor> {
    let first = inputs[0];
    if axis >= first.shape().len() {
        return Err(DiffError::InvalidShape {
            op: "concat",
            shape: first.shape().to_vec(),
            detail: format!("axis {axis} out of range"),
        });
    }
    for t in &inputs[1..] {
        let ok = t.shape().len() == first.shape().len()
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(shape_err("concat", first, t));
        }
    }
    let total_axis: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    let (outer, _, inner) = axis_blocks(&shape, axis);
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for t in inputs {
            let alen = t.shape()[axis];
            let base = o * alen * inner;
            data.extend_from_slice(&t.data()[base..base + alen * inner]);
        }
    }
    Tensor::new(shape, data)
}

fn concat_backward(
    inputs: &[&Tensor],
    axis: usize,
    out_grad: &[f64],
    wants: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let total_axis: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut shape = inputs[0].shape().to_vec();
    shape[axis] = total_axis;
    let (outer, _, inner) = axis_blocks(&shape, axis);
    let mut grads: Vec<Option<Vec<f64>>> = inputs
        .iter()
        .zip(wants)
        .map(|(t, &w)| w.then(|| vec![0.0; t.len()]))
        .collect();
    for o in 0..outer {
        let mut offset = o * total_axis * inner;
        for (k, t) in inputs.iter().enumerate() {
            let alen = t.shape()[axis];
            let span = alen * inner;
            if let Some(g) = grads[k].as_mut() {
                let dst = o * span;
                g[dst..dst + span].copy_from_slice(&out_grad[offset..offset + span]);
            }
            offset += span;
        }
    }
    grads
}

fn concat_jvp(
    inputs: &[&Tensor],
    axis: usize,
    output: &Tensor,
    tangents: &[Option<&Vec<f64>>],
) -> Vec<f64> {
    let owned: Vec<Tensor> = inputs
        .iter()
        .zip(tangents)
        .map(|(t, tan)| match tan {
            Some(v) => Tensor::new(t.shape().to_vec(), (*v).clone()).unwrap(),
            None => Tensor::zeros(t.shape()),
        })
        .collect();
    let refs: Vec<&Tensor> = owned.iter().collect();
    let out = concat_forward(&refs, axis).unwrap();
    debug_assert_eq!(out.len(), output.len());
    out.into_data()
}

fn reduce_forward(x: &Tensor, axis: Option<usize>, mean: bool) -> DiffResult<Tensor> {
    match axis {
        None => {
            let mut s = 0.0;
            for &v in x.data() {
                s += v;
            }
            if mean {
                if x.is_empty() {
                    return Err(DiffError::Domain {
                        op: "reduce_mean",
                        detail: "empty tensor has no mean".into(),
                    });
                }
                s /= x.len() as f64;
            }
            Ok(Tensor::scalar(s))
        }
        Some(ax) => {
            if ax >= x.shape().len() {
                return Err(DiffError::InvalidShape {
                    op: if mean { "reduce_mean" } else { "reduce_sum" },
                    shape: x.shape().to_vec(),
                    detail: format!("axis {ax} out of range"),
                });
            }
            let (outer, alen, inner) = axis_blocks(x.shape(), ax);
            let mut shape = x.shape().to_vec();
            shape.remove(ax);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for a in 0..alen {
                    let base = (o * alen + a) * inner;
                    for i in 0..inner {
                        data[o * inner + i] += x.data()[base + i];
                    }
                }
            }
            if mean {
                let n = alen as f64;
                for v in data.iter_mut() {
                    *v /= n;
                }
            }
            Tensor::new(shape, data)
        }
    }
}

fn reduce_backward(x: &Tensor, axis: Option<usize>, mean: bool, out_grad: &[f64]) -> Vec<f64> {
    match axis {
        None => {
            let g = out_grad[0] / if mean { x.len() as f64 } else { 1.0 };
            vec![g; x.len()]
        }
        Some(ax) => {
            let (outer, alen, inner) = axis_blocks(x.shape(), ax);
            let scale = if mean { 1.0 / alen as f64 } else { 1.0 };
            let mut grad = vec![0.0; x.len()];
            for o in 0..outer {
                for a in 0..alen {
                    let base = (o * alen + a) * inner;
                    for i in 0..inner {
                        grad[base + i] = out_grad[o * inner + i] * scale;
                    }
                }
            }
            grad
        }
    }
}

fn reduce_jvp(
    x: &Tensor,
    axis: Option<usize>,
    mean: bool,
    output: &Tensor,
    tangent: Option<&Vec<f64>>,
) -> Vec<f64> {
    match tangent {
        Some(t) => {
            let tx = Tensor::new(x.shape().to_vec(), t.clone()).unwrap();
            reduce_forward(&tx, axis, mean).unwrap().into_data()
        }
        None => vec![0.0; output.len()],
    }
}
