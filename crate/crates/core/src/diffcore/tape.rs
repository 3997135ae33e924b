//! The computation record: recording, reverse-mode replay, forward tangents.

use super::ops::Op;
use super::tensor::Tensor;
use super::{DiffError, DiffResult};
use std::cell::RefCell;
use std::rc::Rc;

struct Node {
    value: Tensor,
    requires_grad: bool,
    /// The producing operation and its input node ids; `None` for leaves and
    /// for untracked forward values.
    recorded: Option<(Op, Vec<usize>)>,
    grad: Option<Vec<f64>>,
}

struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// A computation record. Applying primitives to [`Var`]s belonging to the
/// tape appends nodes; [`Tape::backward`] replays the record once in reverse
/// and then marks it consumed. One record is single-threaded by construction
/// (`Rc` interior); independent records may live on independent threads.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// A handle to one value on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Rc<RefCell<TapeInner>>,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    fn push(&self, node: Node) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        Var {
            tape: Rc::clone(&self.inner),
            id: inner.nodes.len() - 1,
        }
    }

    /// A tracked leaf: gradients will be accumulated for it.
    pub fn leaf(&self, value: Tensor) -> DiffResult<Var> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite { op: "leaf" });
        }
        Ok(self.push(Node {
            value,
            requires_grad: true,
            recorded: None,
            grad: None,
        }))
    }

    /// An untracked constant.
    pub fn constant(&self, value: Tensor) -> DiffResult<Var> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite { op: "constant" });
        }
        Ok(self.push(Node {
            value,
            requires_grad: false,
            recorded: None,
            grad: None,
        }))
    }

    /// Scalar constant convenience.
    pub fn scalar(&self, v: f64) -> DiffResult<Var> {
        self.constant(Tensor::scalar(v))
    }

    /// Apply a primitive to inputs living on this tape.
    pub fn apply(&self, op: Op, inputs: &[&Var]) -> DiffResult<Var> {
        for v in inputs {
            if !Rc::ptr_eq(&v.tape, &self.inner) {
                return Err(DiffError::TapeMismatch { op: op.name() });
            }
        }
        let (value, requires_grad) = {
            let inner = self.inner.borrow();
            if inner.consumed {
                return Err(DiffError::TapeConsumed);
            }
            let tensors: Vec<&Tensor> = inputs.iter().map(|v| &inner.nodes[v.id].value).collect();
            op.check_arity(&tensors)?;
            let value = op.forward(&tensors)?;
            if !value.all_finite() {
                return Err(DiffError::NonFinite { op: op.name() });
            }
            let requires_grad = inputs.iter().any(|v| inner.nodes[v.id].requires_grad);
            (value, requires_grad)
        };
        let recorded = Some((op, inputs.iter().map(|v| v.id).collect()));
        Ok(self.push(Node {
            value,
            requires_grad,
            recorded,
            grad: None,
        }))
    }

    /// Reverse-mode replay from a scalar loss. Every recorded operation is
    /// visited exactly once; afterwards the record is consumed and gradients
    /// stay readable through [`Var::grad`].
    pub fn backward(&self, loss: &Var) -> DiffResult<()> {
        if !Rc::ptr_eq(&loss.tape, &self.inner) {
            return Err(DiffError::TapeMismatch { op: "backward" });
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(DiffError::TapeConsumed);
        }
        if inner.nodes[loss.id].value.len() != 1 {
            return Err(DiffError::NotScalar {
                shape: inner.nodes[loss.id].value.shape().to_vec(),
            });
        }
        inner.nodes[loss.id].grad = Some(vec![1.0]);
        for i in (0..=loss.id).rev() {
            let step = {
                let node = &inner.nodes[i];
                match (&node.grad, &node.recorded) {
                    (Some(g), Some((op, ids))) => Some((op.clone(), ids.clone(), g.clone())),
                    _ => None,
                }
            };
            let Some((op, ids, out_grad)) = step else {
                continue;
            };
            let contributions = {
                let nodes = &inner.nodes;
                let tensors: Vec<&Tensor> = ids.iter().map(|&id| &nodes[id].value).collect();
                let wants: Vec<bool> = ids.iter().map(|&id| nodes[id].requires_grad).collect();
                op.backward(&tensors, &nodes[i].value, &out_grad, &wants)
            };
            for (slot, &id) in contributions.iter().zip(&ids) {
                let Some(contrib) = slot else { continue };
                if contrib.iter().any(|v| !v.is_finite()) {
                    return Err(DiffError::NonFinite { op: op.name() });
                }
                let target = &mut inner.nodes[id];
                match target.grad.as_mut() {
                    Some(g) => {
                        for (gv, &cv) in g.iter_mut().zip(contrib) {
                            *gv += cv;
                        }
                    }
                    None => target.grad = Some(contrib.clone()),
                }
            }
        }
        inner.consumed = true;
        Ok(())
    }

    /// Forward tangent propagation over the recorded graph: the directional
    /// derivative of `output` along `direction` at the tracked leaf `seed`.
    pub fn forward_tangent(
        &self,
        seed: &Var,
        direction: &Tensor,
        output: &Var,
    ) -> DiffResult<Tensor> {
        if !Rc::ptr_eq(&seed.tape, &self.inner) || !Rc::ptr_eq(&output.tape, &self.inner) {
            return Err(DiffError::TapeMismatch {
                op: "forward_tangent",
            });
        }
        let inner = self.inner.borrow();
        let seed_node = &inner.nodes[seed.id];
        if direction.shape() != seed_node.value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "forward_tangent",
                lhs: seed_node.value.shape().to_vec(),
                rhs: direction.shape().to_vec(),
            });
        }
        let mut tangents: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        tangents[seed.id] = Some(direction.data().to_vec());
        for i in seed.id + 1..=output.id {
            let Some((op, ids)) = &inner.nodes[i].recorded else {
                continue;
            };
            if !ids.iter().any(|&id| id <= output.id && tangents[id].is_some()) {
                continue;
            }
            let tensors: Vec<&Tensor> = ids.iter().map(|&id| &inner.nodes[id].value).collect();
            let in_tangents: Vec<Option<&Vec<f64>>> =
                ids.iter().map(|&id| tangents[id].as_ref()).collect();
            let t = op.jvp(&tensors, &inner.nodes[i].value, &in_tangents);
            if t.iter().any(|v| !v.is_finite()) {
                return Err(DiffError::NonFinite { op: op.name() });
            }
            tangents[i] = Some(t);
        }
        let out_node = &inner.nodes[output.id];
        let data = tangents[output.id]
            .take()
            .unwrap_or_else(|| vec![0.0; out_node.value.len()]);
        Tensor::new(out_node.value.shape().to_vec(), data)
    }
}

impl Var {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of the value.
    pub fn value(&self) -> Tensor {
        self.tape.borrow().nodes[self.id].value.clone()
    }

    /// The single element of a scalar value.
    pub fn item(&self) -> DiffResult<f64> {
        self.tape.borrow().nodes[self.id].value.item()
    }

    /// Accumulated gradient, available after `backward`.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.tape.borrow();
        let node = &inner.nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).unwrap())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.borrow().nodes[self.id].requires_grad
    }

    fn tape_handle(&self) -> Tape {
        Tape {
            inner: Rc::clone(&self.tape),
        }
    }

    pub fn matmul(&self, rhs: &Var) -> DiffResult<Var> {
        self.tape_handle().apply(Op::MatMul, &[self, rhs])
    }

    pub fn conv2d(&self, kernel: &Var, stride: usize, pad: usize) -> DiffResult<Var> {
        self.tape_handle()
            .apply(Op::Conv2d { stride, pad }, &[self, kernel])
    }

    pub fn avg_pool2(&self) -> DiffResult<Var> {
        self.tape_handle().apply(Op::AvgPool2, &[self])
    }

    pub fn upsample2(&self) -> DiffResult<Var> {
        self.tape_handle().apply(Op::Upsample2, &[self])
    }

    pub fn add(&self, rhs: &Var) -> DiffResult<Var> {
        self.tape_handle().apply(Op::Add, &[self, rhs])
    }

    pub fn sub(&self, rhs: &Var) -> DiffResult<Var> {
        self.tape_handle().apply(Op::Sub, &[self, rhs])
    }

    pub fn mul(&self, rhs: &Var) -> DiffResult<Var> {
        self.tape_handle().apply(Op::Mul, &[self, rhs])
    }

    pub fn div(&self, rhs: &Var) -> DiffResult<Var> {
        self.tape_handle().apply(Op::Div, &[self, rhs])
    }

    pub fn add_scalar(&self, c: f64) -> DiffResult<Var> {
        self.tape_handle().apply(Op::AddScalar(c), &[self])
    }

    pub fn mul_scalar(&self, c: f64) -> DiffResult<Var> {
        self.tape_handle().apply(Op::MulScalar(c), &[self])
    }

    pub fn relu(&self) -> DiffResult<Var> {
        self.tape_handle().apply(Op::Relu, &[self])
    }

    pub fn sigmoid(&self) -> DiffResult<Var> {
        self.tape_handle().apply(Op::Sigmoid, &[self])
    }

    pub fn tanh(&self) -> DiffResult<Var> {
        self.tape_handle().apply(Op::Tanh, &[self])
    }

    pub fn cos(&self) -> DiffResult<Var> {
        self.tape_handle().apply(Op::Cos, &[self])
    }

    pub fn sin(&self) -> DiffResult<Var> {
        self.tape_handle().apply(Op::Sin, &[self])
    }

    pub fn exp(&self) -> DiffResult<Var> {
        self.tape_handle().apply(Op::Exp, &[self])
    }

    pub fn log(&self) -> DiffResult<Var> {
        self.tape_handle().apply(Op::Log, &[self])
    }

    pub fn sqrt(&self) -> DiffResult<Var> {
        self.tape_handle().apply(Op::Sqrt, &[self])
    }

    pub fn softplus(&self) -> DiffResult<Var> {
        self.tape_handle().apply(Op::Softplus, &[self])
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> DiffResult<Var> {
        self.tape_handle().apply(Op::Clamp { lo, hi }, &[self])
    }

    pub fn softmax(&self) -> DiffResult<Var> {
        self.tape_handle().apply(Op::Softmax, &[self])
    }

    pub fn batch_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> DiffResult<Var> {
        self.tape_handle()
            .apply(Op::BatchNorm { eps }, &[self, gamma, beta])
    }

    pub fn reshape(&self, shape: &[usize]) -> DiffResult<Var> {
        self.tape_handle().apply(
            Op::Reshape {
                shape: shape.to_vec(),
            },
            &[self],
        )
    }

    pub fn transpose(&self) -> DiffResult<Var> {
        self.tape_handle().apply(Op::Transpose2, &[self])
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> DiffResult<Var> {
        self.tape_handle()
            .apply(Op::Slice { axis, start, len }, &[self])
    }

    pub fn reduce_sum(&self, axis: Option<usize>) -> DiffResult<Var> {
        self.tape_handle().apply(Op::ReduceSum { axis }, &[self])
    }

    pub fn reduce_mean(&self, axis: Option<usize>) -> DiffResult<Var> {
        self.tape_handle().apply(Op::ReduceMean { axis }, &[self])
    }

    pub fn affine_grid(&self, h: usize, w: usize) -> DiffResult<Var> {
        self.tape_handle().apply(Op::AffineGrid { h, w }, &[self])
    }

    pub fn grid_sample(&self, grid: &Var) -> DiffResult<Var> {
        self.tape_handle().apply(Op::GridSample, &[self, grid])
    }

    pub fn velocity_matrix(&self) -> DiffResult<Var> {
        self.tape_handle().apply(Op::VelocityMatrix, &[self])
    }

    /// Sum of squared entries, as a scalar.
    pub fn sum_squares(&self) -> DiffResult<Var> {
        self.mul(self)?.reduce_sum(None)
    }

    /// Euclidean norm of the flattened value. Derivative at the zero vector
    /// follows the `sqrt` convention (zero).
    pub fn l2_norm(&self) -> DiffResult<Var> {
        self.sum_squares()?.sqrt()
    }
}

/// Concatenate along an axis.
pub fn concat(vars: &[&Var], axis: usize) -> DiffResult<Var> {
    if vars.is_empty() {
        return Err(DiffError::Domain {
            op: "concat",
            detail: "needs at least one input".into(),
        });
    }
    vars[0].tape_handle().apply(Op::Concat { axis }, vars)
}

/// A differentiable map evaluated on a tape. Implemented for closures.
pub trait DiffFn {
    fn apply(&self, tape: &Tape, input: &Var) -> DiffResult<Var>;
}

impl<F> DiffFn for F
where
    F: Fn(&Tape, &Var) -> DiffResult<Var>,
{
    fn apply(&self, tape: &Tape, input: &Var) -> DiffResult<Var> {
        self(tape, input)
    }
}

/// Dense Jacobian of `f` at `z`: output component per row, input component
/// per column (flat row-major ordering on both sides). Columns come from one
/// forward tangent pass per input component over a single recorded
/// evaluation, so they linearize identically to reverse mode.
pub fn jacobian<F: DiffFn + ?Sized>(f: &F, z: &Tensor) -> DiffResult<Tensor> {
    let tape = Tape::new();
    let zv = tape.leaf(z.clone())?;
    let out = f.apply(&tape, &zv)?;
    let n = out.len();
    let j = z.len();
    let mut data = vec![0.0; n * j];
    for col in 0..j {
        let mut dir = Tensor::zeros(z.shape());
        dir.data_mut()[col] = 1.0;
        let t = tape.forward_tangent(&zv, &dir, &out)?;
        for row in 0..n {
            data[row * j + col] = t.data()[row];
        }
    }
    Tensor::new(vec![n, j], data)
}

/// Vector-Jacobian product of `f` at `z` with cotangent `v` (one reverse
/// pass): the gradient of `<v, f(z)>`.
pub fn vjp<F: DiffFn + ?Sized>(f: &F, z: &Tensor, v: &Tensor) -> DiffResult<Tensor> {
    let tape = Tape::new();
    let zv = tape.leaf(z.clone())?;
    let out = f.apply(&tape, &zv)?;
    let vv = tape.constant(v.clone())?;
    let loss = out.mul(&vv)?.reduce_sum(None)?;
    tape.backward(&loss)?;
    zv.grad().ok_or(DiffError::Domain {
        op: "vjp",
        detail: "no gradient reached the input".into(),
    })
}
