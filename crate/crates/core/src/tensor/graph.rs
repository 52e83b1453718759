use super::kernels;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial layout of an im2col lowering. Input rows are pixels in raster
/// order with `channels` columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn output_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub(super) fn check(&self, shape: &[usize]) -> Result<()> {
        let ok = self.kernel > 0
            && self.stride > 0
            && self.kernel <= self.height + 2 * self.pad
            && self.kernel <= self.width + 2 * self.pad
            && shape == [self.height * self.width, self.channels];
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "im2col",
                format!("input {shape:?} does not fit geometry {self:?}"),
            ))
        }
    }

    /// Input pixel index read by kernel tap (ky, kx) at output (oy, ox), or
    /// `None` when the tap falls in the zero padding.
    pub(super) fn source_pixel(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.height && x < self.width).then_some(y * self.width + x)
    }
}

/// Every operation the tape knows how to differentiate.
///
/// Shape rules:
/// - `Add`, `Sub`, `Mul`: identical shapes, elementwise.
/// - `Scale(c)`: multiply by a constant.
/// - `AddBias`: `[.., d] + [d]`, the only broadcast.
/// - `MatMul`: `[m, k] x [k, n]` or batched `[b, m, k] x [b, k, n]`.
/// - `Transpose`: swap the last two axes of a rank-2 or rank-3 tensor.
/// - `Reshape`: same element count.
/// - `SplitHeads(h)`: `[n, h*dh] -> [h, n, dh]`; `MergeHeads` inverts it.
/// - `Softmax`, `LayerNorm`: along the last axis. Layer norm takes
///   `(x, gamma, beta)` with `gamma`, `beta` of shape `[d]`.
/// - `Gelu`: tanh approximation.
/// - `Mean`, `Sum`, `SumSq`: reduce everything to shape `[1]`.
/// - `GatherRows(idx)`: rows of a matrix, repeats allowed.
/// - `ScatterRows`: place rows of `[l, d]` at distinct targets of a zero `[rows, d]`.
/// - `Im2Col`: `[h*w, c] -> [oh*ow, k*k*c]`.
/// - `CrossEntropy(labels)`: mean negative log-likelihood of `[b, classes]` logits.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddBias,
    MatMul,
    Transpose,
    Reshape(Vec<usize>),
    SplitHeads(usize),
    MergeHeads,
    Softmax,
    LayerNorm { eps: f64 },
    Gelu,
    Mean,
    Sum,
    SumSq,
    GatherRows(Vec<usize>),
    ScatterRows { index: Vec<usize>, rows: usize },
    Im2Col(ConvGeometry),
    CrossEntropy(Vec<usize>),
}

impl Op {
    /// Names of every variant, in declaration order.
    pub const NAMES: [&'static str; 20] = [
        "add", "sub", "mul", "scale", "add_bias", "matmul", "transpose", "reshape",
        "split_heads", "merge_heads", "softmax", "layernorm", "gelu", "mean", "sum",
        "sum_sq", "gather_rows", "scatter_rows", "im2col", "cross_entropy",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddBias => "add_bias",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::SplitHeads(_) => "split_heads",
            Op::MergeHeads => "merge_heads",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu => "gelu",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::SumSq => "sum_sq",
            Op::GatherRows(_) => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::Im2Col(_) => "im2col",
            Op::CrossEntropy(_) => "cross_entropy",
        }
    }
}

pub const LAYERNORM_EPS: f64 = 1e-6;

struct Record<T> {
    op: Op,
    inputs: Vec<Var>,
    saved: Option<Vec<T>>,
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    record: Option<Record<T>>,
}

/// A single-use tape. Nodes are appended in evaluation order, so the node
/// list is already topologically sorted.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, record: Option<Record<T>>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            record,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that accumulates gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, None)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of recorded (differentiable) operations.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.record.is_some()).count()
    }

    /// Evaluate `op` and record it when any input requires gradient.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = kernels::forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let record = requires_grad.then(|| Record {
            op,
            inputs: inputs.to_vec(),
            saved: out.saved,
        });
        Ok(self.push(out.value, requires_grad, record))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape: every recorded
    /// operation is visited exactly once, in reverse order.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NotScalar(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(record) = &self.nodes[idx].record else {
                continue;
            };
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                record.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let need: Vec<bool> = record
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let local = kernels::backward(
                &record.op,
                &inputs,
                &self.nodes[idx].value,
                record.saved.as_deref(),
                &dy,
                &need,
            );
            for (input, g) in record.inputs.iter().zip(local) {
                let Some(g) = g else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                (node.requires_grad && node.record.is_none()).then(|| {
                    let shape = node.value.shape();
                    match grads[i].take() {
                        Some(data) => Tensor::new(shape.to_vec(), data).expect("grad matches value"),
                        None => Tensor::zeros(shape),
                    }
                })
            })
            .collect();
        Ok(Gradients { leaves })
    }

    // Convenience wrappers, one per op.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.apply(Op::AddBias, &[x, bias])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        self.apply(Op::SplitHeads(heads), &[a])
    }

    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::MergeHeads, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[a])
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.apply(Op::LayerNorm { eps: LAYERNORM_EPS }, &[x, gamma, beta])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }

    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SumSq, &[a])
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        self.apply(Op::GatherRows(index.to_vec()), &[a])
    }

    pub fn scatter_rows(&mut self, a: Var, index: &[usize], rows: usize) -> Result<Var> {
        self.apply(
            Op::ScatterRows {
                index: index.to_vec(),
                rows,
            },
            &[a],
        )
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(Op::CrossEntropy(labels.to_vec()), &[logits])
    }

    /// `x W + b` over the rows of `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    /// Convolution as im2col followed by a matmul with a
    /// `[k*k*c_in, c_out]` weight. Output rows are output pixels in raster order.
    pub fn conv2d(&mut self, x: Var, geom: ConvGeometry, weight: Var, bias: Var) -> Result<Var> {
        let cols = self.apply(Op::Im2Col(geom), &[x])?;
        self.linear(cols, weight, bias)
    }

    /// Zero every row not listed in `keep` (which must be distinct).
    pub fn keep_rows(&mut self, x: Var, keep: &[usize]) -> Result<Var> {
        let rows = self.value(x).shape()[0];
        let kept = self.gather_rows(x, keep)?;
        self.scatter_rows(kept, keep, rows)
    }
}

/// Gradients of the leaves of a consumed graph.
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// `None` for values that do not require gradient or are not leaves.
    /// Leaves the loss does not depend on get an all-zero gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaves.get_mut(v.0).and_then(|g| g.take())
    }
}
