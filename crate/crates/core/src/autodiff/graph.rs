//! Tape of recorded operations with a single reverse sweep.

use std::collections::HashMap;

use super::tensor::{Real, Tensor};
use super::AutodiffError;

/// Index of a node on a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Caller-chosen identifier of a trainable parameter leaf.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Hessian channel order used by [`Graph::sine_stack`]: upper triangle of a
/// symmetric 3×3 matrix, row-major.
pub const HESSIAN_PAIRS: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Variable,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sin,
    Cos,
    Exp,
    Sqrt,
    Abs,
    Square,
    MaxConst(T),
    MulConst(T),
    AddConst(T),
    Sum,
    Mean,
    LayerNorm { xhat: Vec<T>, inv_std: Vec<T> },
    Silu,
    SelectBlocks(Vec<usize>),
    ConcatBlocks,
    SliceLast { start: usize },
    LocalLinear { local_grad: Tensor<T> },
    SineStack { sin: Vec<T>, cos: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Variable => "variable",
            Op::Param => "param",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Exp => "exp",
            Op::Sqrt => "sqrt",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::MaxConst(_) => "max_with_constant",
            Op::MulConst(_) => "mul_const",
            Op::AddConst(_) => "add_const",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Silu => "silu",
            Op::SelectBlocks(_) => "select_blocks",
            Op::ConcatBlocks => "concat_blocks",
            Op::SliceLast { .. } => "slice_last",
            Op::LocalLinear { .. } => "local_linear",
            Op::SineStack { .. } => "sine_stack",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    leaves: HashMap<NodeId, Tensor<T>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a parameter leaf. Parameters the loss does not reach get a
    /// zero tensor of the parameter's shape.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.leaves.get(n))
    }

    /// Gradient with respect to a variable or parameter leaf.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.leaves.get(&node)
    }

    /// All parameter gradients ordered by parameter id.
    pub fn params_sorted(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(p, n)| self.leaves.get(n).map(|g| (*p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

/// Strip leading unit dimensions.
fn core_shape(shape: &[usize]) -> &[usize] {
    let first = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
    &shape[first..]
}

fn fits_into(small: &[usize], big: &[usize]) -> bool {
    let s = core_shape(small);
    s.len() <= big.len() && big.ends_with(s)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b || fits_into(b, a) {
        Some(a.to_vec())
    } else if fits_into(a, b) {
        Some(b.to_vec())
    } else {
        None
    }
}

/// Elementwise binary kernel where the shorter operand tiles the longer one.
fn zip_tiled<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    let n = a.len().max(b.len());
    let mut out = Vec::with_capacity(n);
    if a.len() == b.len() {
        out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y)));
    } else if b.len() == 1 {
        let y = b[0];
        out.extend(a.iter().map(|&x| f(x, y)));
    } else if a.len() == 1 {
        let x = a[0];
        out.extend(b.iter().map(|&y| f(x, y)));
    } else if b.len() < a.len() {
        for ca in a.chunks(b.len()) {
            out.extend(ca.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
    } else {
        for cb in b.chunks(a.len()) {
            out.extend(a.iter().zip(cb).map(|(&x, &y)| f(x, y)));
        }
    }
    out
}

/// Sum a gradient over the tiles of a broadcast operand.
fn reduce_to<T: Real>(grad: Vec<T>, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    if grad.len() == n {
        return Tensor::new(shape.to_vec(), grad).expect("shape consistent");
    }
    let mut out = vec![T::zero(); n];
    for chunk in grad.chunks(n) {
        for (o, &g) in out.iter_mut().zip(chunk) {
            *o = *o + g;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("shape consistent")
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Recorded computation. Build it forward with the op methods, then call
/// [`Graph::backward`] once per scalar loss.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> Result<NodeId, AutodiffError> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        let needs_grad = match op {
            Op::Variable | Op::Param => true,
            Op::Constant => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        Ok(NodeId(id))
    }

    fn leaf(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        let id = self.nodes.len();
        let needs_grad = !matches!(op, Op::Constant);
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            value,
            needs_grad,
        });
        NodeId(id)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(Op::Constant, value)
    }

    pub fn constant_scalar(&mut self, v: T) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Differentiable leaf that is not a parameter (e.g. an input probed by a test).
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(Op::Variable, value)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> NodeId {
        let n = self.leaf(Op::Param, value);
        self.params.push((id, n));
        n
    }

    fn binary(&mut self, op: Op<T>, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| AutodiffError::ShapeMismatch {
            op: op.name(),
            shapes: vec![va.shape().to_vec(), vb.shape().to_vec()],
        })?;
        let data = zip_tiled(va.data(), vb.data(), f);
        self.push(op, vec![a, b], Tensor::new(shape, data)?)
    }

    fn unary(&mut self, op: Op<T>, x: NodeId, f: impl Fn(T) -> T) -> Result<NodeId, AutodiffError> {
        let value = self.nodes[x.0].value.map(f);
        self.push(op, vec![x], value)
    }

    /// `a · b` where `b` is `(k, n)` and `a` has last dimension `k`; leading
    /// dimensions of `a` are treated as rows.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if vb.shape().len() != 2 || va.shape().is_empty() || va.last_dim() != vb.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                shapes: vec![va.shape().to_vec(), vb.shape().to_vec()],
            });
        }
        let (m, k, n) = (va.rows(), vb.shape()[0], vb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, va.data(), (k, 1), vb.data(), (n, 1), &mut out);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        self.push(Op::MatMul, vec![a, b], Tensor::new(shape, out)?)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(Op::Neg, x, |v| -v)
    }

    pub fn sin(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(Op::Sin, x, |v| v.sin())
    }

    pub fn cos(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(Op::Cos, x, |v| v.cos())
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(Op::Exp, x, |v| v.exp())
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(Op::Sqrt, x, |v| v.sqrt())
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(Op::Abs, x, |v| v.abs())
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(Op::Square, x, |v| v * v)
    }

    /// `max(x, c)` elementwise; the subgradient at `x == c` is 0.
    pub fn max_with_constant(&mut self, x: NodeId, c: T) -> Result<NodeId, AutodiffError> {
        self.unary(Op::MaxConst(c), x, |v| if v > c { v } else { c })
    }

    pub fn mul_const(&mut self, x: NodeId, c: T) -> Result<NodeId, AutodiffError> {
        self.unary(Op::MulConst(c), x, |v| v * c)
    }

    pub fn add_const(&mut self, x: NodeId, c: T) -> Result<NodeId, AutodiffError> {
        self.unary(Op::AddConst(c), x, |v| v + c)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.nodes[x.0].value.data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let v = &self.nodes[x.0].value;
        if v.numel() == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let s = v.data().iter().fold(T::zero(), |acc, &e| acc + e) / T::lit(v.numel() as f64);
        self.push(Op::Mean, vec![x], Tensor::scalar(s))
    }

    /// Normalize over the last dimension, then apply learnable `gain`/`bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (vx, vg, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let h = vx.last_dim();
        if vx.shape().is_empty() || vg.shape() != [h] || vb.shape() != [h] {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                shapes: vec![vx.shape().to_vec(), vg.shape().to_vec(), vb.shape().to_vec()],
            });
        }
        let hf = T::lit(h as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut inv_std = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(h) {
            let mu = row.iter().fold(T::zero(), |a, &v| a + v) / hf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / hf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for ((&v, &g), &b) in row.iter().zip(vg.data()).zip(vb.data()) {
                let xh = (v - mu) * is;
                xhat.push(xh);
                out.push(g * xh + b);
            }
        }
        let shape = vx.shape().to_vec();
        self.push(
            Op::LayerNorm { xhat, inv_std },
            vec![x, gain, bias],
            Tensor::new(shape, out)?,
        )
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(Op::Silu, x, |v| v * sigmoid(v))
    }

    /// Gather blocks along the first axis. `x` of shape `(B, rest..)` yields
    /// `(indices.len(), rest..)`.
    pub fn select_blocks(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId, AutodiffError> {
        let vx = &self.nodes[x.0].value;
        let Some(&nb) = vx.shape().first() else {
            return Err(AutodiffError::InvalidArgument {
                op: "select_blocks",
                reason: "scalar input".into(),
            });
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= nb) {
            return Err(AutodiffError::InvalidArgument {
                op: "select_blocks",
                reason: format!("block {bad} out of range for {nb} blocks"),
            });
        }
        let bs = if nb == 0 { 0 } else { vx.numel() / nb };
        let mut out = Vec::with_capacity(bs * indices.len());
        for &i in indices {
            out.extend_from_slice(&vx.data()[i * bs..(i + 1) * bs]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = indices.len();
        self.push(Op::SelectBlocks(indices.to_vec()), vec![x], Tensor::new(shape, out)?)
    }

    /// Concatenate along the first axis.
    pub fn concat_blocks(&mut self, xs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let Some(first) = xs.first() else {
            return Err(AutodiffError::InvalidArgument {
                op: "concat_blocks",
                reason: "no inputs".into(),
            });
        };
        let rest = self.nodes[first.0].value.shape().get(1..).map(<[usize]>::to_vec);
        let mut total = 0;
        let mut out = Vec::new();
        for &x in xs {
            let v = &self.nodes[x.0].value;
            if v.shape().is_empty() || v.shape().get(1..).map(<[usize]>::to_vec) != rest {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_blocks",
                    shapes: xs.iter().map(|n| self.nodes[n.0].value.shape().to_vec()).collect(),
                });
            }
            total += v.shape()[0];
            out.extend_from_slice(v.data());
        }
        let mut shape = vec![total];
        shape.extend(rest.unwrap_or_default());
        self.push(Op::ConcatBlocks, xs.to_vec(), Tensor::new(shape, out)?)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let vx = &self.nodes[x.0].value;
        let m = vx.last_dim();
        if vx.shape().is_empty() || start + len > m {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_last",
                reason: format!("columns {start}..{} of {m}", start + len),
            });
        }
        let mut out = Vec::with_capacity(vx.rows() * len);
        for row in vx.data().chunks(m) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        self.push(Op::SliceLast { start }, vec![x], Tensor::new(shape, out)?)
    }

    /// Record a value computed outside the engine together with its local
    /// linearization: `input` is `(rows, k)`, `values` holds one entry per row
    /// and `local_grad` the row-wise derivative `∂value_r / ∂input[r, :]`.
    pub fn local_linear(
        &mut self,
        input: NodeId,
        values: Tensor<T>,
        local_grad: Tensor<T>,
    ) -> Result<NodeId, AutodiffError> {
        let vi = &self.nodes[input.0].value;
        if values.numel() != vi.rows() || local_grad.shape() != vi.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "local_linear",
                shapes: vec![vi.shape().to_vec(), values.shape().to_vec(), local_grad.shape().to_vec()],
            });
        }
        if !local_grad.is_finite() {
            return Err(AutodiffError::NonFinite {
                op: "local_linear",
                node: self.nodes.len(),
            });
        }
        self.push(Op::LocalLinear { local_grad }, vec![input], values)
    }

    /// Parameterized sine activation `a·sin(b·(z + bias) + c) + d` applied to a
    /// derivative stack and propagated through its input derivatives.
    ///
    /// `z` has shape `(C, rows.., H)` with `C` channels: the pre-activation
    /// value (no bias yet), then for `C >= 4` its three first derivatives, then
    /// for `C == 10` its second derivatives in [`HESSIAN_PAIRS`] order.
    /// `params` holds `(a, b, c, d)`.
    pub fn sine_stack(&mut self, z: NodeId, bias: NodeId, params: NodeId) -> Result<NodeId, AutodiffError> {
        let (vz, vb, vp) = (
            &self.nodes[z.0].value,
            &self.nodes[bias.0].value,
            &self.nodes[params.0].value,
        );
        let channels = vz.shape().first().copied().unwrap_or(0);
        let h = vz.last_dim();
        if !matches!(channels, 1 | 4 | 10) || vz.shape().len() < 2 || vb.shape() != [h] || vp.numel() != 4 {
            return Err(AutodiffError::ShapeMismatch {
                op: "sine_stack",
                shapes: vec![vz.shape().to_vec(), vb.shape().to_vec(), vp.shape().to_vec()],
            });
        }
        let [a, b, c, d] = [vp.data()[0], vp.data()[1], vp.data()[2], vp.data()[3]];
        let block = vz.numel() / channels;
        let zd = vz.data();
        let bias_d = vb.data();
        let mut out = vec![T::zero(); vz.numel()];
        let mut sin = Vec::with_capacity(block);
        let mut cos = Vec::with_capacity(block);
        let ab = a * b;
        let neg_abb = -(a * b * b);
        for r in 0..block {
            let pre = zd[r] + bias_d[r % h];
            let t = b * pre + c;
            let (s, co) = t.sin_cos();
            sin.push(s);
            cos.push(co);
            out[r] = a * s + d;
            if channels >= 4 {
                let g1 = ab * co;
                for j in 0..3 {
                    out[(1 + j) * block + r] = g1 * zd[(1 + j) * block + r];
                }
                if channels == 10 {
                    let g2 = neg_abb * s;
                    for (p, &(j, k)) in HESSIAN_PAIRS.iter().enumerate() {
                        let zj = zd[(1 + j) * block + r];
                        let zk = zd[(1 + k) * block + r];
                        out[(4 + p) * block + r] = g2 * zj * zk + g1 * zd[(4 + p) * block + r];
                    }
                }
            }
        }
        let shape = vz.shape().to_vec();
        self.push(Op::SineStack { sin, cos }, vec![z, bias, params], Tensor::new(shape, out)?)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, AutodiffError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Variable | Op::Param => {
                    leaves.insert(NodeId(i), g);
                    continue;
                }
                Op::Constant => continue,
                _ => {}
            }
            let input_grads = self.input_grads(node, &g);
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut adj[inp.0] {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a = *a + v;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        for &(_, n) in &self.params {
            leaves
                .entry(n)
                .or_insert_with(|| Tensor::zeros(self.nodes[n.0].value.shape().to_vec()));
        }
        Ok(Gradients {
            leaves,
            params: self.params.clone(),
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn input_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let val = |i: usize| &self.nodes[node.inputs[i].0].value;
        let want = |i: usize| self.wants(node.inputs[i]);
        let gd = g.data();
        let unary = |f: &dyn Fn(T, T, T) -> T| -> Vec<Option<Tensor<T>>> {
            // f(upstream, input, output)
            let x = val(0);
            let data = gd
                .iter()
                .zip(x.data())
                .zip(node.value.data())
                .map(|((&gu, &xi), &yi)| f(gu, xi, yi))
                .collect();
            vec![Some(Tensor::new(x.shape().to_vec(), data).expect("shape"))]
        };
        match &node.op {
            Op::Constant | Op::Variable | Op::Param => Vec::new(),
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.rows(), b.shape()[0], b.shape()[1]);
                let da = want(0).then(|| {
                    let mut out = vec![T::zero(); m * k];
                    // dA = dC · Bᵀ
                    T::gemm(m, n, k, gd, (n, 1), b.data(), (1, n), &mut out);
                    Tensor::new(a.shape().to_vec(), out).expect("shape")
                });
                let db = want(1).then(|| {
                    let mut out = vec![T::zero(); k * n];
                    // dB = Aᵀ · dC
                    T::gemm(k, m, n, a.data(), (1, k), gd, (n, 1), &mut out);
                    Tensor::new(b.shape().to_vec(), out).expect("shape")
                });
                vec![da, db]
            }
            Op::Add | Op::Sub => {
                let sign = if matches!(node.op, Op::Sub) { -T::one() } else { T::one() };
                let da = want(0).then(|| reduce_to(gd.to_vec(), val(0).shape()));
                let db = want(1).then(|| reduce_to(gd.iter().map(|&v| sign * v).collect(), val(1).shape()));
                vec![da, db]
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                let da = want(0).then(|| reduce_to(zip_tiled(gd, b.data(), |x, y| x * y), a.shape()));
                let db = want(1).then(|| reduce_to(zip_tiled(gd, a.data(), |x, y| x * y), b.shape()));
                vec![da, db]
            }
            Op::Div => {
                let (a, b) = (val(0), val(1));
                let da = want(0).then(|| reduce_to(zip_tiled(gd, b.data(), |x, y| x / y), a.shape()));
                let db = want(1).then(|| {
                    // d(a/b)/db = -(a/b)/b
                    let q = zip_tiled(gd, node.value.data(), |x, y| x * y);
                    reduce_to(zip_tiled(&q, b.data(), |x, y| -x / y), b.shape())
                });
                vec![da, db]
            }
            Op::Neg => unary(&|gu, _, _| -gu),
            Op::Sin => unary(&|gu, x, _| gu * x.cos()),
            Op::Cos => unary(&|gu, x, _| -gu * x.sin()),
            Op::Exp => unary(&|gu, _, y| gu * y),
            Op::Sqrt => unary(&|gu, _, y| gu / (y + y)),
            Op::Abs => unary(&|gu, x, _| {
                if x > T::zero() {
                    gu
                } else if x < T::zero() {
                    -gu
                } else {
                    T::zero()
                }
            }),
            Op::Square => unary(&|gu, x, _| gu * (x + x)),
            Op::MaxConst(c) => {
                let c = *c;
                unary(&|gu, x, _| if x > c { gu } else { T::zero() })
            }
            Op::MulConst(c) => {
                let c = *c;
                unary(&|gu, _, _| gu * c)
            }
            Op::AddConst(_) => unary(&|gu, _, _| gu),
            Op::Sum => {
                let x = val(0);
                vec![Some(Tensor::full(x.shape().to_vec(), gd[0]))]
            }
            Op::Mean => {
                let x = val(0);
                let s = gd[0] / T::lit(x.numel() as f64);
                vec![Some(Tensor::full(x.shape().to_vec(), s))]
            }
            Op::LayerNorm { xhat, inv_std } => {
                let (x, gain) = (val(0), val(1));
                let h = x.last_dim();
                let hf = T::lit(h as f64);
                let mut dx = vec![T::zero(); x.numel()];
                let mut dgain = vec![T::zero(); h];
                let mut dbias = vec![T::zero(); h];
                for (r, ((grow, xrow), dxrow)) in gd
                    .chunks(h)
                    .zip(xhat.chunks(h))
                    .zip(dx.chunks_mut(h))
                    .enumerate()
                {
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for j in 0..h {
                        let dxh = grow[j] * gain.data()[j];
                        sum_dxh = sum_dxh + dxh;
                        sum_dxh_xh = sum_dxh_xh + dxh * xrow[j];
                        dgain[j] = dgain[j] + grow[j] * xrow[j];
                        dbias[j] = dbias[j] + grow[j];
                    }
                    let is = inv_std[r];
                    for j in 0..h {
                        let dxh = grow[j] * gain.data()[j];
                        dxrow[j] = is / hf * (hf * dxh - sum_dxh - xrow[j] * sum_dxh_xh);
                    }
                }
                vec![
                    want(0).then(|| Tensor::new(x.shape().to_vec(), dx).expect("shape")),
                    want(1).then(|| Tensor::vector(dgain)),
                    want(2).then(|| Tensor::vector(dbias)),
                ]
            }
            Op::Silu => unary(&|gu, x, _| {
                let s = sigmoid(x);
                gu * s * (T::one() + x * (T::one() - s))
            }),
            Op::SelectBlocks(indices) => {
                let x = val(0);
                let nb = x.shape()[0];
                let bs = if nb == 0 { 0 } else { x.numel() / nb };
                let mut dx = vec![T::zero(); x.numel()];
                for (slot, &i) in indices.iter().enumerate() {
                    for (d, &v) in dx[i * bs..(i + 1) * bs].iter_mut().zip(&gd[slot * bs..(slot + 1) * bs]) {
                        *d = *d + v;
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), dx).expect("shape"))]
            }
            Op::ConcatBlocks => {
                let mut offset = 0;
                (0..node.inputs.len())
                    .map(|i| {
                        let x = val(i);
                        let n = x.numel();
                        let part = &gd[offset..offset + n];
                        offset += n;
                        want(i).then(|| Tensor::new(x.shape().to_vec(), part.to_vec()).expect("shape"))
                    })
                    .collect()
            }
            Op::SliceLast { start } => {
                let x = val(0);
                let m = x.last_dim();
                let len = node.value.last_dim();
                let mut dx = vec![T::zero(); x.numel()];
                for (drow, grow) in dx.chunks_mut(m).zip(gd.chunks(len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                vec![Some(Tensor::new(x.shape().to_vec(), dx).expect("shape"))]
            }
            Op::LocalLinear { local_grad } => {
                let k = local_grad.last_dim();
                let mut dx = vec![T::zero(); local_grad.numel()];
                for ((drow, lrow), &gu) in dx.chunks_mut(k).zip(local_grad.data().chunks(k)).zip(gd) {
                    for (d, &l) in drow.iter_mut().zip(lrow) {
                        *d = gu * l;
                    }
                }
                vec![Some(Tensor::new(local_grad.shape().to_vec(), dx).expect("shape"))]
            }
            Op::SineStack { sin, cos } => self.sine_stack_grads(node, g, sin, cos),
        }
    }

    fn sine_stack_grads(&self, node: &Node<T>, g: &Tensor<T>, sin: &[T], cos: &[T]) -> Vec<Option<Tensor<T>>> {
        let vz = &self.nodes[node.inputs[0].0].value;
        let vb = &self.nodes[node.inputs[1].0].value;
        let vp = &self.nodes[node.inputs[2].0].value;
        let channels = vz.shape()[0];
        let h = vz.last_dim();
        let block = vz.numel() / channels;
        let zd = vz.data();
        let gd = g.data();
        let [a, b] = [vp.data()[0], vp.data()[1]];
        let ab = a * b;
        let bb = b * b;
        let two = T::lit(2.0);

        let mut dz = vec![T::zero(); vz.numel()];
        let mut dbias = vec![T::zero(); h];
        let (mut da, mut db, mut dc, mut dd) = (T::zero(), T::zero(), T::zero(), T::zero());
        for r in 0..block {
            let (s, co) = (sin[r], cos[r]);
            let g0 = gd[r];
            // Adjoints of the activation's first and second derivative factors.
            let mut g_first = T::zero();
            let mut g_second = T::zero();
            if channels >= 4 {
                let g1 = ab * co;
                for j in 0..3 {
                    let idx = (1 + j) * block + r;
                    g_first = g_first + zd[idx] * gd[idx];
                    dz[idx] = g1 * gd[idx];
                }
                if channels == 10 {
                    let g2 = -(a * bb) * s;
                    for (p, &(j, k)) in HESSIAN_PAIRS.iter().enumerate() {
                        let idx = (4 + p) * block + r;
                        let gh = gd[idx];
                        let zj = zd[(1 + j) * block + r];
                        let zk = zd[(1 + k) * block + r];
                        g_first = g_first + zd[idx] * gh;
                        g_second = g_second + zj * zk * gh;
                        dz[(1 + j) * block + r] = dz[(1 + j) * block + r] + g2 * zk * gh;
                        dz[(1 + k) * block + r] = dz[(1 + k) * block + r] + g2 * zj * gh;
                        dz[idx] = g1 * gh;
                    }
                }
            }
            let ds = a * g0 - a * bb * g_second;
            let dco = ab * g_first;
            let dt = co * ds - s * dco;
            let pre = zd[r] + vb.data()[r % h];
            dz[r] = b * dt;
            dbias[r % h] = dbias[r % h] + b * dt;
            da = da + s * g0 + b * co * g_first - bb * s * g_second;
            db = db + dt * pre + a * co * g_first - two * a * b * s * g_second;
            dc = dc + dt;
            dd = dd + g0;
        }
        vec![
            self.wants(node.inputs[0])
                .then(|| Tensor::new(vz.shape().to_vec(), dz).expect("shape")),
            self.wants(node.inputs[1]).then(|| Tensor::vector(dbias)),
            self.wants(node.inputs[2])
                .then(|| Tensor::new(vp.shape().to_vec(), vec![da, db, dc, dd]).expect("shape")),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sin_at_zero_and_its_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::scalar(0.0));
        let y = g.sin(x).unwrap();
        assert_eq!(g.scalar(y), 0.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 1.0);
    }

    #[test]
    fn linear_loss_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(ParamId(0), Tensor::scalar(0.7));
        let x = g.constant_scalar(2.0);
        let loss = g.mul(w, x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(ParamId(0)).unwrap().item(), 2.0);
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut g = Graph::<f64>::new();
        let w = g.param(ParamId(0), Tensor::scalar(0.7));
        let p = g.param(ParamId(1), t(&[2], &[1.0, 2.0]));
        let loss = g.square(w).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(ParamId(1)).unwrap(), &Tensor::zeros(vec![2]));
        let _ = p;
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss { .. })));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3], &[0.0; 6]));
        let b = g.constant(t(&[2, 2], &[0.0; 4]));
        match g.add(a, b) {
            Err(AutodiffError::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "add");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 2]]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn non_finite_output_is_reported() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1], &[1.0]));
        let z = g.constant(t(&[1], &[0.0]));
        match g.div(a, z) {
            Err(AutodiffError::NonFinite { op, node }) => {
                assert_eq!(op, "div");
                assert_eq!(node, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn silu_and_layer_norm_analytic_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant_scalar(0.0);
        let y = g.silu(x).unwrap();
        assert_eq!(g.scalar(y), 0.0);
        let c = g.constant(t(&[1, 4], &[3.0; 4]));
        let gain = g.constant(t(&[4], &[1.0; 4]));
        let bias = g.constant(t(&[4], &[0.0; 4]));
        let ln = g.layer_norm(c, gain, bias).unwrap();
        assert!(g.value(ln).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn broadcast_rules() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[3, 2, 2], &[1.0; 12]));
        let b = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = g.constant_scalar(2.0);
        let ab = g.mul(a, b).unwrap();
        assert_eq!(g.shape(ab), &[3, 2, 2]);
        assert_eq!(&g.value(ab).data()[8..], &[1.0, 2.0, 3.0, 4.0]);
        let sa = g.sub(s, a).unwrap();
        assert_eq!(g.shape(sa), &[3, 2, 2]);
        let bad = g.constant(t(&[3], &[0.0; 3]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn max_with_constant_kink_subgradient_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[-1.0, 0.0, 2.0]));
        let m = g.max_with_constant(x, 0.0).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn select_and_concat_roundtrip_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = g.select_blocks(x, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(s).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let c = g.concat_blocks(&[s, x]).unwrap();
        assert_eq!(g.shape(c), &[6, 2]);
        let col = g.slice_last(c, 1, 1).unwrap();
        let loss = g.sum(col).unwrap();
        assert_eq!(g.scalar(loss), 6.0 + 2.0 + 6.0 + 2.0 + 4.0 + 6.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 2.0, 0.0, 1.0, 0.0, 3.0]);
    }
}
