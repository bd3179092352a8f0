//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. `backward` walks the nodes in reverse
//! insertion order, which is a valid reverse topological order because a node
//! can only reference nodes created before it.

use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use super::kernels::{gemm, Trans};
use super::{NumericsError, Scalar, Tensor, ZERO_NORM_THRESHOLD};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    Scale { a: Var, c: Scalar },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Relu { a: Var },
    Ln { a: Var },
    Clamp { a: Var, lo: Scalar, hi: Scalar },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<Scalar>, inv_std: Vec<Scalar> },
    Gather { table: Var, indices: Vec<usize> },
    Dropout { a: Var, mask: Vec<Scalar> },
    Concat { parts: Vec<Var> },
    MaskedFill { a: Var, mask: Vec<bool> },
    L2Norm { a: Var },
    RowNorm { a: Var },
    Sum { a: Var },
    SumLast { a: Var },
    Reshape { a: Var },
    SliceLast { a: Var, start: usize },
    Select1 { a: Var, index: usize },
    Stack1 { parts: Vec<Var> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::Scale { .. } => "scale",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Relu { .. } => "relu",
            Op::Ln { .. } => "ln",
            Op::Clamp { .. } => "clamp",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::MaskedFill { .. } => "masked_fill",
            Op::L2Norm { .. } => "l2_norm",
            Op::RowNorm { .. } => "row_norm",
            Op::Sum { .. } => "sum",
            Op::SumLast { .. } => "sum_last",
            Op::Reshape { .. } => "reshape",
            Op::SliceLast { .. } => "slice_last",
            Op::Select1 { .. } => "select",
            Op::Stack1 { .. } => "stack",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by the leaves that required them.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Result<&Tensor, NumericsError> {
        if var.tape != self.tape {
            return Err(NumericsError::UnknownVar("variable belongs to another tape"));
        }
        self.grads
            .get(var.index())
            .and_then(|g| g.as_ref())
            .ok_or(NumericsError::UnknownVar("no gradient recorded for this variable"))
    }

    pub fn take(&mut self, var: Var) -> Result<Tensor, NumericsError> {
        if var.tape != self.tape {
            return Err(NumericsError::UnknownVar("variable belongs to another tape"));
        }
        self.grads
            .get_mut(var.index())
            .and_then(|g| g.take())
            .ok_or(NumericsError::UnknownVar("no gradient recorded for this variable"))
    }
}

/// Records operations for one forward pass. Confined to a single thread;
/// independent tapes share nothing.
///
/// `backward` borrows the tape immutably and recomputes gradients from the
/// saved forward values, so calling it twice yields identical results.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Dimension { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, var: Var) -> Result<&Node, NumericsError> {
        if var.tape != self.id {
            return Err(NumericsError::UnknownVar("variable belongs to another tape"));
        }
        self.nodes
            .get(var.index())
            .ok_or(NumericsError::UnknownVar("variable index out of range"))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable belongs to another tape");
        &self.nodes[var.index()].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.index()].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        let var = Var {
            tape: self.id,
            index: self.nodes.len() as u32,
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(var)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index()].requires_grad)
    }

    /// Registers a tensor whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a tensor that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.push(value, Op::Constant, false)
    }

    /// `a` of shape `[.., k]` times `b` of shape `[k, n]`, giving `[.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.rank() < 1 || bv.rank() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(dim_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let k = av.last_dim();
        let n = bv.shape()[1];
        let m = av.len() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), Trans::No, bv.data(), Trans::No, &mut out, 0.0);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, rg)
    }

    /// Batched matmul `[B, M, K] x [B, K, N]`, or `[B, M, K] x [B, N, K]^T`
    /// when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, NumericsError> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let bad = || dim_err("bmm", format!("{:?} x {:?} (transpose_b={})", av.shape(), bv.shape(), transpose_b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (kb, n) = if transpose_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        let tb = if transpose_b { Trans::Yes } else { Trans::No };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                Trans::No,
                &bv.data()[i * k * n..(i + 1) * k * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(vec![batch, m, n], out)?, Op::BatchMatMul { a, b, transpose_b }, rg)
    }

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(Scalar, Scalar) -> Scalar,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(dim_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias rows,
    /// positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb || bv.is_empty() {
            return Err(dim_err("add_broadcast", format!("{:?} + {:?}", sa, sb)));
        }
        let inner = bv.len();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(inner) {
            for (x, y) in chunk.iter_mut().zip(bv.data()) {
                *x += *y;
            }
        }
        let value = Tensor::new(sa.to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::AddBroadcast { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, c: Scalar) -> Result<Var, NumericsError> {
        let value = self.node(a)?.value.scaled(c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale { a, c }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(Scalar) -> Scalar, op: Op) -> Result<Var, NumericsError> {
        let value = self.node(a)?.value.map(f);
        let rg = self.any_grad(&[a]);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Scalar::tanh, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn ln(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Scalar::ln, Op::Ln { a })
    }

    pub fn clamp(&mut self, a: Var, lo: Scalar, hi: Scalar) -> Result<Var, NumericsError> {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = &self.node(a)?.value;
        let d = av.last_dim();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Softmax { a }, rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Scalar) -> Result<Var, NumericsError> {
        let xv = &self.node(x)?.value;
        let (gv, bv) = (&self.node(gamma)?.value, &self.node(beta)?.value);
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(dim_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<Scalar>() / d as Scalar;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / d as Scalar;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Row gather from a `[n, d]` table, giving `[indices.len(), d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let tv = &self.node(table)?.value;
        if tv.rank() != 2 {
            return Err(dim_err("gather", format!("table {:?}", tv.shape())));
        }
        let (n, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(NumericsError::IndexOutOfRange { op: "gather", index: i, len: n });
            }
            data.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        let rg = self.any_grad(&[table]);
        self.push(value, Op::Gather { table, indices: indices.to_vec() }, rg)
    }

    /// Inverted dropout: kept activations are divided by the keep probability.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: Scalar, rng: &mut R) -> Result<Var, NumericsError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::Contract(format!("dropout rate {} outside [0, 1)", rate)));
        }
        let av = &self.node(a)?.value;
        let keep = 1.0 - rate;
        let mask: Vec<Scalar> = (0..av.len())
            .map(|_| if rng.random::<f64>() < rate as f64 { 0.0 } else { 1.0 / keep })
            .collect();
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Dropout { a, mask }, rg)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(dim_err("concat", "no inputs".into()));
        }
        let first = self.node(parts[0])?.value.shape().to_vec();
        let lead = &first[..first.len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.node(p)?.value.shape();
            if s.len() != first.len() || s[..s.len() - 1] != *lead {
                return Err(dim_err("concat", format!("{:?} vs {:?}", first, s)));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.nodes[p.index()].value.data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(parts);
        self.push(value, Op::Concat { parts: parts.to_vec() }, rg)
    }

    /// Replaces entries where `mask` is true with `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: Scalar) -> Result<Var, NumericsError> {
        let av = &self.node(a)?.value;
        if mask.len() != av.len() {
            return Err(dim_err("masked_fill", format!("{:?} vs mask of {}", av.shape(), mask.len())));
        }
        let data = av
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::MaskedFill { a, mask: mask.to_vec() }, rg)
    }

    /// Euclidean norm of the whole tensor, as a scalar.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var, NumericsError> {
        let norm = self.node(a)?.value.norm_l2();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(norm), Op::L2Norm { a }, rg)
    }

    /// Euclidean norm over the last axis.
    pub fn row_norm(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = &self.node(a)?.value;
        let d = av.last_dim();
        let data = av
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<Scalar>().sqrt())
            .collect();
        let shape = av.shape()[..av.rank().saturating_sub(1)].to_vec();
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::RowNorm { a }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let total = self.node(a)?.value.data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(total), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let len = self.node(a)?.value.len().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / len as Scalar)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = &self.node(a)?.value;
        let d = av.last_dim();
        let data = av.data().chunks(d).map(|r| r.iter().sum()).collect();
        let shape = av.shape()[..av.rank().saturating_sub(1)].to_vec();
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SumLast { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.node(a)?.value.clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Reshape { a }, rg)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let av = &self.node(a)?.value;
        let d = av.last_dim();
        if start + len > d {
            return Err(dim_err("slice_last", format!("{}..{} of {:?}", start, start + len, av.shape())));
        }
        let data = av.data().chunks(d).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SliceLast { a, start }, rg)
    }

    /// Picks index `t` of axis 1: `[B, T, D] -> [B, D]`.
    pub fn select1(&mut self, a: Var, index: usize) -> Result<Var, NumericsError> {
        let av = &self.node(a)?.value;
        if av.rank() != 3 || index >= av.shape()[1] {
            return Err(dim_err("select", format!("index {} of {:?}", index, av.shape())));
        }
        let (b, t, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let mut data = Vec::with_capacity(b * d);
        for i in 0..b {
            let start = (i * t + index) * d;
            data.extend_from_slice(&av.data()[start..start + d]);
        }
        let value = Tensor::new(vec![b, d], data)?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Select1 { a, index }, rg)
    }

    /// Stacks `[B, D]` tensors along a new axis 1: `-> [B, T, D]`.
    pub fn stack1(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(dim_err("stack", "no inputs".into()));
        }
        let s0 = self.node(parts[0])?.value.shape().to_vec();
        if s0.len() != 2 {
            return Err(dim_err("stack", format!("{:?}", s0)));
        }
        for &p in parts {
            let s = self.node(p)?.value.shape();
            if s != s0.as_slice() {
                return Err(dim_err("stack", format!("{:?} vs {:?}", s0, s)));
            }
        }
        let (b, d, t) = (s0[0], s0[1], parts.len());
        let mut data = vec![0.0; b * t * d];
        for (j, &p) in parts.iter().enumerate() {
            let pv = self.nodes[p.index()].value.data();
            for i in 0..b {
                data[(i * t + j) * d..(i * t + j + 1) * d].copy_from_slice(&pv[i * d..(i + 1) * d]);
            }
        }
        let value = Tensor::new(vec![b, t, d], data)?;
        let rg = self.any_grad(parts);
        self.push(value, Op::Stack1 { parts: parts.to_vec() }, rg)
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let loss_node = self.node(loss)?;
        if loss_node.value.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index()] = Some(Tensor::full(loss_node.value.shape(), 1.0));

        for idx in (0..=loss.index()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            } else if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.index()].requires_grad {
            return;
        }
        match &mut grads[var.index()] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn val(&self, var: Var) -> &Tensor {
        &self.nodes[var.index()].value
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.index()].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let with = |f: &dyn Fn(Scalar, Scalar) -> Scalar, src: &Tensor| -> Tensor {
            let data = g.data().iter().zip(src.data()).map(|(&gi, &s)| f(gi, s)).collect();
            Tensor::new(src.shape().to_vec(), data).expect("same shape")
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let k = av.last_dim();
                let n = bv.shape()[1];
                let m = av.len() / k.max(1);
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), Trans::No, bv.data(), Trans::Yes, &mut ga, 0.0);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), Trans::Yes, g.data(), Trans::No, &mut gb, 0.0);
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = y.shape()[2];
                if self.wants(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        // dA = dC B^T  (or dC B when B was transposed)
                        let tb = if *transpose_b { Trans::No } else { Trans::Yes };
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            Trans::No,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            tb,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // B is [N, K]: dB = dC^T A
                            gemm(n, m, k, gi, Trans::Yes, ai, Trans::No, out, 0.0);
                        } else {
                            // B is [K, N]: dB = A^T dC
                            gemm(k, m, n, ai, Trans::Yes, gi, Trans::No, out, 0.0);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.scaled(-1.0));
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, with(&|gi, s| gi * s, self.val(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, with(&|gi, s| gi * s, self.val(*a)));
                }
            }
            Op::AddBroadcast { a, b } => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let bv = self.val(*b);
                    let mut gb = vec![0.0; bv.len()];
                    for chunk in g.data().chunks(bv.len()) {
                        for (acc, v) in gb.iter_mut().zip(chunk) {
                            *acc += *v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
                }
            }
            Op::Scale { a, c } => self.accumulate(grads, *a, g.scaled(*c)),
            Op::Sigmoid { a } => self.accumulate(grads, *a, with(&|gi, s| gi * s * (1.0 - s), y)),
            Op::Tanh { a } => self.accumulate(grads, *a, with(&|gi, t| gi * (1.0 - t * t), y)),
            Op::Relu { a } => {
                self.accumulate(grads, *a, with(&|gi, x| if x > 0.0 { gi } else { 0.0 }, self.val(*a)))
            }
            Op::Ln { a } => self.accumulate(grads, *a, with(&|gi, x| gi / x, self.val(*a))),
            Op::Clamp { a, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                self.accumulate(
                    grads,
                    *a,
                    with(&|gi, x| if x >= lo && x <= hi { gi } else { 0.0 }, self.val(*a)),
                )
            }
            Op::Softmax { a } => {
                let d = y.last_dim();
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in g.data().chunks(d).zip(y.data().chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: Scalar = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), ga).unwrap());
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = y.last_dim();
                let gv = self.val(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for (gr, hr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                            gb[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::vector(gg));
                    self.accumulate(grads, *beta, Tensor::vector(gb));
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; y.len()];
                    let df = d as Scalar;
                    for (r, ((gr, hr), out)) in
                        g.data().chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let inv = inv_std[r];
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            out[j] = inv / df * (df * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx).unwrap());
                }
            }
            Op::Gather { table, indices } => {
                let tv = self.val(*table);
                let d = tv.shape()[1];
                let mut gt = Tensor::zeros(tv.shape());
                for (r, &i) in indices.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (acc, v) in gt.row_mut(i).iter_mut().zip(src) {
                        *acc += *v;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::Dropout { a, mask } => {
                let data = g.data().iter().zip(mask).map(|(gi, m)| gi * m).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Concat { parts } => {
                let total = y.last_dim();
                let rows = y.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let pv = self.val(p);
                    let w = pv.last_dim();
                    if self.wants(p) {
                        let mut gp = vec![0.0; rows * w];
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(pv.shape().to_vec(), gp).unwrap());
                    }
                    offset += w;
                }
            }
            Op::MaskedFill { a, mask } => {
                let data = g.data().iter().zip(mask).map(|(&gi, &m)| if m { 0.0 } else { gi }).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::L2Norm { a } => {
                let norm = y.item();
                let av = self.val(*a);
                let ga = if norm > ZERO_NORM_THRESHOLD {
                    av.scaled(g.item() / norm)
                } else {
                    Tensor::zeros(av.shape())
                };
                self.accumulate(grads, *a, ga);
            }
            Op::RowNorm { a } => {
                let av = self.val(*a);
                let d = av.last_dim();
                let mut ga = vec![0.0; av.len()];
                for (r, (src, out)) in av.data().chunks(d).zip(ga.chunks_mut(d)).enumerate() {
                    let norm = y.data()[r];
                    if norm > ZERO_NORM_THRESHOLD {
                        let c = g.data()[r] / norm;
                        for (o, s) in out.iter_mut().zip(src) {
                            *o = c * s;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
            }
            Op::Sum { a } => {
                let av = self.val(*a);
                self.accumulate(grads, *a, Tensor::full(av.shape(), g.item()));
            }
            Op::SumLast { a } => {
                let av = self.val(*a);
                let d = av.last_dim();
                let mut ga = vec![0.0; av.len()];
                for (out, &gi) in ga.chunks_mut(d).zip(g.data()) {
                    out.iter_mut().for_each(|o| *o = gi);
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
            }
            Op::Reshape { a } => {
                let shape = self.val(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape).unwrap());
            }
            Op::SliceLast { a, start } => {
                let av = self.val(*a);
                let d = av.last_dim();
                let w = y.last_dim();
                let mut ga = vec![0.0; av.len()];
                for (out, src) in ga.chunks_mut(d).zip(g.data().chunks(w)) {
                    out[*start..*start + w].copy_from_slice(src);
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
            }
            Op::Select1 { a, index } => {
                let av = self.val(*a);
                let (b, t, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let mut ga = vec![0.0; av.len()];
                for i in 0..b {
                    let start = (i * t + index) * d;
                    ga[start..start + d].copy_from_slice(&g.data()[i * d..(i + 1) * d]);
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
            }
            Op::Stack1 { parts } => {
                let (b, t, d) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                for (j, &p) in parts.iter().enumerate() {
                    if !self.wants(p) {
                        continue;
                    }
                    let mut gp = vec![0.0; b * d];
                    for i in 0..b {
                        gp[i * d..(i + 1) * d].copy_from_slice(&g.data()[(i * t + j) * d..(i * t + j + 1) * d]);
                    }
                    self.accumulate(grads, p, Tensor::new(vec![b, d], gp).unwrap());
                }
            }
        }
    }
}

pub fn sigmoid(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
