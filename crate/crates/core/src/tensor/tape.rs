// SPDX-License-Identifier: MIT OR Apache-2.0

//! Recording tape and the differentiable operation set.

use std::cell::RefCell;
use std::sync::Arc;

use super::kernels::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Index of a node on a [`Tape`].
pub type NodeId = usize;

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_K: f32 = 0.044_715;
const MASKED_SCORE: f32 = -1.0e9;

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f32 },
    DivScalar { a: NodeId, divisor: f32 },
    Relu { a: NodeId },
    Gelu { a: NodeId },
    Softmax { a: NodeId },
    RmsNorm { x: NodeId, gain: NodeId, inv_rms: Vec<f32> },
    Embed { table: NodeId, ids: Vec<usize> },
    Concat { parts: Vec<NodeId> },
    Slice { a: NodeId, start: usize },
    MeanMasked { a: NodeId, weights: Vec<f32> },
    SumAll { a: NodeId },
    CausalMask { a: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, weights: Vec<f32>, probs: Vec<f32> },
    Overwrite { a: NodeId, cols: Vec<usize> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations. Node ids are assigned in creation
/// order, so every op's inputs precede it and a reverse sweep over ids is a
/// valid topological order for backpropagation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<Tensor> {
        let g = self.grads.get(id)?.as_ref()?;
        Some(Tensor::new(&self.shapes[id], g.clone()).expect("gradient shape"))
    }

    /// Moves the gradient for `id` out, leaving `None` behind.
    pub fn take_id(&mut self, id: NodeId) -> Option<Tensor> {
        let g = self.grads.get_mut(id)?.take()?;
        Some(Tensor::new(&self.shapes[id], g).expect("gradient shape"))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), false)
    }

    /// Leaf sharing storage with the caller (no copy).
    pub fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let id = self.push_node(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn push_node(&self, node: Node) -> NodeId {
        debug_assert!(node.value.is_finite(), "non-finite forward value");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[NodeId]) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        let id = self.push_node(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn value(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from `root`, seeding it with ones. Every node is visited
    /// at most once, in descending id order.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0; nodes[root.id].value.len()]);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, &mut grads, node, &g);
            grads[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Gradients { grads, shapes }
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f32>>], nodes: &[Node], id: NodeId) -> Option<&'g mut Vec<f32>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f32>>], node: &Node, g: &[f32]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (batch, m, k, n) = matmul_dims(av.shape(), bv.shape());
            for bi in 0..batch {
                let (ao, bo, go) = (bi * m * k, bi * k * n, bi * m * n);
                let gs = &g[go..go + m * n];
                if let Some(da) = slot(grads, nodes, *a) {
                    // da += g · bᵀ
                    let bs = &bv.data()[bo..bo + k * n];
                    gemm(m, n, k, gs, n, 1, bs, 1, n, &mut da[ao..ao + m * k], 1.0);
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    // db += aᵀ · g
                    let as_ = &av.data()[ao..ao + m * k];
                    gemm(k, m, n, as_, 1, k, gs, n, 1, &mut db[bo..bo + k * n], 1.0);
                }
            }
        }
        Op::Transpose { a } => {
            if let Some(da) = slot(grads, nodes, *a) {
                let shape = node.value.shape();
                let r = shape.len();
                let (rows, cols) = (shape[r - 2], shape[r - 1]);
                let batch = g.len() / (rows * cols);
                for bi in 0..batch {
                    let off = bi * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            da[off + j * rows + i] += g[off + i * cols + j];
                        }
                    }
                }
            }
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
            if let Some(da) = slot(grads, nodes, *a) {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                let inner = db.len();
                for (i, gv) in g.iter().enumerate() {
                    db[i % inner] += sign * gv;
                }
            }
        }
        Op::Mul { a, b } => {
            let av = Arc::clone(&nodes[*a].value);
            let bv = Arc::clone(&nodes[*b].value);
            let inner = bv.len();
            if let Some(da) = slot(grads, nodes, *a) {
                for (i, d) in da.iter_mut().enumerate() {
                    *d += g[i] * bv.data()[i % inner];
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for (i, gv) in g.iter().enumerate() {
                    db[i % inner] += gv * av.data()[i];
                }
            }
        }
        Op::Scale { a, factor } => {
            if let Some(da) = slot(grads, nodes, *a) {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += factor * gv;
                }
            }
        }
        Op::DivScalar { a, divisor } => {
            if let Some(da) = slot(grads, nodes, *a) {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv / divisor;
                }
            }
        }
        Op::Relu { a } => {
            let x = Arc::clone(&nodes[*a].value);
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, gv), xv) in da.iter_mut().zip(g).zip(x.data()) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        Op::Gelu { a } => {
            let x = Arc::clone(&nodes[*a].value);
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, gv), &xv) in da.iter_mut().zip(g).zip(x.data()) {
                    *d += gv * gelu_grad(xv);
                }
            }
        }
        Op::Softmax { a } => {
            let y = &node.value;
            let cols = y.last_dim();
            if let Some(da) = slot(grads, nodes, *a) {
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(da.chunks_mut(cols))
                {
                    let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += y * (g - dot);
                    }
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let xv = Arc::clone(&nodes[*x].value);
            let gv = Arc::clone(&nodes[*gain].value);
            let cols = xv.last_dim();
            let inv_d = 1.0 / cols as f32;
            if let Some(dx) = slot(grads, nodes, *x) {
                for (r, ((xr, gr), dr)) in xv
                    .data()
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(dx.chunks_mut(cols))
                    .enumerate()
                {
                    let ir = inv_rms[r];
                    let s: f32 = (0..cols).map(|j| gr[j] * gv.data()[j] * xr[j]).sum();
                    let coef = ir * ir * ir * s * inv_d;
                    for j in 0..cols {
                        dr[j] += gr[j] * gv.data()[j] * ir - coef * xr[j];
                    }
                }
            }
            if let Some(dg) = slot(grads, nodes, *gain) {
                for (r, (xr, gr)) in xv.data().chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let ir = inv_rms[r];
                    for j in 0..cols {
                        dg[j] += gr[j] * xr[j] * ir;
                    }
                }
            }
        }
        Op::Embed { table, ids } => {
            let cols = node.value.last_dim();
            if let Some(dt) = slot(grads, nodes, *table) {
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * cols..(id + 1) * cols];
                    for (d, gv) in dst.iter_mut().zip(&g[row * cols..(row + 1) * cols]) {
                        *d += gv;
                    }
                }
            }
        }
        Op::Concat { parts } => {
            let cols = node.value.last_dim();
            let rows = g.len() / cols;
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.last_dim();
                if let Some(dp) = slot(grads, nodes, p) {
                    for r in 0..rows {
                        for j in 0..w {
                            dp[r * w + j] += g[r * cols + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::Slice { a, start } => {
            let w = node.value.last_dim();
            let cols = nodes[*a].value.last_dim();
            let rows = g.len() / w.max(1);
            if let Some(da) = slot(grads, nodes, *a) {
                for r in 0..rows {
                    for j in 0..w {
                        da[r * cols + start + j] += g[r * w + j];
                    }
                }
            }
        }
        Op::MeanMasked { a, weights } => {
            let inner = node.value.len();
            if let Some(da) = slot(grads, nodes, *a) {
                for (n, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..inner {
                        da[n * inner + j] += w * g[j];
                    }
                }
            }
        }
        Op::SumAll { a } => {
            if let Some(da) = slot(grads, nodes, *a) {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::CausalMask { a } => {
            let shape = node.value.shape();
            let n = shape[shape.len() - 1];
            if let Some(da) = slot(grads, nodes, *a) {
                for (idx, (d, gv)) in da.iter_mut().zip(g).enumerate() {
                    let i = (idx / n) % n;
                    let j = idx % n;
                    if j <= i {
                        *d += gv;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            let vocab = nodes[*logits].value.last_dim();
            if let Some(dl) = slot(grads, nodes, *logits) {
                for (n, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let scale = g[0] * w;
                    let row = &mut dl[n * vocab..(n + 1) * vocab];
                    for (d, p) in row.iter_mut().zip(&probs[n * vocab..(n + 1) * vocab]) {
                        *d += scale * p;
                    }
                    row[t] -= scale;
                }
            }
        }
        Op::Overwrite { a, cols } => {
            let width = node.value.last_dim();
            if let Some(da) = slot(grads, nodes, *a) {
                for (dr, gr) in da.chunks_mut(width).zip(g.chunks(width)) {
                    for (j, (d, gv)) in dr.iter_mut().zip(gr).enumerate() {
                        if !cols.contains(&j) {
                            *d += gv;
                        }
                    }
                }
            }
        }
    }
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// (batch, m, k, n) for a validated matmul pair.
fn matmul_dims(a: &[usize], b: &[usize]) -> (usize, usize, usize, usize) {
    if a.len() == 3 {
        (a[0], a[1], a[2], b[2])
    } else {
        (1, a[0], a[1], b[1])
    }
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

#[allow(clippy::should_implement_trait)] // fallible, so not the std ops
impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Current value (shared, no copy).
    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    /// Matrix product: `[m,k]·[k,n]` or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        let (sa, sb) = (a.shape(), b.shape());
        let ok = match (sa.len(), sb.len()) {
            (2, 2) => sa[1] == sb[0],
            (3, 3) => sa[0] == sb[0] && sa[2] == sb[1],
            _ => false,
        };
        if !ok {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (batch, m, k, n) = matmul_dims(sa, sb);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[bi * m * k..],
                k,
                1,
                &b.data()[bi * k * n..],
                n,
                1,
                &mut out[bi * m * n..(bi + 1) * m * n],
                0.0,
            );
        }
        let shape = if batch == 1 && sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let t = Tensor::new(&shape, out)?;
        Ok(self.tape.push(t, Op::MatMul { a: self.id, b: rhs.id }, &[self.id, rhs.id]))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        let s = a.shape();
        if s.len() < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![2],
            });
        }
        let r = s.len();
        let (rows, cols) = (s[r - 2], s[r - 1]);
        let batch = a.len() / (rows * cols).max(1);
        let mut out = vec![0.0; a.len()];
        for bi in 0..batch {
            let off = bi * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[off + j * rows + i] = a.data()[off + i * cols + j];
                }
            }
        }
        let mut shape = s.to_vec();
        shape.swap(r - 2, r - 1);
        let t = Tensor::new(&shape, out)?;
        Ok(self.tape.push(t, Op::Transpose { a: self.id }, &[self.id]))
    }

    fn broadcast_binary(self, rhs: Var<'t>, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        if !is_suffix(a.shape(), b.shape()) {
            return Err(Error::Shape {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let inner = b.len();
        let out = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % inner]))
            .collect();
        Tensor::new(a.shape(), out)
    }

    /// Elementwise sum; `rhs` may broadcast over leading axes of `self`.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let t = self.broadcast_binary(rhs, "add", |x, y| x + y)?;
        Ok(self.tape.push(t, Op::Add { a: self.id, b: rhs.id }, &[self.id, rhs.id]))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let t = self.broadcast_binary(rhs, "sub", |x, y| x - y)?;
        Ok(self.tape.push(t, Op::Sub { a: self.id, b: rhs.id }, &[self.id, rhs.id]))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let t = self.broadcast_binary(rhs, "mul", |x, y| x * y)?;
        Ok(self.tape.push(t, Op::Mul { a: self.id, b: rhs.id }, &[self.id, rhs.id]))
    }

    pub fn scale(self, factor: f32) -> Var<'t> {
        let a = self.value();
        let out = a.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(a.shape(), out).expect("same shape");
        self.tape.push(t, Op::Scale { a: self.id, factor }, &[self.id])
    }

    /// Elementwise division by a constant (exact IEEE division, not a
    /// multiply by the reciprocal).
    pub fn div_scalar(self, divisor: f32) -> Var<'t> {
        let a = self.value();
        let out = a.data().iter().map(|x| x / divisor).collect();
        let t = Tensor::new(a.shape(), out).expect("same shape");
        self.tape.push(t, Op::DivScalar { a: self.id, divisor }, &[self.id])
    }

    pub fn relu(self) -> Var<'t> {
        let a = self.value();
        let out = a.data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(a.shape(), out).expect("same shape");
        self.tape.push(t, Op::Relu { a: self.id }, &[self.id])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(self) -> Var<'t> {
        let a = self.value();
        let out = a.data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(a.shape(), out).expect("same shape");
        self.tape.push(t, Op::Gelu { a: self.id }, &[self.id])
    }

    pub fn softmax_lastdim(self) -> Var<'t> {
        let a = self.value();
        let cols = a.last_dim();
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(a.shape(), out).expect("same shape");
        self.tape.push(t, Op::Softmax { a: self.id }, &[self.id])
    }

    /// `x / sqrt(mean(x²) + eps) * gain` over the last axis.
    pub fn rmsnorm(self, gain: Var<'t>, eps: f32) -> Result<Var<'t>> {
        self.same_tape(&gain);
        let x = self.value();
        let gv = gain.value();
        let cols = x.last_dim();
        if gv.shape() != [cols] {
            return Err(Error::Shape {
                op: "rmsnorm",
                lhs: x.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(x.len());
        let mut inv_rms = Vec::with_capacity(x.len() / cols);
        for row in x.data().chunks(cols) {
            let ms = row.iter().map(|v| v * v).sum::<f32>() / cols as f32;
            let ir = 1.0 / (ms + eps).sqrt();
            inv_rms.push(ir);
            out.extend(row.iter().zip(gv.data()).map(|(v, g)| v * ir * g));
        }
        let t = Tensor::new(x.shape(), out)?;
        Ok(self.tape.push(
            t,
            Op::RmsNorm {
                x: self.id,
                gain: gain.id,
                inv_rms,
            },
            &[self.id, gain.id],
        ))
    }

    /// Gathers rows of a `[V, D]` table.
    pub fn embed_lookup(self, ids: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        if table.rank() != 2 {
            return Err(Error::Shape {
                op: "embed_lookup",
                lhs: table.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (vocab, cols) = (table.shape()[0], table.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenRange { id, vocab });
            }
            out.extend_from_slice(table.row(id));
        }
        let t = Tensor::new(&[ids.len(), cols], out)?;
        Ok(self.tape.push(
            t,
            Op::Embed {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        ))
    }

    pub fn concat_lastdim(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::Shape {
            op: "concat_lastdim",
            lhs: vec![],
            rhs: vec![],
        })?;
        let tape = first.tape;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].rank() - 1];
        for v in &values {
            if &v.shape()[..v.rank() - 1] != lead {
                return Err(Error::Shape {
                    op: "concat_lastdim",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let total: usize = values.iter().map(|v| v.last_dim()).sum();
        let rows = values[0].len() / values[0].last_dim().max(1);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                let w = v.last_dim();
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let t = Tensor::new(&shape, out)?;
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(t, Op::Concat { parts: ids.clone() }, &ids))
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice_lastdim(self, start: usize, end: usize) -> Result<Var<'t>> {
        let t = self.value().slice_last(start, end)?;
        Ok(self.tape.push(t, Op::Slice { a: self.id, start }, &[self.id]))
    }

    /// Mean over the leading axis restricted to rows with `mask != 0`.
    pub fn mean_masked(self, mask: &[f32]) -> Result<Var<'t>> {
        let a = self.value();
        let rows = a.shape().first().copied().unwrap_or(0);
        if mask.len() != rows {
            return Err(Error::Shape {
                op: "mean_masked",
                lhs: a.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let count: f32 = mask.iter().filter(|&&m| m != 0.0).count() as f32;
        if count == 0.0 {
            return Err(Error::DegenerateMask("mean_masked"));
        }
        let weights: Vec<f32> = mask.iter().map(|&m| if m != 0.0 { 1.0 / count } else { 0.0 }).collect();
        let inner = a.len() / rows;
        let mut out = vec![0.0; inner];
        for (n, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(&a.data()[n * inner..(n + 1) * inner]) {
                *o += w * v;
            }
        }
        let t = Tensor::new(&a.shape()[1..], out)?;
        Ok(self.tape.push(t, Op::MeanMasked { a: self.id, weights }, &[self.id]))
    }

    pub fn sum_all(self) -> Var<'t> {
        let a = self.value();
        let s: f32 = a.data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll { a: self.id }, &[self.id])
    }

    /// Fills entries above the diagonal of the last two (square) axes with a
    /// large negative score.
    pub fn causal_mask(self) -> Result<Var<'t>> {
        let a = self.value();
        let s = a.shape();
        let r = s.len();
        if r < 2 || s[r - 1] != s[r - 2] {
            return Err(Error::Shape {
                op: "causal_mask",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let n = s[r - 1];
        let mut out = a.data().to_vec();
        for (idx, v) in out.iter_mut().enumerate() {
            if idx % n > (idx / n) % n {
                *v = MASKED_SCORE;
            }
        }
        let t = Tensor::new(s, out)?;
        Ok(self.tape.push(t, Op::CausalMask { a: self.id }, &[self.id]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[N, V]` logits, over rows with `mask != 0`.
    pub fn cross_entropy(self, targets: &[usize], mask: &[f32]) -> Result<Var<'t>> {
        let logits = self.value();
        if logits.rank() != 2 || targets.len() != logits.shape()[0] || mask.len() != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let vocab = logits.shape()[1];
        let count = mask.iter().filter(|&&m| m != 0.0).count();
        if count == 0 {
            return Err(Error::DegenerateMask("cross_entropy"));
        }
        let weights: Vec<f32> = mask
            .iter()
            .map(|&m| if m != 0.0 { 1.0 / count as f32 } else { 0.0 })
            .collect();
        let mut probs = vec![0.0; logits.len()];
        let mut loss = 0.0f64;
        for (n, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            if t >= vocab {
                return Err(Error::TokenRange { id: t, vocab });
            }
            let row = logits.row(n);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            let pr = &mut probs[n * vocab..(n + 1) * vocab];
            for (p, &l) in pr.iter_mut().zip(row) {
                *p = (l - max).exp();
                sum += *p;
            }
            for p in pr.iter_mut() {
                *p /= sum;
            }
            if w != 0.0 {
                let log_p = (row[t] - max) - sum.ln();
                loss -= f64::from(w) * f64::from(log_p);
            }
        }
        let t = Tensor::scalar(loss as f32);
        Ok(self.tape.push(
            t,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            &[self.id],
        ))
    }

    /// Replaces whole columns of the last axis with constants. No gradient
    /// flows back into the overwritten entries.
    pub fn overwrite_columns(self, cols: &[(usize, f32)]) -> Result<Var<'t>> {
        let a = self.value();
        let width = a.last_dim();
        if let Some(&(bad, _)) = cols.iter().find(|(c, _)| *c >= width) {
            return Err(Error::Range {
                start: bad,
                end: bad + 1,
                extent: width,
            });
        }
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(width) {
            for &(c, v) in cols {
                row[c] = v;
            }
        }
        let t = Tensor::new(a.shape(), out)?;
        Ok(self.tape.push(
            t,
            Op::Overwrite {
                a: self.id,
                cols: cols.iter().map(|(c, _)| *c).collect(),
            },
            &[self.id],
        ))
    }
}
