//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! immutable once pushed; [`Tape::backward`] walks them in reverse creation
//! order and returns a [`Gradients`] table. The tape is rebuilt for every
//! forward pass, so variable-length inputs need no special handling.
//!
//! Every value on the tape is a row-major matrix; scalars are `1×1`.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{gemm, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dims {
    rows: usize,
    cols: usize,
}

impl Dims {
    fn len(self) -> usize {
        self.rows * self.cols
    }

    fn vec(self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    BlockMatMulNt { a: usize, b: usize, blocks: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(usize),
    GatherRows(usize, Rc<[usize]>),
    Interleave(Vec<usize>),
    TileRows(usize, usize),
    CausalAttention { q: usize, k: usize, v: usize, blocks: usize, heads: usize, probs: Vec<f64> },
    MemoryScan { m0: usize, w: usize, beta: usize, v: usize, blocks: usize, states: Vec<f64> },
}

struct Node {
    dims: Dims,
    value: Rc<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.dims();
        write!(f, "Var#{}[{}x{}]", self.id, d.rows, d.cols)
    }
}

/// Gradients of a scalar with respect to every differentiable node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }
}

fn dims_of(t: &Tensor) -> Dims {
    match t.shape() {
        [] => Dims { rows: 1, cols: 1 },
        [c] => Dims { rows: 1, cols: *c },
        [r, rest @ ..] => Dims {
            rows: *r,
            cols: rest.iter().product(),
        },
    }
}

fn dim_err(op: &'static str, a: Dims, b: Dims) -> Error {
    Error::Dimension {
        op,
        lhs: a.vec(),
        rhs: b.vec(),
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

    fn push(&self, dims: Dims, value: Vec<f64>, parents: &[usize], op: Op) -> Var<'_> {
        debug_assert_eq!(dims.len(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        // Caches are only needed for the reverse sweep; attention maps are kept
        // for inspection.
        let op = if requires_grad || matches!(op, Op::Leaf | Op::CausalAttention { .. }) {
            op
        } else {
            Op::Leaf
        };
        nodes.push(Node {
            dims,
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn leaf_raw(&self, dims: Dims, value: Vec<f64>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            dims,
            value: Rc::new(value),
            requires_grad,
            op: Op::Leaf,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a tensor; gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.leaf_raw(dims_of(t), t.values().to_vec(), t.requires_grad)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.leaf_raw(dims_of(t), t.values().to_vec(), false)
    }

    pub fn constant_matrix(&self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var<'_>> {
        if rows * cols != values.len() {
            return Err(Error::Dimension {
                op: "constant",
                lhs: vec![rows, cols],
                rhs: vec![values.len()],
            });
        }
        Ok(self.leaf_raw(Dims { rows, cols }, values, false))
    }

    fn dims(&self, id: usize) -> Dims {
        self.nodes.borrow()[id].dims
    }

    fn value(&self, id: usize) -> Rc<Vec<f64>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a `1×1` loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let ld = nodes[loss.id].dims;
        if ld.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {}x{}",
                ld.rows, ld.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].dims.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl Fn(usize) -> f64) {
    if let Some(buf) = acc(grads, nodes, id) {
        buf.iter_mut().enumerate().for_each(|(i, b)| *b += f(i));
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k, n) = (nodes[a].dims.rows, nodes[a].dims.cols, nodes[b].dims.cols);
            if nodes[a].requires_grad {
                let bv = Rc::clone(&nodes[b].value);
                let ga = acc(grads, nodes, a).expect("requires grad");
                gemm(m, n, k, g, Layout::N, &bv, Layout::T, 1.0, ga);
            }
            if nodes[b].requires_grad {
                let av = Rc::clone(&nodes[a].value);
                let gb = acc(grads, nodes, b).expect("requires grad");
                gemm(k, m, n, &av, Layout::T, g, Layout::N, 1.0, gb);
            }
        }
        &Op::MatMulNt(a, b) => {
            let (m, k, n) = (nodes[a].dims.rows, nodes[a].dims.cols, nodes[b].dims.rows);
            if nodes[a].requires_grad {
                let bv = Rc::clone(&nodes[b].value);
                let ga = acc(grads, nodes, a).expect("requires grad");
                gemm(m, n, k, g, Layout::N, &bv, Layout::N, 1.0, ga);
            }
            if nodes[b].requires_grad {
                let av = Rc::clone(&nodes[a].value);
                let gb = acc(grads, nodes, b).expect("requires grad");
                gemm(n, m, k, g, Layout::T, &av, Layout::N, 1.0, gb);
            }
        }
        &Op::BlockMatMulNt { a, b, blocks } => {
            let m = nodes[a].dims.rows / blocks;
            let k = nodes[a].dims.cols;
            let n = nodes[b].dims.rows / blocks;
            let av = Rc::clone(&nodes[a].value);
            let bv = Rc::clone(&nodes[b].value);
            if nodes[a].requires_grad {
                let ga = acc(grads, nodes, a).expect("requires grad");
                for blk in 0..blocks {
                    gemm(
                        m,
                        n,
                        k,
                        &g[blk * m * n..(blk + 1) * m * n],
                        Layout::N,
                        &bv[blk * n * k..(blk + 1) * n * k],
                        Layout::N,
                        1.0,
                        &mut ga[blk * m * k..(blk + 1) * m * k],
                    );
                }
            }
            if nodes[b].requires_grad {
                let gb = acc(grads, nodes, b).expect("requires grad");
                for blk in 0..blocks {
                    gemm(
                        n,
                        m,
                        k,
                        &g[blk * m * n..(blk + 1) * m * n],
                        Layout::T,
                        &av[blk * m * k..(blk + 1) * m * k],
                        Layout::N,
                        1.0,
                        &mut gb[blk * n * k..(blk + 1) * n * k],
                    );
                }
            }
        }
        &Op::Add(a, b) => {
            add_into(grads, nodes, a, |i| g[i]);
            add_into(grads, nodes, b, |i| g[i]);
        }
        &Op::Sub(a, b) => {
            add_into(grads, nodes, a, |i| g[i]);
            add_into(grads, nodes, b, |i| -g[i]);
        }
        &Op::Mul(a, b) => {
            let av = Rc::clone(&nodes[a].value);
            let bv = Rc::clone(&nodes[b].value);
            add_into(grads, nodes, a, |i| g[i] * bv[i]);
            add_into(grads, nodes, b, |i| g[i] * av[i]);
        }
        &Op::AddRow(a, row) => {
            add_into(grads, nodes, a, |i| g[i]);
            let cols = node.dims.cols;
            if let Some(gr) = acc(grads, nodes, row) {
                for chunk in g.chunks_exact(cols) {
                    gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
            }
        }
        &Op::Scale(a, s) => add_into(grads, nodes, a, |i| g[i] * s),
        &Op::Sum(a) => add_into(grads, nodes, a, |_| g[0]),
        &Op::SoftmaxRows(a) => {
            let cols = node.dims.cols;
            if let Some(ga) = acc(grads, nodes, a) {
                for ((gr, yr), gar) in g
                    .chunks_exact(cols)
                    .zip(out.chunks_exact(cols))
                    .zip(ga.chunks_exact_mut(cols))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..cols {
                        gar[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        &Op::LogSoftmaxRows(a) => {
            let cols = node.dims.cols;
            if let Some(ga) = acc(grads, nodes, a) {
                for ((gr, yr), gar) in g
                    .chunks_exact(cols)
                    .zip(out.chunks_exact(cols))
                    .zip(ga.chunks_exact_mut(cols))
                {
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        gar[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let cols = node.dims.cols;
            let gv = Rc::clone(&nodes[*gamma].value);
            if let Some(gg) = acc(grads, nodes, *gamma) {
                for (gr, xr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                    for j in 0..cols {
                        gg[j] += gr[j] * xr[j];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *beta) {
                for gr in g.chunks_exact(cols) {
                    gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                let n = cols as f64;
                for (r, ((gr, xr), gxr)) in g
                    .chunks_exact(cols)
                    .zip(xhat.chunks_exact(cols))
                    .zip(gx.chunks_exact_mut(cols))
                    .enumerate()
                {
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for j in 0..cols {
                        let gh = gr[j] * gv[j];
                        mean_g += gh;
                        mean_gx += gh * xr[j];
                    }
                    mean_g /= n;
                    mean_gx /= n;
                    for j in 0..cols {
                        let gh = gr[j] * gv[j];
                        gxr[j] += inv_std[r] * (gh - mean_g - xr[j] * mean_gx);
                    }
                }
            }
        }
        &Op::Gelu(a) => {
            let av = Rc::clone(&nodes[a].value);
            add_into(grads, nodes, a, |i| {
                let x = av[i];
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                g[i] * (0.5 * (1.0 + t) + 0.5 * x * dt)
            });
        }
        Op::GatherRows(a, idx) => {
            let cols = node.dims.cols;
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut ga[src * cols..(src + 1) * cols];
                    dst.iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Interleave(parts) => {
            let cols = node.dims.cols;
            let p = parts.len();
            for (k, &part) in parts.iter().enumerate() {
                if let Some(gp) = acc(grads, nodes, part) {
                    for (i, row) in gp.chunks_exact_mut(cols).enumerate() {
                        let src = &g[(i * p + k) * cols..(i * p + k + 1) * cols];
                        row.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        &Op::TileRows(a, times) => {
            let n = nodes[a].dims.len();
            if let Some(ga) = acc(grads, nodes, a) {
                for t in 0..times {
                    ga.iter_mut()
                        .zip(&g[t * n..(t + 1) * n])
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::CausalAttention {
            q,
            k,
            v,
            blocks,
            heads,
            probs,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), *blocks, *heads, probs),
        Op::MemoryScan {
            m0,
            w,
            beta,
            v,
            blocks,
            states,
        } => memory_scan_backward(nodes, grads, g, (*m0, *w, *beta, *v), *blocks, states),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn dims(&self) -> Dims {
        self.tape.dims(self.id)
    }

    pub fn rows(&self) -> usize {
        self.dims().rows
    }

    pub fn cols(&self) -> usize {
        self.dims().cols
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims().vec()
    }

    pub fn values(&self) -> Rc<Vec<f64>> {
        self.tape.value(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copies the value out as a standalone tensor.
    pub fn to_tensor(&self) -> Tensor {
        let d = self.dims();
        Tensor::new(d.vec(), self.values().to_vec()).expect("node dims match value length")
    }

    pub fn item(&self) -> f64 {
        self.values()[0]
    }

    fn same_dims(&self, other: Var<'t>, op: &'static str) -> Result<Dims> {
        let (a, b) = (self.dims(), other.dims());
        if a != b {
            return Err(dim_err(op, a, b));
        }
        Ok(a)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.dims(), other.dims());
        if a.cols != b.rows {
            return Err(dim_err("matmul", a, b));
        }
        let c = super::kernels::matmul(a.rows, a.cols, b.cols, &self.values(), &other.values());
        let dims = Dims {
            rows: a.rows,
            cols: b.cols,
        };
        Ok(self
            .tape
            .push(dims, c, &[self.id, other.id], Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.dims(), other.dims());
        if a.cols != b.cols {
            return Err(dim_err("matmul_nt", a, b));
        }
        let mut c = vec![0.0; a.rows * b.rows];
        gemm(
            a.rows,
            a.cols,
            b.rows,
            &self.values(),
            Layout::N,
            &other.values(),
            Layout::T,
            0.0,
            &mut c,
        );
        let dims = Dims {
            rows: a.rows,
            cols: b.rows,
        };
        Ok(self
            .tape
            .push(dims, c, &[self.id, other.id], Op::MatMulNt(self.id, other.id)))
    }

    /// Block-diagonal `self_b · other_bᵀ` over `blocks` equal row blocks.
    pub fn block_matmul_nt(self, other: Var<'t>, blocks: usize) -> Result<Var<'t>> {
        let (a, b) = (self.dims(), other.dims());
        if blocks == 0 || a.cols != b.cols || a.rows % blocks != 0 || b.rows % blocks != 0 {
            return Err(dim_err("block_matmul_nt", a, b));
        }
        let (m, k, n) = (a.rows / blocks, a.cols, b.rows / blocks);
        let av = self.values();
        let bv = other.values();
        let mut c = vec![0.0; blocks * m * n];
        for blk in 0..blocks {
            gemm(
                m,
                k,
                n,
                &av[blk * m * k..(blk + 1) * m * k],
                Layout::N,
                &bv[blk * n * k..(blk + 1) * n * k],
                Layout::T,
                0.0,
                &mut c[blk * m * n..(blk + 1) * m * n],
            );
        }
        let dims = Dims {
            rows: blocks * m,
            cols: n,
        };
        Ok(self.tape.push(
            dims,
            c,
            &[self.id, other.id],
            Op::BlockMatMulNt {
                a: self.id,
                b: other.id,
                blocks,
            },
        ))
    }

    fn zip_with(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let d = self.same_dims(other, name)?;
        let (a, b) = (self.values(), other.values());
        let v = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.tape.push(d, v, &[self.id, other.id], op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// Adds a `1×c` row vector to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = (self.dims(), row.dims());
        if r.rows != 1 || r.cols != a.cols {
            return Err(dim_err("add_row", a, r));
        }
        let rv = row.values();
        let mut v = self.values().to_vec();
        for chunk in v.chunks_exact_mut(a.cols) {
            chunk.iter_mut().zip(rv.iter()).for_each(|(x, y)| *x += y);
        }
        Ok(self
            .tape
            .push(a, v, &[self.id, row.id], Op::AddRow(self.id, row.id)))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.values().iter().map(|x| x * s).collect();
        self.tape
            .push(self.dims(), v, &[self.id], Op::Scale(self.id, s))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.values().iter().sum();
        self.tape
            .push(Dims { rows: 1, cols: 1 }, vec![s], &[self.id], Op::Sum(self.id))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let d = self.dims();
        let x = self.values();
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows input contains NaN".into()));
        }
        let mut y = x.to_vec();
        if d.cols > 0 {
            y.chunks_exact_mut(d.cols).for_each(softmax_in_place);
        }
        Ok(self.tape.push(d, y, &[self.id], Op::SoftmaxRows(self.id)))
    }

    pub fn log_softmax_rows(self) -> Result<Var<'t>> {
        let d = self.dims();
        let x = self.values();
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("log_softmax_rows input contains NaN".into()));
        }
        let mut y = x.to_vec();
        for row in y.chunks_exact_mut(d.cols.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.tape.push(d, y, &[self.id], Op::LogSoftmaxRows(self.id)))
    }

    /// Row-wise layer normalisation with `1×c` gain and bias.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let d = self.dims();
        let row = Dims { rows: 1, cols: d.cols };
        if gamma.dims() != row {
            return Err(dim_err("layer_norm", d, gamma.dims()));
        }
        if beta.dims() != row {
            return Err(dim_err("layer_norm", d, beta.dims()));
        }
        let x = self.values();
        let (gv, bv) = (gamma.values(), beta.values());
        let n = d.cols as f64;
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; d.rows];
        let mut y = vec![0.0; d.len()];
        for r in 0..d.rows {
            let xr = &x[r * d.cols..(r + 1) * d.cols];
            let mean = xr.iter().sum::<f64>() / n;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d.cols {
                let h = (xr[j] - mean) * is;
                xhat[r * d.cols + j] = h;
                y[r * d.cols + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.tape.push(
            d,
            y,
            &[self.id, gamma.id, beta.id],
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let v = self
            .values()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        self.tape.push(self.dims(), v, &[self.id], Op::Gelu(self.id))
    }

    /// Output row `r` is input row `idx[r]`.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let d = self.dims();
        if let Some(&bad) = idx.iter().find(|&&i| i >= d.rows) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range for {} rows",
                d.rows
            )));
        }
        let x = self.values();
        let mut v = Vec::with_capacity(idx.len() * d.cols);
        for &i in idx {
            v.extend_from_slice(&x[i * d.cols..(i + 1) * d.cols]);
        }
        let dims = Dims {
            rows: idx.len(),
            cols: d.cols,
        };
        Ok(self
            .tape
            .push(dims, v, &[self.id], Op::GatherRows(self.id, idx.into())))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(&idx)
    }

    /// Stacks `times` copies of this matrix vertically.
    pub fn tile_rows(self, times: usize) -> Var<'t> {
        let d = self.dims();
        let x = self.values();
        let mut v = Vec::with_capacity(times * d.len());
        for _ in 0..times {
            v.extend_from_slice(&x);
        }
        let dims = Dims {
            rows: d.rows * times,
            cols: d.cols,
        };
        self.tape
            .push(dims, v, &[self.id], Op::TileRows(self.id, times))
    }

    /// Multi-head causal self-attention over `blocks` independent sequences
    /// stacked by rows. Returns the attention output; probabilities are
    /// available through [`Var::attention_probs`].
    pub fn causal_attention(
        self,
        k: Var<'t>,
        v: Var<'t>,
        blocks: usize,
        heads: usize,
    ) -> Result<Var<'t>> {
        let d = self.same_dims(k, "causal_attention")?;
        self.same_dims(v, "causal_attention")?;
        if blocks == 0 || heads == 0 || d.rows % blocks != 0 || d.cols % heads != 0 {
            return Err(Error::contract(format!(
                "causal_attention: {}x{} not divisible into {blocks} blocks / {heads} heads",
                d.rows, d.cols
            )));
        }
        let (out, probs) = attention_forward(&self.values(), &k.values(), &v.values(), d, blocks, heads);
        Ok(self.tape.push(
            d,
            out,
            &[self.id, k.id, v.id],
            Op::CausalAttention {
                q: self.id,
                k: k.id,
                v: v.id,
                blocks,
                heads,
                probs,
            },
        ))
    }

    /// Attention probabilities recorded by a `causal_attention` node, laid
    /// out `[block][head][query][key]`.
    pub fn attention_probs(&self) -> Option<Vec<f64>> {
        let nodes = self.tape.nodes.borrow();
        match &nodes[self.id].op {
            Op::CausalAttention { probs, .. } => Some(probs.clone()),
            _ => None,
        }
    }

    /// Sequential erase/add memory update with per-token read-out.
    ///
    /// `self` holds `blocks` stacked `N×d` initial memories, `w` and `beta`
    /// are `(blocks·L)×N` address and write-strength rows, `v` holds the
    /// `(blocks·L)×d` value rows. For each block and token `j`:
    ///
    /// ```text
    /// e = w_j ⊙ (1 − β_j)      a = w_j ⊙ β_j
    /// M ← diag(1 − e)·M + a ⊗ v_j
    /// out_j = w_j · M
    /// ```
    ///
    /// The result stacks the `(blocks·L)×d` read-outs on top of the
    /// `(blocks·N)×d` final memories.
    pub fn memory_scan(self, w: Var<'t>, beta: Var<'t>, v: Var<'t>, blocks: usize) -> Result<Var<'t>> {
        let md = self.dims();
        let wd = w.same_dims(beta, "memory_scan")?;
        let vd = v.dims();
        if blocks == 0
            || md.rows % blocks != 0
            || wd.rows % blocks != 0
            || wd.cols != md.rows / blocks
            || vd.rows != wd.rows
            || vd.cols != md.cols
        {
            return Err(Error::Dimension {
                op: "memory_scan",
                lhs: md.vec(),
                rhs: vec![wd.rows, wd.cols, vd.rows, vd.cols],
            });
        }
        let keep = self.requires_grad() || w.requires_grad() || beta.requires_grad() || v.requires_grad();
        let (out, states) = memory_scan_forward(
            &self.values(),
            &w.values(),
            &beta.values(),
            &v.values(),
            blocks,
            md.rows / blocks,
            wd.rows / blocks,
            md.cols,
            keep,
        );
        let dims = Dims {
            rows: wd.rows + md.rows,
            cols: md.cols,
        };
        Ok(self.tape.push(
            dims,
            out,
            &[self.id, w.id, beta.id, v.id],
            Op::MemoryScan {
                m0: self.id,
                w: w.id,
                beta: beta.id,
                v: v.id,
                blocks,
                states,
            },
        ))
    }
}

/// Interleaves equally shaped matrices row by row: output row `p·i + k` is
/// row `i` of `parts[k]`.
pub fn interleave<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = *parts
        .first()
        .ok_or_else(|| Error::contract("interleave of zero parts"))?;
    let d = first.dims();
    for p in parts {
        first.same_dims(*p, "interleave")?;
    }
    let vals: Vec<Rc<Vec<f64>>> = parts.iter().map(Var::values).collect();
    let mut v = Vec::with_capacity(d.len() * parts.len());
    for i in 0..d.rows {
        for pv in &vals {
            v.extend_from_slice(&pv[i * d.cols..(i + 1) * d.cols]);
        }
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let dims = Dims {
        rows: d.rows * parts.len(),
        cols: d.cols,
    };
    Ok(first.tape.push(dims, v, &ids, Op::Interleave(ids.clone())))
}

/// Erase and add strengths `(w(1−β), wβ)` of one slot.
///
/// Both subtractions are exact (Sterbenz), so `erase + add == w` holds
/// bit-for-bit; the naive products break that in a few percent of cases.
pub fn erase_add(w: f64, beta: f64) -> (f64, f64) {
    let erase = w - w * beta;
    (erase, w - erase)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: Dims,
    blocks: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let l = d.rows / blocks;
    let dh = d.cols / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d.len()];
    let mut probs = vec![0.0; blocks * heads * l * l];
    for b in 0..blocks {
        for h in 0..heads {
            let p_base = (b * heads + h) * l * l;
            for i in 0..l {
                let qi = &q[(b * l + i) * d.cols + h * dh..][..dh];
                let prow = &mut probs[p_base + i * l..p_base + (i + 1) * l];
                for j in 0..=i {
                    let kj = &k[(b * l + j) * d.cols + h * dh..][..dh];
                    prow[j] = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                }
                softmax_in_place(&mut prow[..=i]);
                let orow = &mut out[(b * l + i) * d.cols + h * dh..][..dh];
                for j in 0..=i {
                    let vj = &v[(b * l + j) * d.cols + h * dh..][..dh];
                    let p = prow[j];
                    orow.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (usize, usize, usize),
    blocks: usize,
    heads: usize,
    probs: &[f64],
) {
    let d = nodes[q].dims;
    let l = d.rows / blocks;
    let dh = d.cols / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qv, kv, vv) = (
        Rc::clone(&nodes[q].value),
        Rc::clone(&nodes[k].value),
        Rc::clone(&nodes[v].value),
    );
    let mut gq = vec![0.0; d.len()];
    let mut gk = vec![0.0; d.len()];
    let mut gv = vec![0.0; d.len()];
    let mut gs = vec![0.0; l];
    for b in 0..blocks {
        for h in 0..heads {
            let p_base = (b * heads + h) * l * l;
            for i in 0..l {
                let prow = &probs[p_base + i * l..p_base + (i + 1) * l];
                let goi = &g[(b * l + i) * d.cols + h * dh..][..dh];
                // dP_ij = gO_i · V_j ; dV_j += P_ij gO_i
                let mut dot = 0.0;
                for j in 0..=i {
                    let vj = &vv[(b * l + j) * d.cols + h * dh..][..dh];
                    let gp: f64 = goi.iter().zip(vj).map(|(x, y)| x * y).sum();
                    gs[j] = gp;
                    dot += gp * prow[j];
                    let gvj = &mut gv[(b * l + j) * d.cols + h * dh..][..dh];
                    gvj.iter_mut().zip(goi).for_each(|(x, y)| *x += prow[j] * y);
                }
                let qi_off = (b * l + i) * d.cols + h * dh;
                for j in 0..=i {
                    let ds = prow[j] * (gs[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj_off = (b * l + j) * d.cols + h * dh;
                    for c in 0..dh {
                        gq[qi_off + c] += ds * kv[kj_off + c];
                        gk[kj_off + c] += ds * qv[qi_off + c];
                    }
                }
            }
        }
    }
    for (id, buf) in [(q, gq), (k, gk), (v, gv)] {
        add_into(grads, nodes, id, |i| buf[i]);
    }
}

#[allow(clippy::too_many_arguments)]
fn memory_scan_forward(
    m0: &[f64],
    w: &[f64],
    beta: &[f64],
    v: &[f64],
    blocks: usize,
    n: usize,
    l: usize,
    d: usize,
    keep_states: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; blocks * (l + n) * d];
    let mut states = if keep_states {
        Vec::with_capacity(blocks * (l + 1) * n * d)
    } else {
        Vec::new()
    };
    let (reads, finals) = out.split_at_mut(blocks * l * d);
    for b in 0..blocks {
        let mut m = m0[b * n * d..(b + 1) * n * d].to_vec();
        if keep_states {
            states.extend_from_slice(&m);
        }
        for j in 0..l {
            let row = b * l + j;
            let wj = &w[row * n..(row + 1) * n];
            let bj = &beta[row * n..(row + 1) * n];
            let vj = &v[row * d..(row + 1) * d];
            for i in 0..n {
                let (erase, add) = erase_add(wj[i], bj[i]);
                let keep = 1.0 - erase;
                let mi = &mut m[i * d..(i + 1) * d];
                mi.iter_mut().zip(vj).for_each(|(x, y)| *x = keep * *x + add * y);
            }
            let oj = &mut reads[row * d..(row + 1) * d];
            for i in 0..n {
                let wi = wj[i];
                oj.iter_mut()
                    .zip(&m[i * d..(i + 1) * d])
                    .for_each(|(o, x)| *o += wi * x);
            }
            if keep_states {
                states.extend_from_slice(&m);
            }
        }
        finals[b * n * d..(b + 1) * n * d].copy_from_slice(&m);
    }
    (out, states)
}

fn memory_scan_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (m0, w, beta, v): (usize, usize, usize, usize),
    blocks: usize,
    states: &[f64],
) {
    let n = nodes[m0].dims.rows / blocks;
    let d = nodes[m0].dims.cols;
    let l = nodes[w].dims.rows / blocks;
    let (wv, bv, vv) = (
        Rc::clone(&nodes[w].value),
        Rc::clone(&nodes[beta].value),
        Rc::clone(&nodes[v].value),
    );
    let mut gm0 = vec![0.0; blocks * n * d];
    let mut gw = vec![0.0; blocks * l * n];
    let mut gb = vec![0.0; blocks * l * n];
    let mut gvv = vec![0.0; blocks * l * d];
    let (g_reads, g_finals) = g.split_at(blocks * l * d);
    let state = |b: usize, j: usize| &states[(b * (l + 1) + j) * n * d..][..n * d];
    for b in 0..blocks {
        let mut gm = g_finals[b * n * d..(b + 1) * n * d].to_vec();
        for j in (0..l).rev() {
            let row = b * l + j;
            let wj = &wv[row * n..(row + 1) * n];
            let bj = &bv[row * n..(row + 1) * n];
            let vj = &vv[row * d..(row + 1) * d];
            let goj = &g_reads[row * d..(row + 1) * d];
            let m_after = state(b, j + 1);
            let m_before = state(b, j);
            let gwj = &mut gw[row * n..(row + 1) * n];
            let gbj = &mut gb[row * n..(row + 1) * n];
            let gvj = &mut gvv[row * d..(row + 1) * d];
            for i in 0..n {
                let ma = &m_after[i * d..(i + 1) * d];
                let mb = &m_before[i * d..(i + 1) * d];
                let gmi = &mut gm[i * d..(i + 1) * d];
                // read-out: out_j = Σ_i w_ji M_j[i]
                let mut g_read_w = 0.0;
                for c in 0..d {
                    g_read_w += goj[c] * ma[c];
                    gmi[c] += wj[i] * goj[c];
                }
                // update: M_j[i] = (1 − e_i) M_{j−1}[i] + a_i v_j
                let mut g_erase = 0.0;
                let mut g_add = 0.0;
                for c in 0..d {
                    g_erase -= gmi[c] * mb[c];
                    g_add += gmi[c] * vj[c];
                }
                let (erase, add) = erase_add(wj[i], bj[i]);
                let keep = 1.0 - erase;
                for c in 0..d {
                    gvj[c] += add * gmi[c];
                    gmi[c] *= keep;
                }
                gwj[i] += g_read_w + g_erase * (1.0 - bj[i]) + g_add * bj[i];
                gbj[i] += (g_add - g_erase) * wj[i];
            }
        }
        gm0[b * n * d..(b + 1) * n * d].copy_from_slice(&gm);
    }
    for (id, buf) in [(m0, gm0), (w, gw), (beta, gb), (v, gvv)] {
        add_into(grads, nodes, id, |i| buf[i]);
    }
}
