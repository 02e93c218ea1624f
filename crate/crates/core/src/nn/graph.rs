//! Reverse-mode differentiation over a single forward pass.
//!
//! A [`Graph`] records every operation of one forward evaluation. Nodes that
//! do not depend on a trainable parameter are never differentiated, so frozen
//! sub-networks cost only their forward pass.

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

/// Marks an unused gather slot; the output element is zero.
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Gather { x: Var, index: std::sync::Arc<Vec<u32>> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(0, 0))
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Parameter leaf; `trainable` decides whether gradients flow into it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        gemm(&ta.data, ta.rows, ta.cols, false, &tb.data, tb.rows, tb.cols, false, &mut out.data, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(ta.rows, tb.rows);
        gemm(&ta.data, ta.rows, ta.cols, false, &tb.data, tb.rows, tb.cols, true, &mut out.data, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulBT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.same_shape(tb), "add shapes {}x{} vs {}x{}", ta.rows, ta.cols, tb.rows, tb.cols);
        let mut out = ta.clone();
        out.add_assign(tb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert!(tr.rows == 1 && tr.cols == ta.cols, "add_row shapes");
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (o, b) in out.data[r * out.cols..(r + 1) * out.cols].iter_mut().zip(&tr.data) {
                *o += *b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.same_shape(tb), "mul shapes");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = ta.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalisation with `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f32 = 1e-5;
        let tx = self.value(x);
        let (rows, cols) = (tx.rows, tx.cols);
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let xh = (row[c] - mean) * rs;
                xhat[r * cols + c] = xh;
                out.data[r * cols + c] = xh * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// `out.data[i] = x.data[index[i]]` (or zero for [`GATHER_ZERO`]), shaped `rows x cols`.
    pub fn gather(&mut self, x: Var, index: std::sync::Arc<Vec<u32>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let tx = self.value(x);
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { tx.data[i as usize] })
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(rows, cols, data), Op::Gather { x, index }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        assert!(start + len <= tx.cols);
        let mut out = Tensor::zeros(tx.rows, len);
        for r in 0..tx.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&tx.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        assert!(start + len <= tx.rows);
        let out = Tensor::from_vec(len, tx.cols, tx.data[start * tx.cols..(start + len) * tx.cols].to_vec());
        let rg = self.rg(x);
        self.push(out, Op::SliceRows { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.rows, rows, "concat_cols rows");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols, cols, "concat_rows cols");
            data.extend_from_slice(&t.data);
        }
        let rows = data.len() / cols.max(1);
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Back-propagates the given output gradients and returns the gradient of
    /// every trainable parameter leaf reached, in first-use order.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Vec<(ParamId, Tensor)> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert!(self.value(*v).same_shape(g), "seed shape");
            accumulate(&mut grads[v.0], g.clone());
        }
        let mut out = Vec::new();
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.push((*id, g)),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let mut ga = Tensor::zeros(ta.rows, ta.cols);
                        gemm(&g.data, g.rows, g.cols, false, &tb.data, tb.rows, tb.cols, true, &mut ga.data, 0.0);
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.rg(*b) {
                        let mut gb = Tensor::zeros(tb.rows, tb.cols);
                        gemm(&ta.data, ta.rows, ta.cols, true, &g.data, g.rows, g.cols, false, &mut gb.data, 0.0);
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::MatMulBT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let mut ga = Tensor::zeros(ta.rows, ta.cols);
                        gemm(&g.data, g.rows, g.cols, false, &tb.data, tb.rows, tb.cols, false, &mut ga.data, 0.0);
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.rg(*b) {
                        let mut gb = Tensor::zeros(tb.rows, tb.cols);
                        gemm(&g.data, g.rows, g.cols, true, &ta.data, ta.rows, ta.cols, false, &mut gb.data, 0.0);
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let mut gr = Tensor::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (acc, v) in gr.data.iter_mut().zip(g.row(r)) {
                                *acc += *v;
                            }
                        }
                        accumulate(&mut grads[row.0], gr);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let d = g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads[a.0], Tensor::from_vec(g.rows, g.cols, d));
                    }
                    if self.rg(*b) {
                        let d = g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads[b.0], Tensor::from_vec(g.rows, g.cols, d));
                    }
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.scale_assign(*s);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let d = g.data.iter().zip(&x.data).map(|(g, &x)| g * gelu_grad(x)).collect();
                    accumulate(&mut grads[a.0], Tensor::from_vec(g.rows, g.cols, d));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::from_vec(g.rows, g.cols, d));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = g.data.iter().zip(&y.data).map(|(g, &y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads[a.0], Tensor::from_vec(g.rows, g.cols, d));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..g.cols {
                            d.data[r * g.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (rows, cols) = (g.rows, g.cols);
                    let gv = &self.value(*gamma).data;
                    if self.rg(*gamma) || self.rg(*beta) {
                        let mut dg = Tensor::zeros(1, cols);
                        let mut db = Tensor::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                let gy = g.data[r * cols + c];
                                dg.data[c] += gy * xhat[r * cols + c];
                                db.data[c] += gy;
                            }
                        }
                        if self.rg(*gamma) {
                            accumulate(&mut grads[gamma.0], dg);
                        }
                        if self.rg(*beta) {
                            accumulate(&mut grads[beta.0], db);
                        }
                    }
                    if self.rg(*x) {
                        let mut dx = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..cols {
                                let dxh = g.data[r * cols + c] * gv[c];
                                mean_d += dxh;
                                mean_dx += dxh * xhat[r * cols + c];
                            }
                            mean_d /= cols as f32;
                            mean_dx /= cols as f32;
                            for c in 0..cols {
                                let dxh = g.data[r * cols + c] * gv[c];
                                dx.data[r * cols + c] =
                                    rstd[r] * (dxh - mean_d - xhat[r * cols + c] * mean_dx);
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Gather { x, index } => {
                    let tx = self.value(*x);
                    let mut dx = Tensor::zeros(tx.rows, tx.cols);
                    for (gv, &i) in g.data.iter().zip(index.iter()) {
                        if i != GATHER_ZERO {
                            dx.data[i as usize] += *gv;
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::SliceCols { x, start } => {
                    let tx = self.value(*x);
                    let mut dx = Tensor::zeros(tx.rows, tx.cols);
                    for r in 0..g.rows {
                        dx.data[r * tx.cols + start..r * tx.cols + start + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::SliceRows { x, start } => {
                    let tx = self.value(*x);
                    let mut dx = Tensor::zeros(tx.rows, tx.cols);
                    dx.data[start * tx.cols..(start + g.rows) * tx.cols].copy_from_slice(&g.data);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let t = self.value(*p);
                        if self.rg(*p) {
                            let mut dp = Tensor::zeros(t.rows, t.cols);
                            for r in 0..t.rows {
                                dp.data[r * t.cols..(r + 1) * t.cols]
                                    .copy_from_slice(&g.data[r * g.cols + off..r * g.cols + off + t.cols]);
                            }
                            accumulate(&mut grads[p.0], dp);
                        }
                        off += t.cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let t = self.value(*p);
                        if self.rg(*p) {
                            let dp = Tensor::from_vec(t.rows, t.cols, g.data[off..off + t.len()].to_vec());
                            accumulate(&mut grads[p.0], dp);
                        }
                        off += t.len();
                    }
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}
