//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding
//! its value and enough context to propagate gradients; [`Graph::backward`]
//! walks the tape in reverse insertion order. Tensors are dense row-major
//! `rows x cols` blocks, which covers everything the denoisers need:
//! sequences are `(len, dim)`, channel stacks are `(channels, len)`,
//! vectors are `(1, n)`.

use std::cell::RefCell;

use crate::error::{Error, Result};

/// Dense row-major 2-D tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "tensor {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![x],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// `a @ b` with a cache-friendly i-k-j loop.
fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Silu(usize),
    Sqrt(usize),
    /// Row-wise softmax.
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    /// `(r,c) + (1,c)` broadcast over rows.
    AddRow(usize, usize),
    /// `(r,c) + (r,1)` broadcast over columns.
    AddCol(usize, usize),
    /// `(r,c) * (r,1)` broadcast over columns.
    MulCol(usize, usize),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    SliceRows(usize, usize, usize),
    SliceCols(usize, usize, usize),
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    /// Nearest-neighbor upsampling by 2 along columns.
    Upsample2(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        eps: f64,
    },
    Reshape(usize, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape. Build with the `Graph` methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Gradients of a backward pass, indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&self, value: Tensor, op: Op) -> VarId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        VarId(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn leaf(&self, t: Tensor) -> VarId {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, id: VarId) -> Tensor {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn shape(&self, id: VarId) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        nodes[id.0].value.shape()
    }

    fn with<T>(&self, id: VarId, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.nodes.borrow()[id.0].value)
    }

    pub fn add(&self, a: VarId, b: VarId) -> VarId {
        let v = self.with(a, |ta| {
            self.with(b, |tb| {
                debug_assert_eq!(ta.shape(), tb.shape());
                let mut out = ta.clone();
                for (o, x) in out.data.iter_mut().zip(&tb.data) {
                    *o += x;
                }
                out
            })
        });
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: VarId, b: VarId) -> VarId {
        let v = self.with(a, |ta| {
            self.with(b, |tb| {
                debug_assert_eq!(ta.shape(), tb.shape());
                let mut out = ta.clone();
                for (o, x) in out.data.iter_mut().zip(&tb.data) {
                    *o -= x;
                }
                out
            })
        });
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: VarId, b: VarId) -> VarId {
        let v = self.with(a, |ta| {
            self.with(b, |tb| {
                debug_assert_eq!(ta.shape(), tb.shape());
                let mut out = ta.clone();
                for (o, x) in out.data.iter_mut().zip(&tb.data) {
                    *o *= x;
                }
                out
            })
        });
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn scale(&self, a: VarId, k: f64) -> VarId {
        let v = self.with(a, |t| {
            let mut out = t.clone();
            for o in out.data.iter_mut() {
                *o *= k;
            }
            out
        });
        self.push(v, Op::Scale(a.0, k))
    }

    pub fn add_scalar(&self, a: VarId, k: f64) -> VarId {
        let v = self.with(a, |t| {
            let mut out = t.clone();
            for o in out.data.iter_mut() {
                *o += k;
            }
            out
        });
        self.push(v, Op::AddScalar(a.0, k))
    }

    pub fn matmul(&self, a: VarId, b: VarId) -> VarId {
        let v = self.with(a, |ta| self.with(b, |tb| matmul(ta, tb)));
        self.push(v, Op::Matmul(a.0, b.0))
    }

    pub fn transpose(&self, a: VarId) -> VarId {
        let v = self.with(a, |t| t.transpose());
        self.push(v, Op::Transpose(a.0))
    }

    pub fn relu(&self, a: VarId) -> VarId {
        let v = self.with(a, |t| {
            let mut out = t.clone();
            for o in out.data.iter_mut() {
                if *o < 0.0 {
                    *o = 0.0;
                }
            }
            out
        });
        self.push(v, Op::Relu(a.0))
    }

    pub fn silu(&self, a: VarId) -> VarId {
        let v = self.with(a, |t| {
            let mut out = t.clone();
            for o in out.data.iter_mut() {
                *o *= sigmoid(*o);
            }
            out
        });
        self.push(v, Op::Silu(a.0))
    }

    /// Elementwise square root; the derivative at exactly zero is taken as 0.
    pub fn sqrt(&self, a: VarId) -> VarId {
        let v = self.with(a, |t| {
            let mut out = t.clone();
            for o in out.data.iter_mut() {
                *o = o.sqrt();
            }
            out
        });
        self.push(v, Op::Sqrt(a.0))
    }

    pub fn softmax(&self, a: VarId) -> VarId {
        let v = self.with(a, |t| {
            let mut out = t.clone();
            for r in 0..t.rows {
                let row = &mut out.data[r * t.cols..(r + 1) * t.cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in row.iter_mut() {
                    *x /= total;
                }
            }
            out
        });
        self.push(v, Op::Softmax(a.0))
    }

    pub fn sum(&self, a: VarId) -> VarId {
        let v = self.with(a, |t| Tensor::scalar(t.data.iter().sum()));
        self.push(v, Op::Sum(a.0))
    }

    pub fn mean(&self, a: VarId) -> VarId {
        let v = self.with(a, |t| {
            Tensor::scalar(t.data.iter().sum::<f64>() / t.len() as f64)
        });
        self.push(v, Op::Mean(a.0))
    }

    /// `(r,c) + (1,c)`, the bias-per-column broadcast.
    pub fn add_row(&self, a: VarId, b: VarId) -> VarId {
        let v = self.with(a, |ta| {
            self.with(b, |tb| {
                debug_assert_eq!(tb.rows, 1);
                debug_assert_eq!(ta.cols, tb.cols);
                let mut out = ta.clone();
                for r in 0..ta.rows {
                    for c in 0..ta.cols {
                        out.data[r * ta.cols + c] += tb.data[c];
                    }
                }
                out
            })
        });
        self.push(v, Op::AddRow(a.0, b.0))
    }

    /// `(r,c) + (r,1)`, the bias-per-row broadcast.
    pub fn add_col(&self, a: VarId, b: VarId) -> VarId {
        let v = self.with(a, |ta| {
            self.with(b, |tb| {
                debug_assert_eq!(tb.cols, 1);
                debug_assert_eq!(ta.rows, tb.rows);
                let mut out = ta.clone();
                for r in 0..ta.rows {
                    for c in 0..ta.cols {
                        out.data[r * ta.cols + c] += tb.data[r];
                    }
                }
                out
            })
        });
        self.push(v, Op::AddCol(a.0, b.0))
    }

    /// `(r,c) * (r,1)`, per-row gain.
    pub fn mul_col(&self, a: VarId, b: VarId) -> VarId {
        let v = self.with(a, |ta| {
            self.with(b, |tb| {
                debug_assert_eq!(tb.cols, 1);
                debug_assert_eq!(ta.rows, tb.rows);
                let mut out = ta.clone();
                for r in 0..ta.rows {
                    for c in 0..ta.cols {
                        out.data[r * ta.cols + c] *= tb.data[r];
                    }
                }
                out
            })
        });
        self.push(v, Op::MulCol(a.0, b.0))
    }

    pub fn concat_rows(&self, a: VarId, b: VarId) -> VarId {
        let v = self.with(a, |ta| {
            self.with(b, |tb| {
                debug_assert_eq!(ta.cols, tb.cols);
                let mut data = ta.data.clone();
                data.extend_from_slice(&tb.data);
                Tensor {
                    rows: ta.rows + tb.rows,
                    cols: ta.cols,
                    data,
                }
            })
        });
        self.push(v, Op::ConcatRows(a.0, b.0))
    }

    pub fn concat_cols(&self, a: VarId, b: VarId) -> VarId {
        let v = self.with(a, |ta| {
            self.with(b, |tb| {
                debug_assert_eq!(ta.rows, tb.rows);
                let cols = ta.cols + tb.cols;
                let mut out = Tensor::zeros(ta.rows, cols);
                for r in 0..ta.rows {
                    out.data[r * cols..r * cols + ta.cols]
                        .copy_from_slice(&ta.data[r * ta.cols..(r + 1) * ta.cols]);
                    out.data[r * cols + ta.cols..(r + 1) * cols]
                        .copy_from_slice(&tb.data[r * tb.cols..(r + 1) * tb.cols]);
                }
                out
            })
        });
        self.push(v, Op::ConcatCols(a.0, b.0))
    }

    pub fn slice_rows(&self, a: VarId, start: usize, len: usize) -> VarId {
        let v = self.with(a, |t| {
            debug_assert!(start + len <= t.rows);
            Tensor {
                rows: len,
                cols: t.cols,
                data: t.data[start * t.cols..(start + len) * t.cols].to_vec(),
            }
        });
        self.push(v, Op::SliceRows(a.0, start, len))
    }

    pub fn slice_cols(&self, a: VarId, start: usize, len: usize) -> VarId {
        let v = self.with(a, |t| {
            debug_assert!(start + len <= t.cols);
            let mut out = Tensor::zeros(t.rows, len);
            for r in 0..t.rows {
                out.data[r * len..(r + 1) * len]
                    .copy_from_slice(&t.data[r * t.cols + start..r * t.cols + start + len]);
            }
            out
        });
        self.push(v, Op::SliceCols(a.0, start, len))
    }

    /// 1-D convolution over `(C_in, L)` with weights `(C_out, C_in * k)`
    /// and bias `(C_out, 1)`; zero padding.
    pub fn conv1d(&self, x: VarId, w: VarId, b: VarId, k: usize, stride: usize, pad: usize) -> VarId {
        let v = self.with(x, |tx| {
            self.with(w, |tw| {
                self.with(b, |tb| {
                    let c_in = tx.rows;
                    let l = tx.cols;
                    let c_out = tw.rows;
                    debug_assert_eq!(tw.cols, c_in * k);
                    debug_assert_eq!(tb.rows, c_out);
                    let l_out = (l + 2 * pad - k) / stride + 1;
                    let mut out = Tensor::zeros(c_out, l_out);
                    for co in 0..c_out {
                        let orow = &mut out.data[co * l_out..(co + 1) * l_out];
                        for ci in 0..c_in {
                            let xrow = &tx.data[ci * l..(ci + 1) * l];
                            for kk in 0..k {
                                let wv = tw.data[co * tw.cols + ci * k + kk];
                                if wv == 0.0 {
                                    continue;
                                }
                                for (ol, o) in orow.iter_mut().enumerate() {
                                    let xi = (ol * stride + kk) as isize - pad as isize;
                                    if xi >= 0 && (xi as usize) < l {
                                        *o += wv * xrow[xi as usize];
                                    }
                                }
                            }
                        }
                        for o in orow.iter_mut() {
                            *o += tb.data[co];
                        }
                    }
                    out
                })
            })
        });
        self.push(
            v,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                k,
                stride,
                pad,
            },
        )
    }

    /// Nearest-neighbor 2x upsampling along columns.
    pub fn upsample2(&self, a: VarId) -> VarId {
        let v = self.with(a, |t| {
            let mut out = Tensor::zeros(t.rows, t.cols * 2);
            for r in 0..t.rows {
                for c in 0..t.cols {
                    let x = t.data[r * t.cols + c];
                    out.data[r * t.cols * 2 + 2 * c] = x;
                    out.data[r * t.cols * 2 + 2 * c + 1] = x;
                }
            }
            out
        });
        self.push(v, Op::Upsample2(a.0))
    }

    /// Row-wise layer normalization with per-column gain/shift `(1, c)`.
    pub fn layer_norm(&self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let v = self.with(x, |tx| {
            self.with(gamma, |tg| {
                self.with(beta, |tb| {
                    debug_assert_eq!(tg.shape(), (1, tx.cols));
                    debug_assert_eq!(tb.shape(), (1, tx.cols));
                    let mut out = tx.clone();
                    for r in 0..tx.rows {
                        let row = &mut out.data[r * tx.cols..(r + 1) * tx.cols];
                        let m = row.iter().sum::<f64>() / tx.cols as f64;
                        let var =
                            row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / tx.cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        for (c, v) in row.iter_mut().enumerate() {
                            *v = (*v - m) * inv * tg.data[c] + tb.data[c];
                        }
                    }
                    out
                })
            })
        });
        self.push(
            v,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        )
    }

    /// Group normalization over `(C, L)` with per-channel gain/shift `(C, 1)`.
    pub fn group_norm(&self, x: VarId, gamma: VarId, beta: VarId, groups: usize, eps: f64) -> VarId {
        let v = self.with(x, |tx| {
            self.with(gamma, |tg| {
                self.with(beta, |tb| {
                    let c = tx.rows;
                    let l = tx.cols;
                    debug_assert_eq!(c % groups, 0);
                    debug_assert_eq!(tg.shape(), (c, 1));
                    debug_assert_eq!(tb.shape(), (c, 1));
                    let per = c / groups;
                    let mut out = tx.clone();
                    for g in 0..groups {
                        let span = g * per * l..(g + 1) * per * l;
                        let m = tx.data[span.clone()].iter().sum::<f64>() / (per * l) as f64;
                        let var = tx.data[span.clone()]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>()
                            / (per * l) as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        for ch in g * per..(g + 1) * per {
                            for i in 0..l {
                                let idx = ch * l + i;
                                out.data[idx] =
                                    (tx.data[idx] - m) * inv * tg.data[ch] + tb.data[ch];
                            }
                        }
                    }
                    out
                })
            })
        });
        self.push(
            v,
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                eps,
            },
        )
    }

    pub fn reshape(&self, a: VarId, rows: usize, cols: usize) -> VarId {
        let v = self.with(a, |t| {
            debug_assert_eq!(t.len(), rows * cols);
            Tensor {
                rows,
                cols,
                data: t.data.clone(),
            }
        });
        self.push(v, Op::Reshape(a.0, rows, cols))
    }

    /// Backpropagates from a scalar node; returns per-node gradients.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::ShapeMismatch(
                "backward requires a scalar loss".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        let add_into = |slot: &mut Option<Tensor>, delta: Tensor| {
            match slot {
                Some(acc) => {
                    for (a, d) in acc.data.iter_mut().zip(&delta.data) {
                        *a += d;
                    }
                }
                None => *slot = Some(delta),
            }
        };

        for idx in (0..nodes.len()).rev() {
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    add_into(&mut grads[*a], g.clone());
                    add_into(&mut grads[*b], g);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads[*a], g.clone());
                    let mut neg = g;
                    for v in neg.data.iter_mut() {
                        *v = -*v;
                    }
                    add_into(&mut grads[*b], neg);
                }
                Op::Mul(a, b) => {
                    let ta = &nodes[*a].value;
                    let tb = &nodes[*b].value;
                    let mut da = g.clone();
                    for (d, x) in da.data.iter_mut().zip(&tb.data) {
                        *d *= x;
                    }
                    let mut db = g;
                    for (d, x) in db.data.iter_mut().zip(&ta.data) {
                        *d *= x;
                    }
                    add_into(&mut grads[*a], da);
                    add_into(&mut grads[*b], db);
                }
                Op::Scale(a, k) => {
                    let mut da = g;
                    for v in da.data.iter_mut() {
                        *v *= k;
                    }
                    add_into(&mut grads[*a], da);
                }
                Op::AddScalar(a, _) => add_into(&mut grads[*a], g),
                Op::Matmul(a, b) => {
                    let ta = &nodes[*a].value;
                    let tb = &nodes[*b].value;
                    add_into(&mut grads[*a], matmul(&g, &tb.transpose()));
                    add_into(&mut grads[*b], matmul(&ta.transpose(), &g));
                }
                Op::Transpose(a) => add_into(&mut grads[*a], g.transpose()),
                Op::Relu(a) => {
                    let ta = &nodes[*a].value;
                    let mut da = g;
                    for (d, x) in da.data.iter_mut().zip(&ta.data) {
                        if *x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    add_into(&mut grads[*a], da);
                }
                Op::Silu(a) => {
                    let ta = &nodes[*a].value;
                    let mut da = g;
                    for (d, x) in da.data.iter_mut().zip(&ta.data) {
                        let s = sigmoid(*x);
                        *d *= s * (1.0 + x * (1.0 - s));
                    }
                    add_into(&mut grads[*a], da);
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    let mut da = g;
                    for (d, tv) in da.data.iter_mut().zip(&y.data) {
                        *d = if *tv > 0.0 { *d / (2.0 * tv) } else { 0.0 };
                    }
                    add_into(&mut grads[*a], da);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut da = g.clone();
                    for r in 0..y.rows {
                        let yr = &y.data[r * y.cols..(r + 1) * y.cols];
                        let gr = &g.data[r * y.cols..(r + 1) * y.cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let dr = &mut da.data[r * y.cols..(r + 1) * y.cols];
                        for c in 0..y.cols {
                            dr[c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    add_into(&mut grads[*a], da);
                }
                Op::Sum(a) => {
                    let ta = &nodes[*a].value;
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    da.data.fill(g.item());
                    add_into(&mut grads[*a], da);
                }
                Op::Mean(a) => {
                    let ta = &nodes[*a].value;
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    da.data.fill(g.item() / ta.len() as f64);
                    add_into(&mut grads[*a], da);
                }
                Op::AddRow(a, b) => {
                    let shape = nodes[*b].value.shape();
                    let mut db = Tensor::zeros(shape.0, shape.1);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            db.data[c] += g.data[r * g.cols + c];
                        }
                    }
                    add_into(&mut grads[*a], g);
                    add_into(&mut grads[*b], db);
                }
                Op::AddCol(a, b) => {
                    let shape = nodes[*b].value.shape();
                    let mut db = Tensor::zeros(shape.0, shape.1);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            db.data[r] += g.data[r * g.cols + c];
                        }
                    }
                    add_into(&mut grads[*a], g);
                    add_into(&mut grads[*b], db);
                }
                Op::MulCol(a, b) => {
                    let ta = &nodes[*a].value;
                    let tb = &nodes[*b].value;
                    let mut da = g.clone();
                    let mut db = Tensor::zeros(tb.rows, 1);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            let gi = g.data[r * g.cols + c];
                            da.data[r * g.cols + c] = gi * tb.data[r];
                            db.data[r] += gi * ta.data[r * g.cols + c];
                        }
                    }
                    add_into(&mut grads[*a], da);
                    add_into(&mut grads[*b], db);
                }
                Op::ConcatRows(a, b) => {
                    let ra = nodes[*a].value.rows;
                    let cols = g.cols;
                    let da = Tensor {
                        rows: ra,
                        cols,
                        data: g.data[..ra * cols].to_vec(),
                    };
                    let db = Tensor {
                        rows: g.rows - ra,
                        cols,
                        data: g.data[ra * cols..].to_vec(),
                    };
                    add_into(&mut grads[*a], da);
                    add_into(&mut grads[*b], db);
                }
                Op::ConcatCols(a, b) => {
                    let ca = nodes[*a].value.cols;
                    let cb = nodes[*b].value.cols;
                    let mut da = Tensor::zeros(g.rows, ca);
                    let mut db = Tensor::zeros(g.rows, cb);
                    for r in 0..g.rows {
                        da.data[r * ca..(r + 1) * ca]
                            .copy_from_slice(&g.data[r * g.cols..r * g.cols + ca]);
                        db.data[r * cb..(r + 1) * cb]
                            .copy_from_slice(&g.data[r * g.cols + ca..(r + 1) * g.cols]);
                    }
                    add_into(&mut grads[*a], da);
                    add_into(&mut grads[*b], db);
                }
                Op::SliceRows(a, start, len) => {
                    let ta = &nodes[*a].value;
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    da.data[start * ta.cols..(start + len) * ta.cols].copy_from_slice(&g.data);
                    add_into(&mut grads[*a], da);
                }
                Op::SliceCols(a, start, len) => {
                    let ta = &nodes[*a].value;
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    for r in 0..ta.rows {
                        da.data[r * ta.cols + start..r * ta.cols + start + len]
                            .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                    }
                    add_into(&mut grads[*a], da);
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    k,
                    stride,
                    pad,
                } => {
                    let tx = &nodes[*x].value;
                    let tw = &nodes[*w].value;
                    let (c_in, l) = tx.shape();
                    let c_out = tw.rows;
                    let l_out = g.cols;
                    let mut dx = Tensor::zeros(c_in, l);
                    let mut dw = Tensor::zeros(tw.rows, tw.cols);
                    let mut db = Tensor::zeros(c_out, 1);
                    for co in 0..c_out {
                        let grow = &g.data[co * l_out..(co + 1) * l_out];
                        db.data[co] += grow.iter().sum::<f64>();
                        for ci in 0..c_in {
                            let xrow = &tx.data[ci * l..(ci + 1) * l];
                            for kk in 0..*k {
                                let widx = co * tw.cols + ci * k + kk;
                                let wv = tw.data[widx];
                                let mut dwv = 0.0;
                                for (ol, &gv) in grow.iter().enumerate() {
                                    let xi = (ol * stride + kk) as isize - *pad as isize;
                                    if xi >= 0 && (xi as usize) < l {
                                        dwv += gv * xrow[xi as usize];
                                        dx.data[ci * l + xi as usize] += gv * wv;
                                    }
                                }
                                dw.data[widx] += dwv;
                            }
                        }
                    }
                    add_into(&mut grads[*x], dx);
                    add_into(&mut grads[*w], dw);
                    add_into(&mut grads[*b], db);
                }
                Op::Upsample2(a) => {
                    let ta = &nodes[*a].value;
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    for r in 0..ta.rows {
                        for c in 0..ta.cols {
                            da.data[r * ta.cols + c] = g.data[r * g.cols + 2 * c]
                                + g.data[r * g.cols + 2 * c + 1];
                        }
                    }
                    add_into(&mut grads[*a], da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                } => {
                    let tx = &nodes[*x].value;
                    let tg = &nodes[*gamma].value;
                    let n = tx.cols as f64;
                    let mut dx = Tensor::zeros(tx.rows, tx.cols);
                    let mut dgamma = Tensor::zeros(1, tx.cols);
                    let mut dbeta = Tensor::zeros(1, tx.cols);
                    for r in 0..tx.rows {
                        let row = &tx.data[r * tx.cols..(r + 1) * tx.cols];
                        let grow = &g.data[r * tx.cols..(r + 1) * tx.cols];
                        let m = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - m) * inv).collect();
                        let ghat: Vec<f64> =
                            grow.iter().zip(tg.data.iter()).map(|(g, w)| g * w).collect();
                        let mean_g = ghat.iter().sum::<f64>() / n;
                        let mean_gx =
                            ghat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..tx.cols {
                            dgamma.data[c] += grow[c] * xhat[c];
                            dbeta.data[c] += grow[c];
                            dx.data[r * tx.cols + c] =
                                inv * (ghat[c] - mean_g - xhat[c] * mean_gx);
                        }
                    }
                    add_into(&mut grads[*x], dx);
                    add_into(&mut grads[*gamma], dgamma);
                    add_into(&mut grads[*beta], dbeta);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    eps,
                } => {
                    let tx = &nodes[*x].value;
                    let tg = &nodes[*gamma].value;
                    let (c, l) = tx.shape();
                    let per = c / groups;
                    let n = (per * l) as f64;
                    let mut dx = Tensor::zeros(c, l);
                    let mut dgamma = Tensor::zeros(c, 1);
                    let mut dbeta = Tensor::zeros(c, 1);
                    for grp in 0..*groups {
                        let span = grp * per * l..(grp + 1) * per * l;
                        let xs = &tx.data[span.clone()];
                        let gs = &g.data[span.clone()];
                        let m = xs.iter().sum::<f64>() / n;
                        let var = xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        let mut xhat = vec![0.0; xs.len()];
                        let mut ghat = vec![0.0; xs.len()];
                        for i in 0..xs.len() {
                            let ch = grp * per + i / l;
                            xhat[i] = (xs[i] - m) * inv;
                            ghat[i] = gs[i] * tg.data[ch];
                            mean_g += ghat[i];
                            mean_gx += ghat[i] * xhat[i];
                        }
                        mean_g /= n;
                        mean_gx /= n;
                        for i in 0..xs.len() {
                            let ch = grp * per + i / l;
                            dgamma.data[ch] += gs[i] * xhat[i];
                            dbeta.data[ch] += gs[i];
                            dx.data[grp * per * l + i] =
                                inv * (ghat[i] - mean_g - xhat[i] * mean_gx);
                        }
                    }
                    add_into(&mut grads[*x], dx);
                    add_into(&mut grads[*gamma], dgamma);
                    add_into(&mut grads[*beta], dbeta);
                }
                Op::Reshape(a, _, _) => {
                    let ta = &nodes[*a].value;
                    let da = Tensor {
                        rows: ta.rows,
                        cols: ta.cols,
                        data: g.data,
                    };
                    add_into(&mut grads[*a], da);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// Compares autodiff gradients against central finite differences on
/// `samples` coordinates of each input tensor. Coordinates where the two
/// half-step estimates disagree (non-smooth points, e.g. ReLU kinks) are
/// skipped.
///
/// `build` must construct the loss from leaves created for `inputs`
/// in order.
pub fn grad_check(
    build: &dyn Fn(&Graph, &[VarId]) -> VarId,
    inputs: &[Tensor],
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    use rand::Rng;
    let h = 1e-4;

    let eval = |tensors: &[Tensor]| -> f64 {
        let g = Graph::new();
        let ids: Vec<VarId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&g, &ids);
        g.value(loss).item()
    };

    let g = Graph::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&g, &ids);
    let grads = g.backward(loss)?;

    let mut rng = crate::rng::seeded_rng(seed);
    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let f0 = eval(&work);
    for (ti, tensor) in inputs.iter().enumerate() {
        let n = tensor.len();
        let analytic = grads.get(ids[ti]);
        for _ in 0..samples.min(n) {
            let ci = rng.random_range(0..n);
            let orig = work[ti].data[ci];

            work[ti].data[ci] = orig + h;
            let fp = eval(&work);
            work[ti].data[ci] = orig - h;
            let fm = eval(&work);
            work[ti].data[ci] = orig + 0.5 * h;
            let fp2 = eval(&work);
            work[ti].data[ci] = orig - 0.5 * h;
            let fm2 = eval(&work);
            work[ti].data[ci] = orig;

            let fd1 = (fp - fm) / (2.0 * h);
            let fd2 = (fp2 - fm2) / h;
            // two kink markers: step-size disagreement (curved nonsmoothness)
            // and excess curvature relative to the slope scale (piecewise-
            // linear corners, e.g. ReLU at exactly zero)
            let disagree = (fd1 - fd2).abs() > 0.05 * fd1.abs().max(fd2.abs()).max(1e-6);
            let curvature = (fp + fm - 2.0 * f0).abs();
            let cornered = curvature > 0.02 * h * fd1.abs().max(1e-3);
            if disagree || cornered {
                skipped += 1;
                continue;
            }
            let a = analytic.map(|t| t.data[ci]).unwrap_or(0.0);
            let denom = a.abs().max(fd1.abs()).max(1e-8);
            let rel = (a - fd1).abs() / denom;
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked,
        skipped_kinks: skipped,
    })
}
