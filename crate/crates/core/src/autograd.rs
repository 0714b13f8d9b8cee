//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients for
//! every node that depends on a trainable parameter. Nodes that do not depend
//! on trainable parameters are never differentiated, which is how frozen
//! backbones and frozen pipeline stages stay gradient-free.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{ParamId, ParamStore};
use crate::raster::RasterTape;
use crate::tensor::{gemm, Layout, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Gather index that produces a zero instead of reading the source.
pub const GATHER_ZERO: usize = usize::MAX;

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulTb(Var, Var),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    AvgPool2 {
        x: Var,
        height: usize,
        width: usize,
    },
    Rasterize(Box<RasterTape>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Forward tape.
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    params: Vec<(ParamId, Var)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records gradients for trainable parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            params: Vec::new(),
        }
    }

    /// A graph that never tracks gradients.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_value(&self, v: Var) -> Tensor {
        self.nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free input that gradients are reported for (used by gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. It participates in differentiation only if
    /// the store marks it trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        if self.nodes[v.0].needs_grad {
            self.params.push((id, v));
        }
        v
    }

    fn binary_same(&self, a: Var, b: Var, name: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{name}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "add");
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x + y);
        let (r, c) = self.shape(a);
        let ng = self.any_grad(&[a, b]);
        self.push(Tensor::from_vec(r, c, data), Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "sub");
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x - y);
        let (r, c) = self.shape(a);
        let ng = self.any_grad(&[a, b]);
        self.push(Tensor::from_vec(r, c, data), Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "mul");
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x * y);
        let (r, c) = self.shape(a);
        let ng = self.any_grad(&[a, b]);
        self.push(Tensor::from_vec(r, c, data), Op::Mul(a, b), ng)
    }

    /// Broadcast-add a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row: row shape");
        let mut out = self.value(a).clone();
        let rv = &self.nodes[row.0].value.data;
        for i in 0..r {
            for (o, b) in out.data[i * c..(i + 1) * c].iter_mut().zip(rv) {
                *o += b;
            }
        }
        let ng = self.any_grad(&[a, row]);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Broadcast-multiply every row of `a` by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row: row shape");
        let mut out = self.value(a).clone();
        let rv = &self.nodes[row.0].value.data;
        for i in 0..r {
            for (o, b) in out.data[i * c..(i + 1) * c].iter_mut().zip(rv) {
                *o *= b;
            }
        }
        let ng = self.any_grad(&[a, row]);
        self.push(out, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = map(self.value(a), |x| x * s);
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = map(self.value(a), |x| x + s);
        let ng = self.any_grad(&[a]);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.any_grad(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_tb inner dimension mismatch");
        let mut out = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            &self.value(a).data,
            Layout::Normal,
            &self.value(b).data,
            Layout::Transposed,
            &mut out.data,
            false,
        );
        let ng = self.any_grad(&[a, b]);
        self.push(out, Op::MatMulTb(a, b), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), gelu);
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), libm::tanh);
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), sigmoid);
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = map(self.value(a), libm::exp);
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::abs);
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x * x);
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Square(a), ng)
    }

    /// Elementwise clamp; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = map(self.value(a), |x| x.clamp(lo, hi));
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c));
        assert_eq!(self.shape(beta), (1, c));
        let xv = &self.nodes[x.0].value.data;
        let gv = &self.nodes[gamma.0].value.data;
        let bv = &self.nodes[beta.0].value.data;
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.any_grad(&[x, gamma, beta]);
        self.push(
            Tensor::from_vec(r, c, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention. `q` is `nq x d`, `k` and `v`
    /// are `nk x d`; head `h` uses columns `h*d/heads .. (h+1)*d/heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (nq, d) = self.shape(q);
        let (nk, dk) = self.shape(k);
        assert_eq!(d, dk, "attention: query/key width mismatch");
        assert_eq!(self.shape(v), (nk, d), "attention: value shape");
        assert!(
            heads > 0 && d % heads == 0,
            "attention: heads must divide width"
        );
        assert!(nk > 0, "attention: no keys");
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let ng = self.any_grad(&[q, k, v]);
        let qv = &self.nodes[q.0].value.data;
        let kv = &self.nodes[k.0].value.data;
        let vv = &self.nodes[v.0].value.data;
        let mut out = vec![0.0; nq * d];
        let mut probs = if ng {
            vec![0.0; heads * nq * nk]
        } else {
            Vec::new()
        };
        let mut qh = vec![0.0; nq * dh];
        let mut kh = vec![0.0; nk * dh];
        let mut vh = vec![0.0; nk * dh];
        let mut p = vec![0.0; nq * nk];
        let mut oh = vec![0.0; nq * dh];
        for h in 0..heads {
            copy_cols(qv, d, h * dh, dh, &mut qh);
            copy_cols(kv, d, h * dh, dh, &mut kh);
            copy_cols(vv, d, h * dh, dh, &mut vh);
            gemm(
                nq,
                dh,
                nk,
                &qh,
                Layout::Normal,
                &kh,
                Layout::Transposed,
                &mut p,
                false,
            );
            for row in p.chunks_mut(nk) {
                softmax_in_place(row, scale);
            }
            gemm(
                nq,
                nk,
                dh,
                &p,
                Layout::Normal,
                &vh,
                Layout::Normal,
                &mut oh,
                false,
            );
            for i in 0..nq {
                out[i * d + h * dh..i * d + (h + 1) * dh]
                    .copy_from_slice(&oh[i * dh..(i + 1) * dh]);
            }
            if ng {
                probs[h * nq * nk..(h + 1) * nq * nk].copy_from_slice(&p);
            }
        }
        self.push(
            Tensor::from_vec(nq, d, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, rows, "concat_cols: row count mismatch");
                self.shape(p).1
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].value.data;
            for i in 0..rows {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = self.any_grad(parts);
        self.push(
            Tensor::from_vec(rows, total, out),
            Op::ConcatCols(parts.to_vec()),
            ng,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols out of range");
        let mut out = vec![0.0; r * len];
        copy_cols(&self.value(a).data, c, start, len, &mut out);
        let ng = self.any_grad(&[a]);
        self.push(Tensor::from_vec(r, len, out), Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            assert_eq!(self.shape(p).1, cols, "concat_rows: column mismatch");
            data.extend_from_slice(&self.value(p).data);
            rows += self.shape(p).0;
        }
        let ng = self.any_grad(parts);
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    /// `out.data[i] = a.data[index[i]]`, or zero for [`GATHER_ZERO`].
    pub fn gather(&mut self, a: Var, index: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather: index length");
        let src = &self.nodes[a.0].value.data;
        let data: Vec<f64> = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i] })
            .collect();
        let ng = self.any_grad(&[a]);
        self.push(Tensor::from_vec(rows, cols, data), Op::Gather(a, index), ng)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let c = self.shape(a).1;
        let mut index = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            index.extend(r * c..(r + 1) * c);
        }
        self.gather(a, index, rows.len(), c)
    }

    /// Reinterpret the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.value(a).len(), rows * cols, "reshape: size mismatch");
        self.gather(a, (0..rows * cols).collect(), rows, cols)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len().max(1) as f64;
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    /// Per-row sum, `rows x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = &self.value(a).data;
        let data: Vec<f64> = (0..r)
            .map(|i| src[i * c..(i + 1) * c].iter().sum())
            .collect();
        let ng = self.any_grad(&[a]);
        self.push(Tensor::from_vec(r, 1, data), Op::RowSum(a), ng)
    }

    /// ℓ2-normalize each row. Rows with norm below `eps` become zero and pass
    /// no gradient.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Var {
        let (r, c) = self.shape(x);
        let src = &self.value(x).data;
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            norms[i] = n;
            if n >= eps || n.is_nan() {
                for j in 0..c {
                    out[i * c + j] = row[j] / n;
                }
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(
            Tensor::from_vec(r, c, out),
            Op::RowNormalize { x, norms, eps },
            ng,
        )
    }

    /// 2x2 average pooling of an image stored as `(height*width) x channels`.
    pub fn avg_pool2(&mut self, x: Var, height: usize, width: usize) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(r, height * width, "avg_pool2: row count");
        assert!(
            height.is_multiple_of(2) && width.is_multiple_of(2),
            "avg_pool2: odd size"
        );
        let (h2, w2) = (height / 2, width / 2);
        let src = &self.value(x).data;
        let mut out = vec![0.0; h2 * w2 * c];
        for y in 0..h2 {
            for xx in 0..w2 {
                for ch in 0..c {
                    let mut s = 0.0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        s += src[((2 * y + dy) * width + 2 * xx + dx) * c + ch];
                    }
                    out[(y * w2 + xx) * c + ch] = 0.25 * s;
                }
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(
            Tensor::from_vec(h2 * w2, c, out),
            Op::AvgPool2 { x, height, width },
            ng,
        )
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Grads {
                grads,
                params: self.params.clone(),
            };
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads {
            grads,
            params: self.params.clone(),
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, 1.0, &g.data));
                self.acc(grads, *b, |gb| axpy(gb, 1.0, &g.data));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, 1.0, &g.data));
                self.acc(grads, *b, |gb| axpy(gb, -1.0, &g.data));
            }
            Op::Mul(a, b) => {
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                self.acc(grads, *a, |ga| {
                    for ((o, gi), bi) in ga.iter_mut().zip(&g.data).zip(bv) {
                        *o += gi * bi;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, gi), ai) in gb.iter_mut().zip(&g.data).zip(av) {
                        *o += gi * ai;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let c = g.cols;
                self.acc(grads, *a, |ga| axpy(ga, 1.0, &g.data));
                self.acc(grads, *row, |gr| {
                    for grow in g.data.chunks(c) {
                        axpy(gr, 1.0, grow);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let c = g.cols;
                let av = &self.value(*a).data;
                let rv = &self.value(*row).data;
                self.acc(grads, *a, |ga| {
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o += g.data[i] * rv[i % c];
                    }
                });
                self.acc(grads, *row, |gr| {
                    for (i, gi) in g.data.iter().enumerate() {
                        gr[i % c] += gi * av[i];
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |ga| axpy(ga, *s, &g.data)),
            Op::AddScalar(a) => self.acc(grads, *a, |ga| axpy(ga, 1.0, &g.data)),
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                self.acc(grads, *a, |ga| {
                    gemm(
                        m,
                        n,
                        k,
                        &g.data,
                        Layout::Normal,
                        bv,
                        Layout::Transposed,
                        ga,
                        true,
                    )
                });
                self.acc(grads, *b, |gb| {
                    gemm(
                        k,
                        m,
                        n,
                        av,
                        Layout::Transposed,
                        &g.data,
                        Layout::Normal,
                        gb,
                        true,
                    )
                });
            }
            Op::MatMulTb(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                self.acc(grads, *a, |ga| {
                    gemm(
                        m,
                        n,
                        k,
                        &g.data,
                        Layout::Normal,
                        bv,
                        Layout::Normal,
                        ga,
                        true,
                    )
                });
                self.acc(grads, *b, |gb| {
                    gemm(
                        n,
                        m,
                        k,
                        &g.data,
                        Layout::Transposed,
                        av,
                        Layout::Normal,
                        gb,
                        true,
                    )
                });
            }
            Op::Gelu(a) => {
                let av = &self.value(*a).data;
                self.acc(grads, *a, |ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(&g.data).zip(av) {
                        *o += gi * gelu_grad(*x);
                    }
                });
            }
            Op::Relu(a) => {
                let av = &self.value(*a).data;
                self.acc(grads, *a, |ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(&g.data).zip(av) {
                        if *x > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Tanh(a) => self.acc(grads, *a, |ga| {
                for ((o, gi), y) in ga.iter_mut().zip(&g.data).zip(&out.data) {
                    *o += gi * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(a) => self.acc(grads, *a, |ga| {
                for ((o, gi), y) in ga.iter_mut().zip(&g.data).zip(&out.data) {
                    *o += gi * y * (1.0 - y);
                }
            }),
            Op::Exp(a) => self.acc(grads, *a, |ga| {
                for ((o, gi), y) in ga.iter_mut().zip(&g.data).zip(&out.data) {
                    *o += gi * y;
                }
            }),
            Op::Abs(a) => {
                let av = &self.value(*a).data;
                self.acc(grads, *a, |ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(&g.data).zip(av) {
                        if *x > 0.0 {
                            *o += gi;
                        } else if *x < 0.0 {
                            *o -= gi;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let av = &self.value(*a).data;
                self.acc(grads, *a, |ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(&g.data).zip(av) {
                        *o += 2.0 * gi * x;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = &self.value(*a).data;
                self.acc(grads, *a, |ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(&g.data).zip(av) {
                        if *x >= *lo && *x <= *hi {
                            *o += gi;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = g.cols;
                let gv = &self.value(*gamma).data;
                self.acc(grads, *gamma, |gg| {
                    for (i, gi) in g.data.iter().enumerate() {
                        gg[i % c] += gi * xhat[i];
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for (i, gi) in g.data.iter().enumerate() {
                        gb[i % c] += gi;
                    }
                });
                self.acc(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; c];
                    for (r, rs) in rstd.iter().enumerate() {
                        let base = r * c;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let d = g.data[base + j] * gv[j];
                            dxhat[j] = d;
                            m1 += d;
                            m2 += d * xhat[base + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            gx[base + j] += rs * (dxhat[j] - m1 - xhat[base + j] * m2);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::ConcatCols(parts) => {
                let total = g.cols;
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    self.acc(grads, p, |gp| {
                        for (i, grow) in gp.chunks_mut(w).enumerate() {
                            axpy(grow, 1.0, &g.data[i * total + off..i * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.shape(*a).1;
                let w = g.cols;
                self.acc(grads, *a, |ga| {
                    for (i, grow) in g.data.chunks(w).enumerate() {
                        axpy(&mut ga[i * c + start..i * c + start + w], 1.0, grow);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, |gp| axpy(gp, 1.0, &g.data[off..off + n]));
                    off += n;
                }
            }
            Op::Gather(a, index) => self.acc(grads, *a, |ga| {
                for (gi, &i) in g.data.iter().zip(index) {
                    if i != GATHER_ZERO {
                        ga[i] += gi;
                    }
                }
            }),
            Op::SumAll(a) => {
                let s = g.data[0];
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len().max(1) as f64;
                let s = g.data[0] / n;
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::RowSum(a) => {
                let c = self.shape(*a).1;
                self.acc(grads, *a, |ga| {
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o += g.data[i / c];
                    }
                });
            }
            Op::RowNormalize { x, norms, eps } => {
                let c = g.cols;
                self.acc(grads, *x, |gx| {
                    for (r, &n) in norms.iter().enumerate() {
                        if n < *eps {
                            continue;
                        }
                        let y = &out.data[r * c..(r + 1) * c];
                        let gr = &g.data[r * c..(r + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - y[j] * dot) / n;
                        }
                    }
                });
            }
            Op::AvgPool2 { x, height, width } => {
                let c = g.cols;
                let w2 = width / 2;
                let w = *width;
                let _ = height;
                self.acc(grads, *x, |gx| {
                    for (i, gi) in g.data.iter().enumerate() {
                        let ch = i % c;
                        let pix = i / c;
                        let (y, xx) = (pix / w2, pix % w2);
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            gx[((2 * y + dy) * w + 2 * xx + dx) * c + ch] += 0.25 * gi;
                        }
                    }
                });
            }
            Op::Rasterize(tape) => {
                let [dpos, dscale, drot, dopa, dcol] = tape.backward(&g.data);
                let inputs = tape.inputs;
                for (var, d) in inputs.iter().zip([dpos, dscale, drot, dopa, dcol]) {
                    self.acc(grads, *var, |gv| axpy(gv, 1.0, &d));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (nq, d) = self.shape(q);
        let nk = self.shape(k).0;
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let qv = &self.value(q).data;
        let kv = &self.value(k).data;
        let vv = &self.value(v).data;
        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nk * d];
        let mut dv = vec![0.0; nk * d];
        let mut qh = vec![0.0; nq * dh];
        let mut kh = vec![0.0; nk * dh];
        let mut vh = vec![0.0; nk * dh];
        let mut goh = vec![0.0; nq * dh];
        let mut dp = vec![0.0; nq * nk];
        let mut tmp_q = vec![0.0; nq * dh];
        let mut tmp_k = vec![0.0; nk * dh];
        for h in 0..heads {
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            copy_cols(qv, d, h * dh, dh, &mut qh);
            copy_cols(kv, d, h * dh, dh, &mut kh);
            copy_cols(vv, d, h * dh, dh, &mut vh);
            copy_cols(&g.data, d, h * dh, dh, &mut goh);
            // dV = Pᵀ dO
            gemm(
                nk,
                nq,
                dh,
                p,
                Layout::Transposed,
                &goh,
                Layout::Normal,
                &mut tmp_k,
                false,
            );
            add_cols(&mut dv, d, h * dh, dh, &tmp_k);
            // dP = dO Vᵀ, then softmax backward
            gemm(
                nq,
                dh,
                nk,
                &goh,
                Layout::Normal,
                &vh,
                Layout::Transposed,
                &mut dp,
                false,
            );
            for (dprow, prow) in dp.chunks_mut(nk).zip(p.chunks(nk)) {
                let dot: f64 = dprow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (x, pj) in dprow.iter_mut().zip(prow) {
                    *x = pj * (*x - dot) * scale;
                }
            }
            gemm(
                nq,
                nk,
                dh,
                &dp,
                Layout::Normal,
                &kh,
                Layout::Normal,
                &mut tmp_q,
                false,
            );
            add_cols(&mut dq, d, h * dh, dh, &tmp_q);
            gemm(
                nk,
                nq,
                dh,
                &dp,
                Layout::Transposed,
                &qh,
                Layout::Normal,
                &mut tmp_k,
                false,
            );
            add_cols(&mut dk, d, h * dh, dh, &tmp_k);
        }
        self.acc(grads, q, |gq| axpy(gq, 1.0, &dq));
        self.acc(grads, k, |gk| axpy(gk, 1.0, &dk));
        self.acc(grads, v, |gv| axpy(gv, 1.0, &dv));
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.shape(v);
            *slot = Some(Tensor::zeros(r, c));
        }
        f(&mut slot.as_mut().expect("gradient slot").data);
    }
}

/// Result of [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients per trainable parameter; a parameter used several times has
    /// its contributions summed. Parameters not reached are absent.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..store.len()).map(|_| None).collect();
        for (id, v) in &self.params {
            if let Some(g) = self.get(*v) {
                match &mut out[id.index()] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|x| f(*x)).collect())
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn copy_cols(src: &[f64], stride: usize, start: usize, len: usize, dst: &mut [f64]) {
    for (i, drow) in dst.chunks_mut(len).enumerate() {
        drow.copy_from_slice(&src[i * stride + start..i * stride + start + len]);
    }
}

fn add_cols(dst: &mut [f64], stride: usize, start: usize, len: usize, src: &[f64]) {
    for (i, srow) in src.chunks(len).enumerate() {
        axpy(
            &mut dst[i * stride + start..i * stride + start + len],
            1.0,
            srow,
        );
    }
}

fn softmax_in_place(row: &mut [f64], scale: f64) {
    let mut max = f64::NEG_INFINITY;
    for x in row.iter_mut() {
        *x *= scale;
        max = max.max(*x);
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(core::f64::consts::TAU);
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.normal()).collect())
    }

    /// Central-difference check of d(sum(w ⊙ f(inputs)))/d(inputs).
    fn check<F>(inputs: &[Tensor], f: F, tol: f64)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut rng = Rng::new(99);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        let (r, c) = g.shape(out);
        let w = rand_tensor(&mut rng, r, c);
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::inference();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out)
                .data
                .iter()
                .zip(&w.data)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let eps = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or(Tensor::zeros(t.rows, t.cols));
            for i in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[k].data[i] += eps;
                let mut minus = inputs.to_vec();
                minus[k].data[i] -= eps;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data[i];
                let err = (a - num).abs() / (a.abs() + num.abs()).max(1e-6);
                assert!(err < tol, "input {k} elem {i}: analytic {a} numeric {num}");
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = Rng::new(1);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let c = rand_tensor(&mut rng, 3, 4);
        check(&[a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]), 1e-6);
        check(
            &[a.clone(), c.clone()],
            |g, v| g.matmul_tb(v[0], v[1]),
            1e-6,
        );
        check(
            &[a.clone(), c.clone()],
            |g, v| {
                let m = g.mul(v[0], v[1]);
                let s = g.sub(m, v[1]);
                let t = g.tanh(s);
                let e = g.gelu(t);
                g.sigmoid(e)
            },
            1e-6,
        );
        check(
            core::slice::from_ref(&a),
            |g, v| {
                let e = g.exp(v[0]);
                let s = g.square(e);
                g.abs(s)
            },
            1e-6,
        );
    }

    #[test]
    fn row_broadcast_and_layer_norm_gradients() {
        let mut rng = Rng::new(2);
        let x = rand_tensor(&mut rng, 4, 5);
        let gam = rand_tensor(&mut rng, 1, 5);
        let bet = rand_tensor(&mut rng, 1, 5);
        check(
            &[x.clone(), gam.clone(), bet.clone()],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
            1e-5,
        );
        check(
            &[x.clone(), gam.clone()],
            |g, v| {
                let a = g.add_row(v[0], v[1]);
                g.mul_row(a, v[1])
            },
            1e-6,
        );
    }

    #[test]
    fn attention_gradients() {
        let mut rng = Rng::new(3);
        let q = rand_tensor(&mut rng, 3, 8);
        let k = rand_tensor(&mut rng, 5, 8);
        let v = rand_tensor(&mut rng, 5, 8);
        check(&[q, k, v], |g, x| g.attention(x[0], x[1], x[2], 2), 1e-5);
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = Rng::new(4);
        let a = rand_tensor(&mut rng, 4, 6);
        let b = rand_tensor(&mut rng, 4, 2);
        check(
            &[a.clone(), b.clone()],
            |g, v| {
                let c = g.concat_cols(&[v[0], v[1]]);
                let s = g.slice_cols(c, 3, 4);
                let r = g.concat_rows(&[s, s]);
                let n = g.row_normalize(r, 1e-8);
                let rs = g.row_sum(n);
                g.reshape(rs, 2, 4)
            },
            1e-5,
        );
        check(
            core::slice::from_ref(&a),
            |g, v| {
                let p = g.avg_pool2(v[0], 2, 2);
                let idx = alloc::vec![0, GATHER_ZERO, 5, 5];
                let ga = g.gather(p, idx, 2, 2);
                let m = g.mean(ga);
                let c = g.clamp(v[0], -0.5, 0.5);
                let s = g.sum(c);
                g.add(m, s)
            },
            1e-5,
        );
    }

    #[test]
    fn frozen_inputs_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.input(Tensor::full(2, 2, 1.0));
        let b = g.constant(Tensor::full(2, 2, 2.0));
        let c = g.mul(a, b);
        let loss = g.sum(c);
        let grads = g.backward(loss);
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get(a).unwrap().data, alloc::vec![2.0; 4]);
    }

    #[test]
    fn inference_graph_never_records() {
        let mut g = Graph::inference();
        let a = g.input(Tensor::full(1, 1, 3.0));
        assert!(!g.needs_grad(a));
    }
}
