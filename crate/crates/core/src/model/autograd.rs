//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass; calling
//! [`Tape::backward`] on a `1 x 1` node returns the gradient of every
//! parameter that took part in the pass. Parameters are borrowed, never
//! copied onto the tape.

use super::tensor::{matmul, Layout, Mat, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<T> {
    Owned(Mat<T>),
    Param(usize),
}

enum Op<T> {
    Leaf,
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MatMul {
        a: Var,
        la: Layout,
        b: Var,
        lb: Layout,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Mat<T>>,
    },
    ConcatCols(Vec<Var>),
    LogSoftmaxRows(Var),
    PickCols {
        a: Var,
        idx: Vec<usize>,
    },
    LogSumExpRows(Var),
    SelectSum {
        a: Var,
        entries: Vec<(usize, usize)>,
        scale: T,
    },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p [Mat<T>],
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p [Mat<T>]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(i) => &self.params[*i],
        }
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.data[0]
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(index),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[index] = Some(v);
        v
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, la: Layout, b: Var, lb: Layout) -> Var {
        let out = matmul(self.value(a), la, self.value(b), lb);
        self.push(out, Op::MatMul { a, la, b, lb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds the `1 x n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows, 1);
        let mut out = self.value(a).clone();
        assert_eq!(out.cols, r.cols);
        for i in 0..out.rows {
            for (x, &b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *x = *x + b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        for x in out.data.iter_mut() {
            *x = *x * s;
        }
        self.push(out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::of(GELU_C);
        let k = T::of(GELU_A);
        let half = T::of(0.5);
        let mut out = self.value(a).clone();
        for x in out.data.iter_mut() {
            let v = *x;
            *x = half * v * (T::one() + (c * (v + k * v * v * v)).tanh());
        }
        self.push(out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let n = T::of(xv.cols as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = Mat::zeros(xv.rows, xv.cols);
        let mut out = Mat::zeros(xv.rows, xv.cols);
        let mut rstd = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..xv.cols {
                let h = (row[c] - mean) * rs;
                xhat.data[r * xv.cols + c] = h;
                out.data[r * xv.cols + c] = h * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Scaled dot-product attention with `heads` heads. When `causal`, query
    /// row `i` sees key rows `0..=i + (keys - queries)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let dim = qm.cols;
        assert_eq!(km.cols, dim);
        assert_eq!(vm.cols, dim);
        assert_eq!(km.rows, vm.rows);
        assert_eq!(dim % heads, 0);
        let dh = dim / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (tq, tk) = (qm.rows, km.rows);
        let offset = tk as isize - tq as isize;
        let mut out = Mat::zeros(tq, dim);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = head_slice(qm, h, dh);
            let kh = head_slice(km, h, dh);
            let vh = head_slice(vm, h, dh);
            let mut s = matmul(&qh, Layout::Normal, &kh, Layout::Transposed);
            for i in 0..tq {
                let row = s.row_mut(i);
                let limit = if causal {
                    (i as isize + offset + 1).clamp(0, tk as isize) as usize
                } else {
                    tk
                };
                let mut max = T::neg_infinity();
                for x in row[..limit].iter_mut() {
                    *x = *x * scale;
                    max = max.max(*x);
                }
                let mut sum = T::zero();
                for x in row[..limit].iter_mut() {
                    *x = (*x - max).exp();
                    sum = sum + *x;
                }
                for x in row[..limit].iter_mut() {
                    *x = *x / sum;
                }
                for x in row[limit..].iter_mut() {
                    *x = T::zero();
                }
            }
            let oh = matmul(&s, Layout::Normal, &vh, Layout::Normal);
            for i in 0..tq {
                out.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(oh.row(i));
            }
            probs.push(s);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows);
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + m.cols].copy_from_slice(m.row(r));
            }
            c0 += m.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// `[rows, 1]` column holding `a[r, idx[r]]`.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        assert_eq!(idx.len(), m.rows);
        let data = idx.iter().enumerate().map(|(r, &c)| m.at(r, c)).collect();
        self.push(
            Mat::from_vec(m.rows, 1, data),
            Op::PickCols {
                a,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows).map(|r| log_sum_exp(m.row(r))).collect();
        self.push(Mat::from_vec(m.rows, 1, data), Op::LogSumExpRows(a))
    }

    /// `scale * sum(a[r, c] for (r, c) in entries)` as a `1 x 1` node.
    pub fn select_sum(&mut self, a: Var, entries: &[(usize, usize)], scale: T) -> Var {
        let m = self.value(a);
        let s = entries.iter().map(|&(r, c)| m.at(r, c)).sum::<T>() * scale;
        self.push(
            Mat::from_vec(1, 1, vec![s]),
            Op::SelectSum {
                a,
                entries: entries.to_vec(),
                scale,
            },
        )
    }

    pub fn sum_scaled(&mut self, a: Var, scale: T) -> Var {
        let m = self.value(a);
        let entries: Vec<(usize, usize)> = (0..m.rows)
            .flat_map(|r| (0..m.cols).map(move |c| (r, c)))
            .collect();
        self.select_sum(a, &entries, scale)
    }

    /// Gradients of the scalar `output` with respect to every parameter,
    /// indexed like the parameter slice; `None` for untouched parameters.
    pub fn backward(&self, output: Var) -> Vec<Option<Mat<T>>> {
        assert_eq!(self.value(output).shape(), (1, 1));
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::filled(1, 1, T::one()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Mat::zeros(t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, &x) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d = *d + x;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::MatMul { a, la, b, lb } => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    let da = match la {
                        Layout::Normal => matmul(&g, Layout::Normal, bm, flip(*lb)),
                        Layout::Transposed => matmul(bm, *lb, &g, Layout::Transposed),
                    };
                    let db = match lb {
                        Layout::Normal => matmul(am, flip(*la), &g, Layout::Normal),
                        Layout::Transposed => matmul(&g, Layout::Transposed, am, *la),
                    };
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, &x) in dr.data.iter_mut().zip(g.row(r)) {
                            *d = *d + x;
                        }
                    }
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let mut d = g;
                    for x in d.data.iter_mut() {
                        *x = *x * *s;
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let c = T::of(GELU_C);
                    let k = T::of(GELU_A);
                    let half = T::of(0.5);
                    let three = T::of(3.0);
                    let mut d = g;
                    for (dv, &v) in d.data.iter_mut().zip(&x.data) {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * v * v);
                        *dv = *dv * (half * (T::one() + t) + half * v * dt);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = &self.value(*gain).data;
                    let (rows, cols) = g.shape();
                    let n = T::of(cols as f64);
                    let mut dgain = Mat::zeros(1, cols);
                    let mut dbias = Mat::zeros(1, cols);
                    let mut dx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for c in 0..cols {
                            dgain.data[c] = dgain.data[c] + gr[c] * hr[c];
                            dbias.data[c] = dbias.data[c] + gr[c];
                            let dh = gr[c] * gv[c];
                            mean_d = mean_d + dh;
                            mean_dh = mean_dh + dh * hr[c];
                        }
                        mean_d = mean_d / n;
                        mean_dh = mean_dh / n;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            let dh = gr[c] * gv[c];
                            out[c] = rstd[r] * (dh - mean_d - hr[c] * mean_dh);
                        }
                    }
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                    let dim = qm.cols;
                    let dh = dim / heads;
                    let scale = T::of(1.0 / (dh as f64).sqrt());
                    let mut dq = Mat::zeros(qm.rows, dim);
                    let mut dk = Mat::zeros(km.rows, dim);
                    let mut dv = Mat::zeros(vm.rows, dim);
                    for (h, p) in probs.iter().enumerate() {
                        let qh = head_slice(qm, h, dh);
                        let kh = head_slice(km, h, dh);
                        let vh = head_slice(vm, h, dh);
                        let goh = head_slice(&g, h, dh);
                        let dvh = matmul(p, Layout::Transposed, &goh, Layout::Normal);
                        let mut ds = matmul(&goh, Layout::Normal, &vh, Layout::Transposed);
                        for i in 0..ds.rows {
                            let pr = p.row(i);
                            let dot: T = ds.row(i).iter().zip(pr).map(|(&a, &b)| a * b).sum();
                            for (x, &pv) in ds.row_mut(i).iter_mut().zip(pr) {
                                *x = pv * (*x - dot) * scale;
                            }
                        }
                        let dqh = matmul(&ds, Layout::Normal, &kh, Layout::Normal);
                        let dkh = matmul(&ds, Layout::Transposed, &qh, Layout::Normal);
                        put_head(&mut dq, &dqh, h, dh);
                        put_head(&mut dk, &dkh, h, dh);
                        put_head(&mut dv, &dvh, h, dh);
                    }
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        let mut d = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + cols]);
                        }
                        c0 += cols;
                        accumulate(&mut grads, p, d);
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let y = self.node_value(idx);
                    let mut d = g;
                    for r in 0..d.rows {
                        let total: T = d.row(r).iter().copied().sum();
                        let yr = y.row(r);
                        for (x, &lp) in d.row_mut(r).iter_mut().zip(yr) {
                            *x = *x - lp.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::PickCols { a, idx: cols } => {
                    let m = self.value(*a);
                    let mut d = Mat::zeros(m.rows, m.cols);
                    for (r, &c) in cols.iter().enumerate() {
                        d.data[r * m.cols + c] = g.data[r];
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LogSumExpRows(a) => {
                    let m = self.value(*a);
                    let y = self.node_value(idx);
                    let mut d = Mat::zeros(m.rows, m.cols);
                    for r in 0..m.rows {
                        let lse = y.data[r];
                        for (x, &v) in d.row_mut(r).iter_mut().zip(m.row(r)) {
                            *x = g.data[r] * (v - lse).exp();
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SelectSum { a, entries, scale } => {
                    let m = self.value(*a);
                    let mut d = Mat::zeros(m.rows, m.cols);
                    let s = g.data[0] * *scale;
                    for &(r, c) in entries {
                        d.data[r * m.cols + c] = d.data[r * m.cols + c] + s;
                    }
                    accumulate(&mut grads, *a, d);
                }
            }
        }

        let mut out: Vec<Option<Mat<T>>> = (0..self.params.len()).map(|_| None).collect();
        for (pi, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                out[pi] = grads[v.0].take();
            }
        }
        out
    }

    fn node_value(&self, idx: usize) -> &Mat<T> {
        self.value(Var(idx))
    }
}

fn flip(l: Layout) -> Layout {
    match l {
        Layout::Normal => Layout::Transposed,
        Layout::Transposed => Layout::Normal,
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Mat<T>>], v: Var, d: Mat<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let s: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

fn head_slice<T: Scalar>(m: &Mat<T>, h: usize, dh: usize) -> Mat<T> {
    let mut out = Mat::zeros(m.rows, dh);
    for r in 0..m.rows {
        out.row_mut(r)
            .copy_from_slice(&m.row(r)[h * dh..(h + 1) * dh]);
    }
    out
}

fn put_head<T: Scalar>(dst: &mut Mat<T>, src: &Mat<T>, h: usize, dh: usize) {
    for r in 0..src.rows {
        dst.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(src.row(r));
    }
}
