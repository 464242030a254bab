use std::sync::Arc;

use super::kernels::{col2im, gelu, gelu_grad, gemm, im2col};
use super::Tensor;
use crate::error::{contract_err, dim_err, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Recip(Var),
    Sum(Var),
    AddBroadcast(Var, Var),
    ScaleRows(Var, Var),
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Softmax(Var),
    Gelu(Var),
    Elementwise {
        x: Var,
        df: fn(f64) -> f64,
    },
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    NarrowRows {
        x: Var,
        start: usize,
    },
    NarrowCols {
        x: Var,
        len: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of recorded operations. Every op appends a node whose inputs are
/// earlier nodes, so node order is a topological order and
/// [`Graph::backward`] is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Record a leaf; it participates in differentiation iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.unary(a, |x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.unary(a, |x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| 1.0 / x);
        let rg = self.rg(a);
        self.push(t, Op::Recip(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.unary(a, gelu);
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn elementwise(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let t = self.unary(a, f);
        let rg = self.rg(a);
        self.push(t, Op::Elementwise { x: a, df }, rg)
    }

    /// Sum of all elements, as a scalar (shape `[]`).
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Squared Euclidean norm of all elements.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        Ok(self.sum(sq))
    }

    /// `x + b` where `b`'s shape equals the trailing dims of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (sx, sb) = (tx.shape(), tb.shape());
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return dim_err(format!("cannot broadcast {sb:?} onto {sx:?}"));
        }
        let bl = tb.numel();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % bl])
            .collect();
        let t = Tensor::new(sx, data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddBroadcast(x, b), rg))
    }

    /// Multiply every row `i` of `x` (leading axis) by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.shape().len() != 1 || tx.shape().is_empty() || tx.shape()[0] != ts.numel() {
            return dim_err(format!(
                "scale_rows: {:?} rows vs scale {:?}",
                tx.shape(),
                ts.shape()
            ));
        }
        let cols = tx.numel() / ts.numel();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * ts.data()[i / cols])
            .collect();
        let t = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::ScaleRows(x, s), rg))
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product of `op(a)` and `op(b)`, where `op` transposes the last
    /// two axes when the flag is set. Rank-2 operands give a plain product;
    /// rank-3 operands must share the leading batch extent.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return dim_err(format!("matmul: unsupported ranks {sa:?} x {sb:?}"));
        }
        let batch = if sa.len() == 3 {
            if sa[0] != sb[0] {
                return dim_err(format!("matmul: batch {} vs {}", sa[0], sb[0]));
            }
            sa[0]
        } else {
            1
        };
        let r = sa.len();
        let (m, k) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (k2, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != k2 {
            return dim_err(format!("matmul: inner extents {k} and {k2} differ ({sa:?} x {sb:?})"));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[bi * m * k..(bi + 1) * m * k],
                    ta,
                    &db[bi * k * n..(bi + 1) * k * n],
                    tb,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let shape = if r == 3 { vec![batch, m, n] } else { vec![m, n] };
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Matmul { a, b, ta, tb, batch, m, k, n }, rg))
    }

    /// Stride-1 cross-correlation with zero padding `k/2` plus per-channel
    /// bias. `x: [cin, h, w]`, `w: [cout, cin, k, k]`, `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            return dim_err(format!("conv2d: ranks {sx:?} {sw:?} {sb:?}"));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if sw[1] != cin {
            return dim_err(format!("conv2d: input has {cin} channels, kernel expects {}", sw[1]));
        }
        if sw[3] != k || k % 2 == 0 {
            return dim_err(format!("conv2d: kernel {k}x{} must be square and odd", sw[3]));
        }
        if sb[0] != cout {
            return dim_err(format!("conv2d: bias {} vs {cout} output channels", sb[0]));
        }
        let hw = h * wd;
        let mut out = vec![0.0; cout * hw];
        {
            let xd = self.data(x);
            let cols;
            let colref: &[f64] = if k == 1 {
                xd
            } else {
                cols = im2col(xd, cin, h, wd, k);
                &cols
            };
            gemm(cout, cin * k * k, hw, self.data(w), false, colref, false, &mut out, false);
            let bd = self.data(b);
            for (o, &bv) in out.chunks_mut(hw).zip(bd) {
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
        let t = Tensor::new(&[cout, h, wd], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, k }, rg))
    }

    /// Normalize over the last axis, epsilon [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| crate::Error::Dimension("layer_norm on scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return dim_err(format!(
                "layer_norm: affine params {:?}/{:?} vs width {d}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![0.0; xd.len()];
        for (row, o) in xd.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, rstd) = row_stats(row);
            for j in 0..d {
                o[j] = (row[j] - mean) * rstd * gd[j] + bd[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta }, rg))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().ok_or_else(|| crate::Error::Dimension("softmax on scalar".into()))?;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for (row, o) in xd.chunks(n).zip(out.chunks_mut(n)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..n {
                o[j] = (row[j] - mx).exp();
                s += o[j];
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    // ---- data movement -------------------------------------------------

    /// `out[j] = x[index[j]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let xd = self.data(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xd.len()) {
            return dim_err(format!("gather index {bad} out of range for {} elements", xd.len()));
        }
        let data = index.iter().map(|&i| xd[i]).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gather { x, index }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| crate::Error::Dimension("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            if s.is_empty() || s[1..] != tail[..] {
                return dim_err(format!("concat: {:?} does not match trailing {tail:?}", s));
            }
            lead += s[0];
            data.extend_from_slice(self.data(v));
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(&shape, data)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(t, Op::Concat(xs.to_vec()), rg))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn narrow_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || len == 0 || start + len > s[0] {
            return dim_err(format!("narrow_rows {start}+{len} out of {s:?}"));
        }
        let row = self.value(x).numel() / s[0];
        let data = self.data(x)[start * row..(start + len) * row].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::NarrowRows { x, start }, rg))
    }

    /// Leading `len` columns of a matrix.
    pub fn narrow_cols(&mut self, x: Var, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || len > s[1] {
            return dim_err(format!("narrow_cols {len} out of {s:?}"));
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            data.extend_from_slice(&xd[r * s[1]..r * s[1] + len]);
        }
        let t = Tensor::new(&[s[0], len], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::NarrowCols { x, len }, rg))
    }

    // ---- reverse sweep -------------------------------------------------

    /// Accumulate `d loss / d v` into every node that requires gradients.
    ///
    /// Leaf gradients add onto whatever a previous call left behind; interior
    /// nodes hold the gradient of the latest sweep. Nodes that require
    /// gradients but do not influence `loss` receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !node.value.requires_grad {
                continue;
            }
            let n = node.value.numel();
            let g = grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| vec![0.0; n]);
            match node.op {
                Op::Leaf => match &mut node.value.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                },
                _ => node.value.grad = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let numel = |v: Var| self.nodes[v.0].value.numel();
        let want = |v: Var| self.nodes[v.0].value.requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        accumulate(&mut grads[v.0], g.len(), |d| {
                            d.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if want(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for j in 0..g.len() {
                            d[j] += g[j] * db[j];
                        }
                    });
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], g.len(), |d| {
                        for j in 0..g.len() {
                            d[j] += g[j] * da[j];
                        }
                    });
                }
            }
            Op::Scale(a, c) => accumulate(&mut grads[a.0], g.len(), |d| {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
            }),
            Op::AddScalar(a) => accumulate(&mut grads[a.0], g.len(), |d| {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y)
            }),
            Op::Recip(a) => accumulate(&mut grads[a.0], g.len(), |d| {
                for j in 0..g.len() {
                    d[j] -= g[j] * out[j] * out[j];
                }
            }),
            Op::Gelu(a) => {
                let xa = self.data(*a);
                accumulate(&mut grads[a.0], g.len(), |d| {
                    for j in 0..g.len() {
                        d[j] += g[j] * gelu_grad(xa[j]);
                    }
                })
            }
            Op::Elementwise { x, df } => {
                let xa = self.data(*x);
                accumulate(&mut grads[x.0], g.len(), |d| {
                    for j in 0..g.len() {
                        d[j] += g[j] * df(xa[j]);
                    }
                })
            }
            Op::Sum(a) => accumulate(&mut grads[a.0], numel(*a), |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::AddBroadcast(x, b) => {
                if want(*x) {
                    accumulate(&mut grads[x.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(p, q)| *p += q));
                }
                if want(*b) {
                    let bl = numel(*b);
                    accumulate(&mut grads[b.0], bl, |d| {
                        for (j, &gv) in g.iter().enumerate() {
                            d[j % bl] += gv;
                        }
                    });
                }
            }
            Op::ScaleRows(x, s) => {
                let (xd, sd) = (self.data(*x), self.data(*s));
                let cols = g.len() / sd.len();
                if want(*x) {
                    accumulate(&mut grads[x.0], g.len(), |d| {
                        for j in 0..g.len() {
                            d[j] += g[j] * sd[j / cols];
                        }
                    });
                }
                if want(*s) {
                    accumulate(&mut grads[s.0], sd.len(), |d| {
                        for j in 0..g.len() {
                            d[j / cols] += g[j] * xd[j];
                        }
                    });
                }
            }
            &Op::Matmul { a, b, ta, tb, batch, m, k, n } => {
                let (da, db) = (self.data(a), self.data(b));
                if want(a) {
                    accumulate(&mut grads[a.0], batch * m * k, |d| {
                        for bi in 0..batch {
                            let gs = &g[bi * m * n..(bi + 1) * m * n];
                            let bs = &db[bi * k * n..(bi + 1) * k * n];
                            let ds = &mut d[bi * m * k..(bi + 1) * m * k];
                            if ta {
                                // stored a is k×m: dA = op(b) · gᵀ
                                gemm(k, n, m, bs, tb, gs, true, ds, true);
                            } else {
                                gemm(m, n, k, gs, false, bs, !tb, ds, true);
                            }
                        }
                    });
                }
                if want(b) {
                    accumulate(&mut grads[b.0], batch * k * n, |d| {
                        for bi in 0..batch {
                            let gs = &g[bi * m * n..(bi + 1) * m * n];
                            let as_ = &da[bi * m * k..(bi + 1) * m * k];
                            let ds = &mut d[bi * k * n..(bi + 1) * k * n];
                            if tb {
                                // stored b is n×k: dB = gᵀ · op(a)
                                gemm(n, m, k, gs, true, as_, ta, ds, true);
                            } else {
                                gemm(k, m, n, as_, !ta, gs, false, ds, true);
                            }
                        }
                    });
                }
            }
            &Op::Conv2d { x, w, b, k } => {
                let sx = self.shape(x);
                let (cin, h, wd) = (sx[0], sx[1], sx[2]);
                let cout = self.shape(w)[0];
                let hw = h * wd;
                if want(b) {
                    accumulate(&mut grads[b.0], cout, |d| {
                        for (o, gs) in g.chunks(hw).enumerate() {
                            d[o] += gs.iter().sum::<f64>();
                        }
                    });
                }
                if want(w) {
                    let xd = self.data(x);
                    let cols;
                    let colref: &[f64] = if k == 1 {
                        xd
                    } else {
                        cols = im2col(xd, cin, h, wd, k);
                        &cols
                    };
                    accumulate(&mut grads[w.0], cout * cin * k * k, |d| {
                        gemm(cout, hw, cin * k * k, g, false, colref, true, d, true)
                    });
                }
                if want(x) {
                    let wdat = self.data(w);
                    let mut dcols = vec![0.0; cin * k * k * hw];
                    gemm(cin * k * k, cout, hw, wdat, true, g, false, &mut dcols, false);
                    accumulate(&mut grads[x.0], cin * hw, |d| {
                        if k == 1 {
                            d.iter_mut().zip(&dcols).for_each(|(p, q)| *p += q);
                        } else {
                            col2im(&dcols, cin, h, wd, k, d);
                        }
                    });
                }
            }
            &Op::LayerNorm { x, gamma, beta } => {
                let xd = self.data(x);
                let gd = self.data(gamma);
                let d = gd.len();
                let rows = xd.len() / d;
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; xd.len()];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mean, rstd) = row_stats(row);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gd[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if want(x) {
                    accumulate(&mut grads[x.0], xd.len(), |p| p.iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
                }
                if want(gamma) {
                    accumulate(&mut grads[gamma.0], d, |p| p.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b));
                }
                if want(beta) {
                    accumulate(&mut grads[beta.0], d, |p| p.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b));
                }
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                accumulate(&mut grads[x.0], g.len(), |d| {
                    for ((yr, gr), dr) in out.chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Gather { x, index } => accumulate(&mut grads[x.0], numel(*x), |d| {
                for (j, &src) in index.iter().enumerate() {
                    d[src] += g[j];
                }
            }),
            Op::Reshape(x) => accumulate(&mut grads[x.0], g.len(), |d| {
                d.iter_mut().zip(g).for_each(|(p, q)| *p += q)
            }),
            Op::Concat(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = numel(v);
                    if want(v) {
                        accumulate(&mut grads[v.0], n, |d| {
                            d.iter_mut().zip(&g[off..off + n]).for_each(|(p, q)| *p += q)
                        });
                    }
                    off += n;
                }
            }
            &Op::NarrowRows { x, start } => {
                let n = numel(x);
                let row = n / self.shape(x)[0];
                accumulate(&mut grads[x.0], n, |d| {
                    d[start * row..start * row + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(p, q)| *p += q)
                });
            }
            &Op::NarrowCols { x, len } => {
                let cols = self.shape(x)[1];
                accumulate(&mut grads[x.0], numel(x), |d| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        d[r * cols..r * cols + len].iter_mut().zip(gr).for_each(|(p, q)| *p += q);
                    }
                });
            }
        }
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}
