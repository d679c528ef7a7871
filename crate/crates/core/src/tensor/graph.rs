//! Tape-based reverse-mode automatic differentiation over [`Array`] values.
//!
//! A [`Graph`] records every primitive in creation order, which is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse.

use std::collections::HashMap;
use std::rc::Rc;

use super::array::{gemm_into, Array, Real};
use super::attention::{self, AttnShape, SparseMask};
use super::params::ParamStore;
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    SignSte(Var),
    Detach,
    Gather { x: Var, idx: Rc<Vec<usize>> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    MaxRows { x: Var, argmax: Vec<usize> },
    Rotary { x: Var, cos: Rc<Vec<T>>, sin: Rc<Vec<T>>, heads: usize },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Rc<SparseMask>,
        heads: usize,
        scale: f64,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    BceLogits { z: Var, target: Rc<Vec<T>> },
}

struct Node<T> {
    value: Rc<Array<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation graph (the tape). One graph per forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<(u64, usize), Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant sharing storage with the caller.
    pub fn constant_rc(&mut self, value: Rc<Array<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf that is not a parameter (e.g. a gradient probe).
    pub fn variable(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds parameter `id` of `store`; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: usize) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value_rc(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    /// Binds a parameter by name.
    pub fn param_named(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        Ok(self.param(store, id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err("matmul", sa, sb);
        }
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Array<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return dim_err(name, va.shape(), vb.shape());
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    fn row_broadcast(&mut self, x: Var, r: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Array<T>> {
        let (vx, vr) = (self.value(x), self.value(r));
        let c = vx.cols();
        if vr.len() != c {
            return dim_err(name, vx.shape(), vr.shape());
        }
        let rd = vr.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, rd[i % c]))
            .collect();
        Array::new(vx.shape().to_vec(), data)
    }

    /// `x[i, :] + b` for every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = self.row_broadcast(x, b, "add_row", |v, r| v + r)?;
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddRow(x, b), ng))
    }

    /// `x[i, :] ⊙ g` for every row.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let out = self.row_broadcast(x, g, "mul_row", |v, r| v * r)?;
        let ng = self.ng(x) || self.ng(g);
        Ok(self.push(out, Op::MulRow(x, g), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cc = T::lit(c);
        let out = self.value(x).map(|v| v * cc);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let cc = T::lit(c);
        let out = self.value(x).map(|v| v + cc);
        let ng = self.ng(x);
        self.push(out, Op::AddConst(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        let ng = self.ng(x);
        self.push(out, Op::Exp(x), ng)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Numeric("log of non-positive value".into()));
        }
        let out = self.value(x).map(|v| v.ln());
        let ng = self.ng(x);
        Ok(self.push(out, Op::Log(x), ng))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_fwd);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Softmax over the trailing extent, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_lastdim(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Normalizes every row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let rows = vx.len() / c;
        let mut out = vec![T::zero(); vx.len()];
        let mut rstd = Vec::with_capacity(rows);
        let cf = T::lit(c as f64);
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + T::lit(eps)).sqrt();
            rstd.push(rs);
            for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let out = Array::new(vx.shape().to_vec(), out).expect("shape preserved");
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm { x, rstd }, ng)
    }

    /// `sign(x)` with `sign(0) = +1`; gradient passed straight through.
    pub fn sign_ste(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v >= T::zero() { T::one() } else { -T::one() });
        let ng = self.ng(x);
        self.push(out, Op::SignSte(x), ng)
    }

    /// Same value, no gradient flows back (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let out = (*self.nodes[x.0].value).clone();
        self.push(out, Op::Detach, false)
    }

    /// Row gather from a 2D array.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("gather index {bad} out of {r} rows")));
        }
        if idx.is_empty() {
            return Err(Error::Contract("empty gather".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&vx.data()[i * c..(i + 1) * c]);
        }
        let out = Array::new(vec![idx.len(), c], data)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::Gather {
                x,
                idx: Rc::new(idx.to_vec()),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("empty concat".into()))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != c || vp.shape().len() != 2 {
                return dim_err("concat_rows", self.shape(first), self.shape(p));
            }
            rows += vp.rows();
            data.extend_from_slice(vp.data());
        }
        let out = Array::new(vec![rows, c], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("empty concat".into()))?;
        let r = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.rows() != r || vp.shape().len() != 2 {
                return dim_err("concat_cols", self.shape(first), self.shape(p));
            }
            total += vp.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(row));
            }
        }
        let out = Array::new(vec![r, total], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        if len == 0 || start + len > r {
            return Err(Error::Contract(format!(
                "slice {start}..{} out of {r} rows",
                start + len
            )));
        }
        let out = Array::new(vec![len, c], vx.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.nodes[x.0].value).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Transpose(x), ng))
    }

    /// Column-wise maximum over rows: `[n, c] -> [1, c]`.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        let mut best = vx.data()[..c].to_vec();
        let mut argmax = vec![0; c];
        for row in 1..r {
            for col in 0..c {
                let v = vx.data()[row * c + col];
                if v > best[col] {
                    best[col] = v;
                    argmax[col] = row;
                }
            }
        }
        let out = Array::new(vec![1, c], best).expect("1×c");
        let ng = self.ng(x);
        self.push(out, Op::MaxRows { x, argmax }, ng)
    }

    /// Rotates adjacent channel pairs of every head by per-row angles.
    ///
    /// `x` is `[n, heads * d]`; `cos`/`sin` are `[n, d / 2]` and shared by all heads.
    pub fn rotary(&mut self, x: Var, cos: Rc<Vec<T>>, sin: Rc<Vec<T>>, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let (n, w) = (vx.rows(), vx.cols());
        if heads == 0 || w % heads != 0 || (w / heads) % 2 != 0 {
            return Err(Error::Config(format!("rotary width {w} with {heads} heads")));
        }
        let half = w / heads / 2;
        if cos.len() != n * half || sin.len() != n * half {
            return dim_err("rotary", vx.shape(), &[cos.len() / half.max(1), half]);
        }
        let out = rotate(vx.data(), &cos, &sin, n, heads, half, false);
        let out = Array::new(vx.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Rotary { x, cos, sin, heads }, ng))
    }

    /// Multi-head attention with a sparse admissibility mask.
    ///
    /// `q`, `k` are `[nq, heads*dk]` / `[nk, heads*dk]`, `v` is `[nk, heads*dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Rc<SparseMask>, heads: usize, scale: f64) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.rows() != mask.n_queries()
            || vk.rows() != mask.n_keys()
            || vv.rows() != mask.n_keys()
            || vq.cols() != vk.cols()
            || vq.cols() % heads != 0
            || vv.cols() % heads != 0
        {
            return dim_err("attention", vq.shape(), vk.shape());
        }
        let shape = AttnShape {
            heads,
            dk: vq.cols() / heads,
            dv: vv.cols() / heads,
            scale,
        };
        let (out, probs) = attention::forward(vq.data(), vk.data(), vv.data(), &mask, &shape);
        let out = Array::new(vec![vq.rows(), vv.cols()], out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                mask,
                heads,
                scale,
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Array::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Array::scalar(vx.sum() / T::lit(vx.len() as f64));
        let ng = self.ng(x);
        self.push(out, Op::Mean(x), ng)
    }

    /// Mean binary cross-entropy of logits `z` against targets in `{0, 1}`.
    pub fn bce_with_logits(&mut self, z: Var, target: &[T]) -> Result<Var> {
        let vz = self.value(z);
        if vz.len() != target.len() {
            return dim_err("bce_with_logits", vz.shape(), &[target.len()]);
        }
        let n = T::lit(vz.len() as f64);
        let total: T = vz
            .data()
            .iter()
            .zip(target)
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln())
            .sum();
        let out = Array::scalar(total / n);
        let ng = self.ng(z);
        Ok(self.push(
            out,
            Op::BceLogits {
                z,
                target: Rc::new(target.to_vec()),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut params = HashMap::new();
        for (&key, &v) in &self.params {
            params.insert(key, v);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    g.map(|d| Array::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape"))
                })
                .collect(),
            params,
        })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| -> &Array<T> { &self.nodes[v.0].value };
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e = *e + c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.ng(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_into(m, n, k, g, false, vb.data(), true, &mut da, T::zero());
                    acc(*a, da);
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_into(k, m, n, va.data(), true, g, false, &mut db, T::zero());
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, g.iter().zip(vb.data()).map(|(&x, &y)| x * y).collect());
                acc(*b, g.iter().zip(va.data()).map(|(&x, &y)| x * y).collect());
            }
            Op::AddRow(x, b) => {
                let c = val(*b).len();
                if self.ng(*b) {
                    let mut db = vec![T::zero(); c];
                    for (i, &x) in g.iter().enumerate() {
                        db[i % c] = db[i % c] + x;
                    }
                    acc(*b, db);
                }
                acc(*x, g.to_vec());
            }
            Op::MulRow(x, r) => {
                let (vx, vr) = (val(*x), val(*r));
                let c = vr.len();
                if self.ng(*r) {
                    let mut dr = vec![T::zero(); c];
                    for (i, (&gi, &xi)) in g.iter().zip(vx.data()).enumerate() {
                        dr[i % c] = dr[i % c] + gi * xi;
                    }
                    acc(*r, dr);
                }
                let rd = vr.data();
                acc(*x, g.iter().enumerate().map(|(i, &gi)| gi * rd[i % c]).collect());
            }
            Op::Scale(x, c) => {
                let cc = T::lit(*c);
                acc(*x, g.iter().map(|&v| v * cc).collect());
            }
            Op::AddConst(x) => acc(*x, g.to_vec()),
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(&a, &b)| a * b).collect());
            }
            Op::Log(x) => {
                let vx = val(*x);
                acc(*x, g.iter().zip(vx.data()).map(|(&a, &b)| a / b).collect());
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(&a, &b)| a * (T::one() - b * b)).collect());
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                acc(*x, g.iter().zip(vx.data()).map(|(&a, &b)| a * gelu_grad(b)).collect());
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.len() / c {
                    let ys = &y[r * c..(r + 1) * c];
                    let gs = &g[r * c..(r + 1) * c];
                    let dotp: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for i in 0..c {
                        dx[r * c + i] = ys[i] * (gs[i] - dotp);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, rstd } => {
                let y = node.value.data();
                let c = node.value.cols();
                let cf = T::lit(c as f64);
                let mut dx = vec![T::zero(); y.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let ys = &y[r * c..(r + 1) * c];
                    let gs = &g[r * c..(r + 1) * c];
                    let mg = gs.iter().copied().sum::<T>() / cf;
                    let mgy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / cf;
                    for i in 0..c {
                        dx[r * c + i] = rs * (gs[i] - mg - ys[i] * mgy);
                    }
                }
                acc(*x, dx);
            }
            Op::SignSte(x) => acc(*x, g.to_vec()),
            Op::Gather { x, idx } => {
                let vx = val(*x);
                let c = vx.cols();
                let mut dx = vec![T::zero(); vx.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] = dx[i * c + j] + g[r * c + j];
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut col0 = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let mut dp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + col0..r * total + col0 + c]);
                    }
                    acc(p, dp);
                    col0 += c;
                }
            }
            Op::SliceRows { x, start } => {
                let vx = val(*x);
                let c = vx.cols();
                let mut dx = vec![T::zero(); vx.len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Transpose(x) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let gt = Array::new(vec![r, c], g.to_vec())
                    .and_then(|a| a.transpose())
                    .expect("2D");
                acc(*x, gt.into_data());
            }
            Op::MaxRows { x, argmax } => {
                let vx = val(*x);
                let c = vx.cols();
                let mut dx = vec![T::zero(); vx.len()];
                for (col, &row) in argmax.iter().enumerate() {
                    dx[row * c + col] = g[col];
                }
                acc(*x, dx);
            }
            Op::Rotary { x, cos, sin, heads } => {
                let vx = val(*x);
                let half = vx.cols() / heads / 2;
                acc(*x, rotate(g, cos, sin, vx.rows(), *heads, half, true));
            }
            Op::Attention {
                q,
                k,
                v,
                mask,
                heads,
                scale,
                probs,
            } => {
                let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                let shape = AttnShape {
                    heads: *heads,
                    dk: vq.cols() / heads,
                    dv: vv.cols() / heads,
                    scale: *scale,
                };
                let mut dq = vec![T::zero(); vq.len()];
                let mut dk = vec![T::zero(); vk.len()];
                let mut dv = vec![T::zero(); vv.len()];
                attention::backward(
                    vq.data(),
                    vk.data(),
                    vv.data(),
                    probs,
                    g,
                    mask,
                    &shape,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::BceLogits { z, target } => {
                let vz = val(*z);
                let scale = g[0] / T::lit(vz.len() as f64);
                acc(
                    *z,
                    vz.data()
                        .iter()
                        .zip(target.iter())
                        .map(|(&x, &t)| (sigmoid(x) - t) * scale)
                        .collect(),
                );
            }
        }
    }
}

/// Gradients of one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
    params: HashMap<(u64, usize), Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to any tracked node; `None` if unreachable.
    pub fn wrt(&self, v: Var) -> Option<&Array<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Per-parameter gradients of `store`, zeros for parameters the loss does not reach.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Array<T>> {
        (0..store.len())
            .map(|id| {
                self.params
                    .get(&(store.uid(), id))
                    .and_then(|v| self.wrt(*v))
                    .cloned()
                    .unwrap_or_else(|| Array::zeros(store.value(id).shape()))
            })
            .collect()
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

fn rotate<T: Real>(x: &[T], cos: &[T], sin: &[T], n: usize, heads: usize, half: usize, inverse: bool) -> Vec<T> {
    let w = heads * half * 2;
    let mut out = vec![T::zero(); x.len()];
    for r in 0..n {
        for h in 0..heads {
            for p in 0..half {
                let (c, mut s) = (cos[r * half + p], sin[r * half + p]);
                if inverse {
                    s = -s;
                }
                let base = r * w + h * half * 2 + 2 * p;
                let (x0, x1) = (x[base], x[base + 1]);
                out[base] = x0 * c - x1 * s;
                out[base + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}

/// Softmax over the trailing extent of `a`.
pub fn softmax_lastdim<T: Real>(a: &Array<T>) -> Result<Array<T>> {
    if !a.all_finite() {
        return Err(Error::Numeric("softmax of non-finite input".into()));
    }
    let c = a.cols();
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(c) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Array::new(a.shape().to_vec(), out)
}
