//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during a forward pass as a
//! node holding its value. [`Graph::backward`] walks the tape in reverse and
//! returns a [`Gradients`] set covering every node that depends on a
//! trainable parameter or a tracked input.
//!
//! Shape mismatches between operands are programming errors and panic; the
//! fallible surface is `backward` (non-scalar root, non-finite values).

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, numel, MatRef, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Allowed-pair table for windowed attention.
///
/// Softmax rows are laid out as `(batch, window, head, query)`; row `r` uses
/// the table row of window `(r / (tokens * heads)) % windows` and query
/// `r % tokens`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    windows: usize,
    heads: usize,
    tokens: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(windows: usize, heads: usize, tokens: usize, allowed: Vec<bool>) -> Self {
        assert_eq!(allowed.len(), windows * tokens * tokens, "mask table size");
        AttnMask { windows, heads, tokens, allowed }
    }

    pub fn with_heads(&self, heads: usize) -> Self {
        AttnMask { heads, ..self.clone() }
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn allowed(&self, window: usize, query: usize, key: usize) -> bool {
        self.allowed[(window * self.tokens + query) * self.tokens + key]
    }

    fn row(&self, r: usize) -> &[bool] {
        let t = self.tokens;
        let q = r % t;
        let w = (r / (t * self.heads)) % self.windows;
        let start = (w * t + q) * t;
        &self.allowed[start..start + t]
    }
}

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LogClamp { x: Var, floor: T },
    Reduce { x: Var, outer: usize, len: usize, inner: usize, scale: T },
    Reshape(Var),
    Gather { x: Var, idx: Arc<Vec<usize>>, row: usize },
    ConcatCols { a: Var, b: Var, la: usize, lb: usize },
    Narrow0 { x: Var, offset: usize },
    PickCols { x: Var, idx: Arc<Vec<usize>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'s, T: Real> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    track_all: bool,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new() -> Self {
        Graph { store: None, nodes: Vec::new(), param_nodes: HashMap::new(), track_all: false }
    }

    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Graph { store: Some(store), ..Self::new() }
    }

    /// Track gradients through every node, including frozen parameters.
    pub fn track_all(mut self, on: bool) -> Self {
        self.track_all = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad: requires_grad || self.track_all });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.param_nodes.insert(id, v);
        v
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise operands differ in shape");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::raw(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Div(a, b), rg)
    }

    /// `a[.., L] + b[L]`, broadcasting `b` over all leading positions.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let l = vb.len();
        assert_eq!(va.len() % l, 0, "row broadcast length");
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(l) {
            for (o, &bv) in row.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `x[.., in] @ w[in, out] (+ b[out])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vw.shape().len(), 2, "weight must be a matrix");
        let (din, dout) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(*vx.shape().last().unwrap(), din, "linear input width");
        let rows = vx.len() / din;
        let mut out = vec![T::zero(); rows * dout];
        gemm(rows, din, dout, vx.data(), MatRef::rows(0, din), vw.data(), MatRef::rows(0, dout), &mut out, false);
        if let Some(b) = b {
            let vb = self.value(b);
            assert_eq!(vb.len(), dout, "bias width");
            for row in out.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(vb.data()) {
                    *o += bv;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::raw(shape, out), Op::Linear { x, w, b }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).len(), 2, "matmul lhs must be a matrix");
        self.linear(a, b, None)
    }

    /// Batched matrix product over 3-d operands, optionally transposing either.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm operands {sa:?} {sb:?}");
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, kb, "bmm inner extent");
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for bi in 0..batch {
            let am = bmm_ref(bi * sa[1] * sa[2], sa[2], ta);
            let bm = bmm_ref(bi * sb[1] * sb[2], sb[2], tb);
            gemm(m, k, n, va.data(), am, vb.data(), bm, &mut out[bi * m * n..(bi + 1) * m * n], false);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::raw(vec![batch, m, n], out), Op::Bmm { a, b, ta, tb, batch, m, k, n }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let l = *vx.shape().last().unwrap();
        let (vg, vbt) = (self.value(gamma), self.value(beta));
        assert!(vg.len() == l && vbt.len() == l, "layer norm affine width");
        let rows = vx.len() / l;
        let eps = T::lit(eps);
        let inv_l = T::one() / T::from_usize(l).unwrap();
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * l..(r + 1) * l];
            let mean = row.iter().copied().sum::<T>() * inv_l;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_l;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..l {
                let h = (row[j] - mean) * rs;
                xhat[r * l + j] = h;
                out[r * l + j] = h * vg.data()[j] + vbt.data()[j];
            }
        }
        let shape = vx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Tensor::raw(shape, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_fwd(v));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis where disallowed pairs get weight exactly 0.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&AttnMask>) -> Var {
        let vx = self.value(x);
        let l = *vx.shape().last().unwrap();
        if let Some(m) = mask {
            assert_eq!(m.tokens, l, "mask width");
        }
        let mut out = vec![T::zero(); vx.len()];
        for (r, (row, o)) in vx.data().chunks(l).zip(out.chunks_mut(l)).enumerate() {
            let allow = mask.map(|m| m.row(r));
            let ok = |j: usize| allow.is_none_or(|a| a[j]);
            let mx = (0..l).filter(|&j| ok(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..l {
                if ok(j) {
                    let e = (row[j] - mx).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            let inv = T::one() / sum;
            o.iter_mut().for_each(|v| *v = *v * inv);
        }
        let shape = vx.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::raw(shape, out), Op::Softmax(x), rg)
    }

    /// `ln(max(x, floor))`; gradient is zero where the clamp is active.
    pub fn log_clamp(&mut self, x: Var, floor: f64) -> Var {
        let floor = T::lit(floor);
        let out = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.rg(x);
        self.push(out, Op::LogClamp { x, floor }, rg)
    }

    fn reduce(&mut self, x: Var, axis: usize, scale: T, keep: bool) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(axis < shape.len(), "reduce axis");
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let vx = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &vx[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * scale);
        let mut oshape = shape.clone();
        if keep {
            oshape[axis] = 1;
        } else {
            oshape.remove(axis);
        }
        let rg = self.rg(x);
        self.push(Tensor::raw(oshape, out), Op::Reduce { x, outer, len, inner, scale }, rg)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        self.reduce(x, axis, T::one(), false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let len = self.shape(x)[axis];
        self.reduce(x, axis, T::one() / T::from_usize(len).unwrap(), false)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n]);
        self.reduce(flat, 0, T::one(), false)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n]);
        self.reduce(flat, 0, T::one() / T::from_usize(n).unwrap(), false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let vx = self.value(x);
        assert_eq!(numel(shape), vx.len(), "reshape {:?} -> {shape:?}", vx.shape());
        let out = Tensor::raw(shape.to_vec(), vx.data().to_vec());
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Rows of length `row` gathered by `idx`; the result has `shape`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>, row: usize, shape: &[usize]) -> Var {
        let vx = self.value(x).data();
        assert_eq!(vx.len() % row, 0, "gather row length");
        assert_eq!(numel(shape), idx.len() * row, "gather output shape");
        let in_rows = vx.len() / row;
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx.iter() {
            assert!(i < in_rows, "gather index {i} out of range");
            out.extend_from_slice(&vx[i * row..(i + 1) * row]);
        }
        let rg = self.rg(x);
        self.push(Tensor::raw(shape.to_vec(), out), Op::Gather { x, idx, row }, rg)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(axes.len(), shape.len(), "permute rank");
        let idx = Arc::new(super::tensor::permute_index(&shape, axes));
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        self.gather_rows(x, idx, 1, &out_shape)
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa[..sa.len() - 1], sb[..sb.len() - 1], "concat leading extents");
        let la = *sa.last().unwrap();
        let lb = *sb.last().unwrap();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for (ra, rb) in va.chunks(la).zip(vb.chunks(lb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = la + lb;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::raw(shape, out), Op::ConcatCols { a, b, la, lb }, rg)
    }

    /// Slice `[start, start + len)` along the first axis.
    pub fn narrow0(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start + len <= shape[0] && len > 0, "narrow range");
        let inner: usize = shape[1..].iter().product();
        let offset = start * inner;
        let out = self.value(x).data()[offset..offset + len * inner].to_vec();
        let mut oshape = shape;
        oshape[0] = len;
        let rg = self.rg(x);
        self.push(Tensor::raw(oshape, out), Op::Narrow0 { x, offset }, rg)
    }

    /// `out[r] = x[r, idx[r]]` for a 2-d `x`.
    pub fn pick_cols(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 2, "pick_cols expects a matrix");
        let (r, l) = (shape[0], shape[1]);
        assert_eq!(idx.len(), r, "one index per row");
        let vx = self.value(x).data();
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < l, "column index {j} out of range");
                vx[i * l + j]
            })
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::raw(vec![r], out), Op::PickCols { x, idx }, rg)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        if !rv.is_finite() {
            return Err(Error::NonFinite("backward root".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if grads[i].is_some() => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                if let Some(ga) = buf(grads, nodes, *a) {
                    axpy(ga, gd, T::one());
                }
                if let Some(gb) = buf(grads, nodes, *b) {
                    axpy(gb, gd, T::one());
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = buf(grads, nodes, *a) {
                    axpy(ga, gd, T::one());
                }
                if let Some(gb) = buf(grads, nodes, *b) {
                    axpy(gb, gd, -T::one());
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = buf(grads, nodes, *a) {
                    for ((d, &gv), &bv) in ga.iter_mut().zip(gd).zip(val(*b).data()) {
                        *d += gv * bv;
                    }
                }
                if let Some(gb) = buf(grads, nodes, *b) {
                    for ((d, &gv), &av) in gb.iter_mut().zip(gd).zip(val(*a).data()) {
                        *d += gv * av;
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if let Some(ga) = buf(grads, nodes, *a) {
                    for ((d, &gv), &bv) in ga.iter_mut().zip(gd).zip(vb) {
                        *d += gv / bv;
                    }
                }
                if let Some(gb) = buf(grads, nodes, *b) {
                    for (((d, &gv), &av), &bv) in gb.iter_mut().zip(gd).zip(va).zip(vb) {
                        *d += -gv * av / (bv * bv);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = buf(grads, nodes, *a) {
                    axpy(ga, gd, T::one());
                }
                let l = val(*b).len();
                if let Some(gb) = buf(grads, nodes, *b) {
                    for row in gd.chunks(l) {
                        axpy(gb, row, T::one());
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = buf(grads, nodes, *a) {
                    axpy(ga, gd, *s);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = buf(grads, nodes, *a) {
                    axpy(ga, gd, T::one());
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (val(*x), val(*w));
                let (din, dout) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.len() / din;
                if let Some(gx) = buf(grads, nodes, *x) {
                    gemm(rows, dout, din, gd, MatRef::rows(0, dout), vw.data(), MatRef::rows(0, dout).transposed(), gx, true);
                }
                if let Some(gw) = buf(grads, nodes, *w) {
                    gemm(din, rows, dout, vx.data(), MatRef::rows(0, din).transposed(), gd, MatRef::rows(0, dout), gw, true);
                }
                if let Some(b) = b {
                    if let Some(gb) = buf(grads, nodes, *b) {
                        for row in gd.chunks(dout) {
                            axpy(gb, row, T::one());
                        }
                    }
                }
            }
            Op::Bmm { a, b, ta, tb, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (val(*a), val(*b));
                let (sa, sb) = (va.shape(), vb.shape());
                let gref = |bi: usize| MatRef::rows(bi * m * n, n);
                if let Some(ga) = buf(grads, nodes, *a) {
                    for bi in 0..*batch {
                        let bm = bmm_ref(bi * sb[1] * sb[2], sb[2], *tb);
                        let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *ta {
                            gemm(k, n, m, vb.data(), bm, gd, gref(bi).transposed(), dst, true);
                        } else {
                            gemm(m, n, k, gd, gref(bi), vb.data(), bm.transposed(), dst, true);
                        }
                    }
                }
                if let Some(gb) = buf(grads, nodes, *b) {
                    for bi in 0..*batch {
                        let am = bmm_ref(bi * sa[1] * sa[2], sa[2], *ta);
                        let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *tb {
                            gemm(n, m, k, gd, gref(bi).transposed(), va.data(), am, dst, true);
                        } else {
                            gemm(k, m, n, va.data(), am.transposed(), gd, gref(bi), dst, true);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let l = val(*gamma).len();
                if let Some(gg) = buf(grads, nodes, *gamma) {
                    for (grow, hrow) in gd.chunks(l).zip(xhat.chunks(l)) {
                        for j in 0..l {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = buf(grads, nodes, *beta) {
                    for row in gd.chunks(l) {
                        axpy(gb, row, T::one());
                    }
                }
                let gam = val(*gamma).data();
                if let Some(gx) = buf(grads, nodes, *x) {
                    let inv_l = T::one() / T::from_usize(l).unwrap();
                    for (r, (grow, hrow)) in gd.chunks(l).zip(xhat.chunks(l)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..l {
                            let gh = grow[j] * gam[j];
                            s1 += gh;
                            s2 += gh * hrow[j];
                        }
                        let dst = &mut gx[r * l..(r + 1) * l];
                        for j in 0..l {
                            let gh = grow[j] * gam[j];
                            dst[j] += rstd[r] * (gh - (s1 + hrow[j] * s2) * inv_l);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = buf(grads, nodes, *x) {
                    for ((d, &gv), &xv) in gx.iter_mut().zip(gd).zip(val(*x).data()) {
                        *d += gv * gelu_grad(xv);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = buf(grads, nodes, *x) {
                    for ((d, &gv), &xv) in gx.iter_mut().zip(gd).zip(val(*x).data()) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let l = *nodes[i].value.shape().last().unwrap();
                if let Some(gx) = buf(grads, nodes, *x) {
                    for ((dst, grow), yrow) in gx.chunks_mut(l).zip(gd.chunks(l)).zip(y.chunks(l)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..l {
                            dst[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LogClamp { x, floor } => {
                if let Some(gx) = buf(grads, nodes, *x) {
                    for ((d, &gv), &xv) in gx.iter_mut().zip(gd).zip(val(*x).data()) {
                        if xv > *floor {
                            *d += gv / xv;
                        }
                    }
                }
            }
            Op::Reduce { x, outer, len, inner, scale } => {
                if let Some(gx) = buf(grads, nodes, *x) {
                    for o in 0..*outer {
                        let src = &gd[o * inner..(o + 1) * inner];
                        for l in 0..*len {
                            let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            axpy(dst, src, *scale);
                        }
                    }
                }
            }
            Op::Gather { x, idx, row } => {
                if let Some(gx) = buf(grads, nodes, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(&mut gx[src * row..(src + 1) * row], &gd[r * row..(r + 1) * row], T::one());
                    }
                }
            }
            Op::ConcatCols { a, b, la, lb } => {
                let w = la + lb;
                if let Some(ga) = buf(grads, nodes, *a) {
                    for (dst, grow) in ga.chunks_mut(*la).zip(gd.chunks(w)) {
                        axpy(dst, &grow[..*la], T::one());
                    }
                }
                if let Some(gb) = buf(grads, nodes, *b) {
                    for (dst, grow) in gb.chunks_mut(*lb).zip(gd.chunks(w)) {
                        axpy(dst, &grow[*la..], T::one());
                    }
                }
            }
            Op::Narrow0 { x, offset } => {
                if let Some(gx) = buf(grads, nodes, *x) {
                    axpy(&mut gx[*offset..offset + gd.len()], gd, T::one());
                }
            }
            Op::PickCols { x, idx } => {
                let l = val(*x).shape()[1];
                if let Some(gx) = buf(grads, nodes, *x) {
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * l + j] += gd[r];
                    }
                }
            }
        }
    }
}

fn bmm_ref(offset: usize, cols: usize, transposed: bool) -> MatRef {
    let m = MatRef::rows(offset, cols);
    if transposed {
        m.transposed()
    } else {
        m
    }
}

fn buf<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let slot = &mut grads[v.0];
    Some(slot.get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape())).data_mut())
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], src: &[T], a: T) {
    debug_assert_eq!(dst.len(), src.len());
    if a == T::one() {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    } else {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += a * s;
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_K) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Gradients produced by one backward pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().filter_map(|&(id, i)| self.grads[i].as_ref().map(|g| (id, g)))
    }
}
