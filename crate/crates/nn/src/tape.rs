//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse, pushing
//! adjoints to inputs, and returns gradients for every parameter leaf that
//! was pulled from a [`ParamStore`].

use crate::error::NnError;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    BiasChannels { x: Var, b: Var },
    BiasRows { x: Var, b: Var },
    Linear { x: Var, w: Var },
    MatMul { a: Var, b: Var },
    MatMulT { a: Var, b: Var },
    Conv1d { x: Var, w: Var, stride: usize, pad: usize },
    Relu(Var),
    Gelu(Var),
    MaxPool1d { x: Var, argmax: Vec<usize> },
    MeanLast(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Scale { x: Var, c: T },
    MulConst { x: Var, mask: Vec<T> },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    WeightedBce { z: Var, label: T, pos_weight: T },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Parameter gradients from one backward pass, laid out like the store.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub flat: Vec<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, ParamId, usize)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let x3 = x * x * x;
    let u = k * (x + a * x3);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let du = k * (T::one() + T::of(3.0) * a * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * du;
    (y, dy)
}

fn shape_err<T>(msg: String) -> Result<T, NnError> {
    Err(NnError::Shape(msg))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; receives no gradient of interest.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf holding a copy of a parameter block.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let e = store.entry(id);
        let value = Tensor::from_vec(&e.shape, store.slice(id).to_vec())
            .expect("parameter layout is consistent");
        let v = self.push(value, Op::Leaf);
        self.params.push((v, id, e.offset));
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = va.iter().zip(vb).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `[B, C, L] + b[C]`
    pub fn bias_channels(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(b) != [s[1]] {
            return shape_err(format!("bias_channels {s:?} with {:?}", self.shape(b)));
        }
        let (c, l) = (s[1], s[2]);
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(l).enumerate() {
            let bv = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(out, Op::BiasChannels { x, b }))
    }

    /// `[N, D] + b[D]`
    pub fn bias_rows(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || self.shape(b) != [s[1]] {
            return shape_err(format!("bias_rows {s:?} with {:?}", self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(s[1]) {
            row.iter_mut().zip(&bias).for_each(|(v, &bv)| *v += bv);
        }
        Ok(self.push(out, Op::BiasRows { x, b }))
    }

    /// `x[N, in] · w[out, in]ᵀ → [N, out]`
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var, NnError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return shape_err(format!("linear {sx:?} with weight {sw:?}"));
        }
        let out = matmul_t(self.value(x).data(), self.value(w).data(), sx[0], sx[1], sw[0]);
        let out = Tensor::from_vec(&[sx[0], sw[0]], out)?;
        Ok(self.push(out, Op::Linear { x, w }))
    }

    /// `a[n, k] · b[k, m] → [n, m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        let out = Tensor::from_vec(&[sa[0], sb[1]], out)?;
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    /// `a[n, k] · b[m, k]ᵀ → [n, m]`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return shape_err(format!("matmul_t {sa:?} x {sb:?}ᵀ"));
        }
        let out = matmul_t(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[0]);
        let out = Tensor::from_vec(&[sa[0], sb[0]], out)?;
        Ok(self.push(out, Op::MatMulT { a, b }))
    }

    /// Cross-correlation `x[B, Cin, L]` with `w[Cout, Cin, K]`, zero padding.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, NnError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || stride == 0 {
            return shape_err(format!("conv1d input {sx:?} with kernel {sw:?}"));
        }
        let (b, cin, l) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if l + 2 * pad < k {
            return shape_err(format!("conv1d input length {l} shorter than kernel {k}"));
        }
        let lout = (l + 2 * pad - k) / stride + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); b * cout * lout];
        for bi in 0..b {
            for co in 0..cout {
                let o = &mut out[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                for ci in 0..cin {
                    let xr = &xv[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                    for kk in 0..k {
                        let wk = wv[(co * cin + ci) * k + kk];
                        let (t0, t1) = conv_range(l, lout, stride, pad, kk);
                        for t in t0..t1 {
                            o[t] += wk * xr[t * stride + kk - pad];
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[b, cout, lout], out)?;
        Ok(self.push(out, Op::Conv1d { x, w, stride, pad }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu(v).0);
        self.push(out, Op::Gelu(x))
    }

    /// Max pooling over the last axis of `[B, C, L]`; padding never wins.
    pub fn max_pool1d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || stride == 0 || k == 0 || s[2] + 2 * pad < k || pad >= k {
            return shape_err(format!("max_pool1d({k},{stride},{pad}) on {s:?}"));
        }
        let (rows, l) = (s[0] * s[1], s[2]);
        let lout = (l + 2 * pad - k) / stride + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * lout);
        let mut argmax = Vec::with_capacity(rows * lout);
        for r in 0..rows {
            let row = &xv[r * l..(r + 1) * l];
            for t in 0..lout {
                let start = (t * stride) as isize - pad as isize;
                let lo = start.max(0) as usize;
                let hi = ((start + k as isize) as usize).min(l);
                let mut best = lo;
                for i in lo + 1..hi {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                out.push(row[best]);
                argmax.push(r * l + best);
            }
        }
        let out = Tensor::from_vec(&[s[0], s[1], lout], out)?;
        Ok(self.push(out, Op::MaxPool1d { x, argmax }))
    }

    /// Mean over the last axis: `[B, C, L] → [B, C]`.
    pub fn mean_last(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[2] == 0 {
            return shape_err(format!("mean_last on {s:?}"));
        }
        let inv = T::one() / T::of(s[2] as f64);
        let data = self
            .value(x)
            .data()
            .chunks(s[2])
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[s[0], s[1]], data)?;
        Ok(self.push(out, Op::MeanLast(x)))
    }

    /// `[N, D_i]...` → `[N, ΣD_i]`
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, NnError> {
        let n = match xs.first() {
            Some(&v) if self.shape(v).len() == 2 => self.shape(v)[0],
            _ => return shape_err("concat_cols needs matrices".into()),
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != n {
                return shape_err(format!("concat_cols row mismatch {s:?}"));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&v, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_vec(&[n, total], data)?;
        Ok(self.push(out, Op::ConcatCols(xs.to_vec())))
    }

    /// `[N_i, D]...` → `[ΣN_i, D]`
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, NnError> {
        let d = match xs.first() {
            Some(&v) if self.shape(v).len() == 2 => self.shape(v)[1],
            _ => return shape_err("concat_rows needs matrices".into()),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            if s.len() != 2 || s[1] != d {
                return shape_err(format!("concat_rows width mismatch {s:?}"));
            }
            rows += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let out = Tensor::from_vec(&[rows, d], data)?;
        Ok(self.push(out, Op::ConcatRows(xs.to_vec())))
    }

    /// Columns `start..start+len` of `[N, D]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return shape_err(format!("slice_cols {start}+{len} of {s:?}"));
        }
        let mut data = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            data.extend_from_slice(&self.value(x).data()[r * s[1] + start..r * s[1] + start + len]);
        }
        let out = Tensor::from_vec(&[s[0], len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    /// Rows `start..start+len` of `[N, D]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return shape_err(format!("slice_rows {start}+{len} of {s:?}"));
        }
        let data = self.value(x).data()[start * s[1]..(start + len) * s[1]].to_vec();
        let out = Tensor::from_vec(&[len, s[1]], data)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    /// Element-wise product with a constant mask (dropout).
    pub fn mul_const(&mut self, x: Var, mask: Vec<T>) -> Result<Var, NnError> {
        if mask.len() != self.value(x).len() {
            return shape_err("mask length mismatch".into());
        }
        let data = self.value(x).data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::from_vec(self.shape(x), data)?;
        Ok(self.push(out, Op::MulConst { x, mask }))
    }

    /// Row-wise softmax of `[N, M]`.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return shape_err(format!("softmax_rows on {s:?}"));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(s[1]) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Layer normalisation over the last axis of `[N, D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return shape_err(format!("layer_norm on {s:?}"));
        }
        let d = s[1];
        let inv_d = T::one() / T::of(d as f64);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(s[0] * d);
        let mut rstd = Vec::with_capacity(s[0]);
        let mut out = Vec::with_capacity(s[0] * d);
        for row in self.value(x).data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + bt[j]);
            }
        }
        let out = Tensor::from_vec(&s, out)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Weighted binary cross-entropy on a single logit.
    pub fn weighted_bce(&mut self, z: Var, label: bool, pos_weight: T) -> Result<Var, NnError> {
        if self.value(z).len() != 1 {
            return shape_err(format!("weighted_bce expects one logit, got {:?}", self.shape(z)));
        }
        let y = if label { T::one() } else { T::zero() };
        let loss = crate::loss::weighted_bce(self.value(z).data()[0], y, pos_weight);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                z,
                label: y,
                pos_weight,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>, NnError> {
        if loss.0 >= self.nodes.len() {
            return Err(NnError::Differentiation("loss is not on this tape".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NnError::Differentiation(format!(
                "loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(NnError::Differentiation("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut flat = vec![T::zero(); store.len()];
        for &(v, id, offset) in &self.params {
            if v.0 > loss.0 {
                continue;
            }
            if let Some(g) = &grads[v.0] {
                let n = store.entry(id).len();
                for (dst, &src) in flat[offset..offset + n].iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(NnError::Differentiation("gradient is not finite".into()));
        }
        Ok(Gradients { flat })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, self, |d| add_into(d, g));
                acc(grads, *b, self, |d| add_into(d, g));
            }
            Op::BiasChannels { x, b } => {
                acc(grads, *x, self, |d| add_into(d, g));
                let s = node.value.shape();
                let (c, l) = (s[1], s[2]);
                acc(grads, *b, self, |d| {
                    for (r, chunk) in g.chunks(l).enumerate() {
                        d[r % c] += chunk.iter().copied().sum::<T>();
                    }
                });
            }
            Op::BiasRows { x, b } => {
                acc(grads, *x, self, |d| add_into(d, g));
                let w = node.value.shape()[1];
                acc(grads, *b, self, |d| {
                    for row in g.chunks(w) {
                        add_into(d, row);
                    }
                });
            }
            Op::Linear { x, w } => {
                let (n, k) = (shp(*x)[0], shp(*x)[1]);
                let m = shp(*w)[0];
                // dx = g · w ; dw = gᵀ · x
                acc(grads, *x, self, |d| add_into(d, &matmul(g, val(*w), n, m, k)));
                acc(grads, *w, self, |d| add_into(d, &matmul_tn(g, val(*x), n, m, k)));
            }
            Op::MatMul { a, b } => {
                let (n, k) = (shp(*a)[0], shp(*a)[1]);
                let m = shp(*b)[1];
                // da = g · bᵀ ; db = aᵀ · g
                acc(grads, *a, self, |d| add_into(d, &matmul_t(g, val(*b), n, m, k)));
                acc(grads, *b, self, |d| add_into(d, &matmul_tn(val(*a), g, n, k, m)));
            }
            Op::MatMulT { a, b } => {
                let (n, k) = (shp(*a)[0], shp(*a)[1]);
                let m = shp(*b)[0];
                // out = a bᵀ: da = g · b ; db = gᵀ · a
                acc(grads, *a, self, |d| add_into(d, &matmul(g, val(*b), n, m, k)));
                acc(grads, *b, self, |d| add_into(d, &matmul_tn(g, val(*a), n, m, k)));
            }
            Op::Conv1d { x, w, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let sx = shp(*x);
                let (b, cin, l) = (sx[0], sx[1], sx[2]);
                let sw = shp(*w);
                let (cout, k) = (sw[0], sw[2]);
                let lout = node.value.shape()[2];
                let xv = val(*x);
                let wv = val(*w);
                acc(grads, *x, self, |dx| {
                    for bi in 0..b {
                        for co in 0..cout {
                            let gr = &g[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                            for ci in 0..cin {
                                let dxr = &mut dx[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                                for kk in 0..k {
                                    let wk = wv[(co * cin + ci) * k + kk];
                                    let (t0, t1) = conv_range(l, lout, stride, pad, kk);
                                    for t in t0..t1 {
                                        dxr[t * stride + kk - pad] += wk * gr[t];
                                    }
                                }
                            }
                        }
                    }
                });
                acc(grads, *w, self, |dw| {
                    for bi in 0..b {
                        for co in 0..cout {
                            let gr = &g[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                            for ci in 0..cin {
                                let xr = &xv[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                                for kk in 0..k {
                                    let (t0, t1) = conv_range(l, lout, stride, pad, kk);
                                    let mut s = T::zero();
                                    for t in t0..t1 {
                                        s += gr[t] * xr[t * stride + kk - pad];
                                    }
                                    dw[(co * cin + ci) * k + kk] += s;
                                }
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(grads, *x, self, |d| {
                    for ((dv, &gv), &xi) in d.iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(grads, *x, self, |d| {
                    for ((dv, &gv), &xi) in d.iter_mut().zip(g).zip(xv) {
                        *dv += gv * gelu(xi).1;
                    }
                });
            }
            Op::MaxPool1d { x, argmax } => {
                acc(grads, *x, self, |d| {
                    for (&idx, &gv) in argmax.iter().zip(g) {
                        d[idx] += gv;
                    }
                });
            }
            Op::MeanLast(x) => {
                let l = shp(*x)[2];
                let inv = T::one() / T::of(l as f64);
                acc(grads, *x, self, |d| {
                    for (chunk, &gv) in d.chunks_mut(l).zip(g) {
                        chunk.iter_mut().for_each(|v| *v += gv * inv);
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let (n, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut start = 0;
                for &v in xs {
                    let w = shp(v)[1];
                    acc(grads, v, self, |d| {
                        for r in 0..n {
                            add_into(&mut d[r * w..(r + 1) * w], &g[r * total + start..r * total + start + w]);
                        }
                    });
                    start += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut start = 0;
                for &v in xs {
                    let len = self.nodes[v.0].value.len();
                    acc(grads, v, self, |d| add_into(d, &g[start..start + len]));
                    start += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, dwid) = (shp(*x)[0], shp(*x)[1]);
                let len = node.value.shape()[1];
                acc(grads, *x, self, |d| {
                    for r in 0..n {
                        add_into(&mut d[r * dwid + start..r * dwid + start + len], &g[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let w = shp(*x)[1];
                acc(grads, *x, self, |d| add_into(&mut d[start * w..start * w + g.len()], g));
            }
            Op::Reshape(x) => acc(grads, *x, self, |d| add_into(d, g)),
            Op::Scale { x, c } => {
                acc(grads, *x, self, |d| {
                    d.iter_mut().zip(g).for_each(|(dv, &gv)| *dv += gv * *c);
                });
            }
            Op::MulConst { x, mask } => {
                acc(grads, *x, self, |d| {
                    for ((dv, &gv), &m) in d.iter_mut().zip(g).zip(mask) {
                        *dv += gv * m;
                    }
                });
            }
            Op::Softmax(x) => {
                let m = node.value.shape()[1];
                let y = node.value.data();
                acc(grads, *x, self, |d| {
                    for ((dr, gr), yr) in d.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let dwid = node.value.shape()[1];
                let gam = val(*gamma);
                let inv_d = T::one() / T::of(dwid as f64);
                acc(grads, *x, self, |d| {
                    for (r, (dr, gr)) in d.chunks_mut(dwid).zip(g.chunks(dwid)).enumerate() {
                        let xh = &xhat[r * dwid..(r + 1) * dwid];
                        let dxh: Vec<T> = gr.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let s1: T = dxh.iter().copied().sum();
                        let s2: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        for j in 0..dwid {
                            dr[j] += rstd[r] * (dxh[j] - (s1 + xh[j] * s2) * inv_d);
                        }
                    }
                });
                acc(grads, *gamma, self, |d| {
                    for (gr, xh) in g.chunks(dwid).zip(xhat.chunks(dwid)) {
                        for j in 0..dwid {
                            d[j] += gr[j] * xh[j];
                        }
                    }
                });
                acc(grads, *beta, self, |d| {
                    for gr in g.chunks(dwid) {
                        add_into(d, gr);
                    }
                });
            }
            Op::WeightedBce { z, label, pos_weight } => {
                let zv = val(*z)[0];
                let dz = crate::loss::weighted_bce_grad(zv, *label, *pos_weight);
                acc(grads, *z, self, |d| d[0] += g[0] * dz);
            }
            Op::Sum(x) => {
                acc(grads, *x, self, |d| d.iter_mut().for_each(|v| *v += g[0]));
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, tape: &Tape<T>, f: impl FnOnce(&mut [T])) {
    let slot = &mut grads[v.0];
    let buf = slot.get_or_insert_with(|| vec![T::zero(); tape.nodes[v.0].value.len()]);
    f(buf);
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Output positions `t` for which `t*stride + kk - pad` lies in `0..l`.
fn conv_range(l: usize, lout: usize, stride: usize, pad: usize, kk: usize) -> (usize, usize) {
    let t0 = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
    // t*stride + kk - pad <= l - 1
    let t1 = if l + pad < kk + 1 {
        0
    } else {
        ((l + pad - kk - 1) / stride + 1).min(lout)
    };
    (t0.min(t1), t1)
}

/// `a[n, k] · b[k, m]`
fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let br = &b[p * m..(p + 1) * m];
            o.iter_mut().zip(br).for_each(|(ov, &bv)| *ov += av * bv);
        }
    }
    out
}

/// `a[n, k] · b[m, k]ᵀ`
fn matmul_t<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let br = &b[j * k..(j + 1) * k];
            out[i * m + j] = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `a[n, p]ᵀ · b[n, q] → [p, q]`
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], n: usize, p: usize, q: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * q];
    for r in 0..n {
        let ar = &a[r * p..(r + 1) * p];
        let br = &b[r * q..(r + 1) * q];
        for (i, &av) in ar.iter().enumerate() {
            let o = &mut out[i * q..(i + 1) * q];
            o.iter_mut().zip(br).for_each(|(ov, &bv)| *ov += av * bv);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_range_matches_bounds_check() {
        for l in 1..12 {
            for k in 1..6 {
                for pad in 0..k {
                    for stride in 1..4 {
                        if l + 2 * pad < k {
                            continue;
                        }
                        let lout = (l + 2 * pad - k) / stride + 1;
                        for kk in 0..k {
                            let (t0, t1) = conv_range(l, lout, stride, pad, kk);
                            for t in 0..lout {
                                let idx = (t * stride + kk) as isize - pad as isize;
                                let valid = idx >= 0 && (idx as usize) < l;
                                assert_eq!(valid, t >= t0 && t < t1, "l={l} k={k} p={pad} s={stride} kk={kk} t={t}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv1d_hand_example() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 4], &[1., 2., 3., 4.]));
        let w = tape.constant(t(&[1, 1, 3], &[1., 0., -1.]));
        let y = tape.conv1d(x, w, 1, 1).unwrap();
        // padded: 0 1 2 3 4 0
        assert_eq!(tape.value(y).data(), &[-2., -2., -2., 3.]);
        let y2 = tape.conv1d(x, w, 2, 1).unwrap();
        assert_eq!(tape.value(y2).data(), &[-2., -2.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., -1., 0., 1000.]));
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_ignores_padding() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 4], &[-5., -1., -3., -2.]));
        let y = tape.max_pool1d(x, 3, 2, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[-1., -1.]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = rand::rng();
        let id = ps.register("w", &[3], crate::params::Init::Normal { sd: 1.0 }, &mut rng);
        let mut tape = Tape::new();
        let _w = tape.param(&ps, id);
        let c = tape.constant(t(&[2], &[1., 2.]));
        let loss = tape.sum(c);
        let g = tape.backward(loss, &ps).unwrap();
        assert!(g.flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_nan() {
        let ps = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1., 2.]));
        assert!(tape.backward(c, &ps).is_err());
        let n = tape.constant(t(&[1], &[f64::NAN]));
        assert!(matches!(tape.backward(n, &ps), Err(NnError::Differentiation(_))));
    }
}
