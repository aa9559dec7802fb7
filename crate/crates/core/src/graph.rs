//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and whatever it needs for the backward sweep. Parameters live in a
//! [`ParamStore`] and enter the tape by reference, so building a graph never
//! copies weights. Values that enter as plain inputs (for instance the
//! previous interaction mask) are leaves and therefore never receive or pass
//! on gradients.

use std::collections::{BTreeMap, HashMap};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: BTreeMap::new() }
    }

    /// Registers a parameter. Panics on a duplicate name: parameter names are
    /// fixed by model construction code, never by user input.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn empty(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, other: &Grads<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a 2D convolution on a channel-last map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(in_h: usize, in_w: usize, in_c: usize, ksize: usize, stride: usize, pad: usize) -> Self {
        let out_h = (in_h + 2 * pad - ksize) / stride + 1;
        let out_w = (in_w + 2 * pad - ksize) / stride + 1;
        Self { in_h, in_w, in_c, ksize, stride, pad, out_h, out_w }
    }

    fn patch_len(&self) -> usize {
        self.ksize * self.ksize * self.in_c
    }

    /// `[out_h*out_w, k*k*in_c]` patch matrix, zero outside the image.
    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let pl = self.patch_len();
        let mut cols = vec![T::zero(); self.out_h * self.out_w * pl];
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut cols[(oy * self.out_w + ox) * pl..][..pl];
                for ky in 0..self.ksize {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for kx in 0..self.ksize {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * self.in_w + ix as usize) * self.in_c;
                        let dst = (ky * self.ksize + kx) * self.in_c;
                        row[dst..dst + self.in_c].copy_from_slice(&x[src..src + self.in_c]);
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let pl = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &cols[(oy * self.out_w + ox) * pl..][..pl];
                for ky in 0..self.ksize {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for kx in 0..self.ksize {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        let dst = (iy as usize * self.in_w + ix as usize) * self.in_c;
                        let src = (ky * self.ksize + kx) * self.in_c;
                        for c in 0..self.in_c {
                            dx[dst + c] += row[src + c];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear sampling taps for one axis (half-pixel centres, edge clamped).
#[derive(Clone, Debug)]
struct AxisTaps<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<T>,
}

impl<T: Scalar> AxisTaps<T> {
    fn new(src: usize, dst: usize) -> Self {
        let ratio = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let pos = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
            let l = (pos.floor() as usize).min(src - 1);
            let h = (l + 1).min(src - 1);
            lo.push(l);
            hi.push(h);
            frac.push(T::from_f64c(if l == h { 0.0 } else { pos - l as f64 }));
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resampling of a channel-last map `[h, w, c]`.
#[derive(Clone, Debug)]
pub struct Resampler<T> {
    src: (usize, usize),
    dst: (usize, usize),
    ys: AxisTaps<T>,
    xs: AxisTaps<T>,
}

impl<T: Scalar> Resampler<T> {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        Self { src, dst, ys: AxisTaps::new(src.0, dst.0), xs: AxisTaps::new(src.1, dst.1) }
    }

    pub fn apply(&self, x: &[T], c: usize) -> Vec<T> {
        let (_, sw) = self.src;
        let (dh, dw) = self.dst;
        let mut out = vec![T::zero(); dh * dw * c];
        for oy in 0..dh {
            let (y0, y1, fy) = (self.ys.lo[oy], self.ys.hi[oy], self.ys.frac[oy]);
            for ox in 0..dw {
                let (x0, x1, fx) = (self.xs.lo[ox], self.xs.hi[ox], self.xs.frac[ox]);
                let w00 = (T::one() - fy) * (T::one() - fx);
                let w01 = (T::one() - fy) * fx;
                let w10 = fy * (T::one() - fx);
                let w11 = fy * fx;
                let o = &mut out[(oy * dw + ox) * c..][..c];
                let p00 = &x[(y0 * sw + x0) * c..][..c];
                let p01 = &x[(y0 * sw + x1) * c..][..c];
                let p10 = &x[(y1 * sw + x0) * c..][..c];
                let p11 = &x[(y1 * sw + x1) * c..][..c];
                for k in 0..c {
                    o[k] = w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k];
                }
            }
        }
        out
    }

    fn backward(&self, g: &[T], c: usize, dx: &mut [T]) {
        let (_, sw) = self.src;
        let (dh, dw) = self.dst;
        for oy in 0..dh {
            let (y0, y1, fy) = (self.ys.lo[oy], self.ys.hi[oy], self.ys.frac[oy]);
            for ox in 0..dw {
                let (x0, x1, fx) = (self.xs.lo[ox], self.xs.hi[ox], self.xs.frac[ox]);
                let taps = [
                    (y0 * sw + x0, (T::one() - fy) * (T::one() - fx)),
                    (y0 * sw + x1, (T::one() - fy) * fx),
                    (y1 * sw + x0, fy * (T::one() - fx)),
                    (y1 * sw + x1, fy * fx),
                ];
                let go = &g[(oy * dw + ox) * c..][..c];
                for (idx, w) in taps {
                    if w == T::zero() {
                        continue;
                    }
                    let d = &mut dx[idx * c..][..c];
                    for k in 0..c {
                        d[k] += w * go[k];
                    }
                }
            }
        }
    }
}

/// Which entries take part in an attention call.
///
/// Key masks apply to every query row; `query_valid` marks rows that produce
/// output at all.
#[derive(Clone, Debug, Default)]
pub struct AttnMask {
    /// Soft key mask: if it would exclude every usable key, it is dropped.
    pub key_allowed: Option<Vec<bool>>,
    /// Hard key mask for padding entries: excluded keys never get weight.
    pub key_valid: Option<Vec<bool>>,
    pub query_valid: Option<Vec<bool>>,
}

impl AttnMask {
    /// Effective additive key mask (0 or -inf), shared by every query row.
    pub fn additive<T: Scalar>(&self, nk: usize) -> Vec<T> {
        let valid = |j: usize| self.key_valid.as_ref().is_none_or(|v| v[j]);
        let allowed = |j: usize| self.key_allowed.as_ref().is_none_or(|a| a[j]);
        let use_soft = (0..nk).any(|j| valid(j) && allowed(j));
        (0..nk)
            .map(|j| {
                let keep = valid(j) && (!use_soft || allowed(j));
                if keep { T::zero() } else { T::neg_infinity() }
            })
            .collect()
    }
}

/// Row softmax of `logits + additive` where `additive` is 0 or -inf.
///
/// Masked entries come out as exact zeros; a row with no unmasked entry is
/// all zeros. The fallback for over-restrictive soft masks is decided once per
/// call by [`AttnMask::additive`].
pub fn masked_softmax_row<T: Scalar>(logits: &[T], additive: &[T], out: &mut [T]) {
    let mut max = T::neg_infinity();
    for (o, (&s, &a)) in out.iter_mut().zip(logits.iter().zip(additive)) {
        *o = s + a;
        if *o > max {
            max = *o;
        }
    }
    if max == T::neg_infinity() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let mut sum = T::zero();
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

#[derive(Clone, Debug)]
struct AttnCache<T> {
    heads: usize,
    scale: T,
    nq: usize,
    nk: usize,
    /// `[heads, nq, nk]`
    probs: Vec<T>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    RowScale(Var, Vec<T>),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Relu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Attention { q: Var, k: Var, v: Var, cache: AttnCache<T> },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<T> },
    Resize { x: Var, sampler: Resampler<T>, c: usize },
    WindowPool { x: Var, taps: Vec<Vec<usize>>, c: usize },
    MaskLoss { logits: Var, dlogits: Vec<T> },
}

#[derive(Debug)]
enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

#[derive(Debug)]
struct Node<T> {
    value: Value<T>,
    op: Op<T>,
}

/// Recorded computation over borrowed parameters.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
}

fn mat_view(rows: usize, cols: usize, transposed: bool) -> (usize, usize, isize, isize) {
    if transposed {
        (cols, rows, 1, cols as isize)
    } else {
        (rows, cols, cols as isize, 1)
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Constant input; gradients stop here.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(ta.shape(), data).expect("shape");
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(ta.shape(), data).expect("shape");
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// Adds a `[c]` bias to every row of a `[.., c]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (_, c) = ta.rows_cols();
        assert_eq!(tb.len(), c, "add_bias: width mismatch");
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(a, bias))
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn row_scale(&mut self, a: Var, factors: Vec<T>) -> Var {
        let ta = self.value(a);
        let (rows, c) = ta.rows_cols();
        assert_eq!(rows, factors.len(), "row_scale: row count mismatch");
        let mut out = ta.clone();
        for (row, &f) in out.data_mut().chunks_mut(c).zip(&factors) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        self.push(out, Op::RowScale(a, factors))
    }

    /// Matrix product of the matrix views of `a` and `b`, optionally transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (ar, ac) = va.rows_cols();
        let (br, bc) = vb.rows_cols();
        let (m, k, rsa, csa) = mat_view(ar, ac, ta);
        let (k2, n, rsb, csb) = mat_view(br, bc, tb);
        assert_eq!(k, k2, "matmul: inner dimension mismatch ({m}x{k} * {k2}x{n})");
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), va.data(), rsa, csa, vb.data(), rsb, csb, T::zero(), &mut out, n as isize, 1);
        let out = Tensor::from_vec(&[m, n], out).expect("shape");
        self.push(out, Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Per-row layer normalisation with affine `[c]` parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = T::from_f64c(1e-5);
        let tx = self.value(x);
        let (rows, c) = tx.rows_cols();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let cf = T::from_usize(c).expect("width");
        let mut xhat = vec![T::zero(); rows * c];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            let row = &tx.data()[r * c..][..c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..c {
                let h = (row[i] - mean) * is;
                xhat[r * c + i] = h;
                out[r * c + i] = h * g[i] + b[i];
            }
        }
        let out = Tensor::from_vec(tx.shape(), out).expect("shape");
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Multi-head scaled dot-product attention without output projection.
    ///
    /// `q: [nq, d]`, `k: [nk, d]`, `v: [nk, dv]`; both `d` and `dv` split
    /// evenly into `heads`. Rows marked invalid in `mask.query_valid` output
    /// zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = tq.rows_cols();
        let (nk, dk) = tk.rows_cols();
        let (nv, dv) = tv.rows_cols();
        assert_eq!(d, dk, "attention: query/key width mismatch");
        assert_eq!(nk, nv, "attention: key/value count mismatch");
        assert!(heads > 0 && d % heads == 0 && dv % heads == 0, "attention: heads must divide widths");
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = T::one() / T::from_usize(dh).expect("width").sqrt();
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); nq * dv];
        if nk > 0 && nq > 0 {
            for m in [&mask.key_allowed, &mask.key_valid].into_iter().flatten() {
                assert_eq!(m.len(), nk, "attention: key mask length");
            }
            let additive: Vec<T> = mask.additive(nk);
            let mut logits = vec![T::zero(); nq * nk];
            for h in 0..heads {
                T::gemm(
                    nq, dh, nk, scale,
                    &tq.data()[h * dh..], d as isize, 1,
                    &tk.data()[h * dh..], 1, d as isize,
                    T::zero(), &mut logits, nk as isize, 1,
                );
                let p = &mut probs[h * nq * nk..][..nq * nk];
                for r in 0..nq {
                    if mask.query_valid.as_ref().is_some_and(|qv| !qv[r]) {
                        continue;
                    }
                    masked_softmax_row(&logits[r * nk..][..nk], &additive, &mut p[r * nk..][..nk]);
                }
                T::gemm(
                    nq, nk, dvh, T::one(),
                    p, nk as isize, 1,
                    &tv.data()[h * dvh..], dv as isize, 1,
                    T::zero(), &mut out[h * dvh..], dv as isize, 1,
                );
            }
        }
        let out = Tensor::from_vec(&[nq, dv], out).expect("shape");
        let cache = AttnCache { heads, scale, nq, nk, probs };
        self.push(out, Op::Attention { q, k, v, cache })
    }

    /// Post-softmax weights `[heads, nq, nk]` of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { cache, .. } => Some(&cache.probs),
            _ => None,
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let c = self.value(parts[0]).rows_cols().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, pc) = t.rows_cols();
            assert_eq!(pc, c, "concat_rows: width mismatch");
            data.extend_from_slice(t.data());
            rows += r;
        }
        let out = Tensor::from_vec(&[rows, c], data).expect("shape");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape).expect("reshape: element count");
        self.push(out, Op::Reshape(a))
    }

    /// Convolution of a channel-last map `[h, w, cin]` with a weight laid out
    /// `[k*k*cin, cout]` (kernel row, kernel column, input channel).
    pub fn conv2d(&mut self, x: Var, w: Var, ksize: usize, stride: usize, pad: usize) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        assert_eq!(s.len(), 3, "conv2d: input must be [h, w, c]");
        let geom = ConvGeom::new(s[0], s[1], s[2], ksize, stride, pad);
        let tw = self.value(w);
        let (wr, cout) = tw.rows_cols();
        assert_eq!(wr, geom.patch_len(), "conv2d: weight shape mismatch");
        let cols = geom.im2col(tx.data());
        let m = geom.out_h * geom.out_w;
        let out = crate::tensor::matmul(&cols, tw.data(), m, wr, cout);
        let out = Tensor::from_vec(&[geom.out_h, geom.out_w, cout], out).expect("shape");
        self.push(out, Op::Conv2d { x, w, geom, cols })
    }

    /// Bilinear resize of `[h, w, c]` to `[dh, dw, c]`.
    pub fn resize(&mut self, x: Var, dh: usize, dw: usize) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        assert_eq!(s.len(), 3, "resize: input must be [h, w, c]");
        let c = s[2];
        let sampler = Resampler::new((s[0], s[1]), (dh, dw));
        let out = sampler.apply(tx.data(), c);
        let out = Tensor::from_vec(&[dh, dw, c], out).expect("shape");
        self.push(out, Op::Resize { x, sampler, c })
    }

    /// Averages `(2r+1)^2` windows of `[h, w, c]` around each centre
    /// `(col, row)`, replicating edge pixels. Output `[n, c]`.
    pub fn window_pool(&mut self, x: Var, centres: &[(usize, usize)], r: usize) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        assert_eq!(s.len(), 3, "window_pool: input must be [h, w, c]");
        let (h, w, c) = (s[0], s[1], s[2]);
        let taps: Vec<Vec<usize>> = centres.iter().map(|&(cx, cy)| window_taps(cx, cy, r, h, w)).collect();
        let norm = T::one() / T::from_usize(taps.first().map_or(1, Vec::len)).expect("count");
        let mut out = vec![T::zero(); centres.len() * c];
        for (i, t) in taps.iter().enumerate() {
            let o = &mut out[i * c..][..c];
            for &idx in t {
                for (k, ov) in o.iter_mut().enumerate() {
                    *ov += tx.data()[idx * c + k];
                }
            }
            o.iter_mut().for_each(|v| *v *= norm);
        }
        let out = Tensor::from_vec(&[centres.len(), c], out).expect("shape");
        self.push(out, Op::WindowPool { x, taps, c })
    }

    /// Weighted BCE + soft Dice loss of sigmoid(`logits`) against a binary
    /// target; returns a `[1]` tensor.
    pub fn mask_loss(&mut self, logits: Var, target: &[T], cfg: &crate::training::LossConfig) -> Var {
        let z = self.value(logits).data();
        assert_eq!(z.len(), target.len(), "mask_loss: shape mismatch");
        let (loss, dlogits) = mask_loss_from_logits(z, target, cfg);
        self.push(Tensor::scalar(loss), Op::MaskLoss { logits, dlogits })
    }

    /// Runs the backward sweep from a scalar node and returns parameter
    /// gradients.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[root.0] = Some(vec![T::one(); self.value(root).len()]);
        let mut out = Grads::empty(self.params.len());
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let t = Tensor::from_vec(self.params.get(*id).shape(), g).expect("shape");
                    out.grads[id.0] = Some(t);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g, self.len_of(*a));
                    accumulate(&mut grads, *b, &g, self.len_of(*b));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let ga: Vec<T> = g.iter().zip(vb).map(|(&x, &y)| x * y).collect();
                    let gb: Vec<T> = g.iter().zip(va).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads, *a, &ga, ga.len());
                    accumulate(&mut grads, *b, &gb, gb.len());
                }
                Op::Scale(a, s) => {
                    let ga: Vec<T> = g.iter().map(|&x| x * *s).collect();
                    accumulate(&mut grads, *a, &ga, ga.len());
                }
                Op::AddBias(a, b) => {
                    accumulate(&mut grads, *a, &g, g.len());
                    let c = self.len_of(*b);
                    let mut gb = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        for (o, &x) in gb.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *b, &gb, c);
                }
                Op::RowScale(a, f) => {
                    let c = g.len() / f.len().max(1);
                    let mut ga = g.clone();
                    for (row, &s) in ga.chunks_mut(c.max(1)).zip(f) {
                        row.iter_mut().for_each(|x| *x *= s);
                    }
                    accumulate(&mut grads, *a, &ga, ga.len());
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (ar, ac) = va.rows_cols();
                    let (br, bc) = vb.rows_cols();
                    let (m, k, rsa, csa) = mat_view(ar, ac, *ta);
                    let (_, nn, rsb, csb) = mat_view(br, bc, *tb);
                    // d op(A) = dC op(B)^T, written through A's storage layout
                    let buf = grads[a.0].get_or_insert_with(|| vec![T::zero(); va.len()]);
                    let (rso, cso) = if *ta { (1, m as isize) } else { (k as isize, 1) };
                    T::gemm(m, nn, k, T::one(), &g, nn as isize, 1, vb.data(), csb, rsb, T::one(), buf, rso, cso);
                    // d op(B) = op(A)^T dC
                    let buf = grads[b.0].get_or_insert_with(|| vec![T::zero(); vb.len()]);
                    let (rso, cso) = if *tb { (1, k as isize) } else { (nn as isize, 1) };
                    T::gemm(k, m, nn, T::one(), va.data(), csa, rsa, &g, nn as isize, 1, T::one(), buf, rso, cso);
                }
                Op::Relu(a) => {
                    let va = self.value(*a).data();
                    let ga: Vec<T> =
                        g.iter().zip(va).map(|(&x, &v)| if v > T::zero() { x } else { T::zero() }).collect();
                    accumulate(&mut grads, *a, &ga, ga.len());
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(i)).data();
                    let ga: Vec<T> = g.iter().zip(y).map(|(&x, &s)| x * s * (T::one() - s)).collect();
                    accumulate(&mut grads, *a, &ga, ga.len());
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let c = self.len_of(*gamma);
                    let gam = self.value(*gamma).data();
                    let cf = T::from_usize(c).expect("width");
                    let mut gx = vec![T::zero(); g.len()];
                    let mut gg = vec![T::zero(); c];
                    let mut gbeta = vec![T::zero(); c];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * c..][..c];
                        let hr = &xhat[r * c..][..c];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                            gg[j] += gr[j] * hr[j];
                            gbeta[j] += gr[j];
                        }
                        mean_d /= cf;
                        mean_dh /= cf;
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            gx[r * c + j] = is * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                    accumulate(&mut grads, *x, &gx, gx.len());
                    accumulate(&mut grads, *gamma, &gg, c);
                    accumulate(&mut grads, *beta, &gbeta, c);
                }
                Op::Attention { q, k, v, cache } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, cache);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.len_of(p);
                        accumulate(&mut grads, p, &g[off..off + len], len);
                        off += len;
                    }
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, &g, g.len()),
                Op::Conv2d { x, w, geom, cols } => {
                    let tw = self.value(*w);
                    let (pl, cout) = tw.rows_cols();
                    let m = geom.out_h * geom.out_w;
                    let gw = grads[w.0].get_or_insert_with(|| vec![T::zero(); pl * cout]);
                    T::gemm(pl, m, cout, T::one(), cols, 1, pl as isize, &g, cout as isize, 1, T::one(), gw, cout as isize, 1);
                    if self.needs_grad(*x) {
                        let mut gcols = vec![T::zero(); m * pl];
                        T::gemm(m, cout, pl, T::one(), &g, cout as isize, 1, tw.data(), 1, cout as isize, T::zero(), &mut gcols, pl as isize, 1);
                        let gx = grads[x.0].get_or_insert_with(|| vec![T::zero(); geom.in_h * geom.in_w * geom.in_c]);
                        geom.col2im(&gcols, gx);
                    }
                }
                Op::Resize { x, sampler, c } => {
                    let len = self.len_of(*x);
                    let gx = grads[x.0].get_or_insert_with(|| vec![T::zero(); len]);
                    sampler.backward(&g, *c, gx);
                }
                Op::WindowPool { x, taps, c } => {
                    let len = self.len_of(*x);
                    let gx = grads[x.0].get_or_insert_with(|| vec![T::zero(); len]);
                    for (i, t) in taps.iter().enumerate() {
                        let norm = T::one() / T::from_usize(t.len()).expect("count");
                        let gi = &g[i * c..][..*c];
                        for &idx in t {
                            for k in 0..*c {
                                gx[idx * c + k] += gi[k] * norm;
                            }
                        }
                    }
                }
                Op::MaskLoss { logits, dlogits } => {
                    let s = g[0];
                    let gl: Vec<T> = dlogits.iter().map(|&d| d * s).collect();
                    accumulate(&mut grads, *logits, &gl, gl.len());
                }
            }
        }
        out
    }

    fn len_of(&self, v: Var) -> usize {
        self.value(v).len()
    }

    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Leaf)
    }

    fn attention_backward(&self, grads: &mut [Option<Vec<T>>], g: &[T], q: Var, k: Var, v: Var, cache: &AttnCache<T>) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let AttnCache { heads, scale, nq, nk, probs } = cache;
        let (heads, nq, nk, scale) = (*heads, *nq, *nk, *scale);
        if nq == 0 || nk == 0 {
            return;
        }
        let d = tq.rows_cols().1;
        let dv = tv.rows_cols().1;
        let (dh, dvh) = (d / heads, dv / heads);
        let mut gq = vec![T::zero(); nq * d];
        let mut gk = vec![T::zero(); nk * d];
        let mut gv = vec![T::zero(); nk * dv];
        let mut dp = vec![T::zero(); nq * nk];
        for h in 0..heads {
            let p = &probs[h * nq * nk..][..nq * nk];
            // dV_h = P^T dO_h
            T::gemm(nk, nq, dvh, T::one(), p, 1, nk as isize, &g[h * dvh..], dv as isize, 1, T::zero(), &mut gv[h * dvh..], dv as isize, 1);
            // dP = dO_h V_h^T
            T::gemm(nq, dvh, nk, T::one(), &g[h * dvh..], dv as isize, 1, &tv.data()[h * dvh..], 1, dv as isize, T::zero(), &mut dp, nk as isize, 1);
            for r in 0..nq {
                let pr = &p[r * nk..][..nk];
                let dr = &mut dp[r * nk..][..nk];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (dd, &pp) in dr.iter_mut().zip(pr) {
                    *dd = pp * (*dd - dot);
                }
            }
            // dQ_h = scale dS K_h ; dK_h = scale dS^T Q_h
            T::gemm(nq, nk, dh, scale, &dp, nk as isize, 1, &tk.data()[h * dh..], d as isize, 1, T::zero(), &mut gq[h * dh..], d as isize, 1);
            T::gemm(nk, nq, dh, scale, &dp, 1, nk as isize, &tq.data()[h * dh..], d as isize, 1, T::zero(), &mut gk[h * dh..], d as isize, 1);
        }
        accumulate(grads, q, &gq, gq.len());
        accumulate(grads, k, &gk, gk.len());
        accumulate(grads, v, &gv, gv.len());
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T], len: usize) {
    debug_assert_eq!(g.len(), len);
    match &mut grads[v.0] {
        Some(buf) => {
            for (a, &b) in buf.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Flat indices of the replicate-clamped `(2r+1)^2` window around `(cx, cy)`.
pub fn window_taps(cx: usize, cy: usize, r: usize, h: usize, w: usize) -> Vec<usize> {
    let mut taps = Vec::with_capacity((2 * r + 1) * (2 * r + 1));
    let r = r as isize;
    for dy in -r..=r {
        let y = (cy as isize + dy).clamp(0, h as isize - 1) as usize;
        for dx in -r..=r {
            let x = (cx as isize + dx).clamp(0, w as isize - 1) as usize;
            taps.push(y * w + x);
        }
    }
    taps
}

/// Loss value and its gradient with respect to the logits.
pub fn mask_loss_from_logits<T: Scalar>(
    z: &[T],
    target: &[T],
    cfg: &crate::training::LossConfig,
) -> (T, Vec<T>) {
    let n = T::from_usize(z.len().max(1)).expect("count");
    let lce = T::from_f64c(cfg.lambda_ce);
    let ldice = T::from_f64c(cfg.lambda_dice);
    let eps = T::from_f64c(cfg.dice_eps);
    let mut bce = T::zero();
    let mut sp = T::zero();
    let mut sg = T::zero();
    let mut spg = T::zero();
    let probs: Vec<T> = z.iter().map(|&x| sigmoid(x)).collect();
    for ((&x, &t), &p) in z.iter().zip(target).zip(&probs) {
        // softplus(x) - t x, written to avoid overflow
        bce += x.max(T::zero()) - t * x + (-x.abs()).exp().ln_1p();
        sp += p;
        sg += t;
        spg += p * t;
    }
    bce /= n;
    let two = T::from_f64c(2.0);
    let num = two * spg + eps;
    let den = sp + sg + eps;
    let dice = T::one() - num / den;
    let loss = lce * bce + ldice * dice;
    let grad = z
        .iter()
        .zip(target)
        .zip(&probs)
        .map(|((_, &t), &p)| {
            let d_bce = (p - t) / n;
            let d_dice_dp = -(two * t * den - num) / (den * den);
            lce * d_bce + ldice * d_dice_dp * p * (T::one() - p)
        })
        .collect();
    (loss, grad)
}
