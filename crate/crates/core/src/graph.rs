//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every executed op in creation order, so the node list
//! is already topologically sorted and [`Graph::backward`] is a single reverse
//! sweep. Leaves either borrow parameter tensors (no copy) or own constant
//! data. Nodes that cannot reach a trainable leaf are skipped on the way back.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        /// Element offsets of (a, b) for every output batch item.
        pairs: Vec<(usize, usize)>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Silu(Var),
    Softplus(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<T>,
    },
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    BroadcastTo(Var),
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Cumsum {
        a: Var,
        axis: usize,
    },
    Segsum(Var),
    DecayScan {
        states: Var,
        log_decay: Var,
    },
    CausalMask(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherLast {
        a: Var,
        idx: Vec<usize>,
    },
    CausalConv {
        x: Var,
        w: Var,
    },
    ExpertMix {
        xp: Var,
        gate: Var,
        w: Var,
        v: Var,
        u: Var,
        ids: Vec<usize>,
        /// Pre-activation dot products `x·w` and `x·v` per (row, slot).
        hw: Vec<T>,
        hv: Vec<T>,
    },
    Rope {
        a: Var,
        /// cos/sin per (position row, pair), shape [l, d/2].
        cos: Vec<T>,
        sin: Vec<T>,
    },
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        total_weight: T,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed ops.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reads `src` through an arbitrary strided view into a dense row-major buffer.
fn gather_strided<T: Real>(src: &[T], base: usize, shape: &[usize], src_strides: &[usize]) -> Vec<T> {
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    if shape.is_empty() {
        out.push(src[base]);
        return out;
    }
    let rank = shape.len();
    let inner = shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut off = base;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&src[off..off + inner]);
        } else {
            out.extend((0..inner).map(|i| src[off + i * inner_stride]));
        }
        // odometer over the outer dims
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Adjoint of [`gather_strided`]: adds a dense buffer into a strided view.
fn scatter_add_strided<T: Real>(
    dst: &mut [T],
    base: usize,
    shape: &[usize],
    dst_strides: &[usize],
    vals: &[T],
) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    if shape.is_empty() {
        dst[base] += vals[0];
        return;
    }
    let rank = shape.len();
    let inner = shape[rank - 1];
    let inner_stride = dst_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut off = base;
    let mut pos = 0;
    loop {
        for i in 0..inner {
            dst[off + i * inner_stride] += vals[pos + i];
        }
        pos += inner;
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            off += dst_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= dst_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn acc<'g, T: Real>(grads: &'g mut [Option<Vec<T>>], id: usize, len: usize) -> &'g mut [T] {
    grads[id].get_or_insert_with(|| vec![T::ZERO; len])
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape invariant")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that borrows `t`; trainable iff `t.requires_grad`.
    pub fn input(&mut self, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t.data()),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            value: Cow::Owned(t.into_data()),
            shape,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf that does receive a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        let v = self.constant(t);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                what: what.to_string(),
                step: 0,
            })
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// Batched matrix product `[..., m, k] x [..., k, n]`; batch extents
    /// broadcast when equal or one of them is 1 (or absent).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for i in 0..rank {
            if pa[i] == pb[i] || pb[i] == 1 {
                batch.push(pa[i]);
            } else if pa[i] == 1 {
                batch.push(pb[i]);
            } else {
                return Err(Error::dim("matmul", &sa, &sb));
            }
        }
        let nbatch: usize = batch.iter().product();
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);

        // Shared right operand: fold the whole left batch into rows.
        let (m_eff, pairs) = if bb.iter().product::<usize>() == 1 && ba.len() == rank {
            (m * nbatch, vec![(0usize, 0usize)])
        } else {
            let sta = strides(&pa);
            let stb = strides(&pb);
            let mut pairs = Vec::with_capacity(nbatch);
            let mut idx = vec![0usize; rank];
            for _ in 0..nbatch {
                let mut oa = 0;
                let mut ob = 0;
                for d in 0..rank {
                    if pa[d] != 1 {
                        oa += idx[d] * sta[d];
                    }
                    if pb[d] != 1 {
                        ob += idx[d] * stb[d];
                    }
                }
                pairs.push((oa * m * k, ob * k * n));
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    if idx[d] < batch[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            (m, pairs)
        };

        let mut out = vec![T::ZERO; out_shape.iter().product()];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for (i, &(oa, ob)) in pairs.iter().enumerate() {
                let oc = i * m_eff * n;
                T::gemm(
                    m_eff,
                    k,
                    n,
                    T::ONE,
                    &av[oa..],
                    k as isize,
                    1,
                    &bv[ob..],
                    n as isize,
                    1,
                    T::ZERO,
                    &mut out[oc..],
                    n as isize,
                    1,
                );
            }
        }
        Ok(self.push(
            out,
            out_shape,
            Op::MatMul {
                a,
                b,
                m: m_eff,
                k,
                n,
                pairs,
            },
            &[a, b],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<T>, Vec<usize>)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((out, self.shape(a).to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, s, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, s, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, s, Op::Mul(a, b), &[a, b]))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        let s = self.shape(a).to_vec();
        self.push(v, s, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::ONE)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x.silu())
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), |x| x.softplus())
    }

    // ---- normalization --------------------------------------------------

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("softmax", &shape, &[]))?;
        if d == 0 {
            return Err(Error::dim("softmax", &shape, &[]));
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(d) {
            softmax_row(row);
        }
        Ok(self.push(out, shape, Op::Softmax(a), &[a]))
    }

    /// `x / sqrt(mean(x^2) + eps) * w` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(w) != [d] || d == 0 {
            return Err(Error::dim("rmsnorm", &shape, self.shape(w)));
        }
        if eps < T::ZERO {
            return Err(Error::config("rmsnorm.eps", "must be non-negative"));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let dn = T::from_f64(d as f64);
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_rms = Vec::with_capacity(xv.len() / d);
        for row in xv.chunks(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
            let r = T::ONE / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(wv).map(|(&v, &g)| v * r * g));
        }
        Ok(self.push(out, shape, Op::RmsNorm { x, w, inv_rms }, &[x, w]))
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let v = self.value(a).to_vec();
        Ok(self.push(v, shape.to_vec(), Op::Reshape(a), &[a]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", &shape, perm));
        }
        let st = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src_st: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let out = gather_strided(self.value(a), 0, &out_shape, &src_st);
        Ok(self.push(
            out,
            out_shape,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        ))
    }

    /// Explicit expand: every axis of `a` must equal the target or be 1.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != shape.len() || sa.iter().zip(shape).any(|(&x, &y)| x != y && x != 1) {
            return Err(Error::dim("broadcast_to", &sa, shape));
        }
        let st = strides(&sa);
        let src_st: Vec<usize> = sa.iter().zip(&st).map(|(&n, &s)| if n == 1 { 0 } else { s }).collect();
        let out = gather_strided(self.value(a), 0, shape, &src_st);
        Ok(self.push(out, shape.to_vec(), Op::BroadcastTo(a), &[a]))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Range(format!(
                "slice [{start}, {}) of axis {axis} in {shape:?}",
                start + len
            )));
        }
        let st = strides(&shape);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = gather_strided(self.value(a), start * st[axis], &out_shape, &st);
        Ok(self.push(out, out_shape, Op::Slice { a, axis, start }, &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &n)| i != axis && n != first[i]) {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let st = strides(&out_shape);
        let mut out = vec![T::ZERO; out_shape.iter().product()];
        let mut start = 0;
        for &p in parts {
            let s = self.shape(p).to_vec();
            scatter_add_strided(&mut out, start * st[axis], &s, &st, self.value(p));
            start += s[axis];
        }
        Ok(self.push(
            out,
            out_shape,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    // ---- scans ----------------------------------------------------------

    /// Inclusive prefix sum along `axis`.
    pub fn cumsum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("cumsum", &shape, &[axis]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = self.value(a).to_vec();
        for o in 0..outer {
            let base = o * n * inner;
            for t in 1..n {
                for i in 0..inner {
                    let prev = out[base + (t - 1) * inner + i];
                    out[base + t * inner + i] += prev;
                }
            }
        }
        Ok(self.push(out, shape, Op::Cumsum { a, axis }, &[a]))
    }

    /// `[..., l] -> [..., l, l]` with `out[i, j] = sum(a[j+1..=i])` on and
    /// below the diagonal and `-inf` above it.
    pub fn segsum(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let l = *shape.last().ok_or_else(|| Error::dim("segsum", &shape, &[]))?;
        let av = self.value(a);
        let rows = av.len() / l.max(1);
        let mut out = vec![T::NEG_INFINITY; rows * l * l];
        for r in 0..rows {
            let src = &av[r * l..(r + 1) * l];
            let dst = &mut out[r * l * l..(r + 1) * l * l];
            for j in 0..l {
                let mut s = T::ZERO;
                dst[j * l + j] = s;
                for i in j + 1..l {
                    s += src[i];
                    dst[i * l + j] = s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.push(l);
        Ok(self.push(out, out_shape, Op::Segsum(a), &[a]))
    }

    /// Exclusive decayed scan over chunks: `states [R, c, n]`,
    /// `log_decay [R, c]`; returns `H [R, c, n]` with `H_0 = 0` and
    /// `H_k = exp(log_decay_{k-1}) * H_{k-1} + states_{k-1}`.
    pub fn decay_scan(&mut self, states: Var, log_decay: Var) -> Result<Var> {
        let ss = self.shape(states).to_vec();
        let sd = self.shape(log_decay).to_vec();
        if ss.len() != 3 || sd != ss[..2] {
            return Err(Error::dim("decay_scan", &ss, &sd));
        }
        let (r, c, n) = (ss[0], ss[1], ss[2]);
        let sv = self.value(states);
        let dv = self.value(log_decay);
        let mut out = vec![T::ZERO; r * c * n];
        for ri in 0..r {
            for k in 1..c {
                let g = dv[ri * c + k - 1].exp();
                for e in 0..n {
                    let prev = out[(ri * c + k - 1) * n + e];
                    out[(ri * c + k) * n + e] = g * prev + sv[(ri * c + k - 1) * n + e];
                }
            }
        }
        Ok(self.push(out, ss, Op::DecayScan { states, log_decay }, &[states, log_decay]))
    }

    // ---- masking and indexing -------------------------------------------

    /// Fills entries strictly above the diagonal of the last two axes with `-inf`.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(Error::dim("causal_mask", &shape, &[]));
        }
        let l = shape[r - 1];
        let mut out = self.value(a).to_vec();
        for mat in out.chunks_mut(l * l) {
            for i in 0..l {
                for x in &mut mat[i * l + i + 1..(i + 1) * l] {
                    *x = T::NEG_INFINITY;
                }
            }
        }
        Ok(self.push(out, shape, Op::CausalMask(a), &[a]))
    }

    /// Row lookup: `table [V, d]`, `ids` laid out as `id_shape` -> `[id_shape.., d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], id_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || id_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("embedding", &ts, id_shape));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!("id {bad} out of range for table of {vocab} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut out_shape = id_shape.to_vec();
        out_shape.push(d);
        Ok(self.push(
            out,
            out_shape,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Per-row selection along the last axis: `a [.., n]`, `idx` holds `k`
    /// indices per row -> `[.., k]`.
    pub fn gather_last(&mut self, a: Var, idx: &[usize], k: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("gather_last", &shape, &[]))?;
        let rows = self.value(a).len() / n.max(1);
        if idx.len() != rows * k || idx.iter().any(|&i| i >= n) {
            return Err(Error::Range(format!("gather_last indices for shape {shape:?}")));
        }
        let av = self.value(a);
        let out: Vec<T> = idx
            .iter()
            .enumerate()
            .map(|(p, &i)| av[(p / k) * n + i])
            .collect();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = k;
        Ok(self.push(out, out_shape, Op::GatherLast { a, idx: idx.to_vec() }, &[a]))
    }

    /// Depthwise causal convolution over time: `x [b, l, c]`, `w [c, width]`,
    /// left-padded with zeros so `y_t` only sees `x_{t-width+1..=t}`.
    pub fn causal_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] {
            return Err(Error::dim("causal_conv", &sx, &sw));
        }
        let (b, l, c) = (sx[0], sx[1], sx[2]);
        let width = sw[1];
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![T::ZERO; b * l * c];
        for bi in 0..b {
            for t in 0..l {
                for j in 0..width {
                    // tap j reads x_{t - (width-1) + j}
                    let back = width - 1 - j;
                    if back > t {
                        continue;
                    }
                    let src = (bi * l + t - back) * c;
                    let dst = (bi * l + t) * c;
                    for ch in 0..c {
                        out[dst + ch] += wv[ch * width + j] * xv[src + ch];
                    }
                }
            }
        }
        Ok(self.push(out, sx, Op::CausalConv { x, w }, &[x, w]))
    }

    /// Sparse gated expert mixture. For row `t` with retrieved ids
    /// `ids[t*k..(t+1)*k]`:
    /// `out[t] = sum_j gate[t,j] * (x[t]·w[id]) * silu(x[t]·v[id]) * u[id]`.
    /// `x [rows, p]`, `gate [rows, k]`, `w, v [N, p]`, `u [N, m]` -> `[rows, m]`.
    pub fn expert_mix(&mut self, xp: Var, gate: Var, w: Var, v: Var, u: Var, ids: &[usize]) -> Result<Var> {
        let sx = self.shape(xp).to_vec();
        let sg = self.shape(gate).to_vec();
        let sw = self.shape(w).to_vec();
        let su = self.shape(u).to_vec();
        if sx.len() != 2 || sg.len() != 2 || sg[0] != sx[0] || sw.len() != 2 || sw[1] != sx[1] || self.shape(v) != sw.as_slice() || su.len() != 2 || su[0] != sw[0] {
            return Err(Error::dim("expert_mix", &sx, &sw));
        }
        let (rows, p, k, n, m) = (sx[0], sx[1], sg[1], sw[0], su[1]);
        if ids.len() != rows * k {
            return Err(Error::dim("expert_mix", &sg, &[ids.len()]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Range(format!("expert id {bad} out of range for {n} experts")));
        }
        let (xv, gv, wv, vv, uv) = (self.value(xp), self.value(gate), self.value(w), self.value(v), self.value(u));
        let mut hw = vec![T::ZERO; rows * k];
        let mut hv = vec![T::ZERO; rows * k];
        let mut out = vec![T::ZERO; rows * m];
        for t in 0..rows {
            let x = &xv[t * p..(t + 1) * p];
            let o = &mut out[t * m..(t + 1) * m];
            for j in 0..k {
                let e = ids[t * k + j];
                let a = dot(x, &wv[e * p..(e + 1) * p]);
                let b = dot(x, &vv[e * p..(e + 1) * p]);
                hw[t * k + j] = a;
                hv[t * k + j] = b;
                let c = gv[t * k + j] * a * b.silu();
                for (oi, &ui) in o.iter_mut().zip(&uv[e * m..(e + 1) * m]) {
                    *oi += c * ui;
                }
            }
        }
        Ok(self.push(
            out,
            vec![rows, m],
            Op::ExpertMix {
                xp,
                gate,
                w,
                v,
                u,
                ids: ids.to_vec(),
                hw,
                hv,
            },
            &[xp, gate, w, v, u],
        ))
    }

    /// Rotates adjacent pairs `(2i, 2i+1)` of `a [b, l, h, d]` by the given
    /// per-position angles (`cos`/`sin` laid out `[l, d/2]`).
    pub(crate) fn rotate_pairs(&mut self, a: Var, cos: Vec<T>, sin: Vec<T>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 || shape[3] % 2 != 0 || cos.len() != shape[1] * shape[3] / 2 {
            return Err(Error::dim("rope", &shape, &[cos.len()]));
        }
        let (b, l, h, d) = (shape[0], shape[1], shape[2], shape[3]);
        let half = d / 2;
        let av = self.value(a);
        let mut out = vec![T::ZERO; av.len()];
        for bi in 0..b {
            for t in 0..l {
                let (c, s) = (&cos[t * half..(t + 1) * half], &sin[t * half..(t + 1) * half]);
                for hi in 0..h {
                    let base = ((bi * l + t) * h + hi) * d;
                    for i in 0..half {
                        let (x0, x1) = (av[base + 2 * i], av[base + 2 * i + 1]);
                        out[base + 2 * i] = x0 * c[i] - x1 * s[i];
                        out[base + 2 * i + 1] = x0 * s[i] + x1 * c[i];
                    }
                }
            }
        }
        Ok(self.push(out, shape, Op::Rope { a, cos, sin }, &[a]))
    }

    // ---- reductions and losses ------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![s], vec![], Op::SumAll(a), &[a])
    }

    /// Weighted mean cross-entropy: `logits [.., V]` with one target and one
    /// weight per row. Rows with zero weight do not contribute.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().ok_or_else(|| Error::dim("cross_entropy", &shape, &[]))?;
        let rows = self.value(logits).len() / v.max(1);
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::dim("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!("target {t} out of range for {v} classes")));
        }
        let total_weight: T = weights.iter().copied().sum();
        if total_weight <= T::ZERO {
            return Err(Error::Contract("cross_entropy needs a positive total weight".into()));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::ZERO;
        for (r, row) in probs.chunks_mut(v).enumerate() {
            softmax_row(row);
            if weights[r] != T::ZERO {
                loss -= weights[r] * row[targets[r]].ln();
            }
        }
        Ok(self.push(
            vec![loss / total_weight],
            vec![],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                total_weight,
            },
            &[logits],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// trainable leaf that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let len_of = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n, pairs } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let bv = self.value(*b);
                    let ga = acc(grads, a.0, len_of(*a));
                    for (i, &(oa, ob)) in pairs.iter().enumerate() {
                        // dA = dC @ B^T
                        T::gemm(m, n, k, T::ONE, &g[i * m * n..], n as isize, 1, &bv[ob..], 1, n as isize, T::ONE, &mut ga[oa..], k as isize, 1);
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    let gb = acc(grads, b.0, len_of(*b));
                    for (i, &(oa, ob)) in pairs.iter().enumerate() {
                        // dB = A^T @ dC
                        T::gemm(k, m, n, T::ONE, &av[oa..], 1, k as isize, &g[i * m * n..], n as isize, 1, T::ONE, &mut gb[ob..], n as isize, 1);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::ONE } else { T::ONE };
                if self.wants(*a) {
                    for (d, &x) in acc(grads, a.0, g.len()).iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if self.wants(*b) {
                    for (d, &x) in acc(grads, b.0, g.len()).iter_mut().zip(g) {
                        *d += sign * x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b);
                    for ((d, &x), &y) in acc(grads, a.0, g.len()).iter_mut().zip(g).zip(bv.iter()) {
                        *d += x * y;
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    for ((d, &x), &y) in acc(grads, b.0, g.len()).iter_mut().zip(g).zip(av.iter()) {
                        *d += x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                for (d, &x) in acc(grads, a.0, g.len()).iter_mut().zip(g) {
                    *d += x * *c;
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                for (d, &x) in acc(grads, a.0, g.len()).iter_mut().zip(g) {
                    *d += x;
                }
            }
            Op::Exp(a) => {
                let y = &node.value;
                for ((d, &x), &e) in acc(grads, a.0, g.len()).iter_mut().zip(g).zip(y.iter()) {
                    *d += x * e;
                }
            }
            Op::Silu(a) => {
                let xv = self.value(*a);
                for ((d, &gx), &x) in acc(grads, a.0, g.len()).iter_mut().zip(g).zip(xv.iter()) {
                    let s = x.sigmoid();
                    *d += gx * s * (T::ONE + x * (T::ONE - s));
                }
            }
            Op::Softplus(a) => {
                let xv = self.value(*a);
                for ((d, &gx), &x) in acc(grads, a.0, g.len()).iter_mut().zip(g).zip(xv.iter()) {
                    *d += gx * x.sigmoid();
                }
            }
            Op::Softmax(a) => {
                let dim = *node.shape.last().unwrap();
                let y = &node.value;
                let ga = acc(grads, a.0, g.len());
                for ((yr, gr), dr) in y.chunks(dim).zip(g.chunks(dim)).zip(ga.chunks_mut(dim)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((d, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += p * (q - dot);
                    }
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let dim = *node.shape.last().unwrap();
                let xv = self.value(*x);
                let wv = self.value(*w);
                let dn = T::from_f64(dim as f64);
                if self.wants(*x) {
                    let gx = acc(grads, x.0, g.len());
                    for (r, ((xr, gr), dr)) in xv.chunks(dim).zip(g.chunks(dim)).zip(gx.chunks_mut(dim)).enumerate() {
                        let inv = inv_rms[r];
                        let dot: T = xr.iter().zip(gr).zip(wv.iter()).map(|((&a, &b), &c)| a * b * c).sum();
                        let coef = inv * inv * inv * dot / dn;
                        for i in 0..dim {
                            dr[i] += inv * wv[i] * gr[i] - coef * xr[i];
                        }
                    }
                }
                if self.wants(*w) {
                    let gw = acc(grads, w.0, dim);
                    for (r, (xr, gr)) in xv.chunks(dim).zip(g.chunks(dim)).enumerate() {
                        for i in 0..dim {
                            gw[i] += gr[i] * xr[i] * inv_rms[r];
                        }
                    }
                }
            }
            Op::Permute { a, perm } => {
                let sa = self.shape(*a);
                let st = strides(sa);
                let dst_st: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
                let ga = acc(grads, a.0, g.len());
                scatter_add_strided(ga, 0, &node.shape, &dst_st, g);
            }
            Op::BroadcastTo(a) => {
                let sa = self.shape(*a);
                let st = strides(sa);
                let dst_st: Vec<usize> = sa.iter().zip(&st).map(|(&n, &s)| if n == 1 { 0 } else { s }).collect();
                let ga = acc(grads, a.0, len_of(*a));
                scatter_add_strided(ga, 0, &node.shape, &dst_st, g);
            }
            Op::Slice { a, axis, start } => {
                let st = strides(self.shape(*a));
                let ga = acc(grads, a.0, len_of(*a));
                scatter_add_strided(ga, start * st[*axis], &node.shape, &st, g);
            }
            Op::Concat { parts, axis } => {
                let st = strides(&node.shape);
                let mut start = 0;
                for p in parts {
                    let s = self.shape(*p).to_vec();
                    if self.wants(*p) {
                        let piece = gather_strided(g, start * st[*axis], &s, &st);
                        for (d, x) in acc(grads, p.0, piece.len()).iter_mut().zip(piece) {
                            *d += x;
                        }
                    }
                    start += s[*axis];
                }
            }
            Op::Cumsum { a, axis } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                let ga = acc(grads, a.0, g.len());
                for o in 0..outer {
                    let base = o * n * inner;
                    for i in 0..inner {
                        let mut run = T::ZERO;
                        for t in (0..n).rev() {
                            run += g[base + t * inner + i];
                            ga[base + t * inner + i] += run;
                        }
                    }
                }
            }
            Op::Segsum(a) => {
                let l = *self.shape(*a).last().unwrap();
                let ga = acc(grads, a.0, len_of(*a));
                for (r, gr) in g.chunks(l * l).enumerate() {
                    let dst = &mut ga[r * l..(r + 1) * l];
                    for i in 0..l {
                        // a_t (j < t <= i) collects sum_{j < t} g[i, j]
                        let mut run = T::ZERO;
                        for t in 1..=i {
                            run += gr[i * l + t - 1];
                            dst[t] += run;
                        }
                    }
                }
            }
            Op::DecayScan { states, log_decay } => {
                let s = self.shape(*states);
                let (r, c, n) = (s[0], s[1], s[2]);
                let h = &node.value;
                let dv = self.value(*log_decay);
                // G_k = dH_k + exp(ld_k) * G_{k+1}
                let mut gk = vec![T::ZERO; n];
                let mut gs = if self.wants(*states) { Some(vec![T::ZERO; r * c * n]) } else { None };
                let mut gd = if self.wants(*log_decay) { Some(vec![T::ZERO; r * c]) } else { None };
                for ri in 0..r {
                    gk.iter_mut().for_each(|x| *x = T::ZERO);
                    for k in (1..c).rev() {
                        let row = (ri * c + k) * n;
                        if k + 1 < c {
                            let e = dv[ri * c + k].exp();
                            for x in gk.iter_mut() {
                                *x *= e;
                            }
                        }
                        for (x, &y) in gk.iter_mut().zip(&g[row..row + n]) {
                            *x += y;
                        }
                        // H_k = e_{k-1} H_{k-1} + S_{k-1}
                        let prev = (ri * c + k - 1) * n;
                        if let Some(gs) = gs.as_mut() {
                            for (d, &x) in gs[prev..prev + n].iter_mut().zip(&gk) {
                                *d += x;
                            }
                        }
                        if let Some(gd) = gd.as_mut() {
                            let e = dv[ri * c + k - 1].exp();
                            let dot: T = gk.iter().zip(&h[prev..prev + n]).map(|(&a, &b)| a * b).sum();
                            gd[ri * c + k - 1] += e * dot;
                        }
                    }
                }
                if let Some(gs) = gs {
                    for (d, x) in acc(grads, states.0, gs.len()).iter_mut().zip(gs) {
                        *d += x;
                    }
                }
                if let Some(gd) = gd {
                    for (d, x) in acc(grads, log_decay.0, gd.len()).iter_mut().zip(gd) {
                        *d += x;
                    }
                }
            }
            Op::CausalMask(a) => {
                let l = *node.shape.last().unwrap();
                let ga = acc(grads, a.0, g.len());
                for (dm, gm) in ga.chunks_mut(l * l).zip(g.chunks(l * l)) {
                    for i in 0..l {
                        for j in 0..=i {
                            dm[i * l + j] += gm[i * l + j];
                        }
                    }
                }
            }
            Op::ExpertMix { xp, gate, w, v, u, ids, hw, hv } => {
                let (rows, p) = (self.shape(*xp)[0], self.shape(*xp)[1]);
                let k = self.shape(*gate)[1];
                let m = self.shape(*u)[1];
                let (xv, gv, wv, vv, uv) = (self.value(*xp), self.value(*gate), self.value(*w), self.value(*v), self.value(*u));
                let mut dx = self.wants(*xp).then(|| vec![T::ZERO; xv.len()]);
                let mut dg = self.wants(*gate).then(|| vec![T::ZERO; gv.len()]);
                let mut dw = self.wants(*w).then(|| vec![T::ZERO; wv.len()]);
                let mut dv = self.wants(*v).then(|| vec![T::ZERO; vv.len()]);
                let mut du = self.wants(*u).then(|| vec![T::ZERO; uv.len()]);
                for t in 0..rows {
                    let x = &xv[t * p..(t + 1) * p];
                    let gy = &g[t * m..(t + 1) * m];
                    for j in 0..k {
                        let s = t * k + j;
                        let e = ids[s];
                        let (a, b) = (hw[s], hv[s]);
                        let sig = b.sigmoid();
                        let act = a * b * sig;
                        let coef = gv[s] * act;
                        if let Some(du) = du.as_mut() {
                            for (d, &y) in du[e * m..(e + 1) * m].iter_mut().zip(gy) {
                                *d += coef * y;
                            }
                        }
                        let dcoef = dot(gy, &uv[e * m..(e + 1) * m]);
                        if let Some(dg) = dg.as_mut() {
                            dg[s] += dcoef * act;
                        }
                        let dact = dcoef * gv[s];
                        let da = dact * b * sig;
                        let db = dact * a * sig * (T::ONE + b * (T::ONE - sig));
                        if let Some(dx) = dx.as_mut() {
                            let wr = &wv[e * p..(e + 1) * p];
                            let vr = &vv[e * p..(e + 1) * p];
                            for ((d, &wi), &vi) in dx[t * p..(t + 1) * p].iter_mut().zip(wr).zip(vr) {
                                *d += da * wi + db * vi;
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            for (d, &xi) in dw[e * p..(e + 1) * p].iter_mut().zip(x) {
                                *d += da * xi;
                            }
                        }
                        if let Some(dv) = dv.as_mut() {
                            for (d, &xi) in dv[e * p..(e + 1) * p].iter_mut().zip(x) {
                                *d += db * xi;
                            }
                        }
                    }
                }
                for (var, buf) in [(*xp, dx), (*gate, dg), (*w, dw), (*v, dv), (*u, du)] {
                    match (buf, &mut grads[var.0]) {
                        (Some(buf), Some(d)) => {
                            for (d, x) in d.iter_mut().zip(buf) {
                                *d += x;
                            }
                        }
                        (Some(buf), slot) => *slot = Some(buf),
                        (None, _) => {}
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let gt = acc(grads, table.0, len_of(*table));
                for (p, &i) in ids.iter().enumerate() {
                    for (x, &y) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[p * d..(p + 1) * d]) {
                        *x += y;
                    }
                }
            }
            Op::GatherLast { a, idx } => {
                let n = *self.shape(*a).last().unwrap();
                let k = *node.shape.last().unwrap();
                let ga = acc(grads, a.0, len_of(*a));
                for (p, &i) in idx.iter().enumerate() {
                    ga[(p / k) * n + i] += g[p];
                }
            }
            Op::CausalConv { x, w } => {
                let s = self.shape(*x);
                let (b, l, c) = (s[0], s[1], s[2]);
                let width = self.shape(*w)[1];
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut gx = if self.wants(*x) { Some(vec![T::ZERO; xv.len()]) } else { None };
                let mut gw = if self.wants(*w) { Some(vec![T::ZERO; wv.len()]) } else { None };
                for bi in 0..b {
                    for t in 0..l {
                        for j in 0..width {
                            let back = width - 1 - j;
                            if back > t {
                                continue;
                            }
                            let src = (bi * l + t - back) * c;
                            let dst = (bi * l + t) * c;
                            for ch in 0..c {
                                if let Some(gx) = gx.as_mut() {
                                    gx[src + ch] += wv[ch * width + j] * g[dst + ch];
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[ch * width + j] += xv[src + ch] * g[dst + ch];
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    for (d, v) in acc(grads, x.0, gx.len()).iter_mut().zip(gx) {
                        *d += v;
                    }
                }
                if let Some(gw) = gw {
                    for (d, v) in acc(grads, w.0, gw.len()).iter_mut().zip(gw) {
                        *d += v;
                    }
                }
            }
            Op::Rope { a, cos, sin } => {
                let s = &node.shape;
                let (b, l, h, d) = (s[0], s[1], s[2], s[3]);
                let half = d / 2;
                let ga = acc(grads, a.0, g.len());
                for bi in 0..b {
                    for t in 0..l {
                        for hi in 0..h {
                            let base = ((bi * l + t) * h + hi) * d;
                            for i in 0..half {
                                let (c, sn) = (cos[t * half + i], sin[t * half + i]);
                                let (g0, g1) = (g[base + 2 * i], g[base + 2 * i + 1]);
                                ga[base + 2 * i] += g0 * c + g1 * sn;
                                ga[base + 2 * i + 1] += g1 * c - g0 * sn;
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                for d in acc(grads, a.0, len_of(*a)).iter_mut() {
                    *d += g[0];
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total_weight,
            } => {
                let v = *self.shape(*logits).last().unwrap();
                let gl = acc(grads, logits.0, probs.len());
                for (r, (pr, dr)) in probs.chunks(v).zip(gl.chunks_mut(v)).enumerate() {
                    let w = weights[r] * g[0] / *total_weight;
                    if w == T::ZERO {
                        continue;
                    }
                    for (d, &p) in dr.iter_mut().zip(pr) {
                        *d += w * p;
                    }
                    dr[targets[r]] -= w;
                }
            }
        }
    }
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::NEG_INFINITY, T::max);
    let mut total = T::ZERO;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
