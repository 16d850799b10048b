//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Every operation appends a node holding its output value and enough
//! context to compute the vector-Jacobian product later. [`Tape::backward`]
//! replays nodes in reverse order, which is a valid topological order because
//! a node can only reference nodes recorded before it.
//!
//! ```
//! use nevlab::autodiff::Tape;
//! use nevlab::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
//! let sq = tape.mul(x, x);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::masks::AttentionMask;
use crate::scalar::Scalar;
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, log_sum_exp, softmax_in_place, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// One attention problem inside a batched [`Tape::attention`] call: query rows
/// `q_start..q_start+q_len` attend to key/value rows `k_start..k_start+k_len`.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// `None` allows every key.
    pub mask: Option<Arc<AttentionMask>>,
}

#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub heads: usize,
    pub blocks: Vec<AttnBlock>,
}

impl AttnSpec {
    /// A single sequence attending to itself.
    pub fn single(len: usize, heads: usize, mask: Option<Arc<AttentionMask>>) -> Self {
        Self {
            heads,
            blocks: vec![AttnBlock {
                q_start: 0,
                q_len: len,
                k_start: 0,
                k_len: len,
                mask,
            }],
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Gelu(Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<T> },
    LayerNormRows { x: Var, inv_std: Vec<T> },
    Sum(Var),
    Pick { x: Var, idx: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GroupMaxRows { x: Var, argmax: Vec<usize> },
    GroupMeanRows { x: Var, group: usize },
    Attention { q: Var, k: Var, v: Var, spec: Arc<AttnSpec>, probs: Vec<Vec<T>> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every leaf that requested them.
#[derive(Debug)]
pub struct Gradients<T> {
    by_leaf: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_leaf.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.by_leaf.remove(&v)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape2(rows: usize, cols: usize) -> Vec<usize> {
    vec![rows, cols]
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dimension");
        let out = gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(shape2(m, n), out).unwrap(), Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_bt inner dimension");
        let out = gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(shape2(m, n), out).unwrap(), Op::MatMulBt(a, b), &[a, b])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let c = self.value(a).cols();
        assert_eq!(self.value(bias).numel(), c, "add_row width");
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(&b).for_each(|(x, &y)| *x += y);
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(out, Op::AddRow(a, bias), &[a, bias])
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Var {
        let c = self.value(a).cols();
        assert_eq!(self.value(gain).numel(), c, "mul_row width");
        let g = self.value(gain).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(&g).for_each(|(x, &y)| *x *= y);
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(out, Op::MulRow(a, gain), &[a, gain])
    }

    /// `x·W + b` for `W: [in×out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::ln);
        self.push(out, Op::Log(a), &[a])
    }

    /// Absolute value; the derivative at 0 is taken as +1.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu_fwd(x).0);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::new(shape2(c, r), data).unwrap(), Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let out = self.value(a).clone().reshape(shape).expect("reshape");
        self.push(out, Op::Reshape(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = crate::tensor::softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    /// Row-wise log-softmax. Entries of `-inf` are allowed as long as each row
    /// has at least one finite entry; they stay `-inf` and get zero gradient.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|v| v.is_nan() || *v == T::infinity()) {
            return Err(Error::NonFinite);
        }
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            if !lse.is_finite() {
                return Err(Error::NonFinite);
            }
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(t.shape().to_vec(), data).unwrap();
        Ok(self.push(out, Op::LogSoftmaxRows(a), &[a]))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.all_finite() {
            return Err(Error::NonFinite);
        }
        let c = t.cols();
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(c) {
            let n = dot(row, row).sqrt();
            if n == T::zero() {
                return Err(Error::DegenerateEmbedding);
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let out = Tensor::new(t.shape().to_vec(), data).unwrap();
        Ok(self.push(out, Op::L2NormalizeRows { x: a, norms }, &[a]))
    }

    /// Per-row standardization `(x − mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let cn = T::from_usize(c).unwrap();
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / cn;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / cn;
            let is = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let out = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.push(out, Op::LayerNormRows { x: a, inv_std }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |s, &v| s + v);
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).numel()).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Selects `x[i, idx[i]]` for every row, producing a vector.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(idx.len(), t.rows(), "pick needs one index per row");
        let data: Vec<T> = idx.iter().enumerate().map(|(i, &j)| t.at(i, j)).collect();
        let out = Tensor::vector(data).unwrap();
        self.push(out, Op::Pick { x: a, idx: idx.to_vec() }, &[a])
    }

    /// Rows `idx` of a matrix, in order. Repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(shape2(idx.len(), c), data).unwrap();
        self.push(out, Op::GatherRows { x: a, idx: idx.to_vec() }, &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows width");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::new(shape2(rows, c), data).unwrap();
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(start + len <= c, "slice_cols out of range");
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(shape2(r, len), data).unwrap();
        self.push(out, Op::SliceCols { x: a, start }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), r, "concat_cols height");
                data.extend_from_slice(t.row(i));
            }
        }
        let out = Tensor::new(shape2(r, total), data).unwrap();
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Max over consecutive groups of `group` rows, per column:
    /// `out[g, j] = max_q x[g·group + q, j]`. Ties resolve to the first row.
    pub fn group_max_rows(&mut self, a: Var, group: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(group > 0 && r % group == 0, "group_max_rows grouping");
        let t = self.value(a);
        let g = r / group;
        let mut data = vec![T::zero(); g * c];
        let mut argmax = vec![0usize; g * c];
        for gi in 0..g {
            for j in 0..c {
                let mut best = gi * group;
                for q in 1..group {
                    if t.at(gi * group + q, j) > t.at(best, j) {
                        best = gi * group + q;
                    }
                }
                data[gi * c + j] = t.at(best, j);
                argmax[gi * c + j] = best;
            }
        }
        let out = Tensor::new(shape2(g, c), data).unwrap();
        self.push(out, Op::GroupMaxRows { x: a, argmax }, &[a])
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(group > 0 && r % group == 0, "group_mean_rows grouping");
        let t = self.value(a);
        let g = r / group;
        let inv = T::one() / T::from_usize(group).unwrap();
        let mut data = vec![T::zero(); g * c];
        for i in 0..r {
            let dst = &mut data[(i / group) * c..(i / group + 1) * c];
            dst.iter_mut().zip(t.row(i)).for_each(|(d, &v)| *d += v);
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(shape2(g, c), data).unwrap();
        self.push(out, Op::GroupMeanRows { x: a, group }, &[a])
    }

    /// Batched multi-head scaled dot-product attention. Disallowed keys get
    /// exactly zero weight. Every query row must be covered by one block.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: Arc<AttnSpec>) -> Result<Var> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        let (nv, dv) = self.dims(v);
        if dk != d || dv != d || nv != nk {
            return Err(Error::Shape("attention q/k/v widths".into()));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Shape(format!(
                "width {d} not divisible by {} heads",
                spec.heads
            )));
        }
        let mut covered = vec![false; nq];
        for b in &spec.blocks {
            if b.q_start + b.q_len > nq || b.k_start + b.k_len > nk {
                return Err(Error::Shape("attention block out of range".into()));
            }
            if let Some(m) = &b.mask {
                if m.size() != b.q_len || b.q_len != b.k_len {
                    return Err(Error::Shape(format!(
                        "mask of size {} for block {}x{}",
                        m.size(),
                        b.q_len,
                        b.k_len
                    )));
                }
            }
            for c in &mut covered[b.q_start..b.q_start + b.q_len] {
                if *c {
                    return Err(Error::Shape("overlapping attention blocks".into()));
                }
                *c = true;
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::Shape("attention blocks do not cover all queries".into()));
        }
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let dh = d / spec.heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut out = vec![T::zero(); nq * d];
        let mut probs = Vec::with_capacity(spec.blocks.len() * spec.heads);
        for b in &spec.blocks {
            for h in 0..spec.heads {
                let off = h * dh;
                let mut p = vec![T::zero(); b.q_len * b.k_len];
                for i in 0..b.q_len {
                    let qi = &qd[(b.q_start + i) * d + off..(b.q_start + i) * d + off + dh];
                    let row = &mut p[i * b.k_len..(i + 1) * b.k_len];
                    let mut m = T::neg_infinity();
                    for (j, pj) in row.iter_mut().enumerate() {
                        if b.mask.as_ref().map_or(true, |mk| mk.allows(i, j)) {
                            let kj = &kd[(b.k_start + j) * d + off..(b.k_start + j) * d + off + dh];
                            *pj = dot(qi, kj) * scale;
                            m = m.max(*pj);
                        } else {
                            *pj = T::neg_infinity();
                        }
                    }
                    if m == T::neg_infinity() {
                        return Err(Error::EmptyAttentionRow);
                    }
                    softmax_in_place(row);
                    let oi = &mut out[(b.q_start + i) * d + off..(b.q_start + i) * d + off + dh];
                    for (j, &pj) in row.iter().enumerate() {
                        if pj == T::zero() {
                            continue;
                        }
                        let vj = &vd[(b.k_start + j) * d + off..(b.k_start + j) * d + off + dh];
                        oi.iter_mut().zip(vj).for_each(|(o, &vv)| *o += pj * vv);
                    }
                }
                probs.push(p);
            }
        }
        let out = Tensor::new(shape2(nq, d), out).unwrap();
        Ok(self.push(out, Op::Attention { q, k, v, spec, probs }, &[q, k, v]))
    }

    /// Reverse replay from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        let mut by_leaf = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads[idx].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                by_leaf.insert(Var(idx), Tensor::new(node.value.shape().to_vec(), g).unwrap());
            }
        }
        Ok(Gradients { by_leaf })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(delta),
            }
        };
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.value(*b).cols();
                if wants(*a) {
                    acc(*a, gemm_nt(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    acc(*b, gemm_tn(val(*a), g, m, k, n));
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.value(*b).rows();
                if wants(*a) {
                    acc(*a, gemm_nn(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    acc(*b, gemm_tn(g, val(*a), m, n, k));
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
                if wants(*a) {
                    acc(*a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|&x| x * *c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::AddRow(a, b) => {
                acc(*a, g.to_vec());
                if wants(*b) {
                    let c = self.value(*b).numel();
                    let mut gb = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(s, &x)| *s += x);
                    }
                    acc(*b, gb);
                }
            }
            Op::MulRow(a, b) => {
                let c = self.value(*b).numel();
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    let mut ga = g.to_vec();
                    for row in ga.chunks_mut(c) {
                        row.iter_mut().zip(vb).for_each(|(x, &y)| *x *= y);
                    }
                    acc(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); c];
                    for (grow, arow) in g.chunks(c).zip(va.chunks(c)) {
                        for j in 0..c {
                            gb[j] += grow[j] * arow[j];
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Exp(a) => acc(*a, g.iter().zip(out).map(|(&x, &y)| x * y).collect()),
            Op::Log(a) => acc(*a, g.iter().zip(val(*a)).map(|(&x, &y)| x / y).collect()),
            Op::Abs(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&x, &y)| if y >= T::zero() { x } else { -x })
                    .collect(),
            ),
            Op::Gelu(a) => acc(
                *a,
                g.iter().zip(val(*a)).map(|(&x, &y)| x * gelu_fwd(y).1).collect(),
            ),
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                acc(*a, ga);
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                let mut ga = vec![T::zero(); g.len()];
                for ((dst, grow), prow) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                    let s = dot(grow, prow);
                    for j in 0..c {
                        dst[j] = prow[j] * (grow[j] - s);
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let c = node.value.cols();
                let mut ga = vec![T::zero(); g.len()];
                for ((dst, grow), lrow) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                    let s = grow.iter().fold(T::zero(), |s, &x| s + x);
                    for j in 0..c {
                        dst[j] = grow[j] - lrow[j].exp() * s;
                    }
                }
                acc(*a, ga);
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = node.value.cols();
                let mut ga = vec![T::zero(); g.len()];
                for (i, ((dst, grow), yrow)) in
                    ga.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)).enumerate()
                {
                    let s = dot(grow, yrow);
                    for j in 0..c {
                        dst[j] = (grow[j] - yrow[j] * s) / norms[i];
                    }
                }
                acc(*x, ga);
            }
            Op::LayerNormRows { x, inv_std } => {
                let c = node.value.cols();
                let cn = T::from_usize(c).unwrap();
                let mut ga = vec![T::zero(); g.len()];
                for (i, ((dst, grow), yrow)) in
                    ga.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)).enumerate()
                {
                    let mg = grow.iter().fold(T::zero(), |s, &v| s + v) / cn;
                    let mgy = dot(grow, yrow) / cn;
                    for j in 0..c {
                        dst[j] = inv_std[i] * (grow[j] - mg - yrow[j] * mgy);
                    }
                }
                acc(*x, ga);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Pick { x, idx } => {
                let c = self.value(*x).cols();
                let mut ga = vec![T::zero(); self.value(*x).numel()];
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * c + j] += g[i];
                }
                acc(*x, ga);
            }
            Op::GatherRows { x, idx } => {
                let c = self.value(*x).cols();
                let mut ga = vec![T::zero(); self.value(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut ga[i * c..(i + 1) * c];
                    dst.iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(d, &v)| *d += v);
                }
                acc(*x, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims(*x);
                let len = node.value.cols();
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(*x, ga);
            }
            Op::ConcatCols(parts) => {
                let r = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        gp.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    acc(p, gp);
                    off += w;
                }
            }
            Op::GroupMaxRows { x, argmax } => {
                let c = node.value.cols();
                let xc = self.value(*x).cols();
                let mut ga = vec![T::zero(); self.value(*x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    ga[src * xc + o % c] += g[o];
                }
                acc(*x, ga);
            }
            Op::GroupMeanRows { x, group } => {
                let c = node.value.cols();
                let inv = T::one() / T::from_usize(*group).unwrap();
                let r = self.value(*x).rows();
                let mut ga = Vec::with_capacity(r * c);
                for i in 0..r {
                    ga.extend(g[(i / group) * c..(i / group + 1) * c].iter().map(|&v| v * inv));
                }
                acc(*x, ga);
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (gq, gk, gv) = self.attention_backward(*q, *k, *v, spec, probs, g);
                if wants(*q) {
                    acc(*q, gq);
                }
                if wants(*k) {
                    acc(*k, gk);
                }
                if wants(*v) {
                    acc(*v, gv);
                }
            }
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[Vec<T>],
        g: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let d = self.value(q).cols();
        let dh = d / spec.heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        let mut gv = vec![T::zero(); vd.len()];
        let mut pi = 0;
        for b in &spec.blocks {
            for h in 0..spec.heads {
                let off = h * dh;
                let p = &probs[pi];
                pi += 1;
                let mut dp = vec![T::zero(); b.k_len];
                for i in 0..b.q_len {
                    let qrow = (b.q_start + i) * d + off;
                    let go = &g[qrow..qrow + dh];
                    let prow = &p[i * b.k_len..(i + 1) * b.k_len];
                    // dP = dO·Vᵀ, dV += Pᵀ·dO
                    for j in 0..b.k_len {
                        if prow[j] == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vrow = (b.k_start + j) * d + off;
                        dp[j] = dot(go, &vd[vrow..vrow + dh]);
                        let pj = prow[j];
                        gv[vrow..vrow + dh].iter_mut().zip(go).for_each(|(a, &x)| *a += pj * x);
                    }
                    let s = dot(prow, &dp);
                    for j in 0..b.k_len {
                        if prow[j] == T::zero() {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - s) * scale;
                        let krow = (b.k_start + j) * d + off;
                        for t in 0..dh {
                            gq[qrow + t] += ds * kd[krow + t];
                            gk[krow + t] += ds * qd[qrow + t];
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

/// Returns `(gelu(x), gelu'(x))` for the tanh approximation.
fn gelu_fwd<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let y = half * x * (T::one() + th);
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (y, dy)
}
