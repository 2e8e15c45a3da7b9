//! Wengert-list reverse-mode autodiff.
//!
//! Every op appends a node holding its forward value plus whatever state its
//! backward needs. `backward` replays the list in reverse, accumulating
//! gradients only into nodes that (transitively) depend on a leaf created
//! with `requires_grad`.

use std::borrow::Cow;

use crate::error::{shape_err, Result, TensorError};
use crate::ops::{gelu, gelu_grad, normalize, softmax_in_place};
use crate::real::Real;
use crate::tensor::{ensure_finite, Tensor};

/// Probability clamp used by [`Tape::cross_entropy`].
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRowBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulConst {
        x: Var,
        factor: Vec<T>,
    },
    Scale {
        x: Var,
        c: T,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Pool {
        x: Var,
        src: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    CrossEntropy {
        p: Var,
        labels: Vec<usize>,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for a later reverse sweep.
///
/// Leaves may borrow their values (parameters) for the tape's lifetime.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one reverse sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        ensure_finite(&data, name)?;
        let value = Tensor::new(shape, data)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(Cow::Owned(value), op, needs_grad))
    }

    /// Owned leaf; gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.push(Cow::Owned(t), Op::Leaf, needs_grad)
    }

    /// Borrowed leaf; gradients are tracked iff `t.requires_grad()`.
    pub fn leaf_ref(&mut self, t: &'a Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.push(Cow::Borrowed(t), Op::Leaf, needs_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        self.value(v).rows_cols()
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            T::zero(),
            &mut out,
            (n, 1),
        );
        self.push_op("matmul", vec![m, n], out, Op::MatMul { a, b }, &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            );
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_op("add", shape, out, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_op("mul", shape, out, Op::Mul { a, b }, &[a, b])
    }

    /// Adds `bias` (length = column count) to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.rc(x);
        if self.value(bias).numel() != cols {
            return shape_err(
                "add_row_bias",
                format!("{} columns, bias {}", cols, self.value(bias).numel()),
            );
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(cols) {
            row.iter_mut().zip(b).for_each(|(v, &bb)| *v = *v + bb);
        }
        let shape = self.value(x).shape().to_vec();
        self.push_op("add_row_bias", shape, out, Op::AddRowBias { x, bias }, &[x, bias])
    }

    /// `x · W + b` for `x: [m, k]`, `W: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, factor: Vec<T>) -> Result<Var> {
        if factor.len() != self.value(x).numel() {
            return shape_err("mul_const", "factor length differs from input");
        }
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&factor)
            .map(|(&v, &f)| v * f)
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push_op("mul_const", shape, out, Op::MulConst { x, factor }, &[x])
    }

    /// Zeroes the rows of `x` where `keep` is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if keep.len() != rows {
            return shape_err("mask_rows", format!("{rows} rows, mask {}", keep.len()));
        }
        let mut factor = Vec::with_capacity(rows * cols);
        for &k in keep {
            factor.resize(factor.len() + cols, if k { T::one() } else { T::zero() });
        }
        self.mul_const(x, factor)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        self.push_op("scale", shape, out, Op::Scale { x, c }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push_op("gelu", shape, out, Op::Gelu { x }, &[x])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return shape_err("layer_norm", "gain/bias must match the row width");
        }
        if eps <= T::zero() {
            return Err(TensorError::Contract("layer_norm eps must be positive".into()));
        }
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut rstd = Vec::with_capacity(rows);
        for row in self.value(x).data().chunks_exact(cols) {
            let (h, r) = normalize(row, eps);
            xhat.extend(h);
            rstd.push(r);
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(cols) {
            for (h, (&gg, &bb)) in row.iter_mut().zip(g.iter().zip(b)) {
                *h = *h * gg + bb;
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push_op(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.rc(x);
        let mut out = self.value(x).data().to_vec();
        ensure_finite(&out, "softmax")?;
        for row in out.chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        let shape = self.value(x).shape().to_vec();
        self.push_op("softmax", shape, out, Op::Softmax { x }, &[x])
    }

    /// Selects rows of a matrix (embedding lookup, reordering).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if idx.is_empty() {
            return shape_err("gather_rows", "empty index");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return shape_err("gather_rows", format!("row {bad} out of {rows}"));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&data[i * cols..(i + 1) * cols]);
        }
        self.push_op(
            "gather_rows",
            vec![idx.len(), cols],
            out,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows", "no inputs");
        };
        let (_, cols) = self.rc(first);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.rc(p);
            if c != cols {
                return shape_err("concat_rows", format!("{c} columns, expected {cols}"));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push_op(
            "concat_rows",
            vec![rows, cols],
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.value(x).shape()));
        }
        let out = self.value(x).data().to_vec();
        self.push_op("reshape", shape, out, Op::Reshape { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push_op("sum", vec![1], vec![s], Op::Sum { x }, &[x])
    }

    /// Max-pools a batch of sequences stored as `[batch·seq, d]` rows,
    /// halving each sequence (odd tails dropped).
    ///
    /// With a validity mask, a pair mixing one valid and one invalid row
    /// yields the valid row, so padded content never reaches valid outputs.
    /// Returns the pooled rows and the pooled (logical-OR) mask.
    pub fn seq_max_pool(
        &mut self,
        x: Var,
        batch: usize,
        seq: usize,
        valid: Option<&[bool]>,
    ) -> Result<(Var, Vec<bool>)> {
        let (rows, d) = self.rc(x);
        if rows != batch * seq {
            return shape_err("seq_max_pool", format!("{rows} rows != {batch}x{seq}"));
        }
        if seq < 2 {
            return Err(TensorError::PoolingUnderflow { len: seq });
        }
        if let Some(m) = valid {
            if m.len() != rows {
                return shape_err("seq_max_pool", "mask length differs from row count");
            }
        }
        let half = seq / 2;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(batch * half * d);
        let mut src = Vec::with_capacity(batch * half * d);
        let mut pooled_mask = Vec::with_capacity(batch * half);
        for b in 0..batch {
            for j in 0..half {
                let r0 = b * seq + 2 * j;
                let r1 = r0 + 1;
                let (v0, v1) = valid.map_or((true, true), |m| (m[r0], m[r1]));
                pooled_mask.push(v0 || v1);
                for c in 0..d {
                    let (i0, i1) = (r0 * d + c, r1 * d + c);
                    let pick = match (v0, v1) {
                        (true, false) => i0,
                        (false, true) => i1,
                        _ if data[i1] > data[i0] => i1,
                        _ => i0,
                    };
                    out.push(data[pick]);
                    src.push(pick);
                }
            }
        }
        let var = self.push_op(
            "seq_max_pool",
            vec![batch * half, d],
            out,
            Op::Pool { x, src },
            &[x],
        )?;
        Ok((var, pooled_mask))
    }

    /// Multi-head scaled dot-product attention over a batch of sequences
    /// stored as `[batch·seq, d]` rows. Keys whose `valid` flag is false
    /// receive zero weight.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        valid: &[bool],
    ) -> Result<Var> {
        let (rows, d) = self.rc(q);
        for other in [k, v] {
            if self.rc(other) != (rows, d) {
                return shape_err("attention", "q, k and v must share a shape");
            }
        }
        if rows != batch * seq || valid.len() != rows {
            return shape_err("attention", format!("{rows} rows, {batch}x{seq}, mask {}", valid.len()));
        }
        if heads == 0 || d % heads != 0 {
            return shape_err("attention", format!("width {d} not divisible by {heads} heads"));
        }
        for b in 0..batch {
            if !valid[b * seq..(b + 1) * seq].iter().any(|&m| m) {
                return Err(TensorError::Contract(format!(
                    "sequence {b} has no valid key to attend to"
                )));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * d];
        for b in 0..batch {
            let mask = &valid[b * seq..(b + 1) * seq];
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                T::gemm(
                    seq,
                    dh,
                    seq,
                    &qd[off..],
                    (d, 1),
                    &kd[off..],
                    (1, d),
                    T::zero(),
                    p,
                    (seq, 1),
                );
                for row in p.chunks_exact_mut(seq) {
                    let mut max = T::neg_infinity();
                    for (s, &m) in row.iter_mut().zip(mask) {
                        *s = *s * scale;
                        if m && *s > max {
                            max = *s;
                        }
                    }
                    let mut sum = T::zero();
                    for (s, &m) in row.iter_mut().zip(mask) {
                        *s = if m { (*s - max).exp() } else { T::zero() };
                        sum = sum + *s;
                    }
                    for s in row.iter_mut() {
                        *s = *s / sum;
                    }
                }
                T::gemm(
                    seq,
                    seq,
                    dh,
                    p,
                    (seq, 1),
                    &vd[off..],
                    (d, 1),
                    T::zero(),
                    &mut out[off..],
                    (d, 1),
                );
            }
        }
        self.push_op(
            "attention",
            vec![rows, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Attention weights saved by an [`Tape::attention`] node, laid out as
    /// `[batch, heads, seq, seq]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean negative log-likelihood of `labels` under the row distributions
    /// in `p`, with probabilities clamped to `[1e-7, 1 − 1e-7]`.
    pub fn cross_entropy(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rc(p);
        if labels.len() != rows {
            return shape_err("cross_entropy", format!("{rows} rows, {} labels", labels.len()));
        }
        let data = self.value(p).data();
        for row in data.chunks_exact(cols) {
            let total: T = row.iter().copied().sum();
            if row.iter().any(|&x| x < T::zero()) || (total - T::one()).abs() > T::lit(1e-4) {
                return Err(TensorError::Contract(
                    "cross_entropy expects probability rows".into(),
                ));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(TensorError::Contract(format!("label {bad} out of {cols} classes")));
        }
        let lo = T::lit(PROB_CLAMP);
        let hi = T::one() - lo;
        let n = T::from_usize(rows).unwrap();
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -data[r * cols + l].max(lo).min(hi).ln())
            .sum();
        self.push_op(
            "cross_entropy",
            vec![1],
            vec![total / n],
            Op::CrossEntropy {
                p,
                labels: labels.to_vec(),
            },
            &[p],
        )
    }

    /// Fingerprint of the discrete choices made by piecewise ops (which
    /// row won each max-pool comparison, which probabilities hit the
    /// cross-entropy clamp). Equal fingerprints mean two evaluations lie on
    /// the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01B3;
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(PRIME);
        };
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Pool { src, .. } => {
                    mix(i as u64);
                    src.iter().for_each(|&s| mix(s as u64));
                }
                Op::CrossEntropy { p, labels } => {
                    let (_, cols) = self.rc(*p);
                    let data = self.value(*p).data();
                    let lo = T::lit(PROB_CLAMP);
                    let hi = T::one() - lo;
                    mix(i as u64);
                    for (r, &l) in labels.iter().enumerate() {
                        let x = data[r * cols + l];
                        mix(u64::from(x < lo) | (u64::from(x > hi) << 1));
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|data| Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.rc(*a);
                let n = self.rc(*b).1;
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · Bᵀ
                    T::gemm(m, n, k, g, (n, 1), self.value(*b).data(), (1, n), T::one(), ga, (k, 1));
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = Aᵀ · dC
                    T::gemm(k, m, n, self.value(*a).data(), (1, k), g, (n, 1), T::one(), gb, (n, 1));
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::AddRowBias { x, bias } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    let cols = gb.len();
                    for row in g.chunks_exact(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &gy), &o) in ga.iter_mut().zip(g).zip(bd) {
                        *x = *x + gy * o;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((x, &gy), &o) in gb.iter_mut().zip(g).zip(ad) {
                        *x = *x + gy * o;
                    }
                }
            }
            Op::MulConst { x, factor } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((v, &gy), &f) in gx.iter_mut().zip(g).zip(factor) {
                        *v = *v + gy * f;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(v, &gy)| *v = *v + gy * *c);
                }
            }
            Op::Gelu { x } => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((v, &gy), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        *v = *v + gy * gelu_grad(xv);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = self.value(*gain).numel();
                let gd = self.value(*gain).data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for (row_g, row_h) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for ((acc, &gy), &h) in gg.iter_mut().zip(row_g).zip(row_h) {
                            *acc = *acc + gy * h;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for row_g in g.chunks_exact(cols) {
                        gb.iter_mut().zip(row_g).for_each(|(acc, &gy)| *acc = *acc + gy);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let n = T::from_usize(cols).unwrap();
                    let mut dh = vec![T::zero(); cols];
                    for (r, ((row_gx, row_g), row_h)) in gx
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(xhat.chunks_exact(cols))
                        .enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..cols {
                            dh[c] = row_g[c] * gd[c];
                            mean_dh = mean_dh + dh[c];
                            mean_dh_h = mean_dh_h + dh[c] * row_h[c];
                        }
                        mean_dh = mean_dh / n;
                        mean_dh_h = mean_dh_h / n;
                        for c in 0..cols {
                            row_gx[c] =
                                row_gx[c] + rstd[r] * (dh[c] - mean_dh - row_h[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let cols = self.rc(*x).1;
                if let Some(gx) = self.slot(grads, *x) {
                    for ((row_gx, row_g), row_p) in gx
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(out.chunks_exact(cols))
                    {
                        let dot: T = row_g.iter().zip(row_p).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            row_gx[c] = row_gx[c] + row_p[c] * (row_g[c] - dot);
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                let cols = self.rc(*x).1;
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        let row = &g[r * cols..(r + 1) * cols];
                        gx[src * cols..(src + 1) * cols]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(gp) = self.slot(grads, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(a, &b)| *a = *a + b);
                    }
                    offset += n;
                }
            }
            Op::Pool { x, src } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&s, &gy) in src.iter().zip(g) {
                        gx[s] = gx[s] + gy;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(g, (*q, *k, *v), (*batch, *seq, *heads), probs, grads),
            Op::Reshape { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|a| *a = *a + g[0]);
                }
            }
            Op::CrossEntropy { p, labels } => {
                let cols = self.rc(*p).1;
                let pd = self.value(*p).data();
                let lo = T::lit(PROB_CLAMP);
                let hi = T::one() - lo;
                let n = T::from_usize(labels.len()).unwrap();
                if let Some(gp) = self.slot(grads, *p) {
                    for (r, &l) in labels.iter().enumerate() {
                        let pr = pd[r * cols + l];
                        if pr > lo && pr < hi {
                            gp[r * cols + l] = gp[r * cols + l] - g[0] / (n * pr);
                        }
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        g: &[T],
        (q, k, v): (Var, Var, Var),
        (batch, seq, heads): (usize, usize, usize),
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (rows, d) = self.rc(q);
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let mut ds = vec![T::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                // dP = dO · Vᵀ
                T::gemm(seq, dh, seq, &g[off..], (d, 1), &vd[off..], (1, d), T::zero(), &mut ds, (seq, 1));
                // dV += Pᵀ · dO
                T::gemm(seq, seq, dh, p, (1, seq), &g[off..], (d, 1), T::one(), &mut dv[off..], (d, 1));
                for (row_ds, row_p) in ds.chunks_exact_mut(seq).zip(p.chunks_exact(seq)) {
                    let dot: T = row_ds.iter().zip(row_p).map(|(&a, &b)| a * b).sum();
                    for (s, &pp) in row_ds.iter_mut().zip(row_p) {
                        *s = pp * (*s - dot) * scale;
                    }
                }
                // dQ += dS · K ; dK += dSᵀ · Q
                T::gemm(seq, seq, dh, &ds, (seq, 1), &kd[off..], (d, 1), T::one(), &mut dq[off..], (d, 1));
                T::gemm(seq, seq, dh, &ds, (1, seq), &qd[off..], (d, 1), T::one(), &mut dk[off..], (d, 1));
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gv) = self.slot(grads, var) {
                gv.iter_mut().zip(&local).for_each(|(a, &b)| *a = *a + b);
            }
        }
    }
}
