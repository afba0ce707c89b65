//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op as a node holding its forward value. Nodes are
//! appended in topological order, so the backward pass is a single reverse
//! sweep over the tape.

use std::collections::BTreeMap;

use super::kernels::{self, gemm, MatMut, MatRef};
use super::{Float, Params, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow { x: Var, row: Var },
    Mul(Var, Var),
    Scale { x: Var, factor: T },
    MulConst { x: Var, factor: Vec<T> },
    Gelu(Var),
    RmsNorm { x: Var, scale: Var, inv_rms: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    RelBias { table: Var, buckets: Vec<usize> },
    Attention(Box<AttentionSaved<T>>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Pool { x: Var, windows: Vec<Vec<(usize, T)>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    L2Normalize { x: Var, inv_norm: Vec<T> },
    Chamfer { q: Var, d: Var, best: Vec<usize> },
    Stack(Vec<Var>),
    Sum(Var),
}

struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    heads: usize,
    /// `[heads, lq, lk]`, masked entries exactly zero.
    probs: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    matmul_flops: u64,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Name → leaf mapping produced by [`Graph::bind`].
#[derive(Debug, Clone, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Grads<T> {
    /// Gradient of `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every bound parameter; unreached parameters get zeros.
    pub fn named(&self, graph: &Graph<T>, binding: &Binding) -> Params<T> {
        let mut out = Params::new();
        for (name, var) in binding.iter() {
            let shape = graph.value(var).shape().to_vec();
            let data = match self.get(var) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); graph.value(var).numel()],
            };
            out.insert(name, Tensor::new(shape, data).expect("gradient matches value shape"));
        }
        out
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            matmul_flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-add FLOPs (2·m·k·n) spent in matrix products so far,
    /// including the score and mixing products inside attention.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Registers every tensor of `params` as a differentiable leaf.
    pub fn bind(&mut self, params: &Params<T>) -> Result<Binding> {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.to_string(), self.param(t.clone())?);
        }
        Ok(Binding { vars })
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, true)
    }

    fn mm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{kb},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = self.value(a).data();
            let bd = self.value(b).data();
            let bv = if trans_b {
                MatRef::dense(bd, n, k).t()
            } else {
                MatRef::dense(bd, k, n)
            };
            gemm(MatRef::dense(av, m, k), bv, MatMut::dense(&mut out, m, n), false);
        }
        self.matmul_flops += 2 * (m * k * n) as u64;
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Broadcast-adds a `[d]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(row).numel() != d {
            return Err(shape_err("add_row", format!("row of {} for width {d}", self.value(row).numel())));
        }
        let r = self.value(row).data().to_vec();
        let data = self
            .value(x)
            .data()
            .chunks(d.max(1))
            .flat_map(|xr| xr.iter().zip(&r).map(|(&a, &b)| a + b).collect::<Vec<_>>())
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push("add_row", value, Op::AddRow { x, row }, &[x, row])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale { x, factor }, &[x])
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<T>) -> Result<Var> {
        if factor.len() != self.value(x).numel() {
            return Err(shape_err("mul_const", "factor length".into()));
        }
        let data = self.value(x).data().iter().zip(&factor).map(|(&v, &f)| v * f).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push("mul_const", value, Op::MulConst { x, factor }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    /// RMS normalization over the last axis (see [`super::layer_norm`]).
    pub fn rms_norm(&mut self, x: Var, scale: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 {
            return Err(TensorError::EmptyAxis);
        }
        if self.value(scale).numel() != d {
            return Err(shape_err("rms_norm", format!("scale {} for width {d}", self.value(scale).numel())));
        }
        let rows = self.value(x).rows();
        let mut out = vec![T::zero(); rows * d];
        let mut inv_rms = vec![T::zero(); rows];
        kernels::rms_norm(self.value(x).data(), self.value(scale).data(), d, &mut out, &mut inv_rms);
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push("rms_norm", value, Op::RmsNorm { x, scale, inv_rms }, &[x, scale])
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table, "gather")?;
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index { index: id, len: rows });
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            "gather",
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Expands a `[num_buckets, heads]` table into a `[heads, lq, lk]` bias
    /// using per-pair bucket indices laid out row-major over `(lq, lk)`.
    pub fn rel_bias(&mut self, table: Var, buckets: Vec<usize>, lq: usize, lk: usize) -> Result<Var> {
        let (nb, heads) = self.dims2(table, "rel_bias")?;
        if buckets.len() != lq * lk {
            return Err(shape_err("rel_bias", format!("{} buckets for {lq}x{lk}", buckets.len())));
        }
        let t = self.value(table).data();
        let mut data = vec![T::zero(); heads * lq * lk];
        for (p, &b) in buckets.iter().enumerate() {
            if b >= nb {
                return Err(TensorError::Index { index: b, len: nb });
            }
            for h in 0..heads {
                data[h * lq * lk + p] = t[b * heads + h];
            }
        }
        let value = Tensor::new(vec![heads, lq, lk], data)?;
        self.push("rel_bias", value, Op::RelBias { table, buckets }, &[table])
    }

    /// Multi-head scaled-free dot-product attention (T5 convention: no
    /// 1/sqrt(d_kv) factor). `q: [lq, heads·dk]`, `k, v: [lk, heads·dk]`,
    /// optional additive `bias: [heads, lq, lk]`. Keys with `key_mask[j] ==
    /// false` are excluded; `causal` additionally hides keys `j > i`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        bias: Option<Var>,
        key_mask: &[bool],
        causal: bool,
    ) -> Result<Var> {
        let (lq, width) = self.dims2(q, "attention")?;
        let (lk, kw) = self.dims2(k, "attention")?;
        let (lv, vw) = self.dims2(v, "attention")?;
        if heads == 0 || width % heads != 0 || kw != width || vw != width || lv != lk {
            return Err(shape_err("attention", format!("q [{lq},{width}] k [{lk},{kw}] v [{lv},{vw}] heads {heads}")));
        }
        if key_mask.len() != lk {
            return Err(shape_err("attention", format!("key mask {} for {lk} keys", key_mask.len())));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [heads, lq, lk] {
                return Err(shape_err("attention", format!("bias {:?}", self.value(b).shape())));
            }
        }
        let dk = width / heads;
        let mut probs = vec![T::zero(); heads * lq * lk];
        let mut out = vec![T::zero(); lq * width];
        {
            let qd = self.value(q).data();
            let kd = self.value(k).data();
            let vd = self.value(v).data();
            let bd = bias.map(|b| self.value(b).data());
            for h in 0..heads {
                let scores = &mut probs[h * lq * lk..(h + 1) * lq * lk];
                let qh = MatRef {
                    data: qd,
                    offset: h * dk,
                    rows: lq,
                    cols: dk,
                    rs: width,
                    cs: 1,
                };
                let kh_t = MatRef {
                    data: kd,
                    offset: h * dk,
                    rows: lk,
                    cols: dk,
                    rs: width,
                    cs: 1,
                }
                .t();
                gemm(qh, kh_t, MatMut::dense(scores, lq, lk), false);
                if let Some(bd) = bd {
                    for (s, &b) in scores.iter_mut().zip(&bd[h * lq * lk..(h + 1) * lq * lk]) {
                        *s += b;
                    }
                }
                for (i, row) in scores.chunks_mut(lk).enumerate() {
                    if !kernels::softmax_row(row, |j| key_mask[j] && (!causal || j <= i)) {
                        return Err(TensorError::FullyMasked { row: i });
                    }
                }
                let vh = MatRef {
                    data: vd,
                    offset: h * dk,
                    rows: lk,
                    cols: dk,
                    rs: width,
                    cs: 1,
                };
                let oh = MatMut {
                    data: &mut out,
                    offset: h * dk,
                    rows: lq,
                    cols: dk,
                    rs: width,
                    cs: 1,
                };
                gemm(MatRef::dense(scores, lq, lk), vh, oh, false);
            }
        }
        self.matmul_flops += 4 * (heads * lq * lk * dk) as u64;
        let value = Tensor::new(vec![lq, width], out)?;
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        self.push(
            "attention",
            value,
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                bias,
                heads,
                probs,
            })),
            &inputs,
        )
    }

    /// Attention probabilities `[heads, lq, lk]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention(s) => Some(&s.probs),
            _ => None,
        }
    }

    /// Stacks matrices with equal width along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = parts
            .first()
            .map(|&p| self.value(p).last_dim())
            .ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != d {
                return Err(shape_err("concat_rows", format!("width {c} vs {d}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, d], data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x, "slice_rows")?;
        if start + len > rows {
            return Err(shape_err("slice_rows", format!("{start}+{len} > {rows}")));
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let value = Tensor::new(vec![len, d], data)?;
        self.push("slice_rows", value, Op::SliceRows { x, start }, &[x])
    }

    /// Weighted row combination: `out[i] = Σ (j, w) ∈ windows[i]  w · x[j]`.
    pub fn pool(&mut self, x: Var, windows: Vec<Vec<(usize, T)>>) -> Result<Var> {
        let (rows, d) = self.dims2(x, "pool")?;
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); windows.len() * d];
        for (i, w) in windows.iter().enumerate() {
            let out = &mut data[i * d..(i + 1) * d];
            for &(j, wt) in w {
                if j >= rows {
                    return Err(TensorError::Index { index: j, len: rows });
                }
                for (o, &v) in out.iter_mut().zip(&xd[j * d..(j + 1) * d]) {
                    *o += wt * v;
                }
            }
        }
        let value = Tensor::new(vec![windows.len(), d], data)?;
        self.push("pool", value, Op::Pool { x, windows }, &[x])
    }

    /// Weighted softmax cross-entropy: `Σ_i w_i · −log softmax(logits_i)[t_i]`.
    /// Rows with zero weight contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (n, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return Err(shape_err("cross_entropy", format!("{n} rows, {} targets", targets.len())));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (i, row) in probs.chunks_mut(vocab).enumerate() {
            let t = targets[i];
            if t >= vocab {
                return Err(TensorError::Index { index: t, len: vocab });
            }
            kernels::softmax_row(row, |_| true);
            if weights[i] != T::zero() {
                loss += -weights[i] * row[t].max(T::lit(f64::MIN_POSITIVE)).ln();
            }
        }
        let value = Tensor::scalar(loss);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Scales each row to unit L2 norm (zero rows stay zero).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let mut data = self.value(x).data().to_vec();
        let mut inv_norm = Vec::with_capacity(self.value(x).rows());
        for row in data.chunks_mut(d.max(1)) {
            let norm = kernels::dot(row, row).sqrt();
            let inv = if norm > T::zero() { T::one() / norm } else { T::zero() };
            for v in row.iter_mut() {
                *v = *v * inv;
            }
            inv_norm.push(inv);
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push("l2_normalize", value, Op::L2Normalize { x, inv_norm }, &[x])
    }

    /// Late-interaction score `Σ_i max_{j: mask[j]} q_i · d_j`.
    pub fn chamfer(&mut self, q: Var, d: Var, d_mask: &[bool]) -> Result<Var> {
        let (nq, w) = self.dims2(q, "chamfer")?;
        let (nd, wd) = self.dims2(d, "chamfer")?;
        if w != wd || d_mask.len() != nd {
            return Err(shape_err("chamfer", format!("q [{nq},{w}] d [{nd},{wd}] mask {}", d_mask.len())));
        }
        if !d_mask.iter().any(|&m| m) {
            return Err(TensorError::FullyMasked { row: 0 });
        }
        let qd = self.value(q).data();
        let dd = self.value(d).data();
        let mut best = Vec::with_capacity(nq);
        let mut total = T::zero();
        for i in 0..nq {
            let qi = &qd[i * w..(i + 1) * w];
            let mut arg = usize::MAX;
            let mut max = T::neg_infinity();
            for j in (0..nd).filter(|&j| d_mask[j]) {
                let s = kernels::dot(qi, &dd[j * w..(j + 1) * w]);
                if arg == usize::MAX || s > max {
                    max = s;
                    arg = j;
                }
            }
            total += max;
            best.push(arg);
        }
        self.matmul_flops += 2 * (nq * nd * w) as u64;
        self.push("chamfer", Tensor::scalar(total), Op::Chamfer { q, d, best }, &[q, d])
    }

    /// Gathers one-element nodes into a tensor of the given shape.
    pub fn stack(&mut self, scalars: &[Var], shape: &[usize]) -> Result<Var> {
        let mut data = Vec::with_capacity(scalars.len());
        for &s in scalars {
            let t = self.value(s);
            if t.numel() != 1 {
                return Err(TensorError::NotScalar(t.shape().to_vec()));
            }
            data.push(t.data()[0]);
        }
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push("stack", value, Op::Stack(scalars.to_vec()), scalars)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn accum<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims2(*a, "matmul").expect("recorded");
                let n = node.value.last_dim();
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if let Some(ga) = self.accum(grads, *a) {
                    // dA = dC · op(B)ᵀ
                    let bt = if *trans_b {
                        MatRef::dense(bd, n, k)
                    } else {
                        MatRef::dense(bd, k, n).t()
                    };
                    gemm(MatRef::dense(g, m, n), bt, MatMut::dense(ga, m, k), true);
                }
                if let Some(gb) = self.accum(grads, *b) {
                    if *trans_b {
                        // B is [n,k]: dB = dCᵀ · A
                        gemm(MatRef::dense(g, m, n).t(), MatRef::dense(ad, m, k), MatMut::dense(gb, n, k), true);
                    } else {
                        gemm(MatRef::dense(ad, m, k).t(), MatRef::dense(g, m, n), MatMut::dense(gb, k, n), true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.accum(grads, v) {
                        ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::AddRow { x, row } => {
                if let Some(gx) = self.accum(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
                let d = node.value.last_dim();
                if let Some(gr) = self.accum(grads, *row) {
                    for gr_chunk in g.chunks(d) {
                        gr.iter_mut().zip(gr_chunk).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.accum(grads, *a) {
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gy * bv;
                    }
                }
                if let Some(gb) = self.accum(grads, *b) {
                    for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gy * av;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.accum(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *factor);
                }
            }
            Op::MulConst { x, factor } => {
                if let Some(gx) = self.accum(grads, *x) {
                    for ((a, &b), &f) in gx.iter_mut().zip(g).zip(factor) {
                        *a += b * f;
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.accum(grads, *x) {
                    for ((a, &b), &v) in gx.iter_mut().zip(g).zip(xd) {
                        *a += b * kernels::gelu_grad(v);
                    }
                }
            }
            Op::RmsNorm { x, scale, inv_rms } => {
                let d = node.value.last_dim();
                let xd = self.value(*x).data();
                let sd = self.value(*scale).data();
                let dn = T::lit(d as f64);
                if let Some(gs) = self.accum(grads, *scale) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for c in 0..d {
                            gs[c] += g[r * d + c] * xd[r * d + c] * inv;
                        }
                    }
                }
                if let Some(gx) = self.accum(grads, *x) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = &xd[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        // u = g ⊙ scale; dx = inv·u − inv³·x·(x·u)/d
                        let xu = (0..d).fold(T::zero(), |acc, c| acc + xr[c] * gr[c] * sd[c]);
                        let coef = inv * inv * inv * xu / dn;
                        for c in 0..d {
                            gx[r * d + c] += inv * gr[c] * sd[c] - coef * xr[c];
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = node.value.last_dim();
                if let Some(gt) = self.accum(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[i * d + c];
                        }
                    }
                }
            }
            Op::RelBias { table, buckets } => {
                let heads = node.value.shape()[0];
                let plane = buckets.len();
                if let Some(gt) = self.accum(grads, *table) {
                    for (p, &b) in buckets.iter().enumerate() {
                        for h in 0..heads {
                            gt[b * heads + h] += g[h * plane + p];
                        }
                    }
                }
            }
            Op::Attention(s) => self.backprop_attention(s, g, grads),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(gp) = self.accum(grads, p) {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(a, &b)| *a += b);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let d = node.value.last_dim();
                if let Some(gx) = self.accum(grads, *x) {
                    let dst = &mut gx[start * d..start * d + g.len()];
                    dst.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Pool { x, windows } => {
                let d = node.value.last_dim();
                if let Some(gx) = self.accum(grads, *x) {
                    for (i, w) in windows.iter().enumerate() {
                        for &(j, wt) in w {
                            for c in 0..d {
                                gx[j * d + c] += wt * g[i * d + c];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let vocab = self.value(*logits).last_dim();
                if let Some(gl) = self.accum(grads, *logits) {
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let scale = g[0] * w;
                        let row = &mut gl[i * vocab..(i + 1) * vocab];
                        for (c, slot) in row.iter_mut().enumerate() {
                            *slot += scale * probs[i * vocab + c];
                        }
                        row[t] -= scale;
                    }
                }
            }
            Op::L2Normalize { x, inv_norm } => {
                let d = node.value.last_dim();
                let yd = node.value.data();
                if let Some(gx) = self.accum(grads, *x) {
                    for (r, &inv) in inv_norm.iter().enumerate() {
                        let yr = &yd[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let yg = kernels::dot(yr, gr);
                        for c in 0..d {
                            gx[r * d + c] += inv * (gr[c] - yr[c] * yg);
                        }
                    }
                }
            }
            Op::Chamfer { q, d, best } => {
                let w = self.value(*q).last_dim();
                let (qd, dd) = (self.value(*q).data(), self.value(*d).data());
                if let Some(gq) = self.accum(grads, *q) {
                    for (i, &j) in best.iter().enumerate() {
                        for c in 0..w {
                            gq[i * w + c] += g[0] * dd[j * w + c];
                        }
                    }
                }
                if let Some(gd) = self.accum(grads, *d) {
                    for (i, &j) in best.iter().enumerate() {
                        for c in 0..w {
                            gd[j * w + c] += g[0] * qd[i * w + c];
                        }
                    }
                }
            }
            Op::Stack(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    if let Some(gp) = self.accum(grads, p) {
                        gp[0] += g[i];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.accum(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
    }

    fn backprop_attention(&self, s: &AttentionSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (lq, width) = self.dims2(s.q, "attention").expect("recorded");
        let lk = self.value(s.k).shape()[0];
        let dk = width / s.heads;
        let qd = self.value(s.q).data();
        let kd = self.value(s.k).data();
        let vd = self.value(s.v).data();
        let mut dq = vec![T::zero(); lq * width];
        let mut dk_ = vec![T::zero(); lk * width];
        let mut dv = vec![T::zero(); lk * width];
        let mut dscores = vec![T::zero(); s.heads * lq * lk];
        for h in 0..s.heads {
            let p = &s.probs[h * lq * lk..(h + 1) * lq * lk];
            let g_h = MatRef {
                data: g,
                offset: h * dk,
                rows: lq,
                cols: dk,
                rs: width,
                cs: 1,
            };
            let v_h = MatRef {
                data: vd,
                offset: h * dk,
                rows: lk,
                cols: dk,
                rs: width,
                cs: 1,
            };
            // dV_h = Pᵀ · dO_h
            gemm(
                MatRef::dense(p, lq, lk).t(),
                g_h,
                MatMut {
                    data: &mut dv,
                    offset: h * dk,
                    rows: lk,
                    cols: dk,
                    rs: width,
                    cs: 1,
                },
                false,
            );
            // dP = dO_h · V_hᵀ, then softmax backward in place.
            let ds = &mut dscores[h * lq * lk..(h + 1) * lq * lk];
            gemm(g_h, v_h.t(), MatMut::dense(ds, lq, lk), false);
            for i in 0..lq {
                let pr = &p[i * lk..(i + 1) * lk];
                let dr = &mut ds[i * lk..(i + 1) * lk];
                let inner = kernels::dot(pr, dr);
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - inner);
                }
            }
            let ds = &dscores[h * lq * lk..(h + 1) * lq * lk];
            let k_h = MatRef {
                data: kd,
                offset: h * dk,
                rows: lk,
                cols: dk,
                rs: width,
                cs: 1,
            };
            let q_h = MatRef {
                data: qd,
                offset: h * dk,
                rows: lq,
                cols: dk,
                rs: width,
                cs: 1,
            };
            gemm(
                MatRef::dense(ds, lq, lk),
                k_h,
                MatMut {
                    data: &mut dq,
                    offset: h * dk,
                    rows: lq,
                    cols: dk,
                    rs: width,
                    cs: 1,
                },
                false,
            );
            gemm(
                MatRef::dense(ds, lq, lk).t(),
                q_h,
                MatMut {
                    data: &mut dk_,
                    offset: h * dk,
                    rows: lk,
                    cols: dk,
                    rs: width,
                    cs: 1,
                },
                false,
            );
        }
        for (var, buf) in [(s.q, &dq), (s.k, &dk_), (s.v, &dv)] {
            if let Some(gv) = self.accum(grads, var) {
                gv.iter_mut().zip(buf).for_each(|(a, &b)| *a += b);
            }
        }
        if let Some(b) = s.bias {
            if let Some(gb) = self.accum(grads, b) {
                gb.iter_mut().zip(&dscores).for_each(|(a, &b)| *a += b);
            }
        }
    }
}
