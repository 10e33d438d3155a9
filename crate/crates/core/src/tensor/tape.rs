use std::ops::Range;

use super::kernels::{axpy, dot, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row layout of a batch of right-padded sequences stacked as
/// `batch * len` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub len: usize,
    /// Unpadded length of each sequence; keys at or past it are masked.
    pub valid: Vec<usize>,
}

impl SeqLayout {
    pub fn dense(batch: usize, len: usize) -> Self {
        Self {
            batch,
            len,
            valid: vec![len; batch],
        }
    }

    fn check(&self) -> Result<()> {
        if self.valid.len() != self.batch || self.valid.iter().any(|&v| v > self.len) {
            return Err(Error::shape(
                "attention",
                format!(
                    "layout batch={} len={} valid={:?}",
                    self.batch, self.len, self.valid
                ),
            ));
        }
        Ok(())
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    GroupMean {
        x: Var,
        groups: Vec<Range<usize>>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        heads: usize,
        probs: Vec<T>,
    },
    GatherDot {
        h: Var,
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        cols: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Reverse-mode tape. Ops append nodes; [`Tape::backward`] walks them in
/// reverse and accumulates gradients into every tracked node.
///
/// A tape is single-threaded. Untracked inputs (constants) never receive
/// gradients, and ops with only untracked inputs skip saving backward state.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient after [`Tape::backward`]; `None` for untracked or
    /// unreachable nodes.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let (r, c) = self.value(v).shape();
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_vec(r, c, g.clone()))
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.is_tracked(v))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (r, c) = self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_vec(r, c, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    /// `x + bias` with `bias` of shape `1 x cols` added to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(bias) != (1, c) {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", (r, c), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_exact_mut(c.max(1)) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let tracked = self.any_tracked(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), tracked))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        let tracked = self.is_tracked(x);
        Ok(self.push(value, Op::Scale(x, s), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let tracked = self.is_tracked(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), tracked))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: T = self.value(x).data().iter().copied().sum();
        let tracked = self.is_tracked(x);
        Ok(self.push(Tensor::scalar(s / T::lit(n as f64)), Op::Mean(x), tracked))
    }

    /// Row mean over each group of consecutive rows: output row `g` is the
    /// mean of `x[groups[g]]`.
    pub fn group_mean(&mut self, x: Var, groups: Vec<Range<usize>>) -> Result<Var> {
        let (r, c) = self.shape(x);
        for g in &groups {
            if g.is_empty() || g.end > r {
                return Err(Error::shape(
                    "group_mean",
                    format!("group {g:?} over {r} rows"),
                ));
            }
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(groups.len(), c);
        for (gi, g) in groups.iter().enumerate() {
            let inv = T::one() / T::lit(g.len() as f64);
            let orow = out.row_mut(gi);
            for ri in g.clone() {
                axpy(inv, xv.row(ri), orow);
            }
        }
        let tracked = self.is_tracked(x);
        Ok(self.push(out, Op::GroupMean { x, groups }, tracked))
    }

    /// Mean of all rows (`1 x cols`).
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).0;
        self.group_mean(x, vec![0..r])
    }

    /// Stacks inputs along rows.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let c = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(Error::shape("concat", format!("cols {pc} vs {c}")));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let tracked = self.any_tracked(parts);
        Ok(self.push(
            Tensor::from_vec(rows, c, data),
            Op::Concat(parts.to_vec()),
            tracked,
        ))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{} of {r} rows", start + len),
            ));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let tracked = self.is_tracked(x);
        Ok(self.push(
            Tensor::from_vec(len, c, data),
            Op::Slice { x, start },
            tracked,
        ))
    }

    /// Embedding lookup: output row `i` is `x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} of {r} rows"),
            ));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(xv.row(i));
        }
        let tracked = self.is_tracked(x);
        let rows = idx.len();
        Ok(self.push(
            Tensor::from_vec(rows, c, data),
            Op::Gather { x, idx },
            tracked,
        ))
    }

    /// Row-wise softmax. `keep[i] == false` masks an entry out; a row with no
    /// kept entries yields all zeros.
    pub fn softmax_masked(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(m) = keep {
            if m.len() != r * c {
                return Err(Error::shape(
                    "softmax",
                    format!("mask len {} for {r}x{c}", m.len()),
                ));
            }
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let kept = |j: usize| keep.is_none_or(|m| m[i * c + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if kept(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let orow = out.row_mut(i);
            let mut z = T::zero();
            for j in 0..c {
                if kept(j) {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    z += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let tracked = self.is_tracked(x);
        Ok(self.push(out, Op::Softmax(x), tracked))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Row-wise `x - logsumexp(x)`, stabilised by the row max.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if c == 0 {
            return Err(Error::shape("log_softmax", "zero columns"));
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let tracked = self.is_tracked(x);
        Ok(self.push(out, Op::LogSoftmax(x), tracked))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= T::zero()) {
            return Err(Error::Invalid(format!("log of non-positive value {bad}")));
        }
        let value = self.value(x).map(T::ln);
        let tracked = self.is_tracked(x);
        Ok(self.push(value, Op::Log(x), tracked))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(T::exp);
        let tracked = self.is_tracked(x);
        Ok(self.push(value, Op::Exp(x), tracked))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| gelu_fwd(v));
        let tracked = self.is_tracked(x);
        Ok(self.push(value, Op::Gelu(x), tracked))
    }

    /// Per-row layer normalisation with affine `gamma`, `beta` (`1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "{:?} with gamma {:?} beta {:?}",
                    (r, c),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let tracked = self.any_tracked(&[x, gamma, beta]);
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let n = T::lit(c as f64);
        let eps = T::lit(LN_EPS);
        let mut out = Tensor::zeros(r, c);
        let mut xhat = if tracked {
            vec![T::zero(); r * c]
        } else {
            Vec::new()
        };
        let mut inv_std = if tracked {
            vec![T::zero(); r]
        } else {
            Vec::new()
        };
        for i in 0..r {
            let row = xv.row(i);
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            let orow = out.row_mut(i);
            for j in 0..c {
                let h = (row[j] - mu) * inv;
                orow[j] = g[j] * h + b[j];
                if tracked {
                    xhat[i * c + j] = h;
                }
            }
            if tracked {
                inv_std[i] = inv;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    /// Multi-head causal scaled dot-product attention over a padded batch.
    ///
    /// `q`, `k`, `v` are `batch * len` rows of width `D`, split into `heads`
    /// contiguous column blocks. Query `i` of sequence `b` attends to keys
    /// `j <= i` with `j < valid[b]`; a query with no admissible key outputs
    /// zeros.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: &SeqLayout,
        heads: usize,
    ) -> Result<Var> {
        layout.check()?;
        let (rows, d) = self.shape(q);
        if self.shape(k) != (rows, d) || self.shape(v) != (rows, d) {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?} k {:?} v {:?}",
                    (rows, d),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        if rows != layout.batch * layout.len {
            return Err(Error::shape(
                "attention",
                format!(
                    "{rows} rows for batch {} x len {}",
                    layout.batch, layout.len
                ),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("dim {d} not divisible by {heads} heads"),
            ));
        }
        let tracked = self.any_tracked(&[q, k, v]);
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let l = layout.len;
        let tri = l * (l + 1) / 2;
        let mut probs = if tracked {
            vec![T::zero(); layout.batch * heads * tri]
        } else {
            Vec::new()
        };
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![T::zero(); rows * d];
        let mut p = vec![T::zero(); l];
        for b in 0..layout.batch {
            let base = b * l;
            let valid = layout.valid[b];
            for h in 0..heads {
                let col = h * dh;
                for i in 0..l {
                    let nkeys = (i + 1).min(valid);
                    if nkeys == 0 {
                        continue;
                    }
                    let qi = &qv[(base + i) * d + col..(base + i) * d + col + dh];
                    let mut max = T::neg_infinity();
                    for j in 0..nkeys {
                        let kj = &kv[(base + j) * d + col..(base + j) * d + col + dh];
                        let s = dot(qi, kj) * scale;
                        p[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut z = T::zero();
                    for pj in &mut p[..nkeys] {
                        *pj = (*pj - max).exp();
                        z += *pj;
                    }
                    let inv = T::one() / z;
                    let oi = &mut out[(base + i) * d + col..(base + i) * d + col + dh];
                    for j in 0..nkeys {
                        p[j] *= inv;
                        let vj = &vv[(base + j) * d + col..(base + j) * d + col + dh];
                        axpy(p[j], vj, oi);
                    }
                    if tracked {
                        let off = (b * heads + h) * tri + i * (i + 1) / 2;
                        probs[off..off + nkeys].copy_from_slice(&p[..nkeys]);
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(rows, d, out),
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                heads,
                probs,
            },
            tracked,
        ))
    }

    /// Grouped dot products against rows of `table`: with `P` rows in `h`
    /// and `ids.len() == P * G`, output `[p, g] = h[p] . table[ids[p*G + g]]`.
    pub fn gather_dot(&mut self, h: Var, table: Var, ids: Vec<usize>) -> Result<Var> {
        let (p, d) = self.shape(h);
        let (n, td) = self.shape(table);
        if td != d || p == 0 || ids.len() % p != 0 {
            return Err(Error::shape(
                "gather_dot",
                format!("h {:?} table {:?} ids {}", (p, d), (n, td), ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_dot", format!("id {bad} of {n} rows")));
        }
        let g = ids.len() / p;
        let hv = self.value(h);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len());
        for (pi, chunk) in ids.chunks_exact(g).enumerate() {
            let hr = hv.row(pi);
            out.extend(chunk.iter().map(|&id| dot(hr, tv.row(id))));
        }
        let tracked = self.any_tracked(&[h, table]);
        Ok(self.push(
            Tensor::from_vec(p, g, out),
            Op::GatherDot { h, table, ids },
            tracked,
        ))
    }

    /// `out[r] = x[r, cols[r]]`, shape `rows x 1`.
    pub fn pick_cols(&mut self, x: Var, cols: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::shape(
                "pick_cols",
                format!("{} picks over {r}x{c}", cols.len()),
            ));
        }
        let xv = self.value(x);
        let data = cols.iter().enumerate().map(|(i, &j)| xv.at(i, j)).collect();
        let tracked = self.is_tracked(x);
        Ok(self.push(Tensor::from_vec(r, 1, data), Op::Pick { x, cols }, tracked))
    }

    /// Populates gradients of every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.is_tracked(loss) {
            return Err(Error::Invalid(
                "loss is not connected to any tracked value".into(),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, dy: &[T]) {
        // Split borrows: nodes are read-only, grads are written.
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].tracked {
                let len = nodes[v.0].value.len();
                f(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = av.shape();
                let n = bv.cols();
                acc(*a, &mut |g| gemm_nt(m, n, k, dy, bv.data(), g));
                acc(*b, &mut |g| gemm_tn(m, k, n, av.data(), dy, g));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| axpy(T::one(), dy, g));
                acc(*b, &mut |g| axpy(T::one(), dy, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| axpy(T::one(), dy, g));
                acc(*b, &mut |g| axpy(-T::one(), dy, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |g| {
                    for ((o, &d), &y) in g.iter_mut().zip(dy).zip(bv) {
                        *o += d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((o, &d), &x) in g.iter_mut().zip(dy).zip(av) {
                        *o += d * x;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let c = nodes[bias.0].value.cols();
                acc(*x, &mut |g| axpy(T::one(), dy, g));
                acc(*bias, &mut |g| {
                    for row in dy.chunks_exact(c.max(1)) {
                        axpy(T::one(), row, g);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |g| axpy(*s, dy, g)),
            Op::Sum(x) => {
                let d = dy[0];
                acc(*x, &mut |g| g.iter_mut().for_each(|o| *o += d));
            }
            Op::Mean(x) => {
                let d = dy[0] / T::lit(nodes[x.0].value.len() as f64);
                acc(*x, &mut |g| g.iter_mut().for_each(|o| *o += d));
            }
            Op::GroupMean { x, groups } => {
                let c = nodes[x.0].value.cols();
                acc(*x, &mut |g| {
                    for (gi, grp) in groups.iter().enumerate() {
                        let inv = T::one() / T::lit(grp.len() as f64);
                        let drow = &dy[gi * c..(gi + 1) * c];
                        for r in grp.clone() {
                            axpy(inv, drow, &mut g[r * c..(r + 1) * c]);
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    let seg = &dy[off..off + len];
                    acc(*p, &mut |g| axpy(T::one(), seg, g));
                    off += len;
                }
            }
            Op::Slice { x, start } => {
                let c = nodes[x.0].value.cols();
                let off = start * c;
                acc(*x, &mut |g| axpy(T::one(), dy, &mut g[off..off + dy.len()]));
            }
            Op::Gather { x, idx } => {
                let c = nodes[x.0].value.cols();
                acc(*x, &mut |g| {
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(
                            T::one(),
                            &dy[r * c..(r + 1) * c],
                            &mut g[src * c..(src + 1) * c],
                        );
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                acc(*x, &mut |g| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dr = &dy[r * c..(r + 1) * c];
                        let s = dot(yr, dr);
                        for j in 0..c {
                            g[r * c + j] += yr[j] * (dr[j] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let c = y.cols();
                acc(*x, &mut |g| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dr = &dy[r * c..(r + 1) * c];
                        let s: T = dr.iter().copied().sum();
                        for j in 0..c {
                            g[r * c + j] += dr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |g| {
                    for ((o, &d), &v) in g.iter_mut().zip(dy).zip(xv) {
                        *o += d / v;
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &mut |g| {
                    for ((o, &d), &v) in g.iter_mut().zip(dy).zip(y) {
                        *o += d * v;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |g| {
                    for ((o, &d), &v) in g.iter_mut().zip(dy).zip(xv) {
                        *o += d * gelu_grad(v);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = nodes[x.0].value.cols();
                let r = nodes[x.0].value.rows();
                let gv = nodes[gamma.0].value.data();
                acc(*gamma, &mut |g| {
                    for (row, hrow) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            g[j] += row[j] * hrow[j];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for row in dy.chunks_exact(c) {
                        axpy(T::one(), row, g);
                    }
                });
                let n = T::lit(c as f64);
                acc(*x, &mut |g| {
                    let mut dxhat = vec![T::zero(); c];
                    for i in 0..r {
                        let drow = &dy[i * c..(i + 1) * c];
                        let hrow = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dxhat[j] = drow[j] * gv[j];
                        }
                        let s1: T = dxhat.iter().copied().sum();
                        let s2 = dot(&dxhat, hrow);
                        let k = inv_std[i] / n;
                        for j in 0..c {
                            g[i * c + j] += k * (n * dxhat[j] - s1 - hrow[j] * s2);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            } => {
                let (rows, d) = nodes[q.0].value.shape();
                let dh = d / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let l = layout.len;
                let tri = l * (l + 1) / 2;
                let (qv, kv, vv) = (
                    nodes[q.0].value.data(),
                    nodes[k.0].value.data(),
                    nodes[v.0].value.data(),
                );
                let mut dq = vec![T::zero(); rows * d];
                let mut dk = vec![T::zero(); rows * d];
                let mut dv = vec![T::zero(); rows * d];
                let mut ds = vec![T::zero(); l];
                for b in 0..layout.batch {
                    let base = b * l;
                    let valid = layout.valid[b];
                    for h in 0..*heads {
                        let col = h * dh;
                        for i in 0..l {
                            let nkeys = (i + 1).min(valid);
                            if nkeys == 0 {
                                continue;
                            }
                            let off = (b * heads + h) * tri + i * (i + 1) / 2;
                            let p = &probs[off..off + nkeys];
                            let qi_at = (base + i) * d + col;
                            let doi = &dy[qi_at..qi_at + dh];
                            let mut s = T::zero();
                            for j in 0..nkeys {
                                let at = (base + j) * d + col;
                                let dp = dot(doi, &vv[at..at + dh]);
                                ds[j] = dp;
                                s += p[j] * dp;
                                axpy(p[j], doi, &mut dv[at..at + dh]);
                            }
                            for j in 0..nkeys {
                                let at = (base + j) * d + col;
                                let dsj = p[j] * (ds[j] - s) * scale;
                                axpy(dsj, &kv[at..at + dh], &mut dq[qi_at..qi_at + dh]);
                                axpy(dsj, &qv[qi_at..qi_at + dh], &mut dk[at..at + dh]);
                            }
                        }
                    }
                }
                acc(*q, &mut |g| axpy(T::one(), &dq, g));
                acc(*k, &mut |g| axpy(T::one(), &dk, g));
                acc(*v, &mut |g| axpy(T::one(), &dv, g));
            }
            Op::GatherDot { h, table, ids } => {
                let hv = &nodes[h.0].value;
                let tv = &nodes[table.0].value;
                let d = hv.cols();
                let g_per = ids.len() / hv.rows();
                acc(*h, &mut |g| {
                    for (pi, chunk) in ids.chunks_exact(g_per).enumerate() {
                        let grow = &mut g[pi * d..(pi + 1) * d];
                        for (gi, &id) in chunk.iter().enumerate() {
                            axpy(dy[pi * g_per + gi], tv.row(id), grow);
                        }
                    }
                });
                acc(*table, &mut |g| {
                    for (pi, chunk) in ids.chunks_exact(g_per).enumerate() {
                        let hr = hv.row(pi);
                        for (gi, &id) in chunk.iter().enumerate() {
                            axpy(dy[pi * g_per + gi], hr, &mut g[id * d..(id + 1) * d]);
                        }
                    }
                });
            }
            Op::Pick { x, cols } => {
                let c = nodes[x.0].value.cols();
                acc(*x, &mut |g| {
                    for (r, &j) in cols.iter().enumerate() {
                        g[r * c + j] += dy[r];
                    }
                });
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}
