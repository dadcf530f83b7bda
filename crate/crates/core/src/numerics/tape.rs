use std::cell::{Cell, RefCell};

use super::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};
use super::NumError;

/// Value used by [`Tape::masked_fill`] callers for excluded attention and
/// score entries. Finite, so `softmax` backward never sees `inf - inf`.
pub const MASK_VALUE: f64 = -1e30;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var, shared_rhs: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Relu { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Transpose { x: Var },
    MaskedFill { x: Var, mask: Vec<bool> },
    Concat { parts: Vec<Var> },
    Slice { x: Var, axis: usize, start: usize },
    Reshape { x: Var },
    PairAdd { rows: Var, cols: Var },
    Sum { x: Var },
    Mean { x: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records tensor operations for one reverse pass.
///
/// A tape is single-threaded. Every op returns a [`Var`]; after
/// [`Tape::backward`] the gradient of the loss with respect to every recorded
/// value is available through [`Tape::grad`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    consumed: Cell<bool>,
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> NumError {
    NumError::ShapeMismatch(format!("{op}: {a:?} vs {b:?}"))
}

/// Size of the leading part of `a` that `b` broadcasts over, if `b` is a
/// suffix of `a`.
fn suffix_repeats(a: &[usize], b: &[usize]) -> Option<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return None;
    }
    Some(a[..a.len() - b.len()].iter().product())
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// An input that never needs a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Runs `f` on a borrowed value without cloning it.
    pub fn with_value<T>(&self, v: Var, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// `a[..., m, k] · b`, where `b` is either `[k, n]` (shared across the
    /// leading dims) or `[..., k, n]` with the same leading dims as `a`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, NumError> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if k != k2 || (!shared_rhs && &sb[..sb.len() - 2] != lead) {
            return Err(mismatch("matmul", sa, sb));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        if shared_rhs {
            gemm_nn(ta.data(), tb.data(), &mut out, batch * m, k, n);
        } else {
            for bi in 0..batch {
                gemm_nn(
                    &ta.data()[bi * m * k..(bi + 1) * m * k],
                    &tb.data()[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        drop(nodes);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, shared_rhs }))
    }

    fn broadcast_binary(
        &self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, usize), NumError> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        let reps = suffix_repeats(ta.shape(), tb.shape())
            .ok_or_else(|| mismatch(name, ta.shape(), tb.shape()))?;
        let inner = tb.len();
        let mut out = ta.data().to_vec();
        for r in 0..reps {
            for (o, &bv) in out[r * inner..(r + 1) * inner].iter_mut().zip(tb.data()) {
                *o = f(*o, bv);
            }
        }
        Ok((Tensor::new(ta.shape().to_vec(), out)?, reps))
    }

    /// Elementwise sum; `b` broadcasts over the leading dims of `a`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var, NumError> {
        let (t, _) = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    /// Elementwise product; `b` broadcasts over the leading dims of `a`.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, NumError> {
        let (t, _) = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&self, x: Var, factor: f64) -> Var {
        let t = self.with_value(x, |t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect())
                .expect("same shape")
        });
        self.push(t, Op::Scale { x, factor })
    }

    pub fn relu(&self, x: Var) -> Var {
        let t = self.with_value(x, |t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v.max(0.0)).collect())
                .expect("same shape")
        });
        self.push(t, Op::Relu { x })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let t = self.with_value(x, |t| {
            let d = t.last_dim();
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(d) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            Tensor::new(t.shape().to_vec(), out).expect("same shape")
        });
        self.push(t, Op::Softmax { x })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, x: Var) -> Var {
        let t = self.with_value(x, |t| {
            let d = t.last_dim();
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(d) {
                let lse = log_sum_exp(row);
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            Tensor::new(t.shape().to_vec(), out).expect("same shape")
        });
        self.push(t, Op::LogSoftmax { x })
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both of
    /// the last-axis size). `eps` is added to the variance, so near-constant
    /// rows stay finite.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumError> {
        let nodes = self.nodes.borrow();
        let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
        let d = tx.last_dim();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.len() / d.max(1);
        let mut normalized = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let n = (row[j] - mean) * is;
                normalized[r * d + j] = n;
                out[r * d + j] = n * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        drop(nodes);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, normalized, inv_std }))
    }

    /// Rows of `table` (`[V, d]`) for each id; output shape `prefix ++ [d]`.
    pub fn embedding(&self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var, NumError> {
        let nodes = self.nodes.borrow();
        let t = &nodes[table.0].value;
        if t.shape().len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(mismatch("embedding", t.shape(), prefix));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumError::ShapeMismatch(format!("embedding id {id} >= table rows {v}")));
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        drop(nodes);
        Ok(self.push(Tensor::new(shape, out)?, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var, NumError> {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        let s = t.shape();
        if s.len() < 2 {
            return Err(mismatch("transpose", s, &[]));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_last(t.data(), m, n);
        let mut shape = s.to_vec();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        drop(nodes);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose { x }))
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&self, x: Var, mask: &[bool], value: f64) -> Result<Var, NumError> {
        let t = self.with_value(x, |t| {
            if t.len() != mask.len() {
                return Err(mismatch("masked_fill", t.shape(), &[mask.len()]));
            }
            let out = t.data().iter().zip(mask).map(|(&v, &m)| if m { value } else { v }).collect();
            Tensor::new(t.shape().to_vec(), out)
        })?;
        Ok(self.push(t, Op::MaskedFill { x, mask: mask.to_vec() }))
    }

    /// Concatenates along the last axis.
    pub fn concat(&self, parts: &[Var]) -> Result<Var, NumError> {
        let nodes = self.nodes.borrow();
        let first = nodes[parts.first().ok_or_else(|| mismatch("concat", &[], &[]))?.0].value.shape();
        let lead = &first[..first.len().saturating_sub(1)];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = nodes[p.0].value.shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(mismatch("concat", first, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = nodes[p.0].value.data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        drop(nodes);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec() }))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, NumError> {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        let s = t.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(NumError::ShapeMismatch(format!(
                "slice axis {axis} [{start}, {}) of {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        drop(nodes);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var, NumError> {
        let t = self.with_value(x, |t| t.reshaped(shape))?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    /// Pairwise sums: `rows [..., T, d]`, `cols [..., U, d]` give
    /// `out[..., i, j, :] = rows[..., i, :] + cols[..., j, :]`.
    pub fn pair_add(&self, rows: Var, cols: Var) -> Result<Var, NumError> {
        let nodes = self.nodes.borrow();
        let (tr, tc) = (&nodes[rows.0].value, &nodes[cols.0].value);
        let (sr, sc) = (tr.shape(), tc.shape());
        if sr.len() < 2 || sc.len() != sr.len() || sr[..sr.len() - 2] != sc[..sc.len() - 2]
            || sr[sr.len() - 1] != sc[sc.len() - 1]
        {
            return Err(mismatch("pair_add", sr, sc));
        }
        let d = sr[sr.len() - 1];
        let (t, u) = (sr[sr.len() - 2], sc[sc.len() - 2]);
        let batch: usize = sr[..sr.len() - 2].iter().product();
        let mut out = vec![0.0; batch * t * u * d];
        for b in 0..batch {
            for i in 0..t {
                let r = &tr.data()[(b * t + i) * d..(b * t + i + 1) * d];
                for j in 0..u {
                    let c = &tc.data()[(b * u + j) * d..(b * u + j + 1) * d];
                    let o = &mut out[((b * t + i) * u + j) * d..((b * t + i) * u + j + 1) * d];
                    for k in 0..d {
                        o[k] = r[k] + c[k];
                    }
                }
            }
        }
        let mut shape = sr[..sr.len() - 2].to_vec();
        shape.extend([t, u, d]);
        drop(nodes);
        Ok(self.push(Tensor::new(shape, out)?, Op::PairAdd { rows, cols }))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.with_value(x, |t| t.data().iter().sum::<f64>());
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = self.with_value(x, |t| t.data().iter().sum::<f64>() / t.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean { x })
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// with logits flattened to `[targets.len(), V]`. `None` targets are
    /// ignored.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>]) -> Result<Var, NumError> {
        let nodes = self.nodes.borrow();
        let t = &nodes[logits.0].value;
        let v = t.last_dim();
        if t.len() != targets.len() * v {
            return Err(mismatch("cross_entropy", t.shape(), &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(NumError::EmptyLoss);
        }
        let mut probs = t.data().to_vec();
        let mut total = 0.0;
        for (row, target) in probs.chunks_mut(v).zip(targets) {
            let lse = log_sum_exp(row);
            if let Some(tg) = *target {
                if tg >= v {
                    return Err(NumError::ShapeMismatch(format!("target {tg} >= classes {v}")));
                }
                total -= row[tg] - lse;
            }
            for p in row.iter_mut() {
                *p = (*p - lse).exp();
            }
        }
        let value = total / count as f64;
        drop(nodes);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
        ))
    }

    /// Populates gradients of `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<(), NumError> {
        if self.consumed.get() {
            return Err(NumError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(NumError::NotScalar(nodes[loss.0].value.shape().to_vec()));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul { a, b, shared_rhs } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let sa = ta.shape();
                    let sb = tb.shape();
                    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                    let n = sb[sb.len() - 1];
                    let batch = ta.len() / (m * k).max(1);
                    {
                        let ga = acc(&mut grads, &nodes, *a);
                        if *shared_rhs {
                            gemm_nt(&g, tb.data(), ga, batch * m, n, k);
                        } else {
                            for bi in 0..batch {
                                gemm_nt(
                                    &g[bi * m * n..(bi + 1) * m * n],
                                    &tb.data()[bi * k * n..(bi + 1) * k * n],
                                    &mut ga[bi * m * k..(bi + 1) * m * k],
                                    m,
                                    n,
                                    k,
                                );
                            }
                        }
                    }
                    let gb = acc(&mut grads, &nodes, *b);
                    if *shared_rhs {
                        gemm_tn(ta.data(), &g, gb, batch * m, k, n);
                    } else {
                        for bi in 0..batch {
                            gemm_tn(
                                &ta.data()[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (x, y) in acc(&mut grads, &nodes, *a).iter_mut().zip(&g) {
                        *x += y;
                    }
                    let gb = acc(&mut grads, &nodes, *b);
                    let inner = gb.len();
                    for chunk in g.chunks(inner) {
                        for (x, y) in gb.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let inner = tb.len();
                    {
                        let ga = acc(&mut grads, &nodes, *a);
                        for (i, x) in ga.iter_mut().enumerate() {
                            *x += g[i] * tb.data()[i % inner];
                        }
                    }
                    let gb = acc(&mut grads, &nodes, *b);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % inner] += gi * ta.data()[i];
                    }
                }
                Op::Scale { x, factor } => {
                    for (d, y) in acc(&mut grads, &nodes, *x).iter_mut().zip(&g) {
                        *d += y * factor;
                    }
                }
                Op::Relu { x } => {
                    let tx = &nodes[x.0].value;
                    let gx = acc(&mut grads, &nodes, *x);
                    for ((d, y), &xv) in gx.iter_mut().zip(&g).zip(tx.data()) {
                        if xv > 0.0 {
                            *d += y;
                        }
                    }
                }
                Op::Softmax { x } => {
                    let d = out.last_dim();
                    let gx = acc(&mut grads, &nodes, *x);
                    for ((gr, yr), dx) in g.chunks(d).zip(out.data().chunks(d)).zip(gx.chunks_mut(d)) {
                        let s = dot(gr, yr);
                        for j in 0..d {
                            dx[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
                Op::LogSoftmax { x } => {
                    let d = out.last_dim();
                    let gx = acc(&mut grads, &nodes, *x);
                    for ((gr, yr), dx) in g.chunks(d).zip(out.data().chunks(d)).zip(gx.chunks_mut(d)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..d {
                            dx[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, normalized, inv_std } => {
                    let d = out.last_dim();
                    let tg = nodes[gain.0].value.data().to_vec();
                    {
                        let gg = acc(&mut grads, &nodes, *gain);
                        for (r, gr) in g.chunks(d).enumerate() {
                            for j in 0..d {
                                gg[j] += gr[j] * normalized[r * d + j];
                            }
                        }
                    }
                    {
                        let gbias = acc(&mut grads, &nodes, *bias);
                        for gr in g.chunks(d) {
                            for j in 0..d {
                                gbias[j] += gr[j];
                            }
                        }
                    }
                    let gx = acc(&mut grads, &nodes, *x);
                    let mut dn = vec![0.0; d];
                    for (r, gr) in g.chunks(d).enumerate() {
                        let nr = &normalized[r * d..(r + 1) * d];
                        for j in 0..d {
                            dn[j] = gr[j] * tg[j];
                        }
                        let mean_dn = dn.iter().sum::<f64>() / d as f64;
                        let mean_dn_n = dot(&dn, nr) / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] * (dn[j] - mean_dn - nr[j] * mean_dn_n);
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = nodes[table.0].value.shape()[1];
                    let gt = acc(&mut grads, &nodes, *table);
                    for (row, &id) in g.chunks(d).zip(ids) {
                        for (x, y) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
                Op::Transpose { x } => {
                    let s = out.shape();
                    let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                    let back = transpose_last(&g, m, n);
                    for (d, y) in acc(&mut grads, &nodes, *x).iter_mut().zip(&back) {
                        *d += y;
                    }
                }
                Op::MaskedFill { x, mask } => {
                    let gx = acc(&mut grads, &nodes, *x);
                    for ((d, y), &m) in gx.iter_mut().zip(&g).zip(mask) {
                        if !m {
                            *d += y;
                        }
                    }
                }
                Op::Concat { parts } => {
                    let total = out.last_dim();
                    let rows = out.len() / total.max(1);
                    let mut off = 0;
                    for p in parts {
                        let w = nodes[p.0].value.last_dim();
                        let gp = acc(&mut grads, &nodes, *p);
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + off + j];
                            }
                        }
                        off += w;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let s = nodes[x.0].value.shape().to_vec();
                    let len = out.shape()[*axis];
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[*axis + 1..].iter().product();
                    let gx = acc(&mut grads, &nodes, *x);
                    for o in 0..outer {
                        let base = (o * s[*axis] + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, y) in gx[base..base + len * inner].iter_mut().zip(src) {
                            *d += y;
                        }
                    }
                }
                Op::Reshape { x } => {
                    for (d, y) in acc(&mut grads, &nodes, *x).iter_mut().zip(&g) {
                        *d += y;
                    }
                }
                Op::PairAdd { rows, cols } => {
                    let s = out.shape();
                    let l = s.len();
                    let (t, u, d) = (s[l - 3], s[l - 2], s[l - 1]);
                    let batch = out.len() / (t * u * d).max(1);
                    {
                        let gr = acc(&mut grads, &nodes, *rows);
                        for b in 0..batch {
                            for i in 0..t {
                                let dst = &mut gr[(b * t + i) * d..(b * t + i + 1) * d];
                                for j in 0..u {
                                    let src = &g[((b * t + i) * u + j) * d..((b * t + i) * u + j + 1) * d];
                                    for k in 0..d {
                                        dst[k] += src[k];
                                    }
                                }
                            }
                        }
                    }
                    let gc = acc(&mut grads, &nodes, *cols);
                    for b in 0..batch {
                        for i in 0..t {
                            for j in 0..u {
                                let src = &g[((b * t + i) * u + j) * d..((b * t + i) * u + j + 1) * d];
                                let dst = &mut gc[(b * u + j) * d..(b * u + j + 1) * d];
                                for k in 0..d {
                                    dst[k] += src[k];
                                }
                            }
                        }
                    }
                }
                Op::Sum { x } => {
                    for d in acc(&mut grads, &nodes, *x).iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Mean { x } => {
                    let n = nodes[x.0].value.len().max(1) as f64;
                    for d in acc(&mut grads, &nodes, *x).iter_mut() {
                        *d += g[0] / n;
                    }
                }
                Op::CrossEntropy { logits, targets, probs, count } => {
                    let v = nodes[logits.0].value.last_dim();
                    let scale = g[0] / *count as f64;
                    let gl = acc(&mut grads, &nodes, *logits);
                    for (r, target) in targets.iter().enumerate() {
                        if let Some(tg) = *target {
                            for j in 0..v {
                                gl[r * v + j] += scale * probs[r * v + j];
                            }
                            gl[r * v + tg] -= scale;
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`. Values the
    /// loss does not depend on get zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if !self.consumed.get() {
            return None;
        }
        let nodes = self.nodes.borrow();
        let shape = nodes[v.0].value.shape().to_vec();
        let data = self.grads.borrow().get(v.0).cloned().flatten();
        Some(match data {
            Some(d) => Tensor::new(shape, d).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        })
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset(&self) {
        self.consumed.set(false);
        self.grads.borrow_mut().clear();
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn transpose_last(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let block = m * n;
    if block == 0 {
        return out;
    }
    for (src, dst) in data.chunks(block).zip(out.chunks_mut(block)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}
