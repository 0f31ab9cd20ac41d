//! A small reverse-mode automatic differentiation tape over matrices.
//!
//! Every node stores its forward value; `backward` walks the tape in reverse
//! insertion order. The op set is exactly what the denoiser and the training
//! losses need, with attention and layer normalisation fused into single
//! nodes so their backward passes stay cheap.

use std::sync::Arc;

use crate::real::Real;
use crate::tensor::{gemm_into, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Static layout of a fused multi-head attention node.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    /// Number of independent sequences stacked along the rows.
    pub n_seq: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub head_size: usize,
    /// Row-major `seq_len × seq_len` relative-position bucket ids.
    pub buckets: Arc<Vec<usize>>,
}

enum Op<T> {
    Leaf,
    /// `a · b` or `a · bᵀ`
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    /// Adds a `1 × cols` row to every row of `a`.
    AddRow {
        a: Var,
        row: Var,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        table: Var,
        layout: AttentionLayout,
        probs: Vec<T>,
    },
    /// Mean squared error over rows with `keep[r]`, against a constant
    /// target. Produces a `1 × 1` node.
    MaskedMse {
        pred: Var,
        target: Matrix<T>,
        keep: Vec<bool>,
    },
    /// Mean categorical cross-entropy of row-wise softmax. `1 × 1`.
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix<T>,
    },
    /// `Σ wᵢ · aᵢ` over equally shaped nodes.
    Combine(Vec<(Var, T)>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }

    /// The gradient, or zeros shaped like `like` when no path reached `v`.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix<T>) -> Matrix<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads[v.0].take()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable input.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that gradients never flow into. Copying a value into a
    /// constant is how stop-gradient is expressed.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m[(0, 0)]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                transpose_b: false,
            },
            rg,
        )
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                transpose_b: true,
            },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "broadcast row must have one row");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), r.cols(), "broadcast width mismatch");
        let rv = r.as_slice().to_vec();
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow { a, row }, rg)
    }

    /// `x · w + b` with `b` a `1 × out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let value = self
            .value(a)
            .map(|x| half * x * (T::ONE + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalisation with `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gain).as_slice();
        let b = self.value(bias).as_slice();
        let n = T::from_f64(cols as f64);
        let eps = T::from_f64(LN_EPS);
        let mut normalized = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::ONE / (var + eps).sqrt();
            inv_std.push(is);
            let nr = normalized.row_mut(r);
            for (c, &v) in row.iter().enumerate() {
                nr[c] = (v - mean) * is;
            }
            let or = out.row_mut(r);
            for c in 0..cols {
                or[c] = nr[c] * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        )
    }

    /// Bidirectional multi-head attention over `layout.n_seq` stacked
    /// sequences. `q`, `k` and `v` are `(n_seq·seq_len) × (heads·head_size)`;
    /// `table` is `buckets × heads` and supplies an additive logit bias per
    /// relative-position bucket.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        table: Var,
        layout: AttentionLayout,
    ) -> Var {
        let AttentionLayout {
            n_seq,
            seq_len: n,
            heads,
            head_size: hs,
            ..
        } = layout;
        let width = heads * hs;
        let (qv, kv, vv, tv) = (
            self.value(q),
            self.value(k),
            self.value(v),
            self.value(table),
        );
        assert_eq!(qv.shape(), (n_seq * n, width), "attention q shape");
        assert_eq!(kv.shape(), qv.shape(), "attention k shape");
        assert_eq!(vv.shape(), qv.shape(), "attention v shape");
        assert_eq!(tv.cols(), heads, "bias table must have one column per head");
        assert_eq!(layout.buckets.len(), n * n, "bucket grid size");
        let scale = T::from_f64(1.0 / (hs as f64).sqrt());

        let mut probs = vec![T::ZERO; n_seq * heads * n * n];
        let mut out = Matrix::<T>::zeros(n_seq * n, width);
        for s in 0..n_seq {
            for h in 0..heads {
                let p = &mut probs[(s * heads + h) * n * n..(s * heads + h + 1) * n * n];
                // SAFETY: the views index inside q, k (read) and p (write),
                // which are distinct allocations.
                unsafe {
                    T::gemm(
                        n,
                        hs,
                        n,
                        scale,
                        qv.as_slice().as_ptr().add(s * n * width + h * hs),
                        width as isize,
                        1,
                        kv.as_slice().as_ptr().add(s * n * width + h * hs),
                        1,
                        width as isize,
                        T::ZERO,
                        p.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
                for i in 0..n {
                    let row = &mut p[i * n..(i + 1) * n];
                    for (j, x) in row.iter_mut().enumerate() {
                        *x += tv[(layout.buckets[i * n + j], h)];
                    }
                    softmax_in_place(row);
                }
                // SAFETY: p and v are read, out is a distinct allocation.
                unsafe {
                    T::gemm(
                        n,
                        n,
                        hs,
                        T::ONE,
                        p.as_ptr(),
                        n as isize,
                        1,
                        vv.as_slice().as_ptr().add(s * n * width + h * hs),
                        width as isize,
                        1,
                        T::ZERO,
                        out.as_mut_slice().as_mut_ptr().add(s * n * width + h * hs),
                        width as isize,
                        1,
                    );
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || self.rg(table);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                table,
                layout,
                probs,
            },
            rg,
        )
    }

    /// Mean of `(pred − target)²` over the rows where `keep` is set and all
    /// columns. Zero when no row is kept.
    pub fn masked_mse(&mut self, pred: Var, target: Matrix<T>, keep: Vec<bool>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mse shape mismatch");
        assert_eq!(keep.len(), pv.rows(), "mse mask length");
        let count = keep.iter().filter(|&&k| k).count();
        let mut total = T::ZERO;
        if count > 0 {
            for r in (0..pv.rows()).filter(|&r| keep[r]) {
                for (&a, &b) in pv.row(r).iter().zip(target.row(r)) {
                    total += (a - b) * (a - b);
                }
            }
            total /= T::from_f64((count * pv.cols()) as f64);
        }
        let rg = self.rg(pred);
        self.push(
            Matrix::filled(1, 1, total),
            Op::MaskedMse { pred, target, keep },
            rg,
        )
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows(), "one target per row");
        let mut probs = lv.clone();
        let mut total = T::ZERO;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < lv.cols(), "target {t} out of range");
            let row = lv.row(r);
            let mx = row.iter().copied().fold(row[0], T::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
            total += lse - row[t];
            for (p, &x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let n = T::from_f64(targets.len().max(1) as f64);
        let rg = self.rg(logits);
        self.push(
            Matrix::filled(1, 1, total / n),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            rg,
        )
    }

    /// Weighted sum of equally shaped nodes.
    pub fn combine(&mut self, terms: &[(Var, T)]) -> Var {
        assert!(!terms.is_empty(), "empty combination");
        let first = self.value(terms[0].0);
        let mut value = Matrix::zeros(first.rows(), first.cols());
        for &(v, w) in terms {
            value.add_scaled(self.value(v), w);
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(value, Op::Combine(terms.to_vec()), rg)
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::ONE));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, delta: Matrix<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Accumulates `op(a)·op(b)` into the gradient slot of `v` without an
    /// intermediate allocation when the slot already exists.
    fn accumulate_product(
        &self,
        grads: &mut [Option<Matrix<T>>],
        v: Var,
        a: &Matrix<T>,
        ta: bool,
        b: &Matrix<T>,
        tb: bool,
    ) {
        if !self.rg(v) {
            return;
        }
        let shape = self.value(v).shape();
        let slot = &mut grads[v.0];
        match slot {
            Some(acc) => gemm_into(a, ta, b, tb, acc, T::ONE),
            None => {
                let mut m = Matrix::zeros(shape.0, shape.1);
                gemm_into(a, ta, b, tb, &mut m, T::ZERO);
                *slot = Some(m);
            }
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if *transpose_b {
                    // y = a·bᵀ: da = g·b, db = gᵀ·a
                    self.accumulate_product(grads, *a, g, false, bv, false);
                    self.accumulate_product(grads, *b, g, true, av, false);
                } else {
                    // y = a·b: da = g·bᵀ, db = aᵀ·g
                    self.accumulate_product(grads, *a, g, false, bv, true);
                    self.accumulate_product(grads, *b, av, true, g, false);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow { a, row } => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    let mut col_sum = Matrix::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        for (acc, &x) in col_sum.as_mut_slice().iter_mut().zip(r) {
                            *acc += x;
                        }
                    }
                    self.accumulate(grads, *row, col_sum);
                }
            }
            Op::Gelu(a) => {
                let c = T::from_f64(GELU_C);
                let k = T::from_f64(GELU_A);
                let half = T::from_f64(0.5);
                let three_k = T::from_f64(3.0 * GELU_A);
                let dx = self.value(*a).zip_map(g, |x, gy| {
                    let th = (c * (x + k * x * x * x)).tanh();
                    let d = half * (T::ONE + th)
                        + half * x * (T::ONE - th * th) * c * (T::ONE + three_k * x * x);
                    d * gy
                });
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gv = self.value(*gain).as_slice();
                let (rows, cols) = g.shape();
                let n = T::from_f64(cols as f64);
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        let (gr, nr) = (g.row(r), normalized.row(r));
                        for c in 0..cols {
                            dg.as_mut_slice()[c] += gr[c] * nr[c];
                            db.as_mut_slice()[c] += gr[c];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                    self.accumulate(grads, *bias, db);
                }
                if self.rg(*x) {
                    let mut dx = Matrix::zeros(rows, cols);
                    let mut dxhat = vec![T::ZERO; cols];
                    for r in 0..rows {
                        let (gr, nr) = (g.row(r), normalized.row(r));
                        let mut mean_d = T::ZERO;
                        let mut mean_dn = T::ZERO;
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dn += dxhat[c] * nr[c];
                        }
                        mean_d /= n;
                        mean_dn /= n;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            out[c] = inv_std[r] * (dxhat[c] - mean_d - nr[c] * mean_dn);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                table,
                layout,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *table, layout, probs, grads),
            Op::MaskedMse { pred, target, keep } => {
                let pv = self.value(*pred);
                let count = keep.iter().filter(|&&k| k).count();
                let mut dp = Matrix::zeros(pv.rows(), pv.cols());
                if count > 0 {
                    let coef = g[(0, 0)] * T::from_f64(2.0 / (count * pv.cols()) as f64);
                    for r in (0..pv.rows()).filter(|&r| keep[r]) {
                        let out = dp.row_mut(r);
                        for ((o, &a), &b) in out.iter_mut().zip(pv.row(r)).zip(target.row(r)) {
                            *o = coef * (a - b);
                        }
                    }
                }
                self.accumulate(grads, *pred, dp);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let coef = g[(0, 0)] / T::from_f64(targets.len().max(1) as f64);
                let mut dl = probs.scale(coef);
                for (r, &t) in targets.iter().enumerate() {
                    dl[(r, t)] -= coef;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Combine(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, g.scale(w));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Matrix<T>,
        q: Var,
        k: Var,
        v: Var,
        table: Var,
        layout: &AttentionLayout,
        probs: &[T],
        grads: &mut [Option<Matrix<T>>],
    ) {
        let (n_seq, n, heads, hs) = (
            layout.n_seq,
            layout.seq_len,
            layout.heads,
            layout.head_size,
        );
        let width = heads * hs;
        let scale = T::from_f64(1.0 / (hs as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = Matrix::<T>::zeros(n_seq * n, width);
        let mut dk = Matrix::<T>::zeros(n_seq * n, width);
        let mut dv = Matrix::<T>::zeros(n_seq * n, width);
        let tv = self.value(table);
        let mut dtable = Matrix::zeros(tv.rows(), tv.cols());
        let mut dp = vec![T::ZERO; n * n];

        for s in 0..n_seq {
            let base = s * n * width;
            for h in 0..heads {
                let p = &probs[(s * heads + h) * n * n..(s * heads + h + 1) * n * n];
                let off = base + h * hs;
                // SAFETY (all gemm calls below): the strided views stay inside
                // their source matrices, and every destination is a distinct
                // allocation from the sources it is computed from.
                unsafe {
                    // dP = dO · Vᵀ
                    T::gemm(
                        n,
                        hs,
                        n,
                        T::ONE,
                        g.as_slice().as_ptr().add(off),
                        width as isize,
                        1,
                        vv.as_slice().as_ptr().add(off),
                        1,
                        width as isize,
                        T::ZERO,
                        dp.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                    // dV += Pᵀ · dO
                    T::gemm(
                        n,
                        n,
                        hs,
                        T::ONE,
                        p.as_ptr(),
                        1,
                        n as isize,
                        g.as_slice().as_ptr().add(off),
                        width as isize,
                        1,
                        T::ONE,
                        dv.as_mut_slice().as_mut_ptr().add(off),
                        width as isize,
                        1,
                    );
                }
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)); reuse dp as dS
                for i in 0..n {
                    let pr = &p[i * n..(i + 1) * n];
                    let dr = &mut dp[i * n..(i + 1) * n];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &pp) in dr.iter_mut().zip(pr) {
                        *d = pp * (*d - dot);
                    }
                    for (j, &d) in dr.iter().enumerate() {
                        dtable[(layout.buckets[i * n + j], h)] += d;
                    }
                }
                unsafe {
                    // dQ = scale · dS · K
                    T::gemm(
                        n,
                        n,
                        hs,
                        scale,
                        dp.as_ptr(),
                        n as isize,
                        1,
                        kv.as_slice().as_ptr().add(off),
                        width as isize,
                        1,
                        T::ONE,
                        dq.as_mut_slice().as_mut_ptr().add(off),
                        width as isize,
                        1,
                    );
                    // dK = scale · dSᵀ · Q
                    T::gemm(
                        n,
                        n,
                        hs,
                        scale,
                        dp.as_ptr(),
                        1,
                        n as isize,
                        qv.as_slice().as_ptr().add(off),
                        width as isize,
                        1,
                        T::ONE,
                        dk.as_mut_slice().as_mut_ptr().add(off),
                        width as isize,
                        1,
                    );
                }
            }
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
        self.accumulate(grads, table, dtable);
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(row[0], T::max);
    let mut sum = T::ZERO;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
