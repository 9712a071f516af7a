use crate::conv::{
    conv2d_backward, conv2d_forward, upsample2x_backward, upsample2x_forward, ConvShape,
};
use crate::norm::{normalize_groups, normalize_groups_backward};
use crate::{Element, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<E> {
    Add { a: Var, b: Var, y: Var },
    Sub { a: Var, b: Var, y: Var },
    Mul { a: Var, b: Var, y: Var },
    Scale { x: Var, c: E, y: Var },
    Silu { x: Var, y: Var },
    Matmul { a: Var, b: Var, y: Var, m: usize, k: usize, n: usize },
    MatmulNT { a: Var, b: Var, y: Var, m: usize, k: usize, n: usize },
    BiasRows { x: Var, b: Var, y: Var },
    BiasChw { x: Var, b: Var, y: Var, hw: usize },
    Conv2d { x: Var, w: Var, b: Var, y: Var, shape: ConvShape },
    Upsample2x { x: Var, y: Var, c: usize, h: usize, w: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, y: Var, groups: usize, means: Vec<E>, rstds: Vec<E>, hw: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, y: Var, means: Vec<E>, rstds: Vec<E> },
    SoftmaxRows { x: Var, y: Var },
    Embed { table: Var, y: Var, ids: Vec<usize>, d: usize },
    ReplaceRow { x: Var, v: Var, y: Var, row: usize },
    SliceCols { x: Var, y: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var>, y: Var },
    SliceRows { x: Var, y: Var, start: usize, len: usize },
    ConcatRows { a: Var, b: Var, y: Var },
    ConcatChannels { a: Var, b: Var, y: Var, hw: usize },
    ChwToTokens { x: Var, y: Var, c: usize, hw: usize },
    TokensToChw { x: Var, y: Var, c: usize, hw: usize },
    MeanAll { x: Var, y: Var },
}

/// Gradients keyed by [`Var`]; leaves that no gradient reached yield `None`.
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads[v.0].take()
    }
}

/// Wengert tape: ops recorded during the forward pass, replayed in reverse by
/// [`Graph::backward`]. With `grad = false` nothing is recorded and backward
/// is unavailable (inference mode).
pub struct Graph<E> {
    vals: Vec<Tensor<E>>,
    ops: Vec<Op<E>>,
    grad: bool,
}

impl<E: Element> Graph<E> {
    pub fn new(grad: bool) -> Self {
        Graph { vals: Vec::new(), ops: Vec::new(), grad }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad
    }

    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        let id = Var(self.vals.len());
        self.vals.push(t);
        id
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.vals[v.0]
    }

    fn push(&mut self, t: Tensor<E>, op: impl FnOnce(Var) -> Op<E>) -> Var {
        let y = Var(self.vals.len());
        self.vals.push(t);
        if self.grad {
            let op = op(y);
            self.ops.push(op);
        }
        y
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(t, |y| Op::Add { a, b, y })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x - *y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(t, |y| Op::Sub { a, b, y })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(t, |y| Op::Mul { a, b, y })
    }

    pub fn scale(&mut self, x: Var, c: E) -> Var {
        let t = self.vals[x.0].map(|v| v * c);
        self.push(t, |y| Op::Scale { x, c, y })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.vals[x.0].map(|v| v * sigmoid(v));
        self.push(t, |y| Op::Silu { x, y })
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// (m,k) x (k,n) -> (m,n)
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.vals[a.0].shape().to_vec(), self.vals[b.0].shape().to_vec());
        assert_eq!(sa.len(), 2, "matmul lhs must be rank 2");
        assert_eq!(sb.len(), 2, "matmul rhs must be rank 2");
        assert_eq!(sa[1], sb[0], "matmul inner dims: {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut y = vec![E::zero(); m * n];
        crate::gemm::gemm_nn(m, k, n, self.vals[a.0].data(), self.vals[b.0].data(), &mut y);
        self.push(Tensor::new(vec![m, n], y), |y| Op::Matmul { a, b, y, m, k, n })
    }

    /// (m,k) x (n,k)^T -> (m,n)
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.vals[a.0].shape().to_vec(), self.vals[b.0].shape().to_vec());
        assert_eq!(sa[1], sb[1], "matmul_nt inner dims: {sa:?} x {sb:?}^T");
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut y = vec![E::zero(); m * n];
        crate::gemm::gemm_nt(m, k, n, self.vals[a.0].data(), self.vals[b.0].data(), &mut y);
        self.push(Tensor::new(vec![m, n], y), |y| Op::MatmulNT { a, b, y, m, k, n })
    }

    /// x(L,D) + b(D) broadcast over rows.
    pub fn bias_rows(&mut self, x: Var, b: Var) -> Var {
        let (sx, d) = (self.vals[x.0].shape().to_vec(), self.vals[b.0].numel());
        assert_eq!(sx[1], d, "bias_rows width mismatch");
        let bs = self.vals[b.0].data().to_vec();
        let mut data = self.vals[x.0].data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, bv) in row.iter_mut().zip(&bs) {
                *v += *bv;
            }
        }
        self.push(Tensor::new(sx, data), |y| Op::BiasRows { x, b, y })
    }

    /// x(C,H,W) + b(C) broadcast over positions.
    pub fn bias_chw(&mut self, x: Var, b: Var) -> Var {
        let sx = self.vals[x.0].shape().to_vec();
        assert_eq!(sx.len(), 3);
        let c = sx[0];
        let hw = sx[1] * sx[2];
        assert_eq!(self.vals[b.0].numel(), c, "bias_chw channel mismatch");
        let bs = self.vals[b.0].data().to_vec();
        let mut data = self.vals[x.0].data().to_vec();
        for (ch, plane) in data.chunks_mut(hw).enumerate() {
            for v in plane.iter_mut() {
                *v += bs[ch];
            }
        }
        self.push(Tensor::new(sx, data), |y| Op::BiasChw { x, b, y, hw })
    }

    // ── convolution / resampling ─────────────────────────────────────

    /// x(Cin,H,W) * w(Cout,Cin,KH,KW) + b(Cout) -> (Cout,H',W')
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let sx = self.vals[x.0].shape().to_vec();
        let sw = self.vals[w.0].shape().to_vec();
        assert_eq!(sx.len(), 3, "conv input must be (C,H,W)");
        assert_eq!(sw.len(), 4, "conv kernel must be (Cout,Cin,KH,KW)");
        assert_eq!(sx[0], sw[1], "conv channel mismatch: x {sx:?}, w {sw:?}");
        let shape = ConvShape {
            cin: sx[0],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            h_in: sx[1],
            w_in: sx[2],
            stride,
            pad,
        };
        assert_eq!(self.vals[b.0].numel(), shape.cout, "conv bias mismatch");
        let data = conv2d_forward(
            self.vals[x.0].data(),
            self.vals[w.0].data(),
            self.vals[b.0].data(),
            &shape,
        );
        let t = Tensor::new(vec![shape.cout, shape.h_out(), shape.w_out()], data);
        self.push(t, |y| Op::Conv2d { x, w, b, y, shape })
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let sx = self.vals[x.0].shape().to_vec();
        assert_eq!(sx.len(), 3);
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let data = upsample2x_forward(self.vals[x.0].data(), c, h, w);
        let t = Tensor::new(vec![c, 2 * h, 2 * w], data);
        self.push(t, |y| Op::Upsample2x { x, y, c, h, w })
    }

    // ── normalization ────────────────────────────────────────────────

    /// Group normalization over x(C,H,W) with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: E) -> Var {
        let sx = self.vals[x.0].shape().to_vec();
        assert_eq!(sx.len(), 3);
        let (c, hw) = (sx[0], sx[1] * sx[2]);
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        let mut data = vec![E::zero(); c * hw];
        let (means, rstds) = normalize_groups(self.vals[x.0].data(), &mut data, groups, eps);
        let gs = self.vals[gamma.0].data();
        let bs = self.vals[beta.0].data();
        for ch in 0..c {
            let (g, b) = (gs[ch], bs[ch]);
            for v in &mut data[ch * hw..(ch + 1) * hw] {
                *v = *v * g + b;
            }
        }
        let t = Tensor::new(sx, data);
        self.push(t, |y| Op::GroupNorm { x, gamma, beta, y, groups, means, rstds, hw })
    }

    /// Layer normalization of each row of x(L,D) with per-column affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: E) -> Var {
        let sx = self.vals[x.0].shape().to_vec();
        assert_eq!(sx.len(), 2);
        let (rows, d) = (sx[0], sx[1]);
        let mut data = vec![E::zero(); rows * d];
        let (means, rstds) = normalize_groups(self.vals[x.0].data(), &mut data, rows, eps);
        let gs = self.vals[gamma.0].data();
        let bs = self.vals[beta.0].data();
        for row in data.chunks_mut(d) {
            for ((v, g), b) in row.iter_mut().zip(gs).zip(bs) {
                *v = *v * *g + *b;
            }
        }
        let t = Tensor::new(sx, data);
        self.push(t, |y| Op::LayerNorm { x, gamma, beta, y, means, rstds })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let sx = self.vals[x.0].shape().to_vec();
        assert_eq!(sx.len(), 2);
        let d = sx[1];
        let mut data = self.vals[x.0].data().to_vec();
        for row in data.chunks_mut(d) {
            let mut mx = row[0];
            for v in row.iter() {
                if *v > mx {
                    mx = *v;
                }
            }
            let mut sum = E::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(sx, data);
        self.push(t, |y| Op::SoftmaxRows { x, y })
    }

    // ── indexing / reshaping ─────────────────────────────────────────

    /// Look up rows of table(V,D) -> (ids.len(), D).
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let st = self.vals[table.0].shape().to_vec();
        assert_eq!(st.len(), 2);
        let (v, d) = (st[0], st[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embed id {id} out of vocabulary {v}");
            data.extend_from_slice(&self.vals[table.0].data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data);
        let ids = ids.to_vec();
        self.push(t, |y| Op::Embed { table, y, ids, d })
    }

    /// Copy of x(L,D) with `row` overwritten by v (numel D).
    pub fn replace_row(&mut self, x: Var, row: usize, v: Var) -> Var {
        let sx = self.vals[x.0].shape().to_vec();
        let d = sx[1];
        assert!(row < sx[0], "replace_row index out of range");
        assert_eq!(self.vals[v.0].numel(), d, "replace_row width mismatch");
        let mut data = self.vals[x.0].data().to_vec();
        data[row * d..(row + 1) * d].copy_from_slice(self.vals[v.0].data());
        let t = Tensor::new(sx, data);
        self.push(t, |y| Op::ReplaceRow { x, v, y, row })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let sx = self.vals[x.0].shape().to_vec();
        let (rows, d) = (sx[0], sx[1]);
        assert!(start + len <= d, "slice_cols out of range");
        let mut data = Vec::with_capacity(rows * len);
        for row in self.vals[x.0].data().chunks(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::new(vec![rows, len], data);
        self.push(t, |y| Op::SliceCols { x, y, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.vals[parts[0].0].shape()[0];
        let widths: Vec<usize> = parts.iter().map(|p| self.vals[p.0].shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                let src = self.vals[p.0].data();
                data.extend_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![rows, total], data);
        let parts = parts.to_vec();
        self.push(t, |y| Op::ConcatCols { parts, y })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let sx = self.vals[x.0].shape().to_vec();
        let d = sx[1];
        assert!(start + len <= sx[0], "slice_rows out of range");
        let data = self.vals[x.0].data()[start * d..(start + len) * d].to_vec();
        let t = Tensor::new(vec![len, d], data);
        self.push(t, |y| Op::SliceRows { x, y, start, len })
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.vals[a.0].shape().to_vec(), self.vals[b.0].shape().to_vec());
        assert_eq!(sa[1], sb[1], "concat_rows width mismatch");
        let mut data = self.vals[a.0].data().to_vec();
        data.extend_from_slice(self.vals[b.0].data());
        let t = Tensor::new(vec![sa[0] + sb[0], sa[1]], data);
        self.push(t, |y| Op::ConcatRows { a, b, y })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.vals[a.0].shape().to_vec(), self.vals[b.0].shape().to_vec());
        assert_eq!(&sa[1..], &sb[1..], "concat_channels spatial mismatch");
        let hw = sa[1] * sa[2];
        let mut data = self.vals[a.0].data().to_vec();
        data.extend_from_slice(self.vals[b.0].data());
        let t = Tensor::new(vec![sa[0] + sb[0], sa[1], sa[2]], data);
        self.push(t, |y| Op::ConcatChannels { a, b, y, hw })
    }

    /// (C,H,W) -> (H*W, C)
    pub fn chw_to_tokens(&mut self, x: Var) -> Var {
        let sx = self.vals[x.0].shape().to_vec();
        assert_eq!(sx.len(), 3);
        let (c, hw) = (sx[0], sx[1] * sx[2]);
        let src = self.vals[x.0].data();
        let mut data = vec![E::zero(); c * hw];
        for ch in 0..c {
            for p in 0..hw {
                data[p * c + ch] = src[ch * hw + p];
            }
        }
        let t = Tensor::new(vec![hw, c], data);
        self.push(t, |y| Op::ChwToTokens { x, y, c, hw })
    }

    /// (H*W, C) -> (C,H,W)
    pub fn tokens_to_chw(&mut self, x: Var, h: usize, w: usize) -> Var {
        let sx = self.vals[x.0].shape().to_vec();
        assert_eq!(sx[0], h * w, "tokens_to_chw spatial mismatch");
        let (hw, c) = (sx[0], sx[1]);
        let src = self.vals[x.0].data();
        let mut data = vec![E::zero(); c * hw];
        for p in 0..hw {
            for ch in 0..c {
                data[ch * hw + p] = src[p * c + ch];
            }
        }
        let t = Tensor::new(vec![c, h, w], data);
        self.push(t, |y| Op::TokensToChw { x, y, c, hw })
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.vals[x.0].numel();
        let mut sum = E::zero();
        for v in self.vals[x.0].data() {
            sum += *v;
        }
        let t = Tensor::scalar(sum / E::from_f64(n as f64));
        self.push(t, |y| Op::MeanAll { x, y })
    }

    /// Mean squared difference of two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Reduction order is fixed.
    pub fn backward(&self, loss: Var) -> Gradients<E> {
        assert!(self.grad, "backward on a no-grad graph");
        assert_eq!(self.vals[loss.0].numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.vals.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.vals[loss.0].shape().to_vec(), E::one()));
        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut grads);
        }
        Gradients { grads }
    }

    fn backward_op(&self, op: &Op<E>, grads: &mut [Option<Tensor<E>>]) {
        match op {
            Op::Add { a, b, y } => {
                let Some(dy) = grads[y.0].take() else { return };
                acc(grads, *b, dy.clone());
                acc(grads, *a, dy);
            }
            Op::Sub { a, b, y } => {
                let Some(dy) = grads[y.0].take() else { return };
                acc(grads, *b, dy.map(|v| -v));
                acc(grads, *a, dy);
            }
            Op::Mul { a, b, y } => {
                let Some(dy) = grads[y.0].take() else { return };
                let da = binary_map(&dy, &self.vals[b.0], |d, v| d * v);
                let db = binary_map(&dy, &self.vals[a.0], |d, v| d * v);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Scale { x, c, y } => {
                let Some(dy) = grads[y.0].take() else { return };
                acc(grads, *x, dy.map(|v| v * *c));
            }
            Op::Silu { x, y } => {
                let Some(dy) = grads[y.0].take() else { return };
                let dx = binary_map(&dy, &self.vals[x.0], |d, v| {
                    let s = sigmoid(v);
                    d * s * (E::one() + v * (E::one() - s))
                });
                acc(grads, *x, dx);
            }
            Op::Matmul { a, b, y, m, k, n } => {
                let Some(dy) = grads[y.0].take() else { return };
                let mut da = vec![E::zero(); m * k];
                crate::gemm::gemm_nt(*m, *n, *k, dy.data(), self.vals[b.0].data(), &mut da);
                let mut db = vec![E::zero(); k * n];
                crate::gemm::gemm_tn(*k, *m, *n, self.vals[a.0].data(), dy.data(), &mut db);
                acc(grads, *a, Tensor::new(vec![*m, *k], da));
                acc(grads, *b, Tensor::new(vec![*k, *n], db));
            }
            Op::MatmulNT { a, b, y, m, k, n } => {
                let Some(dy) = grads[y.0].take() else { return };
                let mut da = vec![E::zero(); m * k];
                crate::gemm::gemm_nn(*m, *n, *k, dy.data(), self.vals[b.0].data(), &mut da);
                let mut db = vec![E::zero(); n * k];
                crate::gemm::gemm_tn(*n, *m, *k, dy.data(), self.vals[a.0].data(), &mut db);
                acc(grads, *a, Tensor::new(vec![*m, *k], da));
                acc(grads, *b, Tensor::new(vec![*n, *k], db));
            }
            Op::BiasRows { x, b, y } => {
                let Some(dy) = grads[y.0].take() else { return };
                let d = self.vals[b.0].numel();
                let mut db = vec![E::zero(); d];
                for row in dy.data().chunks(d) {
                    for (acc_v, v) in db.iter_mut().zip(row) {
                        *acc_v += *v;
                    }
                }
                acc(grads, *b, Tensor::new(self.vals[b.0].shape().to_vec(), db));
                acc(grads, *x, dy);
            }
            Op::BiasChw { x, b, y, hw } => {
                let Some(dy) = grads[y.0].take() else { return };
                let c = self.vals[b.0].numel();
                let mut db = vec![E::zero(); c];
                for ch in 0..c {
                    let mut s = E::zero();
                    for v in &dy.data()[ch * hw..(ch + 1) * hw] {
                        s += *v;
                    }
                    db[ch] = s;
                }
                acc(grads, *b, Tensor::new(self.vals[b.0].shape().to_vec(), db));
                acc(grads, *x, dy);
            }
            Op::Conv2d { x, w, b, y, shape } => {
                let Some(dy) = grads[y.0].take() else { return };
                let (dx, dw, db) = conv2d_backward(
                    self.vals[x.0].data(),
                    self.vals[w.0].data(),
                    dy.data(),
                    shape,
                );
                acc(grads, *x, Tensor::new(self.vals[x.0].shape().to_vec(), dx));
                acc(grads, *w, Tensor::new(self.vals[w.0].shape().to_vec(), dw));
                acc(grads, *b, Tensor::new(self.vals[b.0].shape().to_vec(), db));
            }
            Op::Upsample2x { x, y, c, h, w } => {
                let Some(dy) = grads[y.0].take() else { return };
                let dx = upsample2x_backward(dy.data(), *c, *h, *w);
                acc(grads, *x, Tensor::new(vec![*c, *h, *w], dx));
            }
            Op::GroupNorm { x, gamma, beta, y, groups, means, rstds, hw } => {
                let Some(dy) = grads[y.0].take() else { return };
                let c = self.vals[gamma.0].numel();
                let xs = self.vals[x.0].data();
                let gs = self.vals[gamma.0].data();
                let ge = c / groups * hw;
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                let mut dxhat = vec![E::zero(); xs.len()];
                for ch in 0..c {
                    let g = ch * hw / ge;
                    let (mean, rstd) = (means[g], rstds[g]);
                    let mut sg = E::zero();
                    let mut sb = E::zero();
                    for p in 0..*hw {
                        let i = ch * hw + p;
                        let xhat = (xs[i] - mean) * rstd;
                        let d = dy.data()[i];
                        sg += d * xhat;
                        sb += d;
                        dxhat[i] = d * gs[ch];
                    }
                    dgamma[ch] = sg;
                    dbeta[ch] = sb;
                }
                let dx = normalize_groups_backward(xs, &dxhat, means, rstds, *groups);
                acc(grads, *x, Tensor::new(self.vals[x.0].shape().to_vec(), dx));
                acc(grads, *gamma, Tensor::new(vec![c], dgamma));
                acc(grads, *beta, Tensor::new(vec![c], dbeta));
            }
            Op::LayerNorm { x, gamma, beta, y, means, rstds } => {
                let Some(dy) = grads[y.0].take() else { return };
                let sx = self.vals[x.0].shape();
                let (rows, d) = (sx[0], sx[1]);
                let xs = self.vals[x.0].data();
                let gs = self.vals[gamma.0].data();
                let mut dgamma = vec![E::zero(); d];
                let mut dbeta = vec![E::zero(); d];
                let mut dxhat = vec![E::zero(); xs.len()];
                for r in 0..rows {
                    let (mean, rstd) = (means[r], rstds[r]);
                    for col in 0..d {
                        let i = r * d + col;
                        let xhat = (xs[i] - mean) * rstd;
                        let dv = dy.data()[i];
                        dgamma[col] += dv * xhat;
                        dbeta[col] += dv;
                        dxhat[i] = dv * gs[col];
                    }
                }
                let dx = normalize_groups_backward(xs, &dxhat, means, rstds, rows);
                acc(grads, *x, Tensor::new(sx.to_vec(), dx));
                acc(grads, *gamma, Tensor::new(vec![d], dgamma));
                acc(grads, *beta, Tensor::new(vec![d], dbeta));
            }
            Op::SoftmaxRows { x, y } => {
                let Some(dy) = grads[y.0].take() else { return };
                let sy = self.vals[y.0].shape();
                let d = sy[1];
                let ys = self.vals[y.0].data();
                let mut dx = vec![E::zero(); ys.len()];
                for r in 0..sy[0] {
                    let base = r * d;
                    let mut dot = E::zero();
                    for i in 0..d {
                        dot += dy.data()[base + i] * ys[base + i];
                    }
                    for i in 0..d {
                        dx[base + i] = ys[base + i] * (dy.data()[base + i] - dot);
                    }
                }
                acc(grads, *x, Tensor::new(sy.to_vec(), dx));
            }
            Op::Embed { table, y, ids, d } => {
                let Some(dy) = grads[y.0].take() else { return };
                let mut dt = Tensor::zeros(self.vals[table.0].shape().to_vec());
                for (row, &id) in ids.iter().enumerate() {
                    let src = &dy.data()[row * d..(row + 1) * d];
                    let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += *b;
                    }
                }
                acc(grads, *table, dt);
            }
            Op::ReplaceRow { x, v, y, row } => {
                let Some(mut dy) = grads[y.0].take() else { return };
                let d = self.vals[v.0].numel();
                let dv = dy.data()[row * d..(row + 1) * d].to_vec();
                dy.data_mut()[row * d..(row + 1) * d].fill(E::zero());
                acc(grads, *v, Tensor::new(self.vals[v.0].shape().to_vec(), dv));
                acc(grads, *x, dy);
            }
            Op::SliceCols { x, y, start, len } => {
                let Some(dy) = grads[y.0].take() else { return };
                let sx = self.vals[x.0].shape();
                let (rows, d) = (sx[0], sx[1]);
                let mut dx = vec![E::zero(); rows * d];
                for r in 0..rows {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&dy.data()[r * len..(r + 1) * len]);
                }
                acc(grads, *x, Tensor::new(sx.to_vec(), dx));
            }
            Op::ConcatCols { parts, y } => {
                let Some(dy) = grads[y.0].take() else { return };
                let rows = self.vals[y.0].shape()[0];
                let total = self.vals[y.0].shape()[1];
                let mut start = 0;
                for p in parts {
                    let w = self.vals[p.0].shape()[1];
                    let mut dp = vec![E::zero(); rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&dy.data()[r * total + start..r * total + start + w]);
                    }
                    acc(grads, *p, Tensor::new(vec![rows, w], dp));
                    start += w;
                }
            }
            Op::SliceRows { x, y, start, len } => {
                let Some(dy) = grads[y.0].take() else { return };
                let sx = self.vals[x.0].shape();
                let d = sx[1];
                let mut dx = Tensor::zeros(sx.to_vec());
                dx.data_mut()[start * d..(start + len) * d].copy_from_slice(dy.data());
                acc(grads, *x, dx);
            }
            Op::ConcatRows { a, b, y } => {
                let Some(dy) = grads[y.0].take() else { return };
                let na = self.vals[a.0].numel();
                let da = Tensor::new(self.vals[a.0].shape().to_vec(), dy.data()[..na].to_vec());
                let db = Tensor::new(self.vals[b.0].shape().to_vec(), dy.data()[na..].to_vec());
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::ConcatChannels { a, b, y, hw: _ } => {
                let Some(dy) = grads[y.0].take() else { return };
                let na = self.vals[a.0].numel();
                let da = Tensor::new(self.vals[a.0].shape().to_vec(), dy.data()[..na].to_vec());
                let db = Tensor::new(self.vals[b.0].shape().to_vec(), dy.data()[na..].to_vec());
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::ChwToTokens { x, y, c, hw } => {
                let Some(dy) = grads[y.0].take() else { return };
                let mut dx = vec![E::zero(); c * hw];
                for p in 0..*hw {
                    for ch in 0..*c {
                        dx[ch * hw + p] = dy.data()[p * c + ch];
                    }
                }
                acc(grads, *x, Tensor::new(self.vals[x.0].shape().to_vec(), dx));
            }
            Op::TokensToChw { x, y, c, hw } => {
                let Some(dy) = grads[y.0].take() else { return };
                let mut dx = vec![E::zero(); c * hw];
                for ch in 0..*c {
                    for p in 0..*hw {
                        dx[p * c + ch] = dy.data()[ch * hw + p];
                    }
                }
                acc(grads, *x, Tensor::new(self.vals[x.0].shape().to_vec(), dx));
            }
            Op::MeanAll { x, y } => {
                let Some(dy) = grads[y.0].take() else { return };
                let n = self.vals[x.0].numel();
                let g = dy.item() / E::from_f64(n as f64);
                acc(grads, *x, Tensor::full(self.vals[x.0].shape().to_vec(), g));
            }
        }
    }
}

fn sigmoid<E: Element>(v: E) -> E {
    E::one() / (E::one() + (-v).exp())
}

fn acc<E: Element>(grads: &mut [Option<Tensor<E>>], v: Var, g: Tensor<E>) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn binary_map<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
}
