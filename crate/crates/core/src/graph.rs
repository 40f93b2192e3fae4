//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node that
//! holds its output value and enough saved state to run its backward rule.
//! Inputs always precede outputs, so [`Graph::backward`] is a single reverse
//! sweep that visits each node once. A fresh graph is built per forward pass.
//!
//! Masks passed to [`Graph::mask_mul`] and [`Graph::row_renorm`] are treated
//! as constants: gradients flow only through the entries they keep.

use crate::error::{Error, Result};
use crate::tensor::{matrix_dims, Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    MaskMul(Var, Vec<F>),
    Gelu(Var),
    Relu(Var),
    SoftmaxRows(Var),
    RowRenorm {
        input: Var,
        mask: Vec<F>,
        passthrough: Vec<bool>,
        sums: Vec<F>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    L1 {
        pred: Var,
        target: Vec<F>,
        weights: Option<Vec<F>>,
        denom: F,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Graph<F> {
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

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a tensor. It participates in differentiation iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn constant(&mut self, mut t: Tensor<F>) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, &[])
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        matrix_dims(op, self.value(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims("matmul", a)?;
        let (k2, n) = self.dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, F::zero(), &mut out);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims("matmul_nt", a)?;
        let (n, k2) = self.dims("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, F::zero(), &mut out);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Add a length-`D` vector to every row of a `T×D` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.dims("add_bias", a)?;
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.numel() != d {
            return Err(Error::dim("add_bias", ta.shape(), tb.shape()));
        }
        let b = tb.data();
        let data = ta
            .data()
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * s).collect())?;
        Ok(self.push(out, Op::Scale(a, s), &[a]))
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&mut self, a: Var, mask: Vec<F>) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.numel() {
            return Err(Error::dim("mask_mul", ta.shape(), &[mask.len()]));
        }
        let out = Tensor::new(
            ta.shape(),
            ta.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        )?;
        Ok(self.push(out, Op::MaskMul(a, mask), &[a]))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|&x| gelu(x)).collect())?;
        Ok(self.push(out, Op::Gelu(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x.max(F::zero())).collect())?;
        Ok(self.push(out, Op::Relu(a), &[a]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims("softmax_rows", a)?;
        let out = softmax_rows_values(self.value(a).data(), r, c)?;
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::SoftmaxRows(a), &[a]))
    }

    /// Apply a constant keep-mask and divide each row by its surviving sum.
    /// Rows flagged in `passthrough` pass through unchanged.
    pub fn row_renorm(&mut self, a: Var, mask: Vec<F>, passthrough: Vec<bool>) -> Result<Var> {
        let (r, c) = self.dims("row_renorm", a)?;
        if mask.len() != r * c || passthrough.len() != r {
            return Err(Error::dim("row_renorm", &[r, c], &[mask.len(), passthrough.len()]));
        }
        let x = self.value(a).data();
        let mut out = vec![F::zero(); r * c];
        let mut sums = vec![F::one(); r];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let dst = &mut out[i * c..(i + 1) * c];
            if passthrough[i] {
                dst.copy_from_slice(row);
                continue;
            }
            let m = &mask[i * c..(i + 1) * c];
            let s: F = row.iter().zip(m).map(|(&v, &k)| v * k).sum();
            sums[i] = s;
            for j in 0..c {
                dst[j] = row[j] * m[j] / s;
            }
        }
        let out = Tensor::new(&[r, c], out)?;
        Ok(self.push(
            out,
            Op::RowRenorm {
                input: a,
                mask,
                passthrough,
                sums,
            },
            &[a],
        ))
    }

    /// Row-wise normalization to zero mean and unit variance followed by an
    /// affine map. Epsilon `1e-5` sits inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (t, d) = self.dims("layer_norm", x)?;
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::dim("layer_norm", &[t, d], tg.shape()));
        }
        let xs = self.value(x).data();
        let (g, b) = (tg.data(), tb.data());
        let mut xhat = vec![F::zero(); t * d];
        let mut rstd = vec![F::zero(); t];
        let mut out = vec![F::zero(); t * d];
        let inv_d = F::c(1.0 / d as f64);
        for i in 0..t {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + F::c(LAYER_NORM_EPS)).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(&[t, d], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims("slice_cols", a)?;
        if start + width > c {
            return Err(Error::dim("slice_cols", &[r, c], &[start, width]));
        }
        let x = self.value(a).data();
        let data = (0..r)
            .flat_map(|i| x[i * c + start..i * c + start + width].iter().copied())
            .collect();
        let out = Tensor::new(&[r, width], data)?;
        Ok(self.push(out, Op::SliceCols { input: a, start }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let (r, _) = self.dims("concat_cols", *first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims("concat_cols", p)?;
            if pr != r {
                return Err(Error::dim("concat_cols", &[r], &[pr, pc]));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(&[r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean over the row axis: `T×D → 1×D`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims("mean_rows", a)?;
        if r == 0 {
            return Err(Error::Usage("mean over zero rows".into()));
        }
        let x = self.value(a).data();
        let mut out = vec![F::zero(); c];
        for row in x.chunks(c.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        let inv = F::c(1.0 / r as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Tensor::new(&[1, c], out)?, Op::MeanRows(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    /// Mean absolute difference between `pred` and a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<F>) -> Result<Var> {
        self.weighted_l1_loss(pred, target, None)
    }

    /// `Σ w·|pred − target| / Σ w`. A zero weight total yields a zero loss.
    pub fn weighted_l1_loss(
        &mut self,
        pred: Var,
        target: &Tensor<F>,
        weights: Option<Vec<F>>,
    ) -> Result<Var> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() {
            return Err(Error::dim("l1_loss", tp.shape(), target.shape()));
        }
        if let Some(w) = &weights {
            if w.len() != tp.numel() {
                return Err(Error::dim("l1_loss", tp.shape(), &[w.len()]));
            }
        }
        let (p, t) = (tp.data(), target.data());
        let (num, denom) = match &weights {
            Some(w) => (
                p.iter().zip(t).zip(w).map(|((&a, &b), &w)| w * (a - b).abs()).sum::<F>(),
                w.iter().copied().sum::<F>(),
            ),
            None => (
                p.iter().zip(t).map(|(&a, &b)| (a - b).abs()).sum::<F>(),
                F::c(p.len() as f64),
            ),
        };
        let loss = if denom > F::zero() { num / denom } else { F::zero() };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1 {
                pred,
                target: target.data().to_vec(),
                weights,
                denom,
            },
            &[pred],
        ))
    }

    /// Mean softmax cross-entropy of `N×C` logits against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.dims("cross_entropy", logits)?;
        if labels.len() != n || n == 0 {
            return Err(Error::dim("cross_entropy", &[n, c], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Config(format!("label {bad} out of range for {c} classes")));
        }
        let probs = softmax_rows_values(self.value(logits).data(), n, c)?;
        let mut loss = F::zero();
        for (i, &l) in labels.iter().enumerate() {
            loss -= probs[i * c + l].max(F::min_positive_value()).ln();
        }
        loss = loss / F::c(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Populate gradients of the scalar `loss` on every node that requires
    /// them. Fan-out contributions accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }


    fn backprop_node(&mut self, i: usize, g: &[F]) {
        // Take the op out so we can borrow other nodes while handling it.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let out_shape = self.nodes[i].value.shape().to_vec();
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = matrix_dims("matmul", &self.nodes[a.0].value).unwrap();
                let n = out_shape[1];
                let bv = self.nodes[b.0].value.data();
                if let Some(da) = grad_buf(&mut self.grads, &self.nodes, *a) {
                    F::gemm(m, n, k, g, false, bv, true, F::one(), da);
                }
                let av = self.nodes[a.0].value.data();
                if let Some(db) = grad_buf(&mut self.grads, &self.nodes, *b) {
                    F::gemm(k, m, n, av, true, g, false, F::one(), db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = matrix_dims("matmul_nt", &self.nodes[a.0].value).unwrap();
                let n = out_shape[1];
                let bv = self.nodes[b.0].value.data();
                if let Some(da) = grad_buf(&mut self.grads, &self.nodes, *a) {
                    F::gemm(m, n, k, g, false, bv, false, F::one(), da);
                }
                let av = self.nodes[a.0].value.data();
                if let Some(db) = grad_buf(&mut self.grads, &self.nodes, *b) {
                    F::gemm(n, m, k, g, true, av, false, F::one(), db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out_shape[0], out_shape[1]);
                if let Some(da) = grad_buf(&mut self.grads, &self.nodes, *a) {
                    // out is r×c, input is c×r
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = grad_buf(&mut self.grads, &self.nodes, *v) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(da) = grad_buf(&mut self.grads, &self.nodes, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                let d = out_shape[1];
                if let Some(db) = grad_buf(&mut self.grads, &self.nodes, *bias) {
                    for row in g.chunks(d.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = grad_buf(&mut self.grads, &self.nodes, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s);
                }
            }
            Op::MaskMul(a, mask) => {
                if let Some(da) = grad_buf(&mut self.grads, &self.nodes, *a) {
                    for ((d, &g), &m) in da.iter_mut().zip(g).zip(mask) {
                        *d += g * m;
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.nodes[a.0].value.data();
                if let Some(da) = grad_buf(&mut self.grads, &self.nodes, *a) {
                    for ((d, &g), &x) in da.iter_mut().zip(g).zip(x) {
                        *d += g * gelu_grad(x);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.nodes[a.0].value.data();
                if let Some(da) = grad_buf(&mut self.grads, &self.nodes, *a) {
                    for ((d, &g), &x) in da.iter_mut().zip(g).zip(x) {
                        if x > F::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[i].value.data();
                let c = out_shape[1];
                if let Some(da) = grad_buf(&mut self.grads, &self.nodes, *a) {
                    softmax_backward(y, g, c, da);
                }
            }
            Op::RowRenorm {
                input,
                mask,
                passthrough,
                sums,
            } => {
                let y = self.nodes[i].value.data();
                let c = out_shape[1];
                if let Some(da) = grad_buf(&mut self.grads, &self.nodes, *input) {
                    for (r, &keep) in passthrough.iter().enumerate() {
                        let span = r * c..(r + 1) * c;
                        if keep {
                            da[span.clone()]
                                .iter_mut()
                                .zip(&g[span])
                                .for_each(|(d, &g)| *d += g);
                            continue;
                        }
                        let gy: F = g[span.clone()].iter().zip(&y[span.clone()]).map(|(&a, &b)| a * b).sum();
                        for j in span {
                            da[j] += mask[j] * (g[j] - gy) / sums[r];
                        }
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
                let d = out_shape[1];
                let gv = self.nodes[gain.0].value.data();
                if let Some(dg) = grad_buf(&mut self.grads, &self.nodes, *gain) {
                    for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(db) = grad_buf(&mut self.grads, &self.nodes, *bias) {
                    for row_g in g.chunks(d) {
                        db.iter_mut().zip(row_g).for_each(|(d, &g)| *d += g);
                    }
                }
                if let Some(dx) = grad_buf(&mut self.grads, &self.nodes, *x) {
                    let inv_d = F::c(1.0 / d as f64);
                    let mut dh = vec![F::zero(); d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row_g = &g[r * d..(r + 1) * d];
                        let row_h = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = row_g[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<F>() * inv_d;
                        let mean_dh_h = dh.iter().zip(row_h).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
                        for j in 0..d {
                            dx[r * d + j] += rs * (dh[j] - mean_dh - row_h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::SliceCols { input, start } => {
                let (r, w) = (out_shape[0], out_shape[1]);
                let c = self.nodes[input.0].value.cols();
                if let Some(da) = grad_buf(&mut self.grads, &self.nodes, *input) {
                    for i in 0..r {
                        for j in 0..w {
                            da[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (out_shape[0], out_shape[1]);
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if let Some(dp) = grad_buf(&mut self.grads, &self.nodes, *p) {
                        for i in 0..r {
                            for j in 0..w {
                                dp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::MeanRows(a) => {
                let r = self.nodes[a.0].value.rows();
                let c = out_shape[1];
                let inv = F::c(1.0 / r as f64);
                if let Some(da) = grad_buf(&mut self.grads, &self.nodes, *a) {
                    for row in da.chunks_mut(c.max(1)) {
                        row.iter_mut().zip(g).for_each(|(d, &g)| *d += g * inv);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = grad_buf(&mut self.grads, &self.nodes, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::L1 {
                pred,
                target,
                weights,
                denom,
            } => {
                let p = self.nodes[pred.0].value.data();
                if *denom > F::zero() {
                    if let Some(dp) = grad_buf(&mut self.grads, &self.nodes, *pred) {
                        let scale = g[0] / *denom;
                        for k in 0..p.len() {
                            let diff = p[k] - target[k];
                            let s = if diff > F::zero() {
                                F::one()
                            } else if diff < F::zero() {
                                -F::one()
                            } else {
                                F::zero()
                            };
                            let w = weights.as_ref().map_or(F::one(), |w| w[k]);
                            dp[k] += s * w * scale;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.nodes[logits.0].value.cols();
                let scale = g[0] / F::c(labels.len() as f64);
                if let Some(dl) = grad_buf(&mut self.grads, &self.nodes, *logits) {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { F::one() } else { F::zero() };
                            dl[r * c + j] += (probs[r * c + j] - onehot) * scale;
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn grad_buf<'a, F: Real>(
    grads: &'a mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    v: Var,
) -> Option<&'a mut Vec<F>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
}

/// Numerically stable row softmax over a row-major `rows×cols` buffer.
pub fn softmax_rows_values<F: Real>(x: &[F], rows: usize, cols: usize) -> Result<Vec<F>> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN input to softmax".into()));
    }
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut sum = F::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d = *d / sum);
    }
    Ok(out)
}

fn softmax_backward<F: Real>(y: &[F], g: &[F], cols: usize, dx: &mut [F]) {
    for ((yr, gr), dr) in y
        .chunks(cols.max(1))
        .zip(g.chunks(cols.max(1)))
        .zip(dx.chunks_mut(cols.max(1)))
    {
        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for j in 0..yr.len() {
            dr[j] += yr[j] * (gr[j] - dot);
        }
    }
}

const GELU_K: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximated GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let u = F::c(SQRT_2_OVER_PI) * (x + F::c(GELU_K) * x * x * x);
    F::c(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let u = F::c(SQRT_2_OVER_PI) * (x + F::c(GELU_K) * x * x * x);
    let t = u.tanh();
    let du = F::c(SQRT_2_OVER_PI) * (F::one() + F::c(3.0 * GELU_K) * x * x);
    F::c(0.5) * (F::one() + t) + F::c(0.5) * x * (F::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[vec![1.0, 2.0]]));
        let b = g.constant(t(&[vec![3.0], vec![4.0]]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_and_overflow_safe() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1000.0, 0.0, 0.0]]));
        let s = g.softmax_rows(a).unwrap();
        let v = g.value(s).data();
        for &x in &v[..3] {
            assert!((x - 1.0 / 3.0).abs() < 1e-7);
        }
        assert!((v[3] - 1.0).abs() < 1e-6 && v[4] < 1e-30);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_nan_is_numeric_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_rows(&[vec![f64::NAN, 0.0]]));
        assert!(matches!(g.softmax_rows(a), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_edge_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[vec![2.0, 2.0, 2.0], vec![1.0, 3.0, 2.0]]));
        let one = g.constant(Tensor::full(&[3], 1.0));
        let zero = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, one, zero).unwrap();
        assert!(g.value(y).row(0).iter().all(|&v| v == 0.0));

        let x2 = g.constant(t(&[vec![1.0, 3.0]]));
        let one2 = g.constant(Tensor::full(&[2], 1.0));
        let zero2 = g.constant(Tensor::zeros(&[2]));
        let y2 = g.layer_norm(x2, one2, zero2).unwrap();
        let v = g.value(y2).data();
        assert!((v[0] + 1.0).abs() < 1e-3 && (v[1] - 1.0).abs() < 1e-3);

        let gain0 = g.constant(Tensor::zeros(&[3]));
        let bias = g.constant(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let y3 = g.layer_norm(x, gain0, bias).unwrap();
        for r in 0..2 {
            assert_eq!(g.value(y3).row(r), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn l1_loss_values() {
        let mut g = Graph::<f32>::new();
        let p = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let l = g.l1_loss(p, &Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(g.value(l).data(), &[1.5]);
        let same = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let l = g.l1_loss(p, &same).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        assert!(g.l1_loss(p, &Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn backward_sum_gives_ones_and_fan_out_adds() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).with_grad());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).with_grad());
        let y = g.add(x, x).unwrap();
        let y = g.add(y, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::zeros(&[2]).with_grad());
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
    }
}
