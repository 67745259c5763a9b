//! Differentiable operations: forward kernels on [`Tape`] and their
//! vector-Jacobian products.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatMut, MatRef, Scalar};
use crate::tensor::Tensor;

fn shape_err<T>(what: &str, detail: alloc::string::String) -> Result<T> {
    Err(Error::Config(format!("{what}: {detail}")))
}

/// Statistics of one train-mode batch-norm call, for running-stat updates.
#[derive(Debug, Clone)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Biased (population) variance per channel.
    pub var: Vec<S>,
    /// Values reduced per channel (`B * T`).
    pub count: usize,
}

impl<S: Scalar> Tape<S> {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(what, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.shape(), data)
    }

    fn map(&self, a: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let x = self.value(a);
        Tensor::from_vec(x.shape(), x.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x + y` with `y` repeated over the leading dimensions of `x`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return shape_err("add_broadcast", format!("{ys:?} is not a suffix of {xs:?}"));
        }
        let yv = self.value(y).data();
        let n = yv.len().max(1);
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + yv[i % n]).collect();
        let out = Tensor::from_vec(xv.shape(), data);
        Ok(self.push(out, Op::AddBroadcast(x, y)))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.map(x, |v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let out = self.map(x, |v| v + c);
        self.push(out, Op::AddScalar(x, c))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: S = v.data().iter().copied().sum();
        let m = s / S::of(v.numel().max(1) as f64);
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| if v > S::zero() { v } else { S::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.shape().last().copied().unwrap_or(1);
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::from_vec(v.shape(), data);
        self.push(out, Op::Softmax(x))
    }

    /// Affine map over the last dimension: `x · wᵀ + b`, `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[1] {
            return shape_err("linear", format!("input {xs:?} against weight {ws:?}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return shape_err("linear", format!("bias {:?} for {} outputs", self.shape(b), ws[0]));
            }
        }
        let (n_in, n_out) = (ws[1], ws[0]);
        let rows = self.value(x).numel() / n_in.max(1);
        let mut out = vec![S::zero(); rows * n_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in out.chunks_mut(n_out) {
                r.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { S::one() } else { S::zero() };
        gemm(
            S::one(),
            MatRef::rm(self.value(x).data(), 0, rows, n_in),
            MatRef::rm(self.value(w).data(), 0, n_out, n_in).t(),
            beta,
            MatMut::rm(&mut out, 0, rows, n_out),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n_out;
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Linear { x, w, b }))
    }

    /// Temporal convolution over `[B, C_in, T]` with weight `[C_out, C_in, K]`.
    ///
    /// Cross-correlation, zero "same" padding of `(K - 1) / 2` on each side,
    /// then striding; output length is `ceil(T / stride)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 {
            return shape_err("conv1d", format!("input {xs:?}, weight {ws:?}"));
        }
        let (batch, c_in, t_in) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        if ws[1] != c_in {
            return shape_err("conv1d", format!("input has {c_in} channels, weight expects {}", ws[1]));
        }
        if k % 2 == 0 {
            return shape_err("conv1d", format!("kernel size {k} must be odd"));
        }
        if stride == 0 {
            return shape_err("conv1d", "stride must be positive".into());
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return shape_err("conv1d", format!("bias {:?} for {c_out} channels", self.shape(b)));
            }
        }
        let t_out = t_in.div_ceil(stride);
        let ck = c_in * k;
        let mut cols = vec![S::zero(); ck * t_out];
        let mut out = vec![S::zero(); batch * c_out * t_out];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for bi in 0..batch {
            im2col(&xv[bi * c_in * t_in..(bi + 1) * c_in * t_in], c_in, t_in, k, stride, t_out, &mut cols);
            let o = &mut out[bi * c_out * t_out..(bi + 1) * c_out * t_out];
            if let Some(b) = b {
                for (row, &bv) in o.chunks_mut(t_out).zip(self.value(b).data()) {
                    row.fill(bv);
                }
            }
            let beta = if b.is_some() { S::one() } else { S::zero() };
            gemm(
                S::one(),
                MatRef::rm(wv, 0, c_out, ck),
                MatRef::rm(&cols, 0, ck, t_out),
                beta,
                MatMut::rm(o, 0, c_out, t_out),
            );
        }
        let out = Tensor::from_vec(&[batch, c_out, t_out], out);
        Ok(self.push(out, Op::Conv1d { x, w, b, stride }))
    }

    /// Train-mode batch norm over `[B, C, T]`, normalising each channel with
    /// its own batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<(Var, BatchStats<S>)> {
        let (batch, ch, t) = self.bn_dims(x, gamma, beta)?;
        let count = batch * t;
        if count < 2 {
            return shape_err("batch_norm", format!("train mode needs at least 2 values per channel, got {count}"));
        }
        let xv = self.value(x).data();
        let n = S::of(count as f64);
        let mut mean = vec![S::zero(); ch];
        let mut var = vec![S::zero(); ch];
        for c in 0..ch {
            let mut s = S::zero();
            for bi in 0..batch {
                s += xv[(bi * ch + c) * t..(bi * ch + c + 1) * t].iter().copied().sum::<S>();
            }
            let m = s / n;
            let mut q = S::zero();
            for bi in 0..batch {
                for &v in &xv[(bi * ch + c) * t..(bi * ch + c + 1) * t] {
                    q += (v - m) * (v - m);
                }
            }
            mean[c] = m;
            var[c] = q / n;
        }
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, batch, ch, t);
        let v = self.push(out, Op::BatchNormTrain { x, gamma, beta, xhat, inv_std });
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[S],
        var: &[S],
        eps: S,
    ) -> Result<Var> {
        let (batch, ch, t) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != ch || var.len() != ch {
            return shape_err("batch_norm", format!("running stats sized {} / {} for {ch} channels", mean.len(), var.len()));
        }
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, mean, &inv_std, batch, ch, t);
        Ok(self.push(out, Op::BatchNormEval { x, gamma, beta, xhat, inv_std }))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return shape_err("batch_norm", format!("expected [B, C, T], got {xs:?}"));
        }
        if self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return shape_err("batch_norm", format!("affine params for {} channels", xs[1]));
        }
        Ok((xs[0], xs[1], xs[2]))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[S],
        inv_std: &[S],
        batch: usize,
        ch: usize,
        t: usize,
    ) -> (Tensor<S>, Vec<S>) {
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        for bi in 0..batch {
            for c in 0..ch {
                let base = (bi * ch + c) * t;
                for i in base..base + t {
                    let h = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + bta[c];
                }
            }
        }
        (Tensor::from_vec(&[batch, ch, t], out), xhat)
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return shape_err("transpose", format!("expected rank 3, got {xs:?}"));
        }
        let out = transpose_last2(self.value(x).data(), xs[0], xs[1], xs[2]);
        Ok(self.push(Tensor::from_vec(&[xs[0], xs[2], xs[1]], out), Op::TransposeLast2(x)))
    }

    /// Mean over the time axis: `[B, T, C] -> [B, C]`.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 {
            return shape_err("mean_time", format!("expected [B, T>=1, C], got {xs:?}"));
        }
        let (batch, t, c) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let inv = S::one() / S::of(t as f64);
        let mut out = vec![S::zero(); batch * c];
        for bi in 0..batch {
            let o = &mut out[bi * c..(bi + 1) * c];
            for ti in 0..t {
                for (a, &v) in o.iter_mut().zip(&xv[(bi * t + ti) * c..(bi * t + ti + 1) * c]) {
                    *a += v;
                }
            }
            for a in o.iter_mut() {
                *a *= inv;
            }
        }
        Ok(self.push(Tensor::from_vec(&[batch, c], out), Op::MeanTime(x)))
    }

    /// Scaled dot-product attention over `[B, T, C]` projections, with
    /// `heads` equal slices of the channel axis and no mask.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let s = self.shape(q).to_vec();
        if s.len() != 3 {
            return shape_err("attention", format!("expected [B, T, C], got {s:?}"));
        }
        let (batch, t, c) = (s[0], s[1], s[2]);
        if heads == 0 || c % heads != 0 {
            return shape_err("attention", format!("{c} channels do not split into {heads} heads"));
        }
        let dh = c / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![S::zero(); batch * heads * t * t];
        let mut out = vec![S::zero(); batch * t * c];
        for bi in 0..batch {
            for h in 0..heads {
                let off = bi * t * c + h * dh;
                let p_off = (bi * heads + h) * t * t;
                let p = &mut probs[p_off..p_off + t * t];
                gemm(
                    scale,
                    MatRef::strided(qv, off, t, dh, c, 1),
                    MatRef::strided(kv, off, t, dh, c, 1).t(),
                    S::zero(),
                    MatMut::rm(p, 0, t, t),
                );
                for row in p.chunks_mut(t) {
                    softmax_in_place(row);
                }
                gemm(
                    S::one(),
                    MatRef::rm(p, 0, t, t),
                    MatRef::strided(vv, off, t, dh, c, 1),
                    S::zero(),
                    MatMut::strided(&mut out, off, t, dh, c, 1),
                );
            }
        }
        let out = Tensor::from_vec(&[batch, t, c], out);
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }))
    }

    /// Row-wise `‖x_i − y_i‖_p` for `[N, D]` inputs, giving `[N]`. A rank-1
    /// pair is treated as a single row and yields a scalar.
    pub fn pairwise_distance(&mut self, x: Var, y: Var, p: S) -> Result<Var> {
        self.same_shape(x, y, "pairwise_distance")?;
        if p <= S::zero() {
            return shape_err("pairwise_distance", format!("norm order {p} must be positive"));
        }
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&1);
        let (xv, yv) = (self.value(x).data(), self.value(y).data());
        let out: Vec<S> = xv
            .chunks(d.max(1))
            .zip(yv.chunks(d.max(1)))
            .map(|(a, b)| lp_norm(a.iter().zip(b).map(|(&u, &w)| u - w), p))
            .collect();
        let shape: Vec<usize> = if xs.len() <= 1 { Vec::new() } else { xs[..xs.len() - 1].to_vec() };
        Ok(self.push(Tensor::from_vec(&shape, out), Op::PairwiseDistance { x, y, p }))
    }

    /// Gathers rows of a `[N, D]` tensor; indices may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return shape_err("select_rows", format!("expected [N, D], got {xs:?}"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= xs[0]) {
            return shape_err("select_rows", format!("row {bad} out of {}", xs[0]));
        }
        let d = xs[1];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&xv[r * d..(r + 1) * d]);
        }
        let out = Tensor::from_vec(&[rows.len(), d], out);
        Ok(self.push(out, Op::SelectRows { x, rows: rows.to_vec() }))
    }

    /// Scales each row of `[N, D]` to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return shape_err("l2_normalize_rows", format!("expected [N, D], got {xs:?}"));
        }
        let d = xs[1].max(1);
        let floor = S::of(1e-12);
        let mut norms = Vec::with_capacity(xs[0]);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<S>().sqrt().max(floor);
            norms.push(n);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let out = Tensor::from_vec(&xs, out);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }))
    }

    /// Binary cross-entropy on logits `[B, C]` against constant targets of
    /// the same shape, summed over classes and averaged over the batch. Each
    /// row may carry a weight (default 1).
    ///
    /// Uses `max(z, 0) − z·y + ln(1 + e^{−|z|})`, which never overflows.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<S>, weights: Option<&[S]>) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || targets.shape() != ls.as_slice() {
            return shape_err("bce_with_logits", format!("logits {ls:?} vs targets {:?}", targets.shape()));
        }
        let (batch, c) = (ls[0], ls[1]);
        let weights = match weights {
            Some(w) if w.len() != batch => {
                return shape_err("bce_with_logits", format!("{} weights for {batch} rows", w.len()));
            }
            Some(w) => w.to_vec(),
            None => vec![S::one(); batch],
        };
        let z = self.value(logits).data();
        let y = targets.data();
        let mut total = S::zero();
        for bi in 0..batch {
            let mut row = S::zero();
            for i in bi * c..(bi + 1) * c {
                row += bce_logit_term(z[i], y[i]);
            }
            total += weights[bi] * row;
        }
        let loss = total / S::of(batch.max(1) as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, targets: y.to_vec(), weights },
        ))
    }
}

pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn bce_logit_term<S: Scalar>(z: S, y: S) -> S {
    z.max(S::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut s = S::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn lp_norm<S: Scalar>(diff: impl Iterator<Item = S>, p: S) -> S {
    if p == S::of(2.0) {
        diff.map(|u| u * u).sum::<S>().sqrt()
    } else if p == S::one() {
        diff.map(|u| u.abs()).sum()
    } else {
        diff.map(|u| u.abs().powf(p)).sum::<S>().powf(S::one() / p)
    }
}

fn transpose_last2<S: Scalar>(x: &[S], batch: usize, rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for bi in 0..batch {
        let base = bi * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = x[base + r * cols + c];
            }
        }
    }
    out
}

/// `cols[(ci*K + k), t] = x[ci, t*stride + k - pad]` with zero padding.
fn im2col<S: Scalar>(x: &[S], c_in: usize, t_in: usize, k: usize, stride: usize, t_out: usize, cols: &mut [S]) {
    let pad = (k - 1) / 2;
    for ci in 0..c_in {
        let xr = &x[ci * t_in..(ci + 1) * t_in];
        for kk in 0..k {
            let row = &mut cols[(ci * k + kk) * t_out..(ci * k + kk + 1) * t_out];
            for (t, slot) in row.iter_mut().enumerate() {
                let pos = (t * stride + kk) as isize - pad as isize;
                *slot = if pos >= 0 && (pos as usize) < t_in { xr[pos as usize] } else { S::zero() };
            }
        }
    }
}

fn col2im_add<S: Scalar>(cols: &[S], c_in: usize, t_in: usize, k: usize, stride: usize, t_out: usize, dx: &mut [S]) {
    let pad = (k - 1) / 2;
    for ci in 0..c_in {
        let xr = &mut dx[ci * t_in..(ci + 1) * t_in];
        for kk in 0..k {
            let row = &cols[(ci * k + kk) * t_out..(ci * k + kk + 1) * t_out];
            for (t, &g) in row.iter().enumerate() {
                let pos = (t * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < t_in {
                    xr[pos as usize] += g;
                }
            }
        }
    }
}

/// Propagates `g` (gradient of the node's output) to the node's inputs.
pub(crate) fn backward<S: Scalar>(op: &Op<S>, out: &Tensor<S>, g: &[S], sink: &mut GradSink<'_, S>) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            sink.accumulate(*a, g);
            sink.accumulate(*b, g);
        }
        Op::Sub(a, b) => {
            sink.accumulate(*a, g);
            if let Some(gb) = sink.slot(*b) {
                for (d, &v) in gb.iter_mut().zip(g) {
                    *d -= v;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (sink.value(*a).data(), sink.value(*b).data());
            if let Some(ga) = sink.slot(*a) {
                for ((d, &v), &w) in ga.iter_mut().zip(g).zip(bv) {
                    *d += v * w;
                }
            }
            if let Some(gb) = sink.slot(*b) {
                for ((d, &v), &w) in gb.iter_mut().zip(g).zip(av) {
                    *d += v * w;
                }
            }
        }
        Op::AddBroadcast(x, y) => {
            sink.accumulate(*x, g);
            if let Some(gy) = sink.slot(*y) {
                let n = gy.len().max(1);
                for (i, &v) in g.iter().enumerate() {
                    gy[i % n] += v;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = sink.slot(*x) {
                for (d, &v) in gx.iter_mut().zip(g) {
                    *d += v * *c;
                }
            }
        }
        Op::AddScalar(x, _) => sink.accumulate(*x, g),
        Op::Sum(x) => {
            if let Some(gx) = sink.slot(*x) {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = sink.slot(*x) {
                let s = g[0] / S::of(gx.len().max(1) as f64);
                for d in gx.iter_mut() {
                    *d += s;
                }
            }
        }
        Op::Relu(x) => {
            let xv = sink.value(*x).data();
            if let Some(gx) = sink.slot(*x) {
                for ((d, &v), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    if xi > S::zero() {
                        *d += v;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = sink.slot(*x) {
                for ((d, &v), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *d += v * y * (S::one() - y);
                }
            }
        }
        Op::Softmax(x) => {
            let n = out.shape().last().copied().unwrap_or(1).max(1);
            if let Some(gx) = sink.slot(*x) {
                for ((dr, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += y * (gv - dot);
                    }
                }
            }
        }
        Op::Linear { x, w, b } => linear_backward(*x, *w, *b, g, sink),
        Op::Conv1d { x, w, b, stride } => conv1d_backward(*x, *w, *b, *stride, out, g, sink),
        Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
            bn_backward(*x, *gamma, *beta, xhat, inv_std, true, g, sink)
        }
        Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
            bn_backward(*x, *gamma, *beta, xhat, inv_std, false, g, sink)
        }
        Op::TransposeLast2(x) => {
            let s = out.shape();
            // out is [B, C, A]; transposing g back gives [B, A, C]
            let back = transpose_last2(g, s[0], s[1], s[2]);
            sink.accumulate(*x, &back);
        }
        Op::MeanTime(x) => {
            let xs = sink.value(*x).shape();
            let (batch, t, c) = (xs[0], xs[1], xs[2]);
            let inv = S::one() / S::of(t as f64);
            if let Some(gx) = sink.slot(*x) {
                for bi in 0..batch {
                    for ti in 0..t {
                        let row = &mut gx[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                        for (d, &v) in row.iter_mut().zip(&g[bi * c..(bi + 1) * c]) {
                            *d += v * inv;
                        }
                    }
                }
            }
        }
        Op::Attention { q, k, v, heads, probs } => attention_backward(*q, *k, *v, *heads, probs, g, sink),
        Op::PairwiseDistance { x, y, p } => {
            let (xv, yv) = (sink.value(*x).data(), sink.value(*y).data());
            let d = *sink.value(*x).shape().last().unwrap_or(&1);
            let d = d.max(1);
            let mut gx = vec![S::zero(); xv.len()];
            for (row, (&dist, &gr)) in out.data().iter().zip(g).enumerate() {
                if dist == S::zero() {
                    continue;
                }
                for j in row * d..(row + 1) * d {
                    let u = xv[j] - yv[j];
                    let deriv = if *p == S::of(2.0) {
                        u / dist
                    } else if *p == S::one() {
                        u.signum() * if u == S::zero() { S::zero() } else { S::one() }
                    } else {
                        u.signum() * u.abs().powf(*p - S::one()) / dist.powf(*p - S::one())
                    };
                    gx[j] = gr * deriv;
                }
            }
            sink.accumulate(*x, &gx);
            if let Some(gy) = sink.slot(*y) {
                for (a, &v) in gy.iter_mut().zip(&gx) {
                    *a -= v;
                }
            }
        }
        Op::SelectRows { x, rows } => {
            let d = out.shape()[1];
            if let Some(gx) = sink.slot(*x) {
                for (i, &r) in rows.iter().enumerate() {
                    for (a, &v) in gx[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *a += v;
                    }
                }
            }
        }
        Op::L2NormalizeRows { x, norms } => {
            let d = out.shape()[1].max(1);
            if let Some(gx) = sink.slot(*x) {
                for (((dr, gr), yr), &n) in gx.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)).zip(norms) {
                    let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((a, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *a += (gv - y * dot) / n;
                    }
                }
            }
        }
        Op::BceWithLogits { logits, targets, weights } => {
            let z = sink.value(*logits).data();
            let c = sink.value(*logits).shape()[1].max(1);
            let batch = weights.len().max(1);
            let s = g[0] / S::of(batch as f64);
            if let Some(gz) = sink.slot(*logits) {
                for (i, (d, (&zi, &yi))) in gz.iter_mut().zip(z.iter().zip(targets)).enumerate() {
                    *d += s * weights[i / c] * (sigmoid(zi) - yi);
                }
            }
        }
    }
}

fn linear_backward<S: Scalar>(x: Var, w: Var, b: Option<Var>, g: &[S], sink: &mut GradSink<'_, S>) {
    let ws = sink.value(w).shape();
    let (n_out, n_in) = (ws[0], ws[1]);
    let rows = g.len() / n_out.max(1);
    let xv = sink.value(x).data();
    let wv = sink.value(w).data();
    if let Some(gx) = sink.slot(x) {
        gemm(S::one(), MatRef::rm(g, 0, rows, n_out), MatRef::rm(wv, 0, n_out, n_in), S::one(), MatMut::rm(gx, 0, rows, n_in));
    }
    if let Some(gw) = sink.slot(w) {
        gemm(S::one(), MatRef::rm(g, 0, rows, n_out).t(), MatRef::rm(xv, 0, rows, n_in), S::one(), MatMut::rm(gw, 0, n_out, n_in));
    }
    if let Some(b) = b {
        if let Some(gb) = sink.slot(b) {
            for row in g.chunks(n_out) {
                for (a, &v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
    }
}

fn conv1d_backward<S: Scalar>(
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    out: &Tensor<S>,
    g: &[S],
    sink: &mut GradSink<'_, S>,
) {
    let xs = sink.value(x).shape();
    let (batch, c_in, t_in) = (xs[0], xs[1], xs[2]);
    let ws = sink.value(w).shape();
    let (c_out, k) = (ws[0], ws[2]);
    let t_out = out.shape()[2];
    let ck = c_in * k;
    let xv = sink.value(x).data();
    let wv = sink.value(w).data();
    let want_w = sink.wants(w);
    let want_x = sink.wants(x);
    let mut cols = vec![S::zero(); ck * t_out];
    if want_w {
        let gw = sink.slot(w).unwrap();
        for bi in 0..batch {
            im2col(&xv[bi * c_in * t_in..(bi + 1) * c_in * t_in], c_in, t_in, k, stride, t_out, &mut cols);
            gemm(
                S::one(),
                MatRef::rm(&g[bi * c_out * t_out..], 0, c_out, t_out),
                MatRef::rm(&cols, 0, ck, t_out).t(),
                S::one(),
                MatMut::rm(gw, 0, c_out, ck),
            );
        }
    }
    if want_x {
        let gx = sink.slot(x).unwrap();
        for bi in 0..batch {
            gemm(
                S::one(),
                MatRef::rm(wv, 0, c_out, ck).t(),
                MatRef::rm(&g[bi * c_out * t_out..], 0, c_out, t_out),
                S::zero(),
                MatMut::rm(&mut cols, 0, ck, t_out),
            );
            col2im_add(&cols, c_in, t_in, k, stride, t_out, &mut gx[bi * c_in * t_in..(bi + 1) * c_in * t_in]);
        }
    }
    if let Some(b) = b {
        if let Some(gb) = sink.slot(b) {
            for bi in 0..batch {
                for (co, a) in gb.iter_mut().enumerate() {
                    let base = (bi * c_out + co) * t_out;
                    *a += g[base..base + t_out].iter().copied().sum::<S>();
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn bn_backward<S: Scalar>(
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[S],
    inv_std: &[S],
    batch_stats: bool,
    g: &[S],
    sink: &mut GradSink<'_, S>,
) {
    let xs = sink.value(x).shape();
    let (batch, ch, t) = (xs[0], xs[1], xs[2]);
    let gam = sink.value(gamma).data();
    let mut sum_g = vec![S::zero(); ch];
    let mut sum_gx = vec![S::zero(); ch];
    for bi in 0..batch {
        for c in 0..ch {
            let base = (bi * ch + c) * t;
            for i in base..base + t {
                sum_g[c] += g[i];
                sum_gx[c] += g[i] * xhat[i];
            }
        }
    }
    if let Some(gg) = sink.slot(gamma) {
        for (a, &v) in gg.iter_mut().zip(&sum_gx) {
            *a += v;
        }
    }
    if let Some(gb) = sink.slot(beta) {
        for (a, &v) in gb.iter_mut().zip(&sum_g) {
            *a += v;
        }
    }
    if let Some(gx) = sink.slot(x) {
        let n = S::of((batch * t) as f64);
        for bi in 0..batch {
            for c in 0..ch {
                let base = (bi * ch + c) * t;
                let k = gam[c] * inv_std[c];
                for i in base..base + t {
                    gx[i] += if batch_stats {
                        k * (g[i] - sum_g[c] / n - xhat[i] * sum_gx[c] / n)
                    } else {
                        k * g[i]
                    };
                }
            }
        }
    }
}

fn attention_backward<S: Scalar>(
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: &[S],
    g: &[S],
    sink: &mut GradSink<'_, S>,
) {
    let s = sink.value(q).shape();
    let (batch, t, c) = (s[0], s[1], s[2]);
    let dh = c / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let (qv, kv, vv) = (sink.value(q).data(), sink.value(k).data(), sink.value(v).data());
    let mut dq = vec![S::zero(); qv.len()];
    let mut dk = vec![S::zero(); kv.len()];
    let mut dv = vec![S::zero(); vv.len()];
    let mut dp = vec![S::zero(); t * t];
    for bi in 0..batch {
        for h in 0..heads {
            let off = bi * t * c + h * dh;
            let p = &probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
            let go = MatRef::strided(g, off, t, dh, c, 1);
            // dV = Pᵀ dO
            gemm(S::one(), MatRef::rm(p, 0, t, t).t(), go, S::zero(), MatMut::strided(&mut dv, off, t, dh, c, 1));
            // dP = dO Vᵀ
            gemm(S::one(), go, MatRef::strided(vv, off, t, dh, c, 1).t(), S::zero(), MatMut::rm(&mut dp, 0, t, t));
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for (dr, pr) in dp.chunks_mut(t).zip(p.chunks(t)) {
                let dot: S = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot);
                }
            }
            gemm(scale, MatRef::rm(&dp, 0, t, t), MatRef::strided(kv, off, t, dh, c, 1), S::zero(), MatMut::strided(&mut dq, off, t, dh, c, 1));
            gemm(scale, MatRef::rm(&dp, 0, t, t).t(), MatRef::strided(qv, off, t, dh, c, 1), S::zero(), MatMut::strided(&mut dk, off, t, dh, c, 1));
        }
    }
    sink.accumulate(q, &dq);
    sink.accumulate(k, &dk);
    sink.accumulate(v, &dv);
}
