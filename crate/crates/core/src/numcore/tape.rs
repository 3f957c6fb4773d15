//! Define-by-run reverse-mode autodiff on a flat tape.
//!
//! Values are computed eagerly as ops are recorded; `backward` walks the tape
//! once in reverse. Node ids increase monotonically, so a single descending
//! sweep visits every node after all of its consumers — no explicit topological
//! sort needed. Gradient buffers are allocated lazily: nodes off the loss path
//! never materialize one (and read back as zeros).
//!
//! The op set is exactly what the models in this crate use. Each backward is
//! hand-derived; the per-op finite-difference tests at the bottom are the
//! ground truth for the derivations.

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

const LN_EPS: f64 = 1e-5;
const GELU_SLOPE: f64 = 1.702;

#[derive(Debug)]
enum Op {
    Leaf,
    /// rows(x) × W + b over the trailing axis. W: [in, out], b: [out].
    Affine { x: usize, w: usize, b: usize },
    /// 1-D convolution. x: [B, L, Cin], w: [k, Cin, Cout], b: [Cout].
    Conv1d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    /// Nearest-neighbour upsampling along the middle axis of [B, L, C].
    RepeatRows { x: usize, factor: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Offset { a: usize },
    Gelu { a: usize },
    Exp { a: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    LogSoftmax { a: usize },
    /// Row-wise normalization over the trailing axis with learned gain/bias.
    LayerNorm { x: usize, gain: usize, bias: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    Reshape { a: usize },
    /// Concatenation along the trailing axis.
    Concat { a: usize, b: usize },
    /// Row lookup into a [V, D] table; backward scatter-adds.
    GatherRows { table: usize, indices: Vec<u32> },
    /// −mean over rows of logp[r, target_r]. logp: [N, C].
    NllMean { logp: usize, targets: Vec<u32> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Per-node gradient buffers produced by [`Tape::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient buffer for `v`, if the node was on the loss path.
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of `v` as a tensor; zeros when `v` was off the loss path.
    pub fn grad_tensor(&self, grads: &Gradients<S>, v: Var) -> Tensor<S> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match grads.wrt(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad buffer matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant/input leaf.
    pub fn input(&mut self, value: Tensor<S>) -> Result<Var> {
        if value.numel() == 0 {
            return Err(Error::shape("input", "empty tensors are not supported"));
        }
        Ok(self.push(value, Op::Leaf))
    }

    fn binary_same_shape(&mut self, name: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::shape(name, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok((a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape("add", a, b)?;
        let v = self.zip(ia, ib, |x, y| x + y);
        Ok(self.push(v, Op::Add { a: ia, b: ib }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape("sub", a, b)?;
        let v = self.zip(ia, ib, |x, y| x - y);
        Ok(self.push(v, Op::Sub { a: ia, b: ib }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape("mul", a, b)?;
        let v = self.zip(ia, ib, |x, y| x * y);
        Ok(self.push(v, Op::Mul { a: ia, b: ib }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a.0, |x| x * S::from_f64(c));
        self.push(v, Op::Scale { a: a.0, c })
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a.0, |x| x + S::from_f64(c));
        self.push(v, Op::Offset { a: a.0 })
    }

    /// GELU in its sigmoid form: x · σ(1.702 x).
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.map(a.0, |x| x * sigmoid(S::from_f64(GELU_SLOPE) * x));
        self.push(v, Op::Gelu { a: a.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a.0, |x| x.exp());
        self.push(v, Op::Exp { a: a.0 })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (S::from_f64(lo), S::from_f64(hi));
        let v = self.map(a.0, |x| x.max(l).min(h));
        self.push(v, Op::Clamp { a: a.0, lo, hi })
    }

    /// Row-wise log-softmax over the trailing axis (max-shifted for stability).
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let (rows, d) = (x.rows(), x.last_dim());
        let mut out = vec![S::zero(); rows * d];
        for r in 0..rows {
            let row = x.row(r);
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.push(v, Op::LogSoftmax { a: a.0 })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: S = self.nodes[a.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let n = S::from_f64(x.numel() as f64);
        let s: S = x.data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::MeanAll { a: a.0 })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.nodes[a.0].value.reshaped(shape)?;
        Ok(self.push(v, Op::Reshape { a: a.0 }))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ra, rb) = (xa.rows(), xb.rows());
        if ra != rb || xa.shape()[..xa.rank() - 1] != xb.shape()[..xb.rank() - 1] {
            return Err(Error::shape(
                "concat",
                format!("leading dims differ: {:?} vs {:?}", xa.shape(), xb.shape()),
            ));
        }
        let (da, db) = (xa.last_dim(), xb.last_dim());
        let mut out = Vec::with_capacity(ra * (da + db));
        for r in 0..ra {
            out.extend_from_slice(xa.row(r));
            out.extend_from_slice(xb.row(r));
        }
        let mut shape = xa.shape().to_vec();
        *shape.last_mut().unwrap() = da + db;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Concat { a: a.0, b: b.0 }))
    }

    /// y = rows(x) · W + b, applied over the trailing axis of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        if wv.rank() != 2 {
            return Err(Error::shape("affine", format!("weight must be rank 2, got {:?}", wv.shape())));
        }
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        if xv.last_dim() != din || bv.shape() != [dout] {
            return Err(Error::shape(
                "affine",
                format!("x {:?} · W {:?} + b {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let rows = xv.rows();
        let mut out = vec![S::zero(); rows * dout];
        for r in 0..rows {
            let xr = xv.row(r);
            let or = &mut out[r * dout..(r + 1) * dout];
            or.copy_from_slice(bv.data());
            for (i, &xi) in xr.iter().enumerate() {
                let wrow = wv.row(i);
                for (o, &wio) in or.iter_mut().zip(wrow) {
                    *o += xi * wio;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Affine { x: x.0, w: w.0, b: b.0 }))
    }

    /// Strided 1-D convolution with zero padding.
    /// x: [B, L, Cin], w: [k, Cin, Cout], b: [Cout] → [B, Lout, Cout].
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv, bv) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        if xv.rank() != 3 || wv.rank() != 3 {
            return Err(Error::shape(
                "conv1d",
                format!("x {:?}, w {:?} (need rank 3 both)", xv.shape(), wv.shape()),
            ));
        }
        let (bsz, lin, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (k, wcin, cout) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        if wcin != cin || bv.shape() != [cout] || stride == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("x {:?}, w {:?}, b {:?}, stride {}", xv.shape(), wv.shape(), bv.shape(), stride),
            ));
        }
        if lin + 2 * pad < k {
            return Err(Error::shape("conv1d", format!("kernel {} exceeds padded length {}", k, lin + 2 * pad)));
        }
        let lout = (lin + 2 * pad - k) / stride + 1;
        let mut out = vec![S::zero(); bsz * lout * cout];
        for bi in 0..bsz {
            for j in 0..lout {
                let or = &mut out[(bi * lout + j) * cout..(bi * lout + j + 1) * cout];
                or.copy_from_slice(bv.data());
                for t in 0..k {
                    let src = (j * stride + t) as isize - pad as isize;
                    if src < 0 || src >= lin as isize {
                        continue;
                    }
                    let xr = xv.row(bi * lin + src as usize);
                    let wbase = t * cin;
                    for (ci, &xi) in xr.iter().enumerate() {
                        let wrow = wv.row(wbase + ci);
                        for (o, &wv_) in or.iter_mut().zip(wrow) {
                            *o += xi * wv_;
                        }
                    }
                }
            }
        }
        let v = Tensor::new(vec![bsz, lout, cout], out)?;
        Ok(self.push(v, Op::Conv1d { x: x.0, w: w.0, b: b.0, stride, pad }))
    }

    /// [B, l, C] → [B, l·factor, C] by repeating each length position.
    pub fn repeat_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 3 || factor == 0 {
            return Err(Error::shape("repeat_rows", format!("x {:?}, factor {}", xv.shape(), factor)));
        }
        let (bsz, l, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Vec::with_capacity(bsz * l * factor * c);
        for bi in 0..bsz {
            for li in 0..l {
                for _ in 0..factor {
                    out.extend_from_slice(xv.row(bi * l + li));
                }
            }
        }
        let v = Tensor::new(vec![bsz, l * factor, c], out)?;
        Ok(self.push(v, Op::RepeatRows { x: x.0, factor }))
    }

    /// Row-wise layer normalization over the trailing axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (&self.nodes[x.0].value, &self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] || d < 2 {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.rows();
        let mut out = vec![S::zero(); rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let (mean, inv) = row_moments(row);
            for ((o, &v), (&g, &b)) in
                out[r * d..(r + 1) * d].iter_mut().zip(row).zip(gv.data().iter().zip(bv.data()))
            {
                *o = (v - mean) * inv * g + b;
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(v, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0 }))
    }

    /// Embedding lookup: rows of `table` selected by `indices` → [n, D].
    pub fn gather_rows(&mut self, table: Var, indices: Vec<u32>) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        if tv.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("table must be rank 2, got {:?}", tv.shape())));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        if indices.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::shape("gather_rows", format!("index {} out of range {}", bad, vocab)));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            out.extend_from_slice(tv.row(i as usize));
        }
        let v = Tensor::new(vec![indices.len(), d], out)?;
        Ok(self.push(v, Op::GatherRows { table: table.0, indices }))
    }

    /// −mean over rows of logp[r, targets[r]]. `logp`: [N, C].
    pub fn nll_mean(&mut self, logp: Var, targets: Vec<u32>) -> Result<Var> {
        let lv = &self.nodes[logp.0].value;
        let (rows, c) = (lv.rows(), lv.last_dim());
        if targets.len() != rows {
            return Err(Error::shape("nll_mean", format!("{} targets for {} rows", targets.len(), rows)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
            return Err(Error::shape("nll_mean", format!("target {} out of range {}", bad, c)));
        }
        let n = S::from_f64(rows as f64);
        let s: S = targets.iter().enumerate().map(|(r, &t)| lv.row(r)[t as usize]).sum();
        let v = Tensor::scalar(-s / n);
        Ok(self.push(v, Op::NllMean { logp: logp.0, targets }))
    }

    fn map(&self, a: usize, f: impl Fn(S) -> S) -> Tensor<S> {
        let x = &self.nodes[a].value;
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    fn zip(&self, a: usize, b: usize, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (xa, xb) = (&self.nodes[a].value, &self.nodes[b].value);
        let data = xa.data().iter().zip(xb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(xa.shape().to_vec(), data).expect("same shape")
    }

    /// Reverse sweep from a scalar loss. Errors if the loss is not a finite
    /// scalar; everything else is unchecked by design (speed).
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFinite { context: "loss".into() });
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    // Terminal: re-install so callers can read it.
                    grads[id] = Some(gout);
                }
                &Op::Add { a, b } => {
                    self.accum(&mut grads, a, |ga| add_assign(ga, &gout));
                    self.accum(&mut grads, b, |gb| add_assign(gb, &gout));
                }
                &Op::Sub { a, b } => {
                    self.accum(&mut grads, a, |ga| add_assign(ga, &gout));
                    self.accum(&mut grads, b, |gb| sub_assign(gb, &gout));
                }
                &Op::Mul { a, b } => {
                    let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                    self.accum(&mut grads, a, |ga| {
                        for ((g, &go), &y) in ga.iter_mut().zip(&gout).zip(bv) {
                            *g += go * y;
                        }
                    });
                    self.accum(&mut grads, b, |gb| {
                        for ((g, &go), &x) in gb.iter_mut().zip(&gout).zip(av) {
                            *g += go * x;
                        }
                    });
                }
                &Op::Scale { a, c } => {
                    let c = S::from_f64(c);
                    self.accum(&mut grads, a, |ga| {
                        for (g, &go) in ga.iter_mut().zip(&gout) {
                            *g += go * c;
                        }
                    });
                }
                &Op::Offset { a } => {
                    self.accum(&mut grads, a, |ga| add_assign(ga, &gout));
                }
                &Op::Gelu { a } => {
                    let xv = self.nodes[a].value.data();
                    let slope = S::from_f64(GELU_SLOPE);
                    self.accum(&mut grads, a, |ga| {
                        for ((g, &go), &x) in ga.iter_mut().zip(&gout).zip(xv) {
                            let s = sigmoid(slope * x);
                            *g += go * (s + x * slope * s * (S::one() - s));
                        }
                    });
                }
                &Op::Exp { a } => {
                    let yv = self.nodes[id].value.data();
                    self.accum(&mut grads, a, |ga| {
                        for ((g, &go), &y) in ga.iter_mut().zip(&gout).zip(yv) {
                            *g += go * y;
                        }
                    });
                }
                &Op::Clamp { a, lo, hi } => {
                    let xv = self.nodes[a].value.data();
                    let (l, h) = (S::from_f64(lo), S::from_f64(hi));
                    self.accum(&mut grads, a, |ga| {
                        for ((g, &go), &x) in ga.iter_mut().zip(&gout).zip(xv) {
                            if x >= l && x <= h {
                                *g += go;
                            }
                        }
                    });
                }
                &Op::LogSoftmax { a } => {
                    let y = &self.nodes[id].value;
                    let (rows, d) = (y.rows(), y.last_dim());
                    self.accum(&mut grads, a, |ga| {
                        for r in 0..rows {
                            let yr = y.row(r);
                            let gr = &gout[r * d..(r + 1) * d];
                            let gsum: S = gr.iter().copied().sum();
                            for ((g, &go), &yv) in ga[r * d..(r + 1) * d].iter_mut().zip(gr).zip(yr) {
                                *g += go - yv.exp() * gsum;
                            }
                        }
                    });
                }
                &Op::LayerNorm { x, gain, bias } => {
                    let xv = &self.nodes[x].value;
                    let gv = self.nodes[gain].value.data().to_vec();
                    let (rows, d) = (xv.rows(), xv.last_dim());
                    let dn = S::from_f64(d as f64);
                    // dgain/dbias first (read-only over x), then dx.
                    self.accum(&mut grads, gain, |gg| {
                        for r in 0..rows {
                            let row = xv.row(r);
                            let (mean, inv) = row_moments(row);
                            for ((g, &go), &v) in gg.iter_mut().zip(&gout[r * d..(r + 1) * d]).zip(row) {
                                *g += go * (v - mean) * inv;
                            }
                        }
                    });
                    self.accum(&mut grads, bias, |gb| {
                        for r in 0..rows {
                            for (g, &go) in gb.iter_mut().zip(&gout[r * d..(r + 1) * d]) {
                                *g += go;
                            }
                        }
                    });
                    self.accum(&mut grads, x, |gx| {
                        for r in 0..rows {
                            let row = xv.row(r);
                            let (mean, inv) = row_moments(row);
                            let gr = &gout[r * d..(r + 1) * d];
                            // dyh = gout ∘ gain; two row reductions then the standard formula.
                            let mut s1 = S::zero();
                            let mut s2 = S::zero();
                            for ((&go, &g), &v) in gr.iter().zip(&gv).zip(row) {
                                let dyh = go * g;
                                s1 += dyh;
                                s2 += dyh * (v - mean) * inv;
                            }
                            let (m1, m2) = (s1 / dn, s2 / dn);
                            for ((g, (&go, &gn)), &v) in
                                gx[r * d..(r + 1) * d].iter_mut().zip(gr.iter().zip(&gv)).zip(row)
                            {
                                let xh = (v - mean) * inv;
                                *g += inv * (go * gn - m1 - xh * m2);
                            }
                        }
                    });
                }
                &Op::SumAll { a } => {
                    let go = gout[0];
                    self.accum(&mut grads, a, |ga| {
                        for g in ga.iter_mut() {
                            *g += go;
                        }
                    });
                }
                &Op::MeanAll { a } => {
                    let n = S::from_f64(self.nodes[a].value.numel() as f64);
                    let go = gout[0] / n;
                    self.accum(&mut grads, a, |ga| {
                        for g in ga.iter_mut() {
                            *g += go;
                        }
                    });
                }
                &Op::Reshape { a } => {
                    self.accum(&mut grads, a, |ga| add_assign(ga, &gout));
                }
                &Op::Concat { a, b } => {
                    let (da, db) = (self.nodes[a].value.last_dim(), self.nodes[b].value.last_dim());
                    let rows = self.nodes[a].value.rows();
                    self.accum(&mut grads, a, |ga| {
                        for r in 0..rows {
                            let src = &gout[r * (da + db)..r * (da + db) + da];
                            add_assign(&mut ga[r * da..(r + 1) * da], src);
                        }
                    });
                    self.accum(&mut grads, b, |gb| {
                        for r in 0..rows {
                            let src = &gout[r * (da + db) + da..(r + 1) * (da + db)];
                            add_assign(&mut gb[r * db..(r + 1) * db], src);
                        }
                    });
                }
                Op::Affine { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let xv = &self.nodes[x].value;
                    let wv = &self.nodes[w].value;
                    let (rows, din, dout) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                    self.accum(&mut grads, x, |gx| {
                        for r in 0..rows {
                            let gr = &gout[r * dout..(r + 1) * dout];
                            for (i, g) in gx[r * din..(r + 1) * din].iter_mut().enumerate() {
                                let wrow = wv.row(i);
                                let mut acc = S::zero();
                                for (&go, &wio) in gr.iter().zip(wrow) {
                                    acc += go * wio;
                                }
                                *g += acc;
                            }
                        }
                    });
                    self.accum(&mut grads, w, |gw| {
                        for r in 0..rows {
                            let xr = xv.row(r);
                            let gr = &gout[r * dout..(r + 1) * dout];
                            for (i, &xi) in xr.iter().enumerate() {
                                for (g, &go) in gw[i * dout..(i + 1) * dout].iter_mut().zip(gr) {
                                    *g += xi * go;
                                }
                            }
                        }
                    });
                    self.accum(&mut grads, b, |gb| {
                        for r in 0..rows {
                            add_assign(gb, &gout[r * dout..(r + 1) * dout]);
                        }
                    });
                }
                Op::Conv1d { x, w, b, stride, pad } => {
                    let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                    let xv = &self.nodes[x].value;
                    let wv = &self.nodes[w].value;
                    let (bsz, lin, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let (k, cout) = (wv.shape()[0], wv.shape()[2]);
                    let lout = (lin + 2 * pad - k) / stride + 1;
                    self.accum(&mut grads, x, |gx| {
                        for bi in 0..bsz {
                            for j in 0..lout {
                                let gr = &gout[(bi * lout + j) * cout..(bi * lout + j + 1) * cout];
                                for t in 0..k {
                                    let src = (j * stride + t) as isize - pad as isize;
                                    if src < 0 || src >= lin as isize {
                                        continue;
                                    }
                                    let base = (bi * lin + src as usize) * cin;
                                    for ci in 0..cin {
                                        let wrow = wv.row(t * cin + ci);
                                        let mut acc = S::zero();
                                        for (&go, &wv_) in gr.iter().zip(wrow) {
                                            acc += go * wv_;
                                        }
                                        gx[base + ci] += acc;
                                    }
                                }
                            }
                        }
                    });
                    self.accum(&mut grads, w, |gw| {
                        for bi in 0..bsz {
                            for j in 0..lout {
                                let gr = &gout[(bi * lout + j) * cout..(bi * lout + j + 1) * cout];
                                for t in 0..k {
                                    let src = (j * stride + t) as isize - pad as isize;
                                    if src < 0 || src >= lin as isize {
                                        continue;
                                    }
                                    let xr = xv.row(bi * lin + src as usize);
                                    for (ci, &xi) in xr.iter().enumerate() {
                                        let base = (t * cin + ci) * cout;
                                        for (g, &go) in gw[base..base + cout].iter_mut().zip(gr) {
                                            *g += xi * go;
                                        }
                                    }
                                }
                            }
                        }
                    });
                    self.accum(&mut grads, b, |gb| {
                        for r in 0..bsz * lout {
                            add_assign(gb, &gout[r * cout..(r + 1) * cout]);
                        }
                    });
                }
                &Op::RepeatRows { x, factor } => {
                    let xv = &self.nodes[x].value;
                    let (bsz, l, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    self.accum(&mut grads, x, |gx| {
                        for bi in 0..bsz {
                            for li in 0..l {
                                let dst = &mut gx[(bi * l + li) * c..(bi * l + li + 1) * c];
                                for f in 0..factor {
                                    let src_row = (bi * l + li) * factor + f;
                                    add_assign(dst, &gout[src_row * c..(src_row + 1) * c]);
                                }
                            }
                        }
                    });
                }
                Op::GatherRows { table, indices } => {
                    let (table, indices) = (*table, indices.clone());
                    let d = self.nodes[table].value.last_dim();
                    self.accum(&mut grads, table, |gt| {
                        for (r, &i) in indices.iter().enumerate() {
                            let dst = &mut gt[i as usize * d..(i as usize + 1) * d];
                            add_assign(dst, &gout[r * d..(r + 1) * d]);
                        }
                    });
                }
                Op::NllMean { logp, targets } => {
                    let (logp, targets) = (*logp, targets.clone());
                    let c = self.nodes[logp].value.last_dim();
                    let go = gout[0] / S::from_f64(targets.len() as f64);
                    self.accum(&mut grads, logp, |gl| {
                        for (r, &t) in targets.iter().enumerate() {
                            gl[r * c + t as usize] -= go;
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<S>>], id: usize, write: impl FnOnce(&mut Vec<S>)) {
        let numel = self.nodes[id].value.numel();
        let slot = grads[id].get_or_insert_with(|| vec![S::zero(); numel]);
        write(slot);
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn row_moments<S: Scalar>(row: &[S]) -> (S, S) {
    let n = S::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    (mean, (var + S::from_f64(LN_EPS)).sqrt().recip())
}

fn add_assign<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_assign<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Scalar finite-difference probe for a single input coordinate.
    fn fd_probe(
        build: impl Fn(&mut Tape<f64>, &[f64]) -> Var,
        x0: &[f64],
        coord: usize,
        h: f64,
    ) -> f64 {
        let eval = |xs: &[f64]| {
            let mut t = Tape::<f64>::new();
            let loss = build(&mut t, xs);
            t.value(loss).item().unwrap()
        };
        let mut hi = x0.to_vec();
        hi[coord] += h;
        let mut lo = x0.to_vec();
        lo[coord] -= h;
        (eval(&hi) - eval(&lo)) / (2.0 * h)
    }

    fn analytic_grad(build: impl Fn(&mut Tape<f64>, &[f64]) -> Var, x0: &[f64]) -> Vec<f64> {
        let mut t = Tape::<f64>::new();
        // Leaf is always node 0 in these probes.
        let loss = build(&mut t, x0);
        let g = t.backward(loss).unwrap();
        t.grad_tensor(&g, Var(0)).into_data()
    }

    fn check_op(build: impl Fn(&mut Tape<f64>, &[f64]) -> Var + Copy, x0: &[f64], tol: f64) {
        let analytic = analytic_grad(build, x0);
        for (i, &a) in analytic.iter().enumerate() {
            let num = fd_probe(build, x0, i, 1e-6);
            assert!(
                (a - num).abs() / num.abs().max(1.0) < tol,
                "coord {}: analytic {} vs numeric {}",
                i,
                a,
                num
            );
        }
    }

    fn leaf(t: &mut Tape<f64>, shape: &[usize], xs: &[f64]) -> Var {
        t.input(Tensor::new(shape.to_vec(), xs.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn affine_forward_matches_hand_example() {
        // W = [[2]], b = [1], x = [[5]] → y = [[11]]
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[1, 1], &[5.0]);
        let w = leaf(&mut t, &[1, 1], &[2.0]);
        let b = leaf(&mut t, &[1], &[1.0]);
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[11.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        // f(w) = Σ w² at w = [1, −2] → ∇ = [2, −4]
        let mut t = Tape::<f64>::new();
        let w = leaf(&mut t, &[2], &[1.0, -2.0]);
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum_all(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(t.grad_tensor(&g, w).data(), &[2.0, -4.0]);
    }

    #[test]
    fn grad_affine() {
        let xs = [0.3, -1.2, 0.7, 0.4, -0.1, 0.9];
        check_op(
            |t, v| {
                let x = leaf(t, &[2, 3], v);
                let w = leaf(t, &[3, 2], &[0.2, -0.4, 0.5, 0.1, -0.3, 0.8]);
                let b = leaf(t, &[2], &[0.05, -0.02]);
                let y = t.affine(x, w, b).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum_all(sq)
            },
            &xs,
            1e-6,
        );
        // And with the leaf as the weight matrix.
        let ws = [0.2, -0.4, 0.5, 0.1, -0.3, 0.8];
        check_op(
            |t, v| {
                let w = leaf(t, &[3, 2], v);
                let x = leaf(t, &[2, 3], &[0.3, -1.2, 0.7, 0.4, -0.1, 0.9]);
                let b = leaf(t, &[2], &[0.05, -0.02]);
                let y = t.affine(x, w, b).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum_all(sq)
            },
            &ws,
            1e-6,
        );
    }

    #[test]
    fn grad_conv1d_all_inputs() {
        // x: [1, 5, 2], w: [3, 2, 2], stride 2, pad 1 → lout = 3 (floor semantics).
        let xs: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        check_op(
            |t, v| {
                let x = leaf(t, &[1, 5, 2], v);
                let w = leaf(
                    t,
                    &[3, 2, 2],
                    &[0.1, -0.2, 0.3, 0.05, -0.4, 0.2, 0.15, -0.1, 0.25, 0.3, -0.05, 0.1],
                );
                let b = leaf(t, &[2], &[0.01, -0.03]);
                let y = t.conv1d(x, w, b, 2, 1).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum_all(sq)
            },
            &xs,
            1e-6,
        );
        let ws = [0.1, -0.2, 0.3, 0.05, -0.4, 0.2, 0.15, -0.1, 0.25, 0.3, -0.05, 0.1];
        check_op(
            |t, v| {
                let w = leaf(t, &[3, 2, 2], v);
                let x = leaf(t, &[1, 5, 2], &[0.5, -0.3, 0.2, 0.8, -0.6, 0.1, 0.4, -0.2, 0.7, 0.3]);
                let b = leaf(t, &[2], &[0.01, -0.03]);
                let y = t.conv1d(x, w, b, 2, 1).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum_all(sq)
            },
            &ws,
            1e-6,
        );
    }

    #[test]
    fn conv1d_output_length_uses_floor() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[1, 10, 1], &[0.0; 10]);
        let w = leaf(&mut t, &[3, 1, 1], &[1.0, 1.0, 1.0]);
        let b = leaf(&mut t, &[1], &[0.0]);
        let y = t.conv1d(x, w, b, 5, 1).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 2, 1]);
    }

    #[test]
    fn grad_layer_norm() {
        let xs = [0.3, -1.2, 0.7, 2.0, 0.4, -0.1];
        check_op(
            |t, v| {
                let x = leaf(t, &[2, 3], v);
                let g = leaf(t, &[3], &[1.1, 0.9, 1.3]);
                let b = leaf(t, &[3], &[0.1, -0.2, 0.0]);
                let y = t.layer_norm(x, g, b).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum_all(sq)
            },
            &xs,
            1e-5,
        );
        let gs = [1.1, 0.9, 1.3];
        check_op(
            |t, v| {
                let g = leaf(t, &[3], v);
                let x = leaf(t, &[2, 3], &[0.3, -1.2, 0.7, 2.0, 0.4, -0.1]);
                let b = leaf(t, &[3], &[0.1, -0.2, 0.0]);
                let y = t.layer_norm(x, g, b).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum_all(sq)
            },
            &gs,
            1e-6,
        );
    }

    #[test]
    fn grad_log_softmax_and_nll() {
        let xs = [0.5, -0.2, 1.3, 0.1, 0.0, -0.7];
        check_op(
            |t, v| {
                let x = leaf(t, &[2, 3], v);
                let lp = t.log_softmax(x);
                t.nll_mean(lp, vec![2, 0]).unwrap()
            },
            &xs,
            1e-6,
        );
    }

    #[test]
    fn grad_elementwise_chain() {
        // gelu → exp → clamp → mean: stresses several unary backwards at once.
        let xs = [0.3, -0.8, 1.4, -0.2];
        check_op(
            |t, v| {
                let x = leaf(t, &[4], v);
                let g = t.gelu(x);
                let e = t.exp(g);
                let c = t.clamp(e, 0.2, 3.0);
                t.mean_all(c)
            },
            &xs,
            1e-5,
        );
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[3], &[-2.0, 0.5, 9.0]);
        let c = t.clamp(x, 0.0, 1.0);
        let loss = t.sum_all(c);
        let g = t.backward(loss).unwrap();
        assert_eq!(t.grad_tensor(&g, x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn grad_concat_repeat_gather() {
        let xs = [0.2, -0.5, 0.9, 0.1];
        check_op(
            |t, v| {
                let table = leaf(t, &[2, 2], v);
                let g = t.gather_rows(table, vec![1, 0, 1]).unwrap();
                let g3 = t.reshape(g, vec![1, 3, 2]).unwrap();
                let r = t.repeat_rows(g3, 2).unwrap();
                let flat = t.reshape(r, vec![6, 2]).unwrap();
                let other = leaf(t, &[6, 2], &[0.1; 12]);
                let cat = t.concat(flat, other).unwrap();
                let sq = t.mul(cat, cat).unwrap();
                t.sum_all(sq)
            },
            &xs,
            1e-6,
        );
    }

    #[test]
    fn offpath_vars_read_back_as_zeros() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        let unused = leaf(&mut t, &[2], &[3.0, 4.0]);
        let loss = t.sum_all(x);
        let g = t.backward(loss).unwrap();
        assert!(g.wrt(unused).is_none());
        assert_eq!(t.grad_tensor(&g, unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_non_finite() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        assert!(t.backward(x).is_err());

        let mut t2 = Tape::<f64>::new();
        let x = leaf(&mut t2, &[1], &[f64::INFINITY]);
        let loss = t2.sum_all(x);
        assert!(matches!(t2.backward(loss), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn shared_input_accumulates_both_paths() {
        // f(x) = sum(x∘x) + sum(x) → grad 2x + 1.
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[2], &[3.0, -1.0]);
        let sq = t.mul(x, x).unwrap();
        let s1 = t.sum_all(sq);
        let s2 = t.sum_all(x);
        let loss = t.add(s1, s2).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(t.grad_tensor(&g, x).data(), &[7.0, -1.0]);
    }
}
