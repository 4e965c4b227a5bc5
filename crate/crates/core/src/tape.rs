//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly, pushes its result onto the [`Tape`]
//! and returns a [`Var`] handle. [`Tape::backward`] walks the recorded
//! nodes in reverse and accumulates `∂loss/∂node` into the gradient buffer
//! of every node that requires gradients.
//!
//! Gradients accumulate: calling `backward` twice without
//! [`Tape::zero_grad`] in between doubles every gradient.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise fold used by [`Tape::combine`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    Maximum,
    Sum,
    Multiplication,
}

impl std::str::FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maximum" | "max" => Ok(Combine::Maximum),
            "sum" => Ok(Combine::Sum),
            "multiplication" | "mul" => Ok(Combine::Multiplication),
            other => Err(Error::Parameter(format!("unknown fusion kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Rows whose norm falls below this are passed through unnormalized.
pub const L2_EPSILON: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
        degenerate: Vec<bool>,
    },
    Combine {
        kind: Combine,
        xs: Vec<Var>,
        winners: Vec<u32>,
    },
    AdaptiveMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeometry,
    },
    Relu(Var),
    Affine(Var, Var, Var),
    ChannelBias(Var, Var),
    Reshape(Var),
    SliceFrames {
        x: Var,
        offset: usize,
    },
    MeanFrames {
        x: Var,
        frames: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    SumSquares(Var),
    ZeroDiagonal(Var),
    SqrtClamped(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Hash of every piecewise decision on the tape: ReLU and sqrt-clamp
    /// signs, max-pool and max-fusion winners, degenerate L2 rows. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, n) in self.nodes.iter().enumerate() {
            match &n.op {
                Op::Relu(x) | Op::SqrtClamped(x) => {
                    i.hash(&mut h);
                    for v in self.nodes[x.0].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::AdaptiveMaxPool { argmax, .. } => (i, argmax).hash(&mut h),
                Op::Combine { winners, .. } => (i, winners).hash(&mut h),
                Op::L2NormalizeRows { degenerate, .. } => (i, degenerate).hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::Transpose(a)))
    }

    /// `x·w` with `b` added to every row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(x).dims2()?;
        let (k2, n) = self.value(w).dims2()?;
        if k != k2 {
            return Err(Error::dim("affine", self.shape(x), self.shape(w)));
        }
        if self.value(b).numel() != n {
            return Err(Error::dim("affine bias", self.shape(w), self.shape(b)));
        }
        let mut out = matmul_raw(self.data(x), self.data(w), m, k, n);
        let bias = self.data(b);
        for row in out.chunks_exact_mut(n) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, rg, Op::Affine(x, w, b)))
    }

    /// Adds a per-channel bias along the last axis.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().expect("non-empty shape");
        if self.value(b).numel() != c {
            return Err(Error::dim("channel bias", self.shape(x), self.shape(b)));
        }
        let bias = self.data(b).to_vec();
        let mut out = self.data(x).to_vec();
        for chunk in out.chunks_exact_mut(c) {
            for (o, bb) in chunk.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, rg, Op::ChannelBias(x, b)))
    }

    // ---------------------------------------------------------------------
    // Row-wise normalizers
    // ---------------------------------------------------------------------

    /// Numerically stable softmax of every row (max-subtracted).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::SoftmaxRows(x)))
    }

    /// Scales every row to unit Euclidean norm. Rows with norm below
    /// `epsilon` are copied through and their indices returned.
    pub fn l2_normalize_rows(&mut self, x: Var, epsilon: f64) -> Result<(Var, Vec<usize>)> {
        let (m, n) = self.value(x).dims2()?;
        let mut out = self.data(x).to_vec();
        let mut norms = vec![0.0; m];
        let mut degenerate = vec![false; m];
        for (r, row) in out.chunks_exact_mut(n).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[r] = norm;
            if norm < epsilon {
                degenerate[r] = true;
            } else {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        let flagged = (0..m).filter(|&r| degenerate[r]).collect();
        let t = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(&[x]);
        let v = self.push(
            t,
            rg,
            Op::L2NormalizeRows {
                x,
                norms,
                degenerate,
            },
        );
        Ok((v, flagged))
    }

    // ---------------------------------------------------------------------
    // Pointwise
    // ---------------------------------------------------------------------

    /// Pointwise fold of equally shaped tensors.
    pub fn combine(&mut self, kind: Combine, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("combine needs at least one input".into()))?;
        let shape = self.shape(first).to_vec();
        for &x in &xs[1..] {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::dim("combine", &shape, self.shape(x)));
            }
        }
        let mut out = self.data(first).to_vec();
        let mut winners = Vec::new();
        if kind == Combine::Maximum {
            winners = vec![0u32; out.len()];
        }
        for (i, &x) in xs.iter().enumerate().skip(1) {
            let d = self.data(x);
            match kind {
                Combine::Sum => out.iter_mut().zip(d).for_each(|(o, v)| *o += v),
                Combine::Multiplication => out.iter_mut().zip(d).for_each(|(o, v)| *o *= v),
                Combine::Maximum => {
                    for (e, (o, v)) in out.iter_mut().zip(d).enumerate() {
                        if *v > *o {
                            *o = *v;
                            winners[e] = i as u32;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(
            t,
            rg,
            Op::Combine {
                kind,
                xs: xs.to_vec(),
                winners,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, op))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x).iter().map(|v| v + c).collect();
        let t = Tensor::new(self.shape(x), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::AddScalar(x))
    }

    /// `sqrt(max(x, 0))` pointwise; the gradient is 0 where `x <= 0`.
    pub fn sqrt_clamped(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.max(0.0).sqrt()).collect();
        let t = Tensor::new(self.shape(x), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::SqrtClamped(x))
    }

    /// Multiplies by a fixed mask (inverted dropout when the mask holds
    /// `0` or `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::dim("dropout", self.shape(x), &[mask.len()]));
        }
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Dropout { x, mask }))
    }

    // ---------------------------------------------------------------------
    // Reductions
    // ---------------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_squares();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::SumSquares(x))
    }

    /// Copy of a square matrix with its diagonal set to zero.
    pub fn zero_diagonal(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if r != c {
            return Err(Error::dim("zero_diagonal", &[r], &[c]));
        }
        let mut out = self.data(x).to_vec();
        for i in 0..r {
            out[i * c + i] = 0.0;
        }
        let t = Tensor::new(&[r, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::ZeroDiagonal(x)))
    }

    /// `−log softmax(logits)[label]` via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.data(logits);
        let classes = z.len();
        if classes < 2 {
            return Err(Error::Contract(format!(
                "cross entropy needs at least 2 classes, got {classes}"
            )));
        }
        if label >= classes {
            return Err(Error::Contract(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let probs = z.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - z[label];
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    // ---------------------------------------------------------------------
    // Shape
    // ---------------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// Frames `start..start+len` along the leading axis.
    pub fn slice_frames(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(Error::dim("slice_frames", &shape, &[start, len]));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.data(x)[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let t = Tensor::new(&out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            rg,
            Op::SliceFrames {
                x,
                offset: start * inner,
            },
        ))
    }

    /// Mean over the leading axis, dropping it.
    pub fn mean_frames(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Contract("mean_frames needs rank >= 2".into()));
        }
        let frames = shape[0];
        let inner: usize = shape[1..].iter().product();
        let mut out = vec![0.0; inner];
        for chunk in self.data(x).chunks_exact(inner) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= frames as f64);
        let t = Tensor::new(&shape[1..], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::MeanFrames { x, frames }))
    }

    // ---------------------------------------------------------------------
    // Spatial
    // ---------------------------------------------------------------------

    /// Adaptive max pooling of `K×W×H×C` to `K×W'×H'×C`.
    pub fn adaptive_max_pool2d(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let dims = dims4(self.shape(x), "adaptive_max_pool2d")?;
        let (tw, th) = target;
        if tw == 0 || th == 0 || tw > dims[1] || th > dims[2] {
            return Err(Error::dim("adaptive_max_pool2d", self.shape(x), &[tw, th]));
        }
        let mut out = vec![0.0; dims[0] * tw * th * dims[3]];
        let argmax = kernels::adaptive_max_pool_forward(self.data(x), dims, target, &mut out);
        let t = Tensor::new(&[dims[0], tw, th, dims[3]], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::AdaptiveMaxPool { x, argmax }))
    }

    /// Cross-correlation of `K×W×H×Cin` with a `kh×kw×Cin×Cout` kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        let [frames, in_w, in_h, cin] = dims4(self.shape(x), "conv2d input")?;
        let [kh, kw, kcin, cout] = dims4(self.shape(k), "conv2d kernel")?;
        if kcin != cin {
            return Err(Error::dim("conv2d", self.shape(x), self.shape(k)));
        }
        let (out_w, pad_w) = conv_extent(in_w, kh, stride, padding);
        let (out_h, pad_h) = conv_extent(in_h, kw, stride, padding);
        if out_w == 0 || out_h == 0 {
            return Err(Error::dim("conv2d", self.shape(x), self.shape(k)));
        }
        let geom = ConvGeometry {
            frames,
            in_w,
            in_h,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad_w,
            pad_h,
            out_w,
            out_h,
        };
        let mut out = vec![0.0; frames * out_w * out_h * cout];
        kernels::conv2d_forward(&geom, self.data(x), self.data(k), &mut out);
        let t = Tensor::new(&[frames, out_w, out_h, cout], out)?;
        let rg = self.rg(&[x, k]);
        Ok(self.push(t, rg, Op::Conv2d { x, k, geom }))
    }

    // ---------------------------------------------------------------------
    // Reverse pass
    // ---------------------------------------------------------------------

    /// Accumulates `∂loss/∂v` into every reachable node that requires
    /// gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut adj);
            }
            adj[i] = Some(g);
        }
        for (i, a) in adj.into_iter().enumerate() {
            if let Some(g) = a {
                if self.nodes[i].requires_grad {
                    self.nodes[i].value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                if let Some(ga) = self.slot(adj, *a) {
                    // ga = g · bᵀ
                    let bd = self.data(*b);
                    for r in 0..m {
                        for t in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * bd[t * n + j];
                            }
                            ga[r * k + t] += s;
                        }
                    }
                }
                if let Some(gb) = self.slot(adj, *b) {
                    // gb = aᵀ · g
                    let ad = self.data(*a);
                    for r in 0..m {
                        for t in 0..k {
                            let av = ad[r * k + t];
                            let row = &mut gb[t * n..(t + 1) * n];
                            for (o, gv) in row.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *o += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                if let Some(ga) = self.slot(adj, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.shape()[1];
                if let Some(gx) = self.slot(adj, *x) {
                    for ((gxr, yr), gr) in gx
                        .chunks_exact_mut(n)
                        .zip(y.chunks_exact(n))
                        .zip(g.chunks_exact(n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in gxr.iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::L2NormalizeRows {
                x,
                norms,
                degenerate,
            } => {
                let n = node.value.shape()[1];
                if let Some(gx) = self.slot(adj, *x) {
                    for (r, ((gxr, yr), gr)) in gx
                        .chunks_exact_mut(n)
                        .zip(y.chunks_exact(n))
                        .zip(g.chunks_exact(n))
                        .enumerate()
                    {
                        if degenerate[r] {
                            gxr.iter_mut().zip(gr).for_each(|(o, gv)| *o += gv);
                            continue;
                        }
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in gxr.iter_mut().zip(yr).zip(gr) {
                            *o += (gv - yv * dot) / norms[r];
                        }
                    }
                }
            }
            Op::Combine { kind, xs, winners } => {
                for (idx, &x) in xs.iter().enumerate() {
                    let Some(gx) = self.slot(adj, x) else {
                        continue;
                    };
                    match kind {
                        Combine::Sum => gx.iter_mut().zip(g).for_each(|(o, gv)| *o += gv),
                        Combine::Maximum => {
                            for (e, o) in gx.iter_mut().enumerate() {
                                if winners[e] as usize == idx {
                                    *o += g[e];
                                }
                            }
                        }
                        Combine::Multiplication => {
                            for (e, o) in gx.iter_mut().enumerate() {
                                let mut p = g[e];
                                for (j, &other) in xs.iter().enumerate() {
                                    if j != idx {
                                        p *= self.data(other)[e];
                                    }
                                }
                                *o += p;
                            }
                        }
                    }
                }
            }
            Op::AdaptiveMaxPool { x, argmax } => {
                if let Some(gx) = self.slot(adj, *x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::Conv2d { x, k, geom } => {
                let want_x = self.nodes[x.0].requires_grad;
                let want_k = self.nodes[k.0].requires_grad;
                let mut gx_buf = want_x.then(|| vec![0.0; self.value(*x).numel()]);
                let mut gk_buf = want_k.then(|| vec![0.0; self.value(*k).numel()]);
                kernels::conv2d_backward(
                    geom,
                    self.data(*x),
                    self.data(*k),
                    g,
                    gx_buf.as_deref_mut(),
                    gk_buf.as_deref_mut(),
                );
                if let Some(buf) = gx_buf {
                    add_into(self.slot(adj, *x).unwrap(), &buf);
                }
                if let Some(buf) = gk_buf {
                    add_into(self.slot(adj, *k).unwrap(), &buf);
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                if let Some(gx) = self.slot(adj, *x) {
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Affine(x, w, b) => {
                let (m, k) = self.value(*x).dims2().unwrap();
                let n = self.value(*w).shape()[1];
                if let Some(gx) = self.slot(adj, *x) {
                    let wd = self.data(*w);
                    for r in 0..m {
                        for t in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * wd[t * n + j];
                            }
                            gx[r * k + t] += s;
                        }
                    }
                }
                if let Some(gw) = self.slot(adj, *w) {
                    let xd = self.data(*x);
                    for r in 0..m {
                        for t in 0..k {
                            let xv = xd[r * k + t];
                            if xv == 0.0 {
                                continue;
                            }
                            let row = &mut gw[t * n..(t + 1) * n];
                            for (o, gv) in row.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *o += xv * gv;
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(adj, *b) {
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::ChannelBias(x, b) => {
                if let Some(gx) = self.slot(adj, *x) {
                    add_into(gx, g);
                }
                let c = self.value(*b).numel();
                if let Some(gb) = self.slot(adj, *b) {
                    for chunk in g.chunks_exact(c) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(adj, *x) {
                    add_into(gx, g);
                }
            }
            Op::SliceFrames { x, offset } => {
                if let Some(gx) = self.slot(adj, *x) {
                    add_into(&mut gx[*offset..*offset + g.len()], g);
                }
            }
            Op::MeanFrames { x, frames } => {
                let inv = 1.0 / *frames as f64;
                if let Some(gx) = self.slot(adj, *x) {
                    for chunk in gx.chunks_exact_mut(g.len()) {
                        chunk.iter_mut().zip(g).for_each(|(o, gv)| *o += gv * inv);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(adj, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(adj, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(adj, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, gv)| *o -= gv);
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(adj, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, gv)| *o += c * gv);
                }
            }
            Op::AddScalar(x) => {
                if let Some(gx) = self.slot(adj, *x) {
                    add_into(gx, g);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(adj, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::SumSquares(x) => {
                let xd = self.data(*x);
                if let Some(gx) = self.slot(adj, *x) {
                    gx.iter_mut()
                        .zip(xd)
                        .for_each(|(o, xv)| *o += 2.0 * xv * g[0]);
                }
            }
            Op::ZeroDiagonal(x) => {
                let n = node.value.shape()[0];
                if let Some(gx) = self.slot(adj, *x) {
                    for (e, (o, gv)) in gx.iter_mut().zip(g).enumerate() {
                        if e / n != e % n {
                            *o += gv;
                        }
                    }
                }
            }
            Op::SqrtClamped(x) => {
                let xd = self.data(*x);
                if let Some(gx) = self.slot(adj, *x) {
                    for (((o, gv), xv), yv) in gx.iter_mut().zip(g).zip(xd).zip(y) {
                        if *xv > 0.0 {
                            *o += gv / (2.0 * yv);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                if let Some(gx) = self.slot(adj, *logits) {
                    for (c, (o, p)) in gx.iter_mut().zip(probs).enumerate() {
                        let target = if c == *label { 1.0 } else { 0.0 };
                        *o += g[0] * (p - target);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.slot(adj, *x) {
                    for ((o, gv), m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gv * m;
                    }
                }
            }
        }
    }

    /// Adjoint buffer of `v`, allocated on first use; `None` when `v` does
    /// not require gradients.
    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[t * n..(t + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn dims4(shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match *shape {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::dim(op, shape, &[4])),
    }
}

/// Output extent and leading pad for one spatial axis.
fn conv_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => {
            if kernel > input {
                (0, 0)
            } else {
                ((input - kernel) / stride + 1, 0)
            }
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            if kernel > input + total {
                (0, 0)
            } else {
                (out, total / 2)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[&[1.0, -2.0]]));
        let y = t.sum_squares(x);
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, -8.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none_or(|g| g.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn shared_inputs_sum_their_paths() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.add(x, x).unwrap();
        let z = t.sum_squares(y);
        t.backward(z).unwrap();
        // z = 4x², dz/dx = 8x
        assert_eq!(t.grad(x).unwrap(), &[24.0]);
    }

    #[test]
    fn constants_and_detached_values_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(2.0));
        let x = t.leaf(Tensor::scalar(5.0));
        let d = t.detach(x);
        let y = t.add(c, d).unwrap();
        let y = t.add(y, x).unwrap();
        let z = t.sum_squares(y);
        t.backward(z).unwrap();
        assert!(!t.requires_grad(c) && !t.requires_grad(d));
        assert!(t.grad(c).is_none() && t.grad(d).is_none());
        assert_eq!(t.grad(x).unwrap(), &[24.0]);
    }

    #[test]
    fn backward_rejects_non_scalars() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn branch_signature_tracks_relu_signs() {
        let sig = |v: f64| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::scalar(v));
            t.relu(x);
            t.branch_signature()
        };
        assert_eq!(sig(1.0), sig(2.0));
        assert_ne!(sig(1.0), sig(-1.0));
    }
}
