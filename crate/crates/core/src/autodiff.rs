//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`]
//! handle. Because nodes can only reference earlier nodes, creation order is
//! already a topological order and [`Tape::backward`] is a single reverse
//! sweep. A fresh tape is built for every forward pass, which is what lets
//! each training step run a differently assembled network.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Lower clamp applied to Gram determinants before taking the log.
pub const LOGDET_CLAMP: f64 = 1e-20;

/// Row norms below this are treated as this value when normalizing.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        padding: usize,
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    RowEntropy {
        x: Var,
    },
    DropColumns {
        x: Var,
        labels: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    StackRows {
        xs: Vec<Var>,
    },
    BatchedGram {
        x: Var,
    },
    BatchedLogDet {
        x: Var,
        inverses: Vec<Option<Vec<f64>>>,
    },
    BatchedGramLogDet {
        x: Var,
        grads: Vec<Option<Vec<f64>>>,
    },
    ConcatRows {
        xs: Vec<Var>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; a zero tensor when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Moves the gradient out, leaving nothing behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn expect_ndim(t: &Tensor, n: usize, what: &str) -> Result<()> {
    if t.ndim() != n {
        return Err(Error::dim(format!(
            "{what} expects a {n}-d tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Output extent of a sliding window.
pub fn window_out(input: usize, window: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if window == 0 || stride == 0 || window > padded {
        return None;
    }
    Some((padded - window) / stride + 1)
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `c[i][j] = Σ_t a[i][t]·b[t][j]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        expect_ndim(at, 2, "matmul")?;
        expect_ndim(bt, 2, "matmul")?;
        let (m, k) = (at.shape()[0], at.shape()[1]);
        let (k2, n) = (bt.shape()[0], bt.shape()[1]);
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul of {:?} by {:?}: inner extents differ",
                at.shape(),
                bt.shape()
            )));
        }
        let (ad, bd) = (at.data(), bt.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for t in 0..k {
                let av = ad[i * k + t];
                for (o, &bv) in row.iter_mut().zip(&bd[t * n..(t + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Dense layer `x·Wᵀ + b` with `x: [B×in]`, `W: [out×in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        expect_ndim(xt, 2, "linear input")?;
        expect_ndim(wt, 2, "linear weight")?;
        let (batch, fan_in) = (xt.shape()[0], xt.shape()[1]);
        let fan_out = wt.shape()[0];
        if wt.shape()[1] != fan_in {
            return Err(Error::dim(format!(
                "linear: input {:?} incompatible with weight {:?}",
                xt.shape(),
                wt.shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [fan_out] {
                return Err(Error::dim(format!(
                    "linear: bias {:?} does not match {fan_out} outputs",
                    self.value(b).shape()
                )));
            }
        }
        let (xd, wd) = (xt.data(), wt.data());
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; batch * fan_out];
        for r in 0..batch {
            let xr = &xd[r * fan_in..(r + 1) * fan_in];
            for o in 0..fan_out {
                let wr = &wd[o * fan_in..(o + 1) * fan_in];
                let mut acc = 0.0;
                for (xv, wv) in xr.iter().zip(wr) {
                    acc += xv * wv;
                }
                if let Some(bias) = bias {
                    acc += bias[o];
                }
                out[r * fan_out + o] = acc;
            }
        }
        let value = Tensor::new(vec![batch, fan_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// 2-D cross-correlation (no kernel flip) of `[N×C×H×W]` with `[O×C×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let value = conv2d_forward(self.value(x), self.value(k), stride, padding)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
            },
            &[x, k],
        ))
    }

    /// Adds `b[o]` to every element of output channel `o`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xt, bt) = (self.value(x), self.value(b));
        expect_ndim(xt, 4, "add_channel_bias")?;
        let (n, c, h, w) = dims4(xt);
        if bt.shape() != [c] {
            return Err(Error::dim(format!(
                "channel bias {:?} does not match {c} channels",
                bt.shape()
            )));
        }
        let mut out = xt.data().to_vec();
        let plane = h * w;
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for v in &mut out[base..base + plane] {
                    *v += bt.data()[ch];
                }
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddChannelBias { x, b }, &[x, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Windowed maximum over `[N×C×H×W]`; ties resolve to the first maximum
    /// in row-major scan order.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xt = self.value(x);
        expect_ndim(xt, 4, "max_pool2d")?;
        let (n, c, h, w) = dims4(xt);
        let (oh, ow) = match (window_out(h, k, stride, 0), window_out(w, k, stride, 0)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::dim(format!(
                    "max_pool2d window {k} (stride {stride}) exceeds input {h}×{w}"
                )))
            }
        };
        let xd = xt.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * stride * w + j * stride;
                    for u in 0..k {
                        for v in 0..k {
                            let idx = base + (i * stride + u) * w + j * stride + v;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let batch = *t
            .shape()
            .first()
            .ok_or_else(|| Error::dim("flatten of a scalar"))?;
        let rest = t.row_len();
        self.reshape(x, vec![batch, rest])
    }

    /// Row-wise softmax of `[B×C]` logits, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        expect_ndim(xt, 2, "softmax")?;
        let value = softmax_rows(xt);
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        expect_ndim(lt, 2, "cross_entropy")?;
        let (batch, classes) = (lt.shape()[0], lt.shape()[1]);
        if labels.len() != batch {
            return Err(Error::dim(format!(
                "cross_entropy: {} labels for batch of {batch}",
                labels.len()
            )));
        }
        if batch == 0 {
            return Err(Error::contract("cross_entropy of an empty batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let ld = lt.data();
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &ld[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            total += max + sum.ln() - row[label];
        }
        let probs = softmax_rows(lt);
        let value = Tensor::scalar(total / batch as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        same_shape(at, bt, "add")?;
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        same_shape(at, bt, "sub")?;
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        same_shape(at, bt, "mul")?;
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::SumAll { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        Ok(self.push(value, Op::MeanAll { x }, &[x]))
    }

    /// Shannon entropy `−Σ p ln p` of each row of `[B×C]`, with `0 ln 0 = 0`.
    pub fn row_entropy(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        expect_ndim(xt, 2, "row_entropy")?;
        let (rows, cols) = (xt.shape()[0], xt.shape()[1]);
        let data = xt
            .data()
            .chunks(cols.max(1))
            .take(rows)
            .map(|row| -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
            .collect();
        let value = Tensor::new(vec![rows], data)?;
        Ok(self.push(value, Op::RowEntropy { x }, &[x]))
    }

    /// Removes column `labels[r]` from row `r` of `[B×C]`, giving `[B×(C−1)]`.
    pub fn drop_columns(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        expect_ndim(xt, 2, "drop_columns")?;
        let (rows, cols) = (xt.shape()[0], xt.shape()[1]);
        if labels.len() != rows {
            return Err(Error::dim(format!(
                "drop_columns: {} labels for {rows} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Index(format!("column {bad} out of 0..{cols}")));
        }
        let mut data = Vec::with_capacity(rows * (cols - 1));
        for (r, &label) in labels.iter().enumerate() {
            let row = &xt.data()[r * cols..(r + 1) * cols];
            data.extend(
                row.iter()
                    .enumerate()
                    .filter(|&(j, _)| j != label)
                    .map(|(_, &v)| v),
            );
        }
        let value = Tensor::new(vec![rows, cols - 1], data)?;
        Ok(self.push(
            value,
            Op::DropColumns {
                x,
                labels: labels.to_vec(),
            },
            &[x],
        ))
    }

    /// Scales each row of `[B×D]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        expect_ndim(xt, 2, "l2_normalize_rows")?;
        let cols = xt.shape()[1].max(1);
        let mut norms = Vec::with_capacity(xt.shape()[0]);
        let mut data = Vec::with_capacity(xt.len());
        for row in xt.data().chunks(cols) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            data.extend(row.iter().map(|v| v / norm));
            norms.push(norm);
        }
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Interleaves `K` tensors of shape `[B×D]` into `[B×K×D]`.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::contract("stack_rows of zero tensors"))?;
        let shape = self.value(*first).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(format!("stack_rows expects matrices, got {shape:?}")));
        }
        for v in xs {
            if self.value(*v).shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "stack_rows: {:?} differs from {shape:?}",
                    self.value(*v).shape()
                )));
            }
        }
        let (rows, cols, k) = (shape[0], shape[1], xs.len());
        let mut data = Vec::with_capacity(rows * k * cols);
        for r in 0..rows {
            for v in xs {
                data.extend_from_slice(&self.value(*v).data()[r * cols..(r + 1) * cols]);
            }
        }
        let value = Tensor::new(vec![rows, k, cols], data)?;
        Ok(self.push(value, Op::StackRows { xs: xs.to_vec() }, xs))
    }

    /// `G[b] = X[b]·X[b]ᵀ` for `X: [B×K×D]`.
    pub fn batched_gram(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        expect_ndim(xt, 3, "batched_gram")?;
        let (batch, k, d) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let mut out = vec![0.0; batch * k * k];
        for b in 0..batch {
            let xb = &xt.data()[b * k * d..(b + 1) * k * d];
            for i in 0..k {
                for j in 0..k {
                    let mut acc = 0.0;
                    for t in 0..d {
                        acc += xb[i * d + t] * xb[j * d + t];
                    }
                    out[b * k * k + i * k + j] = acc;
                }
            }
        }
        let value = Tensor::new(vec![batch, k, k], out)?;
        Ok(self.push(value, Op::BatchedGram { x }, &[x]))
    }

    /// `ln max(det A[b], LOGDET_CLAMP)` for positive semi-definite
    /// `A: [B×K×K]`. The gradient is zero wherever the clamp is active.
    pub fn batched_logdet(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        expect_ndim(xt, 3, "batched_logdet")?;
        let (batch, k) = (xt.shape()[0], xt.shape()[1]);
        if xt.shape()[2] != k {
            return Err(Error::dim(format!(
                "batched_logdet expects square matrices, got {:?}",
                xt.shape()
            )));
        }
        let mut out = Vec::with_capacity(batch);
        let mut inverses = Vec::with_capacity(batch);
        for b in 0..batch {
            let a = &xt.data()[b * k * k..(b + 1) * k * k];
            let det = linalg::psd_determinant(a, k);
            if det > LOGDET_CLAMP {
                out.push(det.ln());
                inverses.push(linalg::inverse(a, k));
            } else {
                out.push(LOGDET_CLAMP.ln());
                inverses.push(None);
            }
        }
        let value = Tensor::new(vec![batch], out)?;
        Ok(self.push(value, Op::BatchedLogDet { x, inverses }, &[x]))
    }

    /// `ln max(det(X[b]·X[b]ᵀ), LOGDET_CLAMP)` for `X: [B×K×D]`, computed
    /// from a row LQ factorization of `X[b]` so the Gram matrix is never
    /// formed. The gradient is zero wherever the clamp is active.
    pub fn batched_gram_logdet(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        expect_ndim(xt, 3, "batched_gram_logdet")?;
        let (batch, k, d) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        if k > d {
            return Err(Error::dim(format!(
                "batched_gram_logdet needs K ≤ D for a nonsingular Gram, got {:?}",
                xt.shape()
            )));
        }
        let floor = LOGDET_CLAMP.ln();
        let mut out = Vec::with_capacity(batch);
        let mut grads = Vec::with_capacity(batch);
        for b in 0..batch {
            let f = linalg::row_lq(&xt.data()[b * k * d..(b + 1) * k * d], k, d);
            let logdet = f.gram_logdet(k);
            if logdet > floor {
                out.push(logdet);
                grads.push(Some(f.gram_logdet_grad(k, d)));
            } else {
                out.push(floor);
                grads.push(None);
            }
        }
        let value = Tensor::new(vec![batch], out)?;
        Ok(self.push(value, Op::BatchedGramLogDet { x, grads }, &[x]))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::contract("concat_rows of zero tensors"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for v in xs {
            let t = self.value(*v);
            if t.ndim() == 0 || t.shape()[1..] != tail[..] {
                return Err(Error::dim(format!(
                    "concat_rows: {:?} incompatible with trailing {tail:?}",
                    t.shape()
                )));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::ConcatRows { xs: xs.to_vec() }, xs))
    }

    /// Gathers rows along the leading axis.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let value = self.value(x).select_rows(rows)?;
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for t in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gd[i * n + j] * bt.data()[t * n + j];
                            }
                            da[i * k + t] = acc;
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for t in 0..k {
                            let av = at.data()[i * k + t];
                            for j in 0..n {
                                db[t * n + j] += av * gd[i * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (batch, fan_in) = (xt.shape()[0], xt.shape()[1]);
                let fan_out = wt.shape()[0];
                if self.wants(*x) {
                    let mut dx = vec![0.0; batch * fan_in];
                    for r in 0..batch {
                        let row = &mut dx[r * fan_in..(r + 1) * fan_in];
                        for o in 0..fan_out {
                            let go = gd[r * fan_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &wt.data()[o * fan_in..(o + 1) * fan_in];
                            for (d, wv) in row.iter_mut().zip(wr) {
                                *d += go * wv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![batch, fan_in], dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; fan_out * fan_in];
                    for r in 0..batch {
                        let xr = &xt.data()[r * fan_in..(r + 1) * fan_in];
                        for o in 0..fan_out {
                            let go = gd[r * fan_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            for (d, xv) in dw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(xr) {
                                *d += go * xv;
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(vec![fan_out, fan_in], dw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; fan_out];
                        for r in 0..batch {
                            for o in 0..fan_out {
                                db[o] += gd[r * fan_out + o];
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![fan_out], db)?);
                    }
                }
            }
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
            } => {
                let (xt, kt) = (self.value(*x), self.value(*k));
                let (dx, dk) = conv2d_backward(xt, kt, g, *stride, *padding, self.wants(*x), self.wants(*k))?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *k, dk);
                }
            }
            Op::AddChannelBias { x, b } => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let (n, c, h, w) = dims4(g);
                    let plane = h * w;
                    let mut db = vec![0.0; c];
                    for s in 0..n {
                        for (ch, d) in db.iter_mut().enumerate() {
                            let base = (s * c + ch) * plane;
                            *d += gd[base..base + plane].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![c], db)?);
                }
            }
            Op::Relu { x } => {
                let xt = self.value(*x);
                let data = xt
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), data)?);
            }
            Op::MaxPool2d { x, argmax } => {
                let xt = self.value(*x);
                let mut dx = vec![0.0; xt.len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] += gv;
                }
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape)?);
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let cols = y.shape()[1].max(1);
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(cols).zip(gd.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let batch = labels.len();
                let classes = probs.shape()[1];
                let scale = gd[0] / batch as f64;
                let mut dz: Vec<f64> = probs.data().iter().map(|p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    dz[r * classes + label] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(vec![batch, classes], dz)?);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(bt.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(at.shape().to_vec(), d)?);
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(at.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(bt.shape().to_vec(), d)?);
                }
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::SumAll { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, gd[0]));
            }
            Op::MeanAll { x } => {
                let t = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(t.shape(), gd[0] / t.len() as f64));
            }
            Op::RowEntropy { x } => {
                let xt = self.value(*x);
                let cols = xt.shape()[1].max(1);
                let mut dx = Vec::with_capacity(xt.len());
                for (row, &gv) in xt.data().chunks(cols).zip(gd) {
                    dx.extend(
                        row.iter()
                            .map(|&p| if p > 0.0 { -gv * (p.ln() + 1.0) } else { 0.0 }),
                    );
                }
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
            }
            Op::DropColumns { x, labels } => {
                let xt = self.value(*x);
                let cols = xt.shape()[1];
                let mut dx = vec![0.0; xt.len()];
                for (r, &label) in labels.iter().enumerate() {
                    let mut src = r * (cols - 1);
                    for j in 0..cols {
                        if j != label {
                            dx[r * cols + j] = gd[src];
                            src += 1;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let cols = y.shape()[1].max(1);
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), &norm) in y.data().chunks(cols).zip(gd.chunks(cols)).zip(norms) {
                    if norm > NORM_FLOOR {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        dx.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / norm));
                    } else {
                        dx.extend(gr.iter().map(|gv| gv / norm));
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::StackRows { xs } => {
                let (rows, k, cols) = (node.value.shape()[0], xs.len(), node.value.shape()[2]);
                for (slot, v) in xs.iter().enumerate() {
                    if !self.wants(*v) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let base = (r * k + slot) * cols;
                        d.extend_from_slice(&gd[base..base + cols]);
                    }
                    self.accumulate(grads, *v, Tensor::new(vec![rows, cols], d)?);
                }
            }
            Op::BatchedGram { x } => {
                let xt = self.value(*x);
                let (batch, k, d) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
                let mut dx = vec![0.0; xt.len()];
                for b in 0..batch {
                    let xb = &xt.data()[b * k * d..(b + 1) * k * d];
                    let gb = &gd[b * k * k..(b + 1) * k * k];
                    for i in 0..k {
                        for j in 0..k {
                            let coeff = gb[i * k + j] + gb[j * k + i];
                            if coeff == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                dx[b * k * d + i * d + t] += coeff * xb[j * d + t];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
            }
            Op::BatchedLogDet { x, inverses } => {
                let xt = self.value(*x);
                let k = xt.shape()[1];
                let mut dx = vec![0.0; xt.len()];
                for (b, inv) in inverses.iter().enumerate() {
                    let Some(inv) = inv else { continue };
                    for i in 0..k {
                        for j in 0..k {
                            dx[b * k * k + i * k + j] = gd[b] * inv[j * k + i];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
            }
            Op::BatchedGramLogDet { x, grads: local } => {
                let xt = self.value(*x);
                let per = xt.len() / local.len().max(1);
                let mut dx = vec![0.0; xt.len()];
                for (b, g) in local.iter().enumerate() {
                    let Some(g) = g else { continue };
                    for (o, v) in dx[b * per..(b + 1) * per].iter_mut().zip(g) {
                        *o = gd[b] * v;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0;
                for v in xs {
                    let t = self.value(*v);
                    let n = t.len();
                    if self.wants(*v) {
                        let d = gd[offset..offset + n].to_vec();
                        self.accumulate(grads, *v, Tensor::new(t.shape().to_vec(), d)?);
                    }
                    offset += n;
                }
            }
            Op::SelectRows { x, rows } => {
                let xt = self.value(*x);
                let stride = xt.row_len();
                let mut dx = vec![0.0; xt.len()];
                for (dst, &src) in rows.iter().enumerate() {
                    for t in 0..stride {
                        dx[src * stride + t] += gd[dst * stride + t];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
            }
        }
        Ok(())
    }
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let cols = t.shape()[1].max(1);
    let mut data = Vec::with_capacity(t.len());
    for row in t.data().chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut sum = 0.0;
        for v in row {
            let e = (v - max).exp();
            sum += e;
            data.push(e);
        }
        for v in &mut data[start..] {
            *v /= sum;
        }
    }
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

fn conv2d_forward(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    expect_ndim(x, 4, "conv2d input")?;
    expect_ndim(k, 4, "conv2d kernel")?;
    let (n, c, h, w) = dims4(x);
    let (o, kc, kh, kw) = dims4(k);
    if kc != c {
        return Err(Error::dim(format!(
            "conv2d: input {:?} has {c} channels, kernel {:?} expects {kc}",
            x.shape(),
            k.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::contract("conv2d stride must be positive"));
    }
    let (oh, ow) = match (
        window_out(h, kh, stride, padding),
        window_out(w, kw, stride, padding),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * padding,
                w + 2 * padding
            )))
        }
    };
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for u in 0..kh {
                            let Some(hi) = (i * stride + u).checked_sub(padding).filter(|&v| v < h) else {
                                continue;
                            };
                            for v in 0..kw {
                                let Some(wi) = (j * stride + v).checked_sub(padding).filter(|&q| q < w)
                                else {
                                    continue;
                                };
                                acc += xd[((s * c + ch) * h + hi) * w + wi]
                                    * kd[((oc * c + ch) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[((s * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out)
}

fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    g: &Tensor,
    stride: usize,
    padding: usize,
    want_x: bool,
    want_k: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let (n, c, h, w) = dims4(x);
    let (o, _, kh, kw) = dims4(k);
    let (_, _, oh, ow) = dims4(g);
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    let mut dx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
    let mut dk = if want_k { vec![0.0; k.len()] } else { Vec::new() };
    for s in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let gv = gd[((s * o + oc) * oh + i) * ow + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for ch in 0..c {
                        for u in 0..kh {
                            let Some(hi) = (i * stride + u).checked_sub(padding).filter(|&v| v < h) else {
                                continue;
                            };
                            for v in 0..kw {
                                let Some(wi) = (j * stride + v).checked_sub(padding).filter(|&q| q < w)
                                else {
                                    continue;
                                };
                                let xi = ((s * c + ch) * h + hi) * w + wi;
                                let ki = ((oc * c + ch) * kh + u) * kw + v;
                                if want_x {
                                    dx[xi] += gv * kd[ki];
                                }
                                if want_k {
                                    dk[ki] += gv * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = want_x.then(|| Tensor::new(x.shape().to_vec(), dx)).transpose()?;
    let dk = want_k.then(|| Tensor::new(k.shape().to_vec(), dk)).transpose()?;
    Ok((dx, dk))
}
