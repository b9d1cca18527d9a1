use super::{gemm, gemm_view, numel, Tensor, View};
use crate::error::{Error, Result};

/// Op kinds reachable through [`forward_op`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    BroadcastMulVector,
    Concat { axis: usize },
    Mean { axis: usize },
    Sum { axis: usize },
    Softmax,
    LogSoftmax,
    LayerNorm { eps: f64 },
    Gelu,
    Scale(f64),
    Transpose,
    Slice { axis: usize, start: usize, end: usize },
    Log,
    Exp,
    Sqrt,
    Abs,
    Expand(usize),
    Reshape(Vec<usize>),
    /// `x·W + b` with `x` of rank 2 or 3.
    Linear,
    /// Scaled dot-product attention over `heads` column groups of `q, k, v`.
    Attention { heads: usize },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "elementwise_mul",
            OpKind::Div => "div",
            OpKind::BroadcastMulVector => "broadcast_mul_vector",
            OpKind::Concat { .. } => "concat",
            OpKind::Mean { .. } => "mean",
            OpKind::Sum { .. } => "sum",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Scale(_) => "scale",
            OpKind::Transpose => "transpose",
            OpKind::Slice { .. } => "slice",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Sqrt => "sqrt",
            OpKind::Abs => "abs",
            OpKind::Expand(_) => "expand",
            OpKind::Reshape(_) => "reshape",
            OpKind::Linear => "linear",
            OpKind::Attention { .. } => "attention",
        }
    }
}

/// Apply `kind` to `inputs`, recording a tape node when any input requires grad.
pub fn forward_op(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let arity = |n: usize| -> Result<()> {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "{} takes {n} input(s), got {}",
                kind.name(),
                inputs.len()
            )))
        }
    };
    match kind {
        OpKind::Linear => {
            arity(3)?;
            inputs[0].linear(inputs[1], inputs[2])
        }
        OpKind::Attention { heads } => {
            arity(3)?;
            Tensor::attention(inputs[0], inputs[1], inputs[2], *heads)
        }
        OpKind::Concat { axis } => {
            let owned: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
            Tensor::concat(&owned, *axis)
        }
        OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::BroadcastMulVector => {
            arity(2)?;
            let (a, b) = (inputs[0], inputs[1]);
            match kind {
                OpKind::MatMul => a.matmul(b),
                OpKind::Add => a.add(b),
                OpKind::Sub => a.sub(b),
                OpKind::Mul => a.mul(b),
                OpKind::Div => a.div(b),
                _ => a.broadcast_mul_vector(b),
            }
        }
        _ => {
            arity(1)?;
            let x = inputs[0];
            match kind {
                OpKind::Mean { axis } => x.mean(*axis),
                OpKind::Sum { axis } => x.sum(*axis),
                OpKind::Softmax => Ok(x.softmax()),
                OpKind::LogSoftmax => Ok(x.log_softmax()),
                OpKind::LayerNorm { eps } => Ok(x.layer_norm(*eps)),
                OpKind::Gelu => Ok(x.gelu()),
                OpKind::Scale(c) => Ok(x.scale(*c)),
                OpKind::Transpose => x.transpose(),
                OpKind::Slice { axis, start, end } => x.slice(*axis, *start, *end),
                OpKind::Log => Ok(x.log()),
                OpKind::Exp => Ok(x.exp()),
                OpKind::Sqrt => Ok(x.sqrt()),
                OpKind::Abs => Ok(x.abs()),
                OpKind::Expand(n) => x.expand(*n),
                OpKind::Reshape(shape) => x.reshape(shape),
                _ => unreachable!("binary ops handled above"),
            }
        }
    }
}

/// Values a backward rule needs beyond its inputs and output.
pub(crate) enum Saved {
    MatMul { batch: usize, n: usize, k: usize, m: usize, shared_rhs: bool },
    Add { repeat: usize },
    Sub { repeat: usize },
    Mul,
    Div,
    Concat { axis: usize, sizes: Vec<usize> },
    Slice { axis: usize, start: usize, len: usize },
    Mean { axis: usize, len: usize },
    Sum { axis: usize, len: usize },
    Softmax,
    LogSoftmax,
    LayerNorm { inv_std: Vec<f64> },
    Gelu { tanh: Vec<f64> },
    Scale(f64),
    Transpose,
    Log,
    Exp,
    Sqrt,
    Abs,
    Expand,
    Reshape,
    Linear { rows: usize, k: usize, m: usize },
    Attention { batch: usize, seq: usize, dim: usize, heads: usize, probs: Vec<f64> },
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    (numel(shape) / cols, cols)
}

/// Number of times `b` repeats when broadcast against `a`: `b.shape` must
/// equal `a.shape` or be a proper suffix of it.
fn suffix_repeat(op: &'static str, a: &Tensor, b: &Tensor) -> Result<usize> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return Ok(1);
    }
    if sb.len() < sa.len() && sa.ends_with(sb) {
        return Ok(a.len() / b.len());
    }
    Err(Error::dim(op, format!("shapes {sa:?} and {sb:?} do not broadcast")))
}

fn reduce_repeat(g: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for chunk in g.chunks_exact(len) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; libm's version dominates GELU-heavy graphs.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

impl Tensor {
    /// `[n,k]·[k,m]`, `[b,n,k]·[k,m]` (shared right operand) or `[b,n,k]·[b,k,m]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        let bad = || Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
        let (batch, n, k, m, shared_rhs) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[1], true),
            (3, 2) => (sa[0], sa[1], sa[2], sb[1], true),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[2], false),
            _ => return Err(bad()),
        };
        let k_rhs = if shared_rhs { sb[0] } else { sb[1] };
        if k != k_rhs {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * n * m];
        if shared_rhs {
            gemm(batch * n, k, m, self.data(), false, rhs.data(), false, &mut out, false);
        } else {
            for b in 0..batch {
                gemm(
                    n,
                    k,
                    m,
                    &self.data()[b * n * k..(b + 1) * n * k],
                    false,
                    &rhs.data()[b * k * m..(b + 1) * k * m],
                    false,
                    &mut out[b * n * m..(b + 1) * n * m],
                    false,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![n, m] } else { vec![batch, n, m] };
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), rhs.clone()],
            Saved::MatMul { batch, n, k, m, shared_rhs },
        ))
    }

    fn zip_broadcast(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<f64>, usize)> {
        let repeat = suffix_repeat(op, self, rhs)?;
        let b = rhs.data();
        let out = self
            .data()
            .chunks_exact(b.len())
            .flat_map(|chunk| chunk.iter().zip(b).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok((out, repeat))
    }

    /// Elementwise sum; `rhs` may be a suffix-shaped operand repeated over leading axes.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let (out, repeat) = self.zip_broadcast(rhs, "add", |x, y| x + y)?;
        Ok(Tensor::from_op(out, self.shape().to_vec(), vec![self.clone(), rhs.clone()], Saved::Add { repeat }))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let (out, repeat) = self.zip_broadcast(rhs, "sub", |x, y| x - y)?;
        Ok(Tensor::from_op(out, self.shape().to_vec(), vec![self.clone(), rhs.clone()], Saved::Sub { repeat }))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (out, _) = self.zip_broadcast(rhs, "elementwise_mul", |x, y| x * y)?;
        Ok(Tensor::from_op(out, self.shape().to_vec(), vec![self.clone(), rhs.clone()], Saved::Mul))
    }

    /// Scales every row (last axis) of `self` elementwise by the vector `v`.
    pub fn broadcast_mul_vector(&self, v: &Tensor) -> Result<Tensor> {
        if v.rank() != 1 || self.shape().last() != Some(&v.len()) {
            return Err(Error::dim(
                "broadcast_mul_vector",
                format!("cannot scale rows of {:?} by vector {:?}", self.shape(), v.shape()),
            ));
        }
        self.mul(v)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(Error::dim("div", format!("shapes {:?} and {:?} differ", self.shape(), rhs.shape())));
        }
        let out = self.data().iter().zip(rhs.data()).map(|(x, y)| x / y).collect();
        Ok(Tensor::from_op(out, self.shape().to_vec(), vec![self.clone(), rhs.clone()], Saved::Div))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Index {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(
                    "concat",
                    format!("shape {:?} incompatible with {:?} along axis {axis}", p.shape(), first.shape()),
                ));
            }
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&sizes) {
                out.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(out, shape, parts.to_vec(), Saved::Concat { axis, sizes }))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.rank() || start >= end || end > self.shape()[axis] {
            return Err(Error::Index {
                op: "slice",
                detail: format!("range {start}..{end} on axis {axis} of {:?}", self.shape()),
            });
        }
        let (outer, axis_len, inner) = split_axis(self.shape(), axis);
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * axis_len * inner;
            out.extend_from_slice(&self.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(out, shape, vec![self.clone()], Saved::Slice { axis, start, len }))
    }

    fn reduce_axis(&self, axis: usize, op: &'static str) -> Result<(Vec<f64>, Vec<usize>, usize)> {
        if axis >= self.rank() {
            return Err(Error::Index {
                op,
                detail: format!("axis {axis} out of range for shape {:?}", self.shape()),
            });
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &self.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok((out, shape, len))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&self, axis: usize) -> Result<Tensor> {
        let (out, shape, len) = self.reduce_axis(axis, "sum")?;
        Ok(Tensor::from_op(out, shape, vec![self.clone()], Saved::Sum { axis, len }))
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&self, axis: usize) -> Result<Tensor> {
        let (mut out, shape, len) = self.reduce_axis(axis, "mean")?;
        out.iter_mut().for_each(|v| *v /= len as f64);
        Ok(Tensor::from_op(out, shape, vec![self.clone()], Saved::Mean { axis, len }))
    }

    pub fn sum_all(&self) -> Tensor {
        self.reshape(&[self.len()]).and_then(|t| t.sum(0)).expect("flat sum is always valid")
    }

    pub fn mean_all(&self) -> Tensor {
        self.reshape(&[self.len()]).and_then(|t| t.mean(0)).expect("flat mean is always valid")
    }

    pub fn softmax(&self) -> Tensor {
        let (rows, cols) = last_axis(self.shape());
        let mut out = vec![0.0; self.len()];
        for r in 0..rows {
            let x = &self.data()[r * cols..(r + 1) * cols];
            let y = &mut out[r * cols..(r + 1) * cols];
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (yi, xi) in y.iter_mut().zip(x) {
                *yi = (xi - max).exp();
                total += *yi;
            }
            y.iter_mut().for_each(|v| *v /= total);
        }
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], Saved::Softmax)
    }

    pub fn log_softmax(&self) -> Tensor {
        let (rows, cols) = last_axis(self.shape());
        let mut out = vec![0.0; self.len()];
        for r in 0..rows {
            let x = &self.data()[r * cols..(r + 1) * cols];
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (yi, xi) in out[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *yi = xi - lse;
            }
        }
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], Saved::LogSoftmax)
    }

    /// Normalize each row (last axis) to zero mean and unit variance; no affine terms.
    pub fn layer_norm(&self, eps: f64) -> Tensor {
        let (rows, cols) = last_axis(self.shape());
        let mut out = vec![0.0; self.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = &self.data()[r * cols..(r + 1) * cols];
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[r] = s;
            for (yi, xi) in out[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *yi = (xi - mean) * s;
            }
        }
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], Saved::LayerNorm { inv_std })
    }

    /// Affine map `self·w + b` over the last axis; `self` is `[n,k]` or `[batch,n,k]`.
    pub fn linear(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let k = *self.shape().last().unwrap_or(&0);
        if !(2..=3).contains(&self.rank()) || w.rank() != 2 || w.shape()[0] != k || b.shape() != [w.shape()[1]] {
            return Err(Error::dim(
                "linear",
                format!("cannot map {:?} through {:?} + {:?}", self.shape(), w.shape(), b.shape()),
            ));
        }
        let m = w.shape()[1];
        let rows = self.len() / k;
        let mut out: Vec<f64> = b.data().iter().copied().cycle().take(rows * m).collect();
        gemm(rows, k, m, self.data(), false, w.data(), false, &mut out, true);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("rank checked") = m;
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), w.clone(), b.clone()],
            Saved::Linear { rows, k, m },
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q, k, v` are `[batch, seq, d]`; head `h` uses columns
    /// `h·d/heads .. (h+1)·d/heads` and the head outputs are laid side by side.
    pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
        let shape = q.shape().to_vec();
        if shape.len() != 3 || k.shape() != shape.as_slice() || v.shape() != shape.as_slice() || heads == 0 || shape[2] % heads != 0 {
            return Err(Error::dim(
                "attention",
                format!("q {:?}, k {:?}, v {:?} with {heads} heads", q.shape(), k.shape(), v.shape()),
            ));
        }
        let (batch, seq, dim) = (shape[0], shape[1], shape[2]);
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * dim];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * dim + h * dh;
                let p_off = (b * heads + h) * seq * seq;
                let p = &mut probs[p_off..p_off + seq * seq];
                gemm_view(
                    seq,
                    dh,
                    seq,
                    q.data(),
                    View::rows(base, dim),
                    k.data(),
                    View::transposed(base, dim),
                    p,
                    View::rows(0, seq),
                    false,
                );
                for row in p.chunks_exact_mut(seq) {
                    let max = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x * scale));
                    let mut sum = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x * scale - max).exp();
                        sum += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= sum);
                }
                gemm_view(
                    seq,
                    seq,
                    dh,
                    &probs[p_off..p_off + seq * seq],
                    View::rows(0, seq),
                    v.data(),
                    View::rows(base, dim),
                    &mut out,
                    View::rows(base, dim),
                    false,
                );
            }
        }
        Ok(Tensor::from_op(
            out,
            shape,
            vec![q.clone(), k.clone(), v.clone()],
            Saved::Attention { batch, seq, dim, heads, probs },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor {
        let tanh: Vec<f64> = self.data().iter().map(|&x| fast_tanh(GELU_C * (x + GELU_A * x * x * x))).collect();
        let out = self.data().iter().zip(&tanh).map(|(&x, t)| 0.5 * x * (1.0 + t)).collect();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], Saved::Gelu { tanh })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], Saved::Scale(c))
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::dim("transpose", format!("needs rank >= 2, got {:?}", self.shape())));
        }
        let (r, c) = (self.shape()[rank - 2], self.shape()[rank - 1]);
        let batch = self.len() / (r * c);
        let mut out = vec![0.0; self.len()];
        for b in 0..batch {
            let src = &self.data()[b * r * c..(b + 1) * r * c];
            let dst = &mut out[b * r * c..(b + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.swap(rank - 2, rank - 1);
        Ok(Tensor::from_op(out, shape, vec![self.clone()], Saved::Transpose))
    }

    fn unary(&self, saved: Saved, f: impl Fn(f64) -> f64) -> Tensor {
        let out = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], saved)
    }

    pub fn log(&self) -> Tensor {
        self.unary(Saved::Log, f64::ln)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Saved::Exp, f64::exp)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(Saved::Sqrt, f64::sqrt)
    }

    /// Absolute value; the derivative at 0 is taken as 0.
    pub fn abs(&self) -> Tensor {
        self.unary(Saved::Abs, f64::abs)
    }

    /// Repeat the whole tensor `n` times along a new leading axis.
    pub fn expand(&self, n: usize) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::dim("expand", "zero repeat count"));
        }
        let mut out = Vec::with_capacity(n * self.len());
        for _ in 0..n {
            out.extend_from_slice(self.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape());
        Ok(Tensor::from_op(out, shape, vec![self.clone()], Saved::Expand))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dim("reshape", format!("cannot view {:?} as {shape:?}", self.shape())));
        }
        Ok(Tensor::from_op(self.data().to_vec(), shape.to_vec(), vec![self.clone()], Saved::Reshape))
    }
}

impl Saved {
    /// Gradients for each input given the output node and its upstream gradient.
    pub(crate) fn backward(&self, out: &Tensor, inputs: &[Tensor], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let need = |i: usize| inputs[i].requires_grad();
        match self {
            Saved::MatMul { batch, n, k, m, shared_rhs } => {
                let (batch, n, k, m) = (*batch, *n, *k, *m);
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let mut da = None;
                let mut db = None;
                if *shared_rhs {
                    if need(0) {
                        let mut d = vec![0.0; batch * n * k];
                        gemm(batch * n, m, k, g, false, b, true, &mut d, false);
                        da = Some(d);
                    }
                    if need(1) {
                        let mut d = vec![0.0; k * m];
                        gemm(k, batch * n, m, a, true, g, false, &mut d, false);
                        db = Some(d);
                    }
                } else {
                    if need(0) {
                        let mut d = vec![0.0; batch * n * k];
                        for i in 0..batch {
                            gemm(
                                n,
                                m,
                                k,
                                &g[i * n * m..(i + 1) * n * m],
                                false,
                                &b[i * k * m..(i + 1) * k * m],
                                true,
                                &mut d[i * n * k..(i + 1) * n * k],
                                false,
                            );
                        }
                        da = Some(d);
                    }
                    if need(1) {
                        let mut d = vec![0.0; batch * k * m];
                        for i in 0..batch {
                            gemm(
                                k,
                                n,
                                m,
                                &a[i * n * k..(i + 1) * n * k],
                                true,
                                &g[i * n * m..(i + 1) * n * m],
                                false,
                                &mut d[i * k * m..(i + 1) * k * m],
                                false,
                            );
                        }
                        db = Some(d);
                    }
                }
                vec![da, db]
            }
            Saved::Add { repeat } | Saved::Sub { repeat } => {
                let sign = if matches!(self, Saved::Sub { .. }) { -1.0 } else { 1.0 };
                let da = need(0).then(|| g.to_vec());
                let db = need(1).then(|| {
                    let mut d = if *repeat == 1 { g.to_vec() } else { reduce_repeat(g, inputs[1].len()) };
                    if sign < 0.0 {
                        d.iter_mut().for_each(|v| *v = -*v);
                    }
                    d
                });
                vec![da, db]
            }
            Saved::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let da = need(0).then(|| {
                    g.chunks_exact(b.len())
                        .flat_map(|gc| gc.iter().zip(b).map(|(gi, bi)| gi * bi))
                        .collect()
                });
                let db = need(1).then(|| {
                    let prod: Vec<f64> = g.iter().zip(a).map(|(gi, ai)| gi * ai).collect();
                    reduce_repeat(&prod, b.len())
                });
                vec![da, db]
            }
            Saved::Div => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let da = need(0).then(|| g.iter().zip(b).map(|(gi, bi)| gi / bi).collect());
                let db = need(1).then(|| {
                    g.iter()
                        .zip(a.iter().zip(b))
                        .map(|(gi, (ai, bi))| -gi * ai / (bi * bi))
                        .collect()
                });
                vec![da, db]
            }
            Saved::Concat { axis, sizes } => {
                let total: usize = sizes.iter().sum();
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                let mut grads = Vec::with_capacity(sizes.len());
                for (idx, &len) in sizes.iter().enumerate() {
                    if need(idx) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        grads.push(Some(d));
                    } else {
                        grads.push(None);
                    }
                    offset += len;
                }
                grads
            }
            Saved::Slice { axis, start, len } => {
                let (outer, axis_len, inner) = split_axis(inputs[0].shape(), *axis);
                let mut d = vec![0.0; inputs[0].len()];
                for o in 0..outer {
                    let dst = (o * axis_len + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(d)]
            }
            Saved::Sum { axis, len } | Saved::Mean { axis, len } => {
                let c = if matches!(self, Saved::Mean { .. }) { 1.0 / *len as f64 } else { 1.0 };
                let (outer, _, inner) = split_axis(inputs[0].shape(), *axis);
                let mut d = vec![0.0; inputs[0].len()];
                for o in 0..outer {
                    for a in 0..*len {
                        let dst = &mut d[(o * len + a) * inner..(o * len + a + 1) * inner];
                        dst.iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                            .for_each(|(x, gv)| *x = gv * c);
                    }
                }
                vec![Some(d)]
            }
            Saved::Softmax => {
                let (rows, cols) = last_axis(out.shape());
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                    for i in span {
                        d[i] = y[i] * (g[i] - dot);
                    }
                }
                vec![Some(d)]
            }
            Saved::LogSoftmax => {
                let (rows, cols) = last_axis(out.shape());
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let gsum: f64 = g[span.clone()].iter().sum();
                    for i in span {
                        d[i] = g[i] - y[i].exp() * gsum;
                    }
                }
                vec![Some(d)]
            }
            Saved::LayerNorm { inv_std } => {
                let (rows, cols) = last_axis(out.shape());
                let xhat = out.data();
                let nf = cols as f64;
                let mut d = vec![0.0; xhat.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let gsum: f64 = g[span.clone()].iter().sum();
                    let gx: f64 = g[span.clone()].iter().zip(&xhat[span.clone()]).map(|(a, b)| a * b).sum();
                    for i in span {
                        d[i] = inv_std[r] / nf * (nf * g[i] - gsum - xhat[i] * gx);
                    }
                }
                vec![Some(d)]
            }
            Saved::Linear { rows, k, m } => {
                let (rows, k, m) = (*rows, *k, *m);
                let (x, w) = (inputs[0].data(), inputs[1].data());
                let dx = need(0).then(|| {
                    let mut d = vec![0.0; rows * k];
                    gemm(rows, m, k, g, false, w, true, &mut d, false);
                    d
                });
                let dw = need(1).then(|| {
                    let mut d = vec![0.0; k * m];
                    gemm(k, rows, m, x, true, g, false, &mut d, false);
                    d
                });
                let db = need(2).then(|| reduce_repeat(g, m));
                vec![dx, dw, db]
            }
            Saved::Attention { batch, seq, dim, heads, probs } => {
                let (batch, seq, dim, heads) = (*batch, *seq, *dim, *heads);
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
                let n = batch * seq * dim;
                let (mut dq, mut dk, mut dv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                let mut ds = vec![0.0; seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = b * seq * dim + h * dh;
                        let p_off = (b * heads + h) * seq * seq;
                        let p = &probs[p_off..p_off + seq * seq];
                        // dP = G·Vᵀ
                        gemm_view(seq, dh, seq, g, View::rows(base, dim), v, View::transposed(base, dim), &mut ds, View::rows(0, seq), false);
                        // dV = Pᵀ·G
                        gemm_view(seq, seq, dh, p, View::transposed(0, seq), g, View::rows(base, dim), &mut dv, View::rows(base, dim), false);
                        for (drow, prow) in ds.chunks_exact_mut(seq).zip(p.chunks_exact(seq)) {
                            let dot: f64 = drow.iter().zip(prow).map(|(d, p)| d * p).sum();
                            drow.iter_mut().zip(prow).for_each(|(d, p)| *d = scale * p * (*d - dot));
                        }
                        // dQ = dS·K, dK = dSᵀ·Q
                        gemm_view(seq, seq, dh, &ds, View::rows(0, seq), k, View::rows(base, dim), &mut dq, View::rows(base, dim), false);
                        gemm_view(seq, seq, dh, &ds, View::transposed(0, seq), q, View::rows(base, dim), &mut dk, View::rows(base, dim), false);
                    }
                }
                vec![need(0).then_some(dq), need(1).then_some(dk), need(2).then_some(dv)]
            }
            Saved::Gelu { tanh } => {
                let d = inputs[0]
                    .data()
                    .iter()
                    .zip(g)
                    .zip(tanh)
                    .map(|((&x, gi), &t)| {
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gi * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                vec![Some(d)]
            }
            Saved::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
            Saved::Transpose => {
                // the output is [.., c, r]; transposing its gradient back gives [.., r, c]
                let rank = out.rank();
                let (c, r) = (out.shape()[rank - 2], out.shape()[rank - 1]);
                let batch = g.len() / (r * c);
                let mut d = vec![0.0; g.len()];
                for b in 0..batch {
                    let src = &g[b * r * c..(b + 1) * r * c];
                    let dst = &mut d[b * r * c..(b + 1) * r * c];
                    for i in 0..c {
                        for j in 0..r {
                            dst[j * c + i] = src[i * r + j];
                        }
                    }
                }
                vec![Some(d)]
            }
            Saved::Log => vec![Some(g.iter().zip(inputs[0].data()).map(|(gi, x)| gi / x).collect())],
            Saved::Exp => vec![Some(g.iter().zip(out.data()).map(|(gi, y)| gi * y).collect())],
            Saved::Sqrt => vec![Some(g.iter().zip(out.data()).map(|(gi, y)| gi * 0.5 / y).collect())],
            Saved::Abs => vec![Some(
                g.iter()
                    .zip(inputs[0].data())
                    .map(|(gi, &x)| if x > 0.0 { *gi } else if x < 0.0 { -gi } else { 0.0 })
                    .collect(),
            )],
            Saved::Expand => vec![Some(reduce_repeat(g, inputs[0].len()))],
            Saved::Reshape => vec![Some(g.to_vec())],
        }
    }
}
