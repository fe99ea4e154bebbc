use std::sync::Arc;

use rayon::prelude::*;

use super::kernels::{self, ConvGeom};
use super::{broadcast_shape, broadcast_strides, Scalar, Tensor};
use crate::error::{invalid_shape, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding policy for [`Tape::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on each side; requires odd kernels.
    Same,
    Valid,
}

/// Pointwise operations accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Gelu,
    Relu,
    Scale(f64),
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    MeanReduce {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    PixelShuffle(Var, usize),
    PixelUnshuffle(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Roll2d(Var, isize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        table: Var,
        index: Arc<[usize]>,
    },
    Sum(Var),
    Mean(Var),
    L1(Var, Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::L1(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::PixelShuffle(a, _)
            | Op::PixelUnshuffle(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Roll2d(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::MeanReduce { x, .. } | Op::Narrow { x, .. } => vec![*x],
            Op::GatherRows { table, .. } => vec![*table],
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Tensor<T>>,
}

/// Records a forward computation so gradients can be replayed in reverse.
///
/// Nodes are appended in execution order, so every operation's inputs precede
/// it and the reverse scan in [`Tape::backward`] is a valid topological order.
/// Calling `backward` again recomputes the gradients from the retained forward
/// values and yields identical results.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    tracks_grad: bool,
    pinned: Vec<Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            tracks_grad: false,
            pinned: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.tracks_grad |= requires_grad;
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf, converting from the `f32` storage type.
    pub fn param(&mut self, value: &Tensor<f32>) -> Var {
        self.leaf(value.cast(), true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, available on leaves that require grad.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Exempts `v` from [`Tape::release_except`].
    pub fn pin(&mut self, v: Var) {
        self.pinned.push(v);
    }

    /// Drops the values of every computed node except `keep` and pinned vars,
    /// bounding memory during long gradient-free forward passes. A no-op once
    /// any leaf requires grad, since backward needs the retained values.
    /// Released vars must not be used again.
    pub fn release_except(&mut self, keep: &[Var]) {
        if self.tracks_grad {
            return;
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            let kept = keep.iter().chain(&self.pinned).any(|v| v.0 == i);
            if !matches!(node.op, Op::Leaf) && !kept {
                node.value = Tensor::zeros([0]);
                node.op = Op::Leaf;
            }
        }
    }

    // ---- pointwise -------------------------------------------------------

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        use ElementwiseOp::*;
        match (op, b) {
            (Add, Some(b)) => self.add(a, b),
            (Sub, Some(b)) => self.sub(a, b),
            (Mul, Some(b)) => self.mul(a, b),
            (Add | Sub | Mul, None) => Err(invalid_shape("elementwise", format!("{op:?} needs two operands"))),
            (Sigmoid, None) => Ok(self.sigmoid(a)),
            (Gelu, None) => Ok(self.gelu(a)),
            (Relu, None) => Ok(self.relu(a)),
            (Scale(c), None) => Ok(self.scale(a, c)),
            (_, Some(_)) => Err(invalid_shape("elementwise", format!("{op:?} takes one operand"))),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::ShapeMismatch {
            op: name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let stra = broadcast_strides(sa, &out_shape);
            let strb = broadcast_strides(sb, &out_shape);
            let mut out = vec![T::zero(); out_shape.iter().product()];
            kernels::for_each_broadcast(&out_shape, &stra, &strb, |o, i, j| {
                out[o] = f(av[i], bv[j]);
            });
            out
        };
        Tensor::new(out_shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    /// GELU in its exact form `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let t = self.value(a).map(|x| half * x * (T::one() + (x * inv_sqrt2).erf()));
        self.push(t, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(T::zero()));
        self.push(t, Op::Relu(a))
    }

    // ---- linear algebra --------------------------------------------------

    /// Batched `a @ b` over the last two dims; leading dims broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a @ b^T` over the last two dims.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// `x @ w + bias` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b), trans_b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); plan.out_numel()];
        plan.forward(av, bv, &mut out);
        let t = Tensor::new(plan.out_shape.clone(), out)?;
        Ok(self.push(t, Op::MatMul { a, b, trans_b }))
    }

    /// 2-D cross-correlation of `x: [B,Cin,H,W]` with `w: [Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(invalid_shape("conv2d", format!("expected 4-D input and weight, got {xs:?} and {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: vec![cout], rhs: self.shape(bv).to_vec() });
            }
        }
        let (pad_h, pad_w) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(invalid_shape("conv2d", "same padding needs odd kernel sizes"));
                }
                (kh / 2, kw / 2)
            }
            Padding::Valid => (0, 0),
        };
        if xs[2] + 2 * pad_h < kh || xs[3] + 2 * pad_w < kw {
            return Err(invalid_shape("conv2d", "kernel larger than padded input"));
        }
        let geom = ConvGeom {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            kh,
            kw,
            pad_h,
            pad_w,
            oh: xs[2] + 2 * pad_h - kh + 1,
            ow: xs[3] + 2 * pad_w - kw + 1,
        };
        let batch = xs[0];
        let img_len = geom.cin * geom.h * geom.w;
        let out_len = cout * geom.col_cols();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = bias.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); batch * out_len];
        out.par_chunks_mut(out_len.max(1)).enumerate().for_each(|(bi, o)| {
            let cols = kernels::im2col(&xv[bi * img_len..(bi + 1) * img_len], &geom);
            kernels::gemm_nn(cout, geom.col_rows(), geom.col_cols(), wv, &cols, o);
            if let Some(bv) = bv {
                for (c, chunk) in o.chunks_mut(geom.col_cols()).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[c]);
                }
            }
        });
        let t = Tensor::new(vec![batch, cout, geom.oh, geom.ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, bias, geom }))
    }

    // ---- normalisation and reductions ------------------------------------

    /// Layer normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| invalid_shape("layer_norm", "scalar input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch { op: "layer_norm", lhs: xs.clone(), rhs: self.shape(p).to_vec() });
            }
        }
        let rows = self.value(x).numel() / c.max(1);
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xv.len()];
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        out.par_chunks_mut(c)
            .zip(mean.par_iter_mut().zip(rstd.par_iter_mut()))
            .enumerate()
            .for_each(|(r, (o, (m, s)))| {
                let row = &xv[r * c..(r + 1) * c];
                let mu = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for i in 0..c {
                    let xhat = T::from_f64((row[i].as_f64() - mu) * inv);
                    o[i] = xhat * g[i] + b[i];
                }
                *m = T::from_f64(mu);
                *s = T::from_f64(inv);
            });
        let t = Tensor::new(xs, out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, mean, rstd }))
    }

    /// Softmax over the last dimension, computed with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| invalid_shape("softmax", "scalar input"))?;
        let mut out = self.value(x).data().to_vec();
        out.par_chunks_mut(c.max(1)).for_each(softmax_row);
        let t = Tensor::new(xs, out)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    /// Mean over `axis`, keeping it as a size-1 dimension.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(invalid_shape("mean_axis", format!("axis {axis} out of range for {xs:?}")));
        }
        let outer = xs[..axis].iter().product();
        let inner = xs[axis + 1..].iter().product();
        let mut out_shape = xs.clone();
        out_shape[axis] = 1;
        self.mean_reduce(x, outer, xs[axis], inner, out_shape)
    }

    /// `[B,C,H,W] -> [B,C,1,1]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] == 0 || xs[3] == 0 {
            return Err(invalid_shape("global_avg_pool", format!("expected [B,C,H,W] with H,W >= 1, got {xs:?}")));
        }
        self.mean_reduce(x, xs[0] * xs[1], xs[2] * xs[3], 1, vec![xs[0], xs[1], 1, 1])
    }

    fn mean_reduce(&mut self, x: Var, outer: usize, len: usize, inner: usize, out_shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|l| xv[(o * len + l) * inner + i].as_f64()).sum();
                out[o * inner + i] = T::from_f64(s / len as f64);
            }
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::MeanReduce { x, outer, len, inner }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f64 = v.data().iter().map(|v| v.as_f64()).sum();
        let n = v.numel().max(1) as f64;
        self.push(Tensor::scalar(T::from_f64(s / n)), Op::Mean(x))
    }

    /// Mean absolute difference; the subgradient at zero is zero.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ps, ts) = (self.shape(pred), self.shape(target));
        if ps != ts {
            return Err(Error::ShapeMismatch { op: "l1_loss", lhs: ps.to_vec(), rhs: ts.to_vec() });
        }
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let s: f64 = p.iter().zip(t).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum();
        let n = p.len().max(1) as f64;
        Ok(self.push(Tensor::scalar(T::from_f64(s / n)), Op::L1(pred, target)))
    }

    // ---- layout ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid_shape("permute", format!("{axes:?} is not a permutation of {} axes", xs.len())));
        }
        let data = kernels::permute_copy(self.value(x).data(), &xs, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Permute(x, axes.to_vec())))
    }

    /// Toroidal roll of a `[B,H,W,C]` tensor by `(-shift, -shift)` over H and W.
    pub fn roll2d(&mut self, x: Var, shift: isize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(invalid_shape("roll2d", format!("expected [B,H,W,C], got {xs:?}")));
        }
        let data = kernels::roll2d(self.value(x).data(), &xs, shift);
        let t = Tensor::new(xs, data)?;
        Ok(self.push(t, Op::Roll2d(x, shift)))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(invalid_shape("narrow", format!("[{start}, {}) on axis {axis} of {xs:?}", start + len)));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * xs[axis] + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = xs;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::Narrow { x, axis, start }))
    }

    /// `out[i, :] = table[index[i], :]` for a 2-D `table`.
    pub fn gather_rows(&mut self, table: Var, index: Arc<[usize]>) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(invalid_shape("gather_rows", format!("expected 2-D table, got {ts:?}")));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= ts[0]) {
            return Err(invalid_shape("gather_rows", format!("index {bad} out of range for {} rows", ts[0])));
        }
        let tv = self.value(table).data();
        let cols = ts[1];
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(vec![index.len(), cols], out)?;
        Ok(self.push(t, Op::GatherRows { table, index }))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || r == 0 || xs[2] % r != 0 || xs[3] % r != 0 {
            return Err(invalid_shape("pixel_unshuffle", format!("{xs:?} is not divisible by factor {r}")));
        }
        let data = kernels::pixel_unshuffle(self.value(x).data(), &xs, r);
        let t = Tensor::new(vec![xs[0], xs[1] * r * r, xs[2] / r, xs[3] / r], data)?;
        Ok(self.push(t, Op::PixelUnshuffle(x, r)))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || r == 0 || xs[1] % (r * r) != 0 {
            return Err(invalid_shape("pixel_shuffle", format!("{xs:?} channels not divisible by {}", r * r)));
        }
        let data = kernels::pixel_shuffle(self.value(x).data(), &xs, r);
        let t = Tensor::new(vec![xs[0], xs[1] / (r * r), xs[2] * r, xs[3] * r], data)?;
        Ok(self.push(t, Op::PixelShuffle(x, r)))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Populates gradients of every leaf that requires grad with respect to
    /// the scalar `loss`. Leaves unreachable from `loss` receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                node.grad = Some(Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let out = node.value.data();
        let mut acc = |v: Var, d: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                acc(*a, kernels::reduce_to_shape(g, out_shape, self.shape(*a)));
                if self.requires_grad(*b) {
                    let mut db = kernels::reduce_to_shape(g, out_shape, self.shape(*b));
                    if neg {
                        db.iter_mut().for_each(|v| *v = -*v);
                    }
                    acc(*b, db);
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let stra = broadcast_strides(sa, out_shape);
                let strb = broadcast_strides(sb, out_shape);
                if self.requires_grad(*a) {
                    let mut full = vec![T::zero(); g.len()];
                    kernels::for_each_broadcast(out_shape, &stra, &strb, |o, _, j| full[o] = g[o] * bv[j]);
                    acc(*a, kernels::reduce_to_shape(&full, out_shape, sa));
                }
                if self.requires_grad(*b) {
                    let mut full = vec![T::zero(); g.len()];
                    kernels::for_each_broadcast(out_shape, &stra, &strb, |o, i, _| full[o] = g[o] * av[i]);
                    acc(*b, kernels::reduce_to_shape(&full, out_shape, sb));
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|&v| v * *c).collect()),
            Op::Sigmoid(a) => acc(*a, g.iter().zip(out).map(|(&d, &y)| d * y * (T::one() - y)).collect()),
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                let half = T::from_f64(0.5);
                let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::from_f64(0.398_942_280_401_432_7);
                acc(
                    *a,
                    g.iter()
                        .zip(xv)
                        .map(|(&d, &x)| {
                            let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                            let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                            d * (cdf + x * pdf)
                        })
                        .collect(),
                );
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                acc(*a, g.iter().zip(xv).map(|(&d, &x)| if x > T::zero() { d } else { T::zero() }).collect());
            }
            Op::MatMul { a, b, trans_b } => {
                let plan = MatmulPlan::new(self.shape(*a), self.shape(*b), *trans_b)?;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    acc(*a, plan.grad_a(g, bv));
                }
                if self.requires_grad(*b) {
                    acc(*b, plan.grad_b(g, av));
                }
            }
            Op::Conv2d { x, w, bias, geom } => {
                let geom = *geom;
                let batch = self.shape(*x)[0];
                let cout = self.shape(*w)[0];
                let img_len = geom.cin * geom.h * geom.w;
                let out_len = cout * geom.col_cols();
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.requires_grad(*x);
                let need_w = self.requires_grad(*w);
                let parts: Vec<(Vec<T>, Vec<T>)> = (0..batch)
                    .into_par_iter()
                    .map(|bi| {
                        let go = &g[bi * out_len..(bi + 1) * out_len];
                        let mut dw = Vec::new();
                        let mut dx = Vec::new();
                        if need_w {
                            let cols = kernels::im2col(&xv[bi * img_len..(bi + 1) * img_len], &geom);
                            dw = vec![T::zero(); wv.len()];
                            kernels::gemm_nt(cout, geom.col_cols(), geom.col_rows(), go, &cols, &mut dw);
                        }
                        if need_x {
                            let mut dcols = vec![T::zero(); geom.col_rows() * geom.col_cols()];
                            kernels::gemm_tn(geom.col_rows(), cout, geom.col_cols(), wv, go, &mut dcols);
                            dx = vec![T::zero(); img_len];
                            kernels::col2im(&dcols, &geom, &mut dx);
                        }
                        (dw, dx)
                    })
                    .collect();
                if need_w {
                    let mut dw = vec![T::zero(); wv.len()];
                    for (p, _) in &parts {
                        dw.iter_mut().zip(p).for_each(|(a, &b)| *a += b);
                    }
                    acc(*w, dw);
                }
                if need_x {
                    let mut dx = Vec::with_capacity(batch * img_len);
                    for (_, p) in &parts {
                        dx.extend_from_slice(p);
                    }
                    acc(*x, dx);
                }
                if let Some(bv) = bias {
                    let mut db = vec![T::zero(); cout];
                    for bi in 0..batch {
                        for (c, d) in db.iter_mut().enumerate() {
                            let o = bi * out_len + c * geom.col_cols();
                            *d += g[o..o + geom.col_cols()].iter().copied().sum::<T>();
                        }
                    }
                    acc(*bv, db);
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let c = *out_shape.last().unwrap();
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let rows = mean.len();
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    dx.par_chunks_mut(c).enumerate().for_each(|(r, d)| {
                        let (mu, inv) = (mean[r].as_f64(), rstd[r].as_f64());
                        let row = &xv[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for k in 0..c {
                            let dxhat = gr[k].as_f64() * gv[k].as_f64();
                            let xhat = (row[k].as_f64() - mu) * inv;
                            s1 += dxhat;
                            s2 += dxhat * xhat;
                        }
                        let (m1, m2) = (s1 / c as f64, s2 / c as f64);
                        for k in 0..c {
                            let dxhat = gr[k].as_f64() * gv[k].as_f64();
                            let xhat = (row[k].as_f64() - mu) * inv;
                            d[k] = T::from_f64(inv * (dxhat - m1 - xhat * m2));
                        }
                    });
                    acc(*x, dx);
                }
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![0.0f64; c];
                    let mut db = vec![0.0f64; c];
                    for r in 0..rows {
                        let (mu, inv) = (mean[r].as_f64(), rstd[r].as_f64());
                        for k in 0..c {
                            let gk = g[r * c + k].as_f64();
                            dg[k] += gk * (xv[r * c + k].as_f64() - mu) * inv;
                            db[k] += gk;
                        }
                    }
                    acc(*gamma, dg.into_iter().map(T::from_f64).collect());
                    acc(*beta, db.into_iter().map(T::from_f64).collect());
                }
            }
            Op::Softmax(a) => {
                let c = *out_shape.last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                dx.par_chunks_mut(c.max(1)).enumerate().for_each(|(r, d)| {
                    let y = &out[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let s: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for k in 0..c {
                        d[k] = y[k] * (gr[k] - s);
                    }
                });
                acc(*a, dx);
            }
            Op::MeanReduce { x, outer, len, inner } => {
                let scale = T::one() / T::from_usize(*len);
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..*outer {
                    for l in 0..*len {
                        for i in 0..*inner {
                            dx[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::PixelShuffle(a, r) => acc(*a, kernels::pixel_unshuffle(g, out_shape, *r)),
            Op::PixelUnshuffle(a, r) => acc(*a, kernels::pixel_shuffle(g, out_shape, *r)),
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                acc(*a, kernels::permute_copy(g, out_shape, &inverse));
            }
            Op::Roll2d(a, shift) => acc(*a, kernels::roll2d(g, out_shape, -*shift)),
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = out_shape[*axis];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * xs[*axis] + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(*x, dx);
            }
            Op::GatherRows { table, index } => {
                let cols = self.shape(*table)[1];
                let mut dt = vec![T::zero(); self.value(*table).numel()];
                for (r, &i) in index.iter().enumerate() {
                    for k in 0..cols {
                        dt[i * cols + k] += g[r * cols + k];
                    }
                }
                acc(*table, dt);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel().max(1);
                acc(*a, vec![g[0] / T::from_usize(n); n]);
            }
            Op::L1(p, t) => {
                let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                let scale = g[0] / T::from_usize(pv.len().max(1));
                let d: Vec<T> = pv
                    .iter()
                    .zip(tv)
                    .map(|(&a, &b)| {
                        let diff = a - b;
                        if diff > T::zero() {
                            scale
                        } else if diff < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.requires_grad(*t) {
                    acc(*t, d.iter().map(|&v| -v).collect());
                }
                acc(*p, d);
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Shape bookkeeping for a broadcast batched matmul.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    out_shape: Vec<usize>,
    a_numel: usize,
    b_numel: usize,
    /// Per output batch: (matrix index into a, matrix index into b).
    pairs: Vec<(usize, usize)>,
    /// `a` batches map one-to-one onto output batches.
    a_dense: bool,
    b_dense: bool,
    /// `b` is a single matrix shared by every batch and `a` is dense: the whole
    /// product collapses into one large GEMM.
    flat: bool,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize], trans_b: bool) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(invalid_shape("matmul", format!("operands must be at least 2-D, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let mismatch = || Error::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() };
        if k != kb {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(mismatch)?;
        let nbatch: usize = batch.iter().product();
        let na: usize = ba.iter().product();
        let nb: usize = bb.iter().product();
        let mut pairs = Vec::with_capacity(nbatch);
        if batch.is_empty() {
            pairs.push((0, 0));
        } else {
            let stra = broadcast_strides(ba, &batch);
            let strb = broadcast_strides(bb, &batch);
            kernels::for_each_broadcast(&batch, &stra, &strb, |_, i, j| pairs.push((i, j)));
        }
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        Ok(MatmulPlan {
            m,
            k,
            n,
            trans_b,
            out_shape,
            a_numel: na * m * k,
            b_numel: nb * k * n,
            a_dense: na == nbatch,
            b_dense: nb == nbatch,
            flat: nb == 1 && na == nbatch,
            pairs,
        })
    }

    fn out_numel(&self) -> usize {
        self.pairs.len() * self.m * self.n
    }

    fn forward<T: Scalar>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.flat {
            let rows = self.pairs.len() * m;
            if self.trans_b {
                kernels::gemm_nt(rows, k, n, a, b, out);
            } else {
                kernels::gemm_nn(rows, k, n, a, b, out);
            }
            return;
        }
        out.par_chunks_mut((m * n).max(1)).zip(self.pairs.par_iter()).for_each(|(c, &(ia, ib))| {
            let am = &a[ia * m * k..(ia + 1) * m * k];
            let bm = &b[ib * k * n..(ib + 1) * k * n];
            if self.trans_b {
                kernels::gemm_nt(m, k, n, am, bm, c);
            } else {
                kernels::gemm_nn(m, k, n, am, bm, c);
            }
        });
    }

    fn grad_a<T: Scalar>(&self, g: &[T], b: &[T]) -> Vec<T> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut da = vec![T::zero(); self.a_numel];
        let one = |ga: &[T], bm: &[T], d: &mut [T], rows: usize| {
            if self.trans_b {
                kernels::gemm_nn(rows, n, k, ga, bm, d);
            } else {
                kernels::gemm_nt(rows, n, k, ga, bm, d);
            }
        };
        if self.flat {
            one(g, b, &mut da, self.pairs.len() * m);
        } else if self.a_dense {
            da.par_chunks_mut((m * k).max(1)).zip(self.pairs.par_iter()).enumerate().for_each(
                |(bi, (d, &(_, ib)))| {
                    one(&g[bi * m * n..(bi + 1) * m * n], &b[ib * k * n..(ib + 1) * k * n], d, m);
                },
            );
        } else {
            for (bi, &(ia, ib)) in self.pairs.iter().enumerate() {
                one(
                    &g[bi * m * n..(bi + 1) * m * n],
                    &b[ib * k * n..(ib + 1) * k * n],
                    &mut da[ia * m * k..(ia + 1) * m * k],
                    m,
                );
            }
        }
        da
    }

    fn grad_b<T: Scalar>(&self, g: &[T], a: &[T]) -> Vec<T> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut db = vec![T::zero(); self.b_numel];
        // d(b) = a^T g, or g^T a when b is stored transposed.
        let one = |am: &[T], ga: &[T], d: &mut [T], rows: usize| {
            if self.trans_b {
                kernels::gemm_tn(n, rows, k, ga, am, d);
            } else {
                kernels::gemm_tn(k, rows, n, am, ga, d);
            }
        };
        if self.flat {
            one(a, g, &mut db, self.pairs.len() * m);
        } else if self.b_dense {
            db.par_chunks_mut((k * n).max(1)).zip(self.pairs.par_iter()).enumerate().for_each(
                |(bi, (d, &(ia, _)))| {
                    one(&a[ia * m * k..(ia + 1) * m * k], &g[bi * m * n..(bi + 1) * m * n], d, m);
                },
            );
        } else {
            for (bi, &(ia, ib)) in self.pairs.iter().enumerate() {
                one(
                    &a[ia * m * k..(ia + 1) * m * k],
                    &g[bi * m * n..(bi + 1) * m * n],
                    &mut db[ib * k * n..(ib + 1) * k * n],
                    m,
                );
            }
        }
        db
    }
}
