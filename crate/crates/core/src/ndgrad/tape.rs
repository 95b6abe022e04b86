//! Dynamically recorded computation tape with reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and enough saved state
//! to produce input gradients. `backward` walks the nodes in reverse order,
//! so gradient accumulation order is fixed and results are bit-reproducible.

use super::kernels::{conv1d_backward, conv1d_forward, ConvGeom};
use super::real::{gemm, Real};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Length-preserving; requires stride 1. Surplus padding goes right.
    Same,
    /// The same amount on both sides.
    Explicit(usize),
    /// All padding on the left, so output `j` sees inputs `<= j`.
    Causal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Conv1dSpec {
    pub fn same(dilation: usize) -> Self {
        Conv1dSpec {
            stride: 1,
            dilation,
            padding: Padding::Same,
        }
    }

    pub fn causal(dilation: usize) -> Self {
        Conv1dSpec {
            stride: 1,
            dilation,
            padding: Padding::Causal,
        }
    }

    pub fn strided(stride: usize, pad: usize) -> Self {
        Conv1dSpec {
            stride,
            dilation: 1,
            padding: Padding::Explicit(pad),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Silu,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    /// `scale * x + shift`
    Affine(f64, f64),
}

/// Normalization statistics source for [`Tape::batch_norm`].
pub enum NormStats<'a, T> {
    /// Use the batch's own mean and variance.
    Batch,
    /// Use fixed running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Batch mean and unbiased variance observed in a training-mode batchnorm.
pub struct ObservedStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Unary {
        x: Var,
        f: Unary,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Downsample {
        x: Var,
        stride: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast {
        a: Var,
        b: Var,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Mse(Var, Var),
    L1(Var, Var),
    Bce {
        p: Var,
        target: Var,
        eps: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records forward values for one computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// (outer, axis extent, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        // odometer increment over the output index
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn apply_unary<T: Real>(f: Unary, x: T) -> T {
    let v = x.as_f64();
    T::of(match f {
        Unary::Silu => v * sigmoid(v),
        Unary::Relu => v.max(0.0),
        Unary::Sigmoid => sigmoid(v),
        Unary::Tanh => v.tanh(),
        Unary::Exp => v.exp(),
        Unary::Affine(a, b) => a * v + b,
    })
}

fn unary_deriv<T: Real>(f: Unary, x: T, y: T) -> T {
    let (xv, yv) = (x.as_f64(), y.as_f64());
    T::of(match f {
        Unary::Silu => {
            let s = sigmoid(xv);
            s * (1.0 + xv * (1.0 - s))
        }
        Unary::Relu => {
            if xv > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Sigmoid => yv * (1.0 - yv),
        Unary::Tanh => 1.0 - yv * yv,
        Unary::Exp => yv,
        Unary::Affine(a, _) => a,
    })
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::Axis { op, axis, rank })
    } else {
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        Err(Error::shape(op, format!("{a:?} vs {b:?}")))
    } else {
        Ok(())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients; `backward` on it yields nothing.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf; gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    // ---- convolution / dense ------------------------------------------------

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv1dSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::shape(
                "conv1d",
                format!("expected x [B,Cin,L] and w [Cout,Cin,K], got x {xs:?}, w {ws:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv1d",
                format!("input channels differ: x {xs:?} vs w {ws:?}"),
            ));
        }
        let (cout, k) = (ws[0], ws[2]);
        if k == 0 || spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::config("conv1d needs K, stride and dilation >= 1"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv1d",
                    format!("bias {:?} for {cout} output channels", self.shape(b)),
                ));
            }
        }
        let span = spec.dilation * (k - 1);
        let (pl, pr) = match spec.padding {
            Padding::Same => {
                if spec.stride != 1 {
                    return Err(Error::config("\"same\" padding requires stride 1"));
                }
                (span / 2, span - span / 2)
            }
            Padding::Explicit(p) => (p, p),
            Padding::Causal => (span, 0),
        };
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], cout, k, spec.stride, spec.dilation, pl, pr)
            .ok_or_else(|| {
                Error::shape(
                    "conv1d",
                    format!("input length {} too short for kernel {k} dilation {}", xs[2], spec.dilation),
                )
            })?;
        let out = conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![geom.batch, cout, geom.out_len], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv1d { x, w, b, geom }, &inputs))
    }

    /// `x [N, In] * w[Out, In]^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(
                "linear",
                format!("x {xs:?} incompatible with w {ws:?}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * dout];
        gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let value = Tensor::new(vec![n, dout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Batched matrix product `op(a)[G,M,K] * op(b)[G,K,N]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(Error::shape("bmm", format!("{as_:?} vs {bs:?}")));
        }
        let (m, ka) = if trans_a { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
        let (kb, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if ka != kb {
            return Err(Error::shape(
                "bmm",
                format!("inner extents differ: {as_:?} (t={trans_a}) vs {bs:?} (t={trans_b})"),
            ));
        }
        let g = as_[0];
        let mut out = vec![T::zero(); g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            gemm(
                m,
                ka,
                n,
                &ad[i * m * ka..(i + 1) * m * ka],
                trans_a,
                &bd[i * ka * n..(i + 1) * ka * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push(
            value,
            Op::Bmm {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
        ))
    }

    // ---- elementwise --------------------------------------------------------

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let value = self.value(x).map(|v| apply_unary(f, v));
        self.push(value, Op::Unary { x, f }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Unary::Affine(factor, 0.0))
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Unary::Affine(scale, shift))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(op, self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape is a leading prefix of `a`'s; `b` is
    /// repeated over the trailing axes (e.g. `[B,C]` onto `[B,C,L]`).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if bs.len() > as_.len() || as_[..bs.len()] != bs[..] {
            return Err(Error::shape(
                "add_bcast",
                format!("{bs:?} is not a prefix of {as_:?}"),
            ));
        }
        let inner: usize = as_[bs.len()..].iter().product();
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .chunks(inner.max(1))
            .zip(bd)
            .flat_map(|(row, &bv)| row.iter().map(move |&v| v + bv))
            .collect();
        let v = Tensor::new(as_, data)?;
        Ok(self.push(v, Op::AddBcast { a, b }, &[a, b]))
    }

    /// `s * x` with `s` a single-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape(
                "mul_scalar",
                format!("scale must have one element, got {:?}", self.shape(s)),
            ));
        }
        let sv = self.value(s).item();
        let v = self.value(x).map(|e| e * sv);
        Ok(self.push(v, Op::MulScalar { x, s }, &[x, s]))
    }

    // ---- reductions and losses -----------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        if self.value(x).numel() == 0 {
            return Err(Error::shape("sum", "empty tensor"));
        }
        let s = self.value(x).data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::shape("mean", "zero-length reduction"));
        }
        let s = self.value(x).data().iter().copied().sum::<T>() / T::of(n as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("mean_axis", axis, shape.len())?;
        let (outer, n, inner) = split_axis(&shape, axis);
        if n == 0 {
            return Err(Error::shape("mean_axis", "zero-length reduction axis"));
        }
        let xd = self.value(x).data();
        let inv = T::of(1.0 / n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &xd[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let v = Tensor::new(oshape, out)?;
        Ok(self.push(v, Op::MeanAxis { x, axis }, &[x]))
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape("mse_loss", self.shape(pred), self.shape(target))?;
        let n = self.value(pred).numel();
        if n == 0 {
            return Err(Error::shape("mse_loss", "empty input"));
        }
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&a, &b)| {
                let d = (a - b).as_f64();
                d * d
            })
            .sum();
        let v = Tensor::scalar(T::of(s / n as f64));
        Ok(self.push(v, Op::Mse(pred, target), &[pred, target]))
    }

    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape("l1_loss", self.shape(pred), self.shape(target))?;
        let n = self.value(pred).numel();
        if n == 0 {
            return Err(Error::shape("l1_loss", "empty input"));
        }
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&a, &b)| (a - b).as_f64().abs())
            .sum();
        let v = Tensor::scalar(T::of(s / n as f64));
        Ok(self.push(v, Op::L1(pred, target), &[pred, target]))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_loss(&mut self, p: Var, target: Var) -> Result<Var> {
        same_shape("bce_loss", self.shape(p), self.shape(target))?;
        let n = self.value(p).numel();
        if n == 0 {
            return Err(Error::shape("bce_loss", "empty input"));
        }
        let eps = 1e-7;
        let s: f64 = self
            .value(p)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&pv, &yv)| {
                let pc = pv.as_f64().clamp(eps, 1.0 - eps);
                let y = yv.as_f64();
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        let v = Tensor::scalar(T::of(s / n as f64));
        Ok(self.push(v, Op::Bce { p, target, eps }, &[p]))
    }

    /// Mean softmax cross-entropy of `logits [N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || shape[0] == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {shape:?} with {} targets", targets.len()),
            ));
        }
        let k = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index {
                what: "class",
                index: bad,
                bound: k,
            });
        }
        let ld = self.value(logits).data();
        let mut probs = Vec::with_capacity(ld.len());
        let mut loss = 0.0;
        for (row, &t) in ld.chunks(k).zip(targets) {
            let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
            for v in row {
                probs.push(T::of((v.as_f64() - m).exp() / z));
            }
            loss -= row[t].as_f64() - m - z.ln();
        }
        let v = Tensor::scalar(T::of(loss / targets.len() as f64));
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ---- normalization ---------------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", axis, shape.len())?;
        let (outer, n, inner) = split_axis(&shape, axis);
        if n == 0 {
            return Err(Error::shape("softmax", "zero-length reduction axis"));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let m = (0..n).map(|a| xd[at(a)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for a in 0..n {
                    let e = (xd[at(a)] - m).exp();
                    out[at(a)] = e;
                    z += e;
                }
                for a in 0..n {
                    out[at(a)] /= z;
                }
            }
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Softmax { x, axis }, &[x]))
    }

    /// Batch normalization over axis 1 of a `[N, C]` or `[B, C, L]` input.
    ///
    /// Returns the observed batch statistics when `stats` is `Batch`, so the
    /// caller can update running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<ObservedStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 && shape.len() != 3 {
            return Err(Error::shape(
                "batch_norm",
                format!("expected [N,C] or [B,C,L], got {shape:?}"),
            ));
        }
        let c = shape[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("affine params must be [{c}]"),
            ));
        }
        let (outer, _, inner) = split_axis(&shape, 1);
        let m = outer * inner;
        if m == 0 {
            return Err(Error::shape("batch_norm", "zero-length reduction"));
        }
        let xd = self.value(x).data();
        let (mean, var, observed) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for o in 0..outer {
                    for (ch, mu) in mean.iter_mut().enumerate() {
                        *mu += xd[(o * c + ch) * inner..(o * c + ch + 1) * inner]
                            .iter()
                            .map(|v| v.as_f64())
                            .sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                for o in 0..outer {
                    for ch in 0..c {
                        var[ch] += xd[(o * c + ch) * inner..(o * c + ch + 1) * inner]
                            .iter()
                            .map(|v| (v.as_f64() - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                let unbiased: Vec<T> = var
                    .iter()
                    .map(|v| T::of(v / (m.max(2) - 1) as f64))
                    .collect();
                var.iter_mut().for_each(|v| *v /= m as f64);
                let obs = ObservedStats {
                    mean: mean.iter().map(|&v| T::of(v)).collect(),
                    var: unbiased,
                };
                (mean, var, Some(obs))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (
                    mean.iter().map(|v| v.as_f64()).collect(),
                    var.iter().map(|v| v.as_f64()).collect(),
                    None,
                )
            }
        };
        let batch_stats = observed.is_some();
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::of(v)).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for ch in 0..c {
                let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                for i in r {
                    let h = (xd[i] - mean_t[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gd[ch] * h + bd[ch];
                }
            }
        }
        let v = Tensor::new(shape, out)?;
        let var_out = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((var_out, observed))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        if d == 0 {
            return Err(Error::shape("layer_norm", "zero-length reduction axis"));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", format!("affine params must be [{d}]")));
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = Vec::with_capacity(xd.len() / d);
        for (r, row) in xd.chunks(d).enumerate() {
            let mu = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(T::of(is));
            for j in 0..d {
                let h = T::of((row[j].as_f64() - mu) * is);
                xhat[r * d + j] = h;
                out[r * d + j] = gd[j] * h + bd[j];
            }
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Scale rows of the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("l2_normalize", "rank-0 input"))?;
        if d == 0 {
            return Err(Error::shape("l2_normalize", "zero-length reduction axis"));
        }
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(xd.len() / d);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(d) {
            let n = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt().max(1e-12);
            norms.push(T::of(n));
            out.extend(row.iter().map(|&v| T::of(v.as_f64() / n)));
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::L2Normalize { x, norms }, &[x]))
    }

    // ---- resampling -------------------------------------------------------------

    /// Nearest-neighbour upsampling of the last axis.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::config("upsample factor must be >= 1"));
        }
        let shape = self.shape(x).to_vec();
        let l = *shape
            .last()
            .ok_or_else(|| Error::shape("upsample_nearest", "rank-0 input"))?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len() * factor);
        for row in xd.chunks(l.max(1)) {
            for &v in row {
                out.extend(std::iter::repeat_n(v, factor));
            }
        }
        let mut oshape = shape;
        *oshape.last_mut().expect("rank >= 1") = l * factor;
        let v = Tensor::new(oshape, out)?;
        Ok(self.push(v, Op::Upsample { x, factor }, &[x]))
    }

    /// Keep every `stride`-th element of the last axis.
    pub fn downsample_stride(&mut self, x: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::config("downsample stride must be >= 1"));
        }
        let shape = self.shape(x).to_vec();
        let l = *shape
            .last()
            .ok_or_else(|| Error::shape("downsample_stride", "rank-0 input"))?;
        let lo = l.div_ceil(stride);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len() / l.max(1) * lo);
        for row in xd.chunks(l.max(1)) {
            out.extend(row.iter().step_by(stride).copied());
        }
        let mut oshape = shape;
        *oshape.last_mut().expect("rank >= 1") = lo;
        let v = Tensor::new(oshape, out)?;
        Ok(self.push(v, Op::Downsample { x, stride }, &[x]))
    }

    // ---- layout -------------------------------------------------------------------

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let (data, oshape) = permute_data(self.value(x).data(), &shape, perm);
        let v = Tensor::new(oshape, data)?;
        Ok(self.push(
            v,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    pub fn transpose(&mut self, x: Var, a0: usize, a1: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        check_axis("transpose", a0.max(a1), rank)?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a0, a1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        check_axis("concat", axis, first.len())?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total;
        let v = Tensor::new(oshape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", axis, shape.len())?;
        if start > end || end > shape[axis] {
            return Err(Error::Index {
                what: "slice end",
                index: end,
                bound: shape[axis],
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let w = end - start;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = w;
        let v = Tensor::new(oshape, out)?;
        Ok(self.push(v, Op::Slice { x, axis, start }, &[x]))
    }

    // ---- reverse pass -----------------------------------------------------------------

    /// Reverse-mode gradients of the single-element `loss` with respect to
    /// every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a single element, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_vec(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) -> Result<()> {
        if self.wants(v) {
            let t = Tensor::new(self.shape(v).to_vec(), data)?;
            self.accumulate(grads, v, t);
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node<T>, gy: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, geom } => {
                let cg = conv1d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = cg.dx {
                    self.acc_vec(grads, *x, dx)?;
                }
                if let Some(dw) = cg.dw {
                    self.acc_vec(grads, *w, dw)?;
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.acc_vec(grads, *b, db)?;
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    gemm(n, dout, din, g, false, self.value(*w).data(), false, &mut dx, false);
                    self.acc_vec(grads, *x, dx)?;
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    gemm(dout, n, din, g, true, self.value(*x).data(), false, &mut dw, false);
                    self.acc_vec(grads, *w, dw)?;
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); dout];
                        for row in g.chunks(dout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.acc_vec(grads, *b, db)?;
                    }
                }
            }
            Op::Bmm {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (ta, tb) = (*trans_a, *trans_b);
                let as_ = self.shape(*a);
                let bs = self.shape(*b);
                let grp = as_[0];
                let (m, k) = if ta { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
                let n = if tb { bs[1] } else { bs[2] };
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let (sa, sb, sc) = (m * k, k * n, m * n);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); grp * sa];
                    for i in 0..grp {
                        let gc = &g[i * sc..(i + 1) * sc];
                        let bb = &bd[i * sb..(i + 1) * sb];
                        let out = &mut da[i * sa..(i + 1) * sa];
                        if !ta {
                            // dA[m,k] = dC[m,n] * op(B)^T
                            gemm(m, n, k, gc, false, bb, !tb, out, false);
                        } else {
                            // dA stored [k,m] = op(B)[k,n] * dC^T
                            gemm(k, n, m, bb, tb, gc, true, out, false);
                        }
                    }
                    self.acc_vec(grads, *a, da)?;
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); grp * sb];
                    for i in 0..grp {
                        let gc = &g[i * sc..(i + 1) * sc];
                        let aa = &ad[i * sa..(i + 1) * sa];
                        let out = &mut db[i * sb..(i + 1) * sb];
                        if !tb {
                            // dB[k,n] = op(A)^T * dC
                            gemm(k, m, n, aa, !ta, gc, false, out, false);
                        } else {
                            // dB stored [n,k] = dC^T * op(A)
                            gemm(n, m, k, gc, true, aa, ta, out, false);
                        }
                    }
                    self.acc_vec(grads, *b, db)?;
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * n + a) * inner + i;
                        let dot = (0..n).map(|a| g[at(a)] * y[at(a)]).sum::<T>();
                        for a in 0..n {
                            dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                self.acc_vec(grads, *x, dx)?;
            }
            Op::Unary { x, f } => {
                let xd = self.value(*x).data();
                let yd = node.value.data();
                let dx = g
                    .iter()
                    .zip(xd.iter().zip(yd))
                    .map(|(&gv, (&xv, &yv))| gv * unary_deriv(*f, xv, yv))
                    .collect();
                self.acc_vec(grads, *x, dx)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = node.value.shape();
                let c = shape[1];
                let (outer, _, inner) = split_axis(shape, 1);
                let m = (outer * inner) as f64;
                let gd = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for o in 0..outer {
                    for ch in 0..c {
                        for i in (o * c + ch) * inner..(o * c + ch + 1) * inner {
                            dgamma[ch] += (g[i] * xhat[i]).as_f64();
                            dbeta[ch] += g[i].as_f64();
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let gam = gd[ch].as_f64();
                            let is = inv_std[ch].as_f64();
                            for i in (o * c + ch) * inner..(o * c + ch + 1) * inner {
                                let dxhat = g[i].as_f64() * gam;
                                let v = if *batch_stats {
                                    // sum(dxhat) = gamma * dbeta, sum(dxhat*xhat) = gamma * dgamma
                                    is / m
                                        * (m * dxhat
                                            - gam * dbeta[ch]
                                            - xhat[i].as_f64() * gam * dgamma[ch])
                                } else {
                                    dxhat * is
                                };
                                dx[i] = T::of(v);
                            }
                        }
                    }
                    self.acc_vec(grads, *x, dx)?;
                }
                self.acc_vec(grads, *gamma, dgamma.iter().map(|&v| T::of(v)).collect())?;
                self.acc_vec(grads, *beta, dbeta.iter().map(|&v| T::of(v)).collect())?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *node.value.shape().last().expect("rank >= 1");
                let gd = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); g.len()];
                for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                        let dh = (grow[j] * gd[j]).as_f64();
                        s1 += dh;
                        s2 += dh * hrow[j].as_f64();
                    }
                    let is = inv_std[r].as_f64();
                    for j in 0..d {
                        let dh = (grow[j] * gd[j]).as_f64();
                        dx[r * d + j] = T::of(
                            is / d as f64 * (d as f64 * dh - s1 - hrow[j].as_f64() * s2),
                        );
                    }
                }
                self.acc_vec(grads, *x, dx)?;
                self.acc_vec(grads, *gamma, dgamma)?;
                self.acc_vec(grads, *beta, dbeta)?;
            }
            Op::Upsample { x, factor } => {
                let dx = g.chunks(*factor).map(|c| c.iter().copied().sum::<T>()).collect();
                self.acc_vec(grads, *x, dx)?;
            }
            Op::Downsample { x, stride } => {
                let l = *self.shape(*x).last().expect("rank >= 1");
                let lo = *node.value.shape().last().expect("rank >= 1");
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (r, grow) in g.chunks(lo.max(1)).enumerate() {
                    for (j, &v) in grow.iter().enumerate() {
                        dx[r * l + j * stride] = v;
                    }
                }
                self.acc_vec(grads, *x, dx)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, gy.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.acc_vec(grads, *a, g.iter().zip(bd).map(|(&x, &y)| x * y).collect())?;
                }
                if self.wants(*b) {
                    self.acc_vec(grads, *b, g.iter().zip(ad).map(|(&x, &y)| x * y).collect())?;
                }
            }
            Op::AddBcast { a, b } => {
                self.accumulate(grads, *a, gy.clone());
                if self.wants(*b) {
                    let nb = self.value(*b).numel();
                    let inner = g.len() / nb.max(1);
                    let db = g.chunks(inner.max(1)).map(|c| c.iter().copied().sum::<T>()).collect();
                    self.acc_vec(grads, *b, db)?;
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).item();
                if self.wants(*x) {
                    self.acc_vec(grads, *x, g.iter().map(|&v| v * sv).collect())?;
                }
                if self.wants(*s) {
                    let ds: f64 = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&a, &b)| (a * b).as_f64())
                        .sum();
                    self.acc_vec(grads, *s, vec![T::of(ds)])?;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.acc_vec(grads, *x, vec![g[0]; n])?;
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.acc_vec(grads, *x, vec![g[0] / T::of(n as f64); n])?;
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let inv = T::of(1.0 / n as f64);
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for a in 0..n {
                        for i in 0..inner {
                            dx[(o * n + a) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                self.acc_vec(grads, *x, dx)?;
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let k = g[0] * T::of(2.0 / ad.len() as f64);
                let da: Vec<T> = ad.iter().zip(bd).map(|(&x, &y)| k * (x - y)).collect();
                if self.wants(*b) {
                    self.acc_vec(grads, *b, da.iter().map(|&v| -v).collect())?;
                }
                self.acc_vec(grads, *a, da)?;
            }
            Op::L1(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let k = g[0] / T::of(ad.len() as f64);
                let da: Vec<T> = ad
                    .iter()
                    .zip(bd)
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > T::zero() {
                            k
                        } else if d < T::zero() {
                            -k
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.wants(*b) {
                    self.acc_vec(grads, *b, da.iter().map(|&v| -v).collect())?;
                }
                self.acc_vec(grads, *a, da)?;
            }
            Op::Bce { p, target, eps } => {
                let pd = self.value(*p).data();
                let yd = self.value(*target).data();
                let n = pd.len() as f64;
                let k = g[0].as_f64() / n;
                let dp = pd
                    .iter()
                    .zip(yd)
                    .map(|(&pv, &yv)| {
                        let pv = pv.as_f64();
                        if pv < *eps || pv > 1.0 - eps {
                            T::zero()
                        } else {
                            let y = yv.as_f64();
                            T::of(k * (-(y / pv) + (1.0 - y) / (1.0 - pv)))
                        }
                    })
                    .collect();
                self.acc_vec(grads, *p, dp)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::of(targets.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * k + t] -= scale;
                }
                self.acc_vec(grads, *logits, d)?;
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let d = *node.value.shape().last().expect("rank >= 1");
                let mut dx = vec![T::zero(); y.len()];
                for (r, (yrow, grow)) in y.chunks(d).zip(g.chunks(d)).enumerate() {
                    let dot = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..d {
                        dx[r * d + j] = (grow[j] - yrow[j] * dot) / norms[r];
                    }
                }
                self.acc_vec(grads, *x, dx)?;
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (dx, _) = permute_data(g, node.value.shape(), &inv);
                self.acc_vec(grads, *x, dx)?;
            }
            Op::Reshape(x) => {
                self.acc_vec(grads, *x, gy.into_data())?;
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut dx = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[s..s + n * inner]);
                        }
                        self.acc_vec(grads, v, dx)?;
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = split_axis(xs, *axis);
                let w = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let d = (o * n + start) * inner;
                    dx[d..d + w * inner].copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                }
                self.acc_vec(grads, *x, dx)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_kernel_conv() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let w = tape.constant(t(&[1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv1d(x, w, Some(b), Conv1dSpec::same(1)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 5]));
        let w = tape.constant(Tensor::zeros(vec![1, 3, 3]));
        let err = tape.conv1d(x, w, None, Conv1dSpec::same(1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 5]") && msg.contains("[1, 3, 3]"), "{msg}");
    }

    #[test]
    fn same_padding_rejects_stride() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 5]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 3]));
        let spec = Conv1dSpec {
            stride: 2,
            dilation: 1,
            padding: Padding::Same,
        };
        assert!(matches!(tape.conv1d(x, w, None, spec), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_uniform_and_axis_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(tape.softmax(x, 1), Err(Error::Axis { .. })));
        let empty = tape.constant(Tensor::zeros(vec![2, 0]));
        assert!(tape.softmax(empty, 1).is_err());
        assert!(tape.mean_axis(empty, 1).is_err());
    }

    #[test]
    fn silu_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.silu(x);
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn gradient_accumulates_over_fanout() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn no_grad_tape_tracks_nothing() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 3, 4], |i| i as f64));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // element [b=1, c=2, l=3] -> [3, 1, 2]
        assert_eq!(tape.value(p).at(&[3, 1, 2]), tape.value(x).at(&[1, 2, 3]));
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }
}
