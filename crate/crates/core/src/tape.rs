//! Tape-based reverse-mode differentiation.
//!
//! Every op appends one node to the [`Tape`]; [`Tape::backward`] walks the nodes
//! once, in reverse order, accumulating adjoints. Tensors are immutable once they
//! are on the tape, so a node's value can be reused by later ops and by its own
//! backward rule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, split_axis, ConvGeom};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    ClampMin(Var, f32),
    PowVar(Var, Var),
    Recip(Var),
    Sum(Var),
    MeanAxis { x: Var, axis: usize },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, axis: usize, rstd: Vec<f32> },
    L2Normalize { x: Var, axis: usize, norms: Vec<f32>, eps: f32 },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    Deconv2d { x: Var, k: Var, geom: ConvGeom },
    ChannelBias(Var, Var),
    MaxPool { x: Var, argmax: Vec<u32> },
    Upsample { x: Var, map: Vec<u32> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalarVar(..) => "mul_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Gelu(..) => "gelu",
            Op::ClampMin(..) => "clamp_min",
            Op::PowVar(..) => "pow",
            Op::Recip(..) => "recip",
            Op::Sum(..) => "sum",
            Op::MeanAxis { .. } => "mean_axis",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "deconv2d",
            Op::ChannelBias(..) => "channel_bias",
            Op::MaxPool { .. } => "max_pool2d",
            Op::Upsample { .. } => "upsample_nearest",
        }
    }
}

/// The computation record: values plus the ops that produced them.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
    params: HashMap<ParamId, Var>,
}

/// Adjoints of every node after a backward pass.
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
    params: Gradients,
}

impl Adjoints {
    /// d(output)/d(var), `None` if `var` does not influence the output.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn hwc(op: &str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::dim(format!("{op}: expected H x W x C map, got {:?}", t.shape()))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        Ok(Var(self.values.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad[v.0])
    }

    /// Record a leaf. Leaves with `requires_grad` receive adjoints in [`Adjoints::wrt`].
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(t, Op::Input, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.input(t, false)
    }

    /// Record a parameter leaf. Registering the same parameter twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true)?;
        self.params.insert(id, v);
        Ok(v)
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let t = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// `a * s` where `s` is a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("mul_scalar: scale must have one element"));
        }
        let sv = self.value(s).item();
        let t = self.value(a).map(|x| x * sv);
        let rg = self.rg(&[a, s]);
        self.push(t, Op::MulScalarVar(a, s), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f32::exp);
        let rg = self.rg(&[a]);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f32::ln);
        let rg = self.rg(&[a]);
        self.push(t, Op::Log(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn clamp_min(&mut self, a: Var, floor: f32) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(floor));
        let rg = self.rg(&[a]);
        self.push(t, Op::ClampMin(a, floor), rg)
    }

    /// Elementwise `x^p` for strictly positive `x` and a one-element exponent `p`.
    pub fn pow(&mut self, x: Var, p: Var) -> Result<Var> {
        if self.value(p).len() != 1 {
            return Err(Error::dim("pow: exponent must have one element"));
        }
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::arg("pow: base must be strictly positive"));
        }
        let pv = self.value(p).item();
        let t = self.value(x).map(|v| v.powf(pv));
        let rg = self.rg(&[x, p]);
        self.push(t, Op::PowVar(x, p), rg)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| 1.0 / x);
        let rg = self.rg(&[a]);
        self.push(t, Op::Recip(a), rg)
    }

    // ----- reductions and shape -----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f32;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean over `axis`, removing it from the shape (a rank-1 input yields shape `[1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() {
            return Err(Error::dim(format!("mean_axis: axis {axis} out of range")));
        }
        let (outer, len, inner) = split_axis(ta.shape(), axis);
        let mut out = vec![0.0f32; outer * inner];
        let d = ta.data();
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f64;
                for l in 0..len {
                    acc += d[(o * len + l) * inner + i] as f64;
                }
                out[o * inner + i] = (acc / len as f64) as f32;
            }
        }
        let mut shape: Vec<usize> = ta.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::MeanAxis { x: a, axis }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let &[m, n] = ta.shape() else {
            return Err(Error::dim(format!("transpose: expected matrix, got {:?}", ta.shape())));
        };
        let d = ta.data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Transpose(a), rg)
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::dim("concat: no inputs"))?);
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::dim(format!("concat: axis {axis} out of range")));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first.shape()[i])
            {
                return Err(Error::dim(format!(
                    "concat: incompatible shapes {:?} and {:?}",
                    first.shape(),
                    s
                )));
            }
            shape[axis] += s[axis];
        }
        let (outer, total, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0f32; outer * total * inner];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let len = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * len * inner..][..len * inner];
                out[(o * total + offset) * inner..][..len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        self.push(t, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::dim(format!(
                "matmul: expected matrices, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        if k != k2 {
            return Err(Error::dim(format!("matmul: inner dimensions {k} and {k2} differ")));
        }
        let t = Tensor::new(vec![m, n], kernels::matmul(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::MatMul(a, b), rg)
    }

    // ----- normalisation -----

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() {
            return Err(Error::dim(format!("softmax: axis {axis} out of range")));
        }
        let (outer, len, inner) = split_axis(ta.shape(), axis);
        let mut out = ta.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| out[idx(l)]).fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0f64;
                for l in 0..len {
                    let e = (out[idx(l)] - m).exp();
                    out[idx(l)] = e;
                    z += e as f64;
                }
                let inv = (1.0 / z) as f32;
                for l in 0..len {
                    out[idx(l)] *= inv;
                }
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax { x: a, axis }, rg)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() {
            return Err(Error::dim(format!("log_softmax: axis {axis} out of range")));
        }
        let (outer, len, inner) = split_axis(ta.shape(), axis);
        let mut out = ta.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| out[idx(l)]).fold(f32::NEG_INFINITY, f32::max);
                let z: f64 = (0..len).map(|l| ((out[idx(l)] - m) as f64).exp()).sum();
                let lse = m as f64 + z.ln();
                for l in 0..len {
                    out[idx(l)] = (out[idx(l)] as f64 - lse) as f32;
                }
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::LogSoftmax { x: a, axis }, rg)
    }

    /// Zero-mean, unit-variance normalisation along `axis`, without affine terms.
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f32) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() {
            return Err(Error::dim(format!("layer_norm: axis {axis} out of range")));
        }
        let (outer, len, inner) = split_axis(ta.shape(), axis);
        let d = ta.data();
        let mut out = vec![0.0f32; d.len()];
        let mut rstd = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| d[idx(l)] as f64).sum::<f64>() / len as f64;
                let var = (0..len).map(|l| (d[idx(l)] as f64 - mean).powi(2)).sum::<f64>()
                    / len as f64;
                let r = 1.0 / (var + eps as f64).sqrt();
                rstd[o * inner + i] = r as f32;
                for l in 0..len {
                    out[idx(l)] = ((d[idx(l)] as f64 - mean) * r) as f32;
                }
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::LayerNorm { x: a, axis, rstd }, rg)
    }

    /// `x / max(||x||, eps)` along `axis`. Vectors with norm below `eps` are scaled
    /// by `1/eps` instead; a zero vector stays zero.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f32) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() {
            return Err(Error::dim(format!("l2_normalize: axis {axis} out of range")));
        }
        let (outer, len, inner) = split_axis(ta.shape(), axis);
        let d = ta.data();
        let mut out = vec![0.0f32; d.len()];
        let mut norms = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let n = (0..len).map(|l| (d[idx(l)] as f64).powi(2)).sum::<f64>().sqrt();
                norms[o * inner + i] = n as f32;
                let denom = n.max(eps as f64);
                for l in 0..len {
                    out[idx(l)] = (d[idx(l)] as f64 / denom) as f32;
                }
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::L2Normalize { x: a, axis, norms, eps }, rg)
    }

    // ----- spatial -----

    /// Cross-correlation of an `H x W x Cin` map with a `KH x KW x Cin x Cout` kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (h, w, cin) = hwc("conv2d", self.value(x))?;
        let &[kh, kw, kcin, cout] = self.shape(k) else {
            return Err(Error::dim(format!("conv2d: kernel must be rank 4, got {:?}", self.shape(k))));
        };
        if kcin != cin {
            return Err(Error::dim(format!("conv2d: kernel expects {kcin} channels, input has {cin}")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::arg(format!("conv2d: stride {stride} not in {{1,2}}")));
        }
        let geom = ConvGeom { h, w, cin, kh, kw, cout, stride, pad };
        let (oh, ow) = geom
            .conv_out()
            .ok_or_else(|| Error::dim(format!("conv2d: output of {h}x{w} input would be empty")))?;
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(k).data(), &geom, oh, ow);
        let t = Tensor::new(vec![oh, ow, cout], out)?;
        let rg = self.rg(&[x, k]);
        self.push(t, Op::Conv2d { x, k, geom }, rg)
    }

    /// Transposed convolution with a `KH x KW x Cin x Cout` kernel.
    pub fn deconv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (h, w, cin) = hwc("deconv2d", self.value(x))?;
        let &[kh, kw, kcin, cout] = self.shape(k) else {
            return Err(Error::dim(format!("deconv2d: kernel must be rank 4, got {:?}", self.shape(k))));
        };
        if kcin != cin {
            return Err(Error::dim(format!(
                "deconv2d: kernel expects {kcin} channels, input has {cin}"
            )));
        }
        if stride == 0 {
            return Err(Error::arg("deconv2d: stride must be positive"));
        }
        let geom = ConvGeom { h, w, cin, kh, kw, cout, stride, pad };
        let (oh, ow) = geom
            .deconv_out()
            .ok_or_else(|| Error::dim("deconv2d: output would be empty"))?;
        let out = kernels::deconv2d_forward(self.value(x).data(), self.value(k).data(), &geom, oh, ow);
        let t = Tensor::new(vec![oh, ow, cout], out)?;
        let rg = self.rg(&[x, k]);
        self.push(t, Op::Deconv2d { x, k, geom }, rg)
    }

    /// Add a per-channel bias `[C]` to a tensor whose last axis has length `C`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(b) != [c] {
            return Err(Error::dim(format!("channel_bias: bias {:?} vs {c} channels", self.shape(b))));
        }
        let bv = self.value(b).data().to_vec();
        let tx = self.value(x);
        let mut out = tx.data().to_vec();
        for chunk in out.chunks_exact_mut(c) {
            for (o, bb) in chunk.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, b]);
        self.push(t, Op::ChannelBias(x, b), rg)
    }

    /// Block-wise maximum over `factor x factor` windows of an `H x W x C` map.
    pub fn max_pool2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (h, w, c) = hwc("max_pool2d", self.value(x))?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::dim(format!("max_pool2d: {h}x{w} not divisible by {factor}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let d = self.value(x).data();
        let mut out = vec![f32::NEG_INFINITY; oh * ow * c];
        let mut argmax = vec![0u32; oh * ow * c];
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let si = (y * w + xx) * c + ch;
                    let oi = ((y / factor) * ow + xx / factor) * c + ch;
                    if d[si] > out[oi] {
                        out[oi] = d[si];
                        argmax[oi] = si as u32;
                    }
                }
            }
        }
        let t = Tensor::new(vec![oh, ow, c], out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::MaxPool { x, argmax }, rg)
    }

    /// Nearest-neighbour upsampling of an `H x W x C` map to `th x tw`.
    pub fn upsample_nearest(&mut self, x: Var, th: usize, tw: usize) -> Result<Var> {
        let (h, w, c) = hwc("upsample_nearest", self.value(x))?;
        if th < h || tw < w {
            return Err(Error::dim(format!("upsample_nearest: target {th}x{tw} smaller than {h}x{w}")));
        }
        let d = self.value(x).data();
        let mut out = vec![0.0f32; th * tw * c];
        let mut map = vec![0u32; th * tw];
        for y in 0..th {
            let sy = y * h / th;
            for xx in 0..tw {
                let sx = xx * w / tw;
                let s = sy * w + sx;
                map[y * tw + xx] = s as u32;
                out[(y * tw + xx) * c..][..c].copy_from_slice(&d[s * c..][..c]);
            }
        }
        let t = Tensor::new(vec![th, tw, c], out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Upsample { x, map }, rg)
    }

    // ----- backward -----

    /// Accumulate d(loss)/d(param) into every reachable parameter's `grad`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let adj = self.gradients(loss)?;
        store.accumulate(adj.params());
        Ok(())
    }

    /// Adjoints of a scalar `loss` w.r.t. every node.
    pub fn gradients(&self, loss: Var) -> Result<Adjoints> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(&[(loss, Tensor::ones(self.shape(loss)))])
    }

    /// Reverse sweep starting from arbitrary output cotangents.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Adjoints> {
        let n = self.values.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut params = Gradients::default();
        if n == 0 {
            return Ok(Adjoints { grads, params });
        }
        let mut last = 0;
        for (v, g) in seeds {
            same_shape("backward seed", self.value(*v), g)?;
            accumulate(&mut grads[v.0], g.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.requires_grad[idx] {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads, &mut params);
            grads[idx] = Some(g);
        }
        Ok(Adjoints { grads, params })
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.requires_grad[v.0] {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn want(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut Gradients,
    ) {
        let y = &self.values[idx];
        let shape_of = |v: Var| self.values[v.0].shape().to_vec();
        let make = |shape: Vec<usize>, d: Vec<f32>| Tensor::new(shape, d).expect("adjoint shape");
        let zip = |a: &[f32], b: &[f32], f: &dyn Fn(f32, f32) -> f32| -> Vec<f32> {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        };
        match &self.ops[idx] {
            Op::Input => {}
            Op::Param(id) => params.add(*id, g),
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.want(*a) {
                    self.send(grads, *a, make(shape_of(*a), zip(g.data(), tb.data(), &|x, y| x * y)));
                }
                if self.want(*b) {
                    self.send(grads, *b, make(shape_of(*b), zip(g.data(), ta.data(), &|x, y| x * y)));
                }
            }
            Op::Scale(a, f) => self.send(grads, *a, g.map(|v| v * f)),
            Op::AddScalar(a) => self.send(grads, *a, g.clone()),
            Op::MulScalarVar(a, s) => {
                let sv = self.value(*s).item();
                if self.want(*a) {
                    self.send(grads, *a, g.map(|v| v * sv));
                }
                if self.want(*s) {
                    let ds = g.dot(self.value(*a));
                    self.send(grads, *s, Tensor::scalar(ds));
                }
            }
            Op::Exp(a) => self.send(grads, *a, make(y.shape().to_vec(), zip(g.data(), y.data(), &|d, e| d * e))),
            Op::Log(a) => {
                let d = zip(g.data(), self.value(*a).data(), &|d, x| d / x);
                self.send(grads, *a, make(y.shape().to_vec(), d));
            }
            Op::Gelu(a) => {
                let d = zip(g.data(), self.value(*a).data(), &|d, x| d * gelu_grad(x));
                self.send(grads, *a, make(y.shape().to_vec(), d));
            }
            Op::ClampMin(a, floor) => {
                let f = *floor;
                let d = zip(g.data(), self.value(*a).data(), &|d, x| if x > f { d } else { 0.0 });
                self.send(grads, *a, make(y.shape().to_vec(), d));
            }
            Op::PowVar(x, p) => {
                let pv = self.value(*p).item();
                let tx = self.value(*x);
                if self.want(*x) {
                    let d: Vec<f32> = g
                        .data()
                        .iter()
                        .zip(tx.data().iter().zip(y.data()))
                        .map(|(&d, (&xv, &yv))| d * pv * yv / xv)
                        .collect();
                    self.send(grads, *x, make(tx.shape().to_vec(), d));
                }
                if self.want(*p) {
                    let dp: f64 = g
                        .data()
                        .iter()
                        .zip(tx.data().iter().zip(y.data()))
                        .map(|(&d, (&xv, &yv))| d as f64 * yv as f64 * (xv as f64).ln())
                        .sum();
                    self.send(grads, *p, Tensor::scalar(dp as f32));
                }
            }
            Op::Recip(a) => {
                let d = zip(g.data(), y.data(), &|d, r| -d * r * r);
                self.send(grads, *a, make(y.shape().to_vec(), d));
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.send(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::MeanAxis { x, axis } => {
                let xs = shape_of(*x);
                let (outer, len, inner) = split_axis(&xs, *axis);
                let mut d = vec![0.0f32; outer * len * inner];
                let inv = 1.0 / len as f32;
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            d[(o * len + l) * inner + i] = g.data()[o * inner + i] * inv;
                        }
                    }
                }
                self.send(grads, *x, make(xs, d));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.want(*a) {
                    let da = kernels::matmul_bt(g.data(), tb.data(), m, n, k);
                    self.send(grads, *a, make(vec![m, k], da));
                }
                if self.want(*b) {
                    let db = kernels::matmul_at(ta.data(), g.data(), m, k, n);
                    self.send(grads, *b, make(vec![k, n], db));
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (y.shape()[0], y.shape()[1]);
                let mut d = vec![0.0f32; m * n];
                for j in 0..n {
                    for i in 0..m {
                        d[i * n + j] = g.data()[j * m + i];
                    }
                }
                self.send(grads, *a, make(vec![m, n], d));
            }
            Op::Reshape(a) => {
                let d = g.clone().reshaped(self.shape(*a)).expect("reshape adjoint");
                self.send(grads, *a, d);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = shape_of(p);
                    let len = ps[*axis];
                    if self.want(p) {
                        let mut d = vec![0.0f32; outer * len * inner];
                        for o in 0..outer {
                            d[o * len * inner..][..len * inner]
                                .copy_from_slice(&g.data()[(o * total + offset) * inner..][..len * inner]);
                        }
                        self.send(grads, p, make(ps, d));
                    }
                    offset += len;
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut d = vec![0.0f32; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let s: f64 = (0..len).map(|l| gd[idx(l)] as f64 * yd[idx(l)] as f64).sum();
                        for l in 0..len {
                            d[idx(l)] = yd[idx(l)] * (gd[idx(l)] - s as f32);
                        }
                    }
                }
                self.send(grads, *x, make(y.shape().to_vec(), d));
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut d = vec![0.0f32; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let s: f64 = (0..len).map(|l| gd[idx(l)] as f64).sum();
                        for l in 0..len {
                            d[idx(l)] = gd[idx(l)] - (yd[idx(l)].exp() as f64 * s) as f32;
                        }
                    }
                }
                self.send(grads, *x, make(y.shape().to_vec(), d));
            }
            Op::LayerNorm { x, axis, rstd } => {
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut d = vec![0.0f32; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let mut mg = 0.0f64;
                        let mut mgy = 0.0f64;
                        for l in 0..len {
                            mg += gd[idx(l)] as f64;
                            mgy += gd[idx(l)] as f64 * yd[idx(l)] as f64;
                        }
                        mg /= len as f64;
                        mgy /= len as f64;
                        let r = rstd[o * inner + i] as f64;
                        for l in 0..len {
                            d[idx(l)] =
                                (r * (gd[idx(l)] as f64 - mg - yd[idx(l)] as f64 * mgy)) as f32;
                        }
                    }
                }
                self.send(grads, *x, make(y.shape().to_vec(), d));
            }
            Op::L2Normalize { x, axis, norms, eps } => {
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut d = vec![0.0f32; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let n = norms[o * inner + i] as f64;
                        if n > *eps as f64 {
                            let s: f64 =
                                (0..len).map(|l| gd[idx(l)] as f64 * yd[idx(l)] as f64).sum();
                            for l in 0..len {
                                d[idx(l)] = ((gd[idx(l)] as f64 - yd[idx(l)] as f64 * s) / n) as f32;
                            }
                        } else {
                            for l in 0..len {
                                d[idx(l)] = gd[idx(l)] / eps;
                            }
                        }
                    }
                }
                self.send(grads, *x, make(y.shape().to_vec(), d));
            }
            Op::Conv2d { x, k, geom } => {
                let (oh, ow) = (y.shape()[0], y.shape()[1]);
                let (dx, dk) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g.data(),
                    geom,
                    oh,
                    ow,
                    self.want(*x),
                    self.want(*k),
                );
                if let Some(dx) = dx {
                    self.send(grads, *x, make(shape_of(*x), dx));
                }
                if let Some(dk) = dk {
                    self.send(grads, *k, make(shape_of(*k), dk));
                }
            }
            Op::Deconv2d { x, k, geom } => {
                let (oh, ow) = (y.shape()[0], y.shape()[1]);
                let (dx, dk) = kernels::deconv2d_backward(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g.data(),
                    geom,
                    oh,
                    ow,
                    self.want(*x),
                    self.want(*k),
                );
                if let Some(dx) = dx {
                    self.send(grads, *x, make(shape_of(*x), dx));
                }
                if let Some(dk) = dk {
                    self.send(grads, *k, make(shape_of(*k), dk));
                }
            }
            Op::ChannelBias(x, b) => {
                if self.want(*x) {
                    self.send(grads, *x, g.clone());
                }
                if self.want(*b) {
                    let c = self.shape(*b)[0];
                    let mut db = vec![0.0f64; c];
                    for chunk in g.data().chunks_exact(c) {
                        for (acc, v) in db.iter_mut().zip(chunk) {
                            *acc += *v as f64;
                        }
                    }
                    self.send(grads, *b, make(vec![c], db.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::MaxPool { x, argmax } => {
                let xs = shape_of(*x);
                let mut d = vec![0.0f32; xs.iter().product()];
                for (o, &src) in argmax.iter().enumerate() {
                    d[src as usize] += g.data()[o];
                }
                self.send(grads, *x, make(xs, d));
            }
            Op::Upsample { x, map } => {
                let xs = shape_of(*x);
                let c = xs[2];
                let mut d = vec![0.0f32; xs.iter().product()];
                for (o, &src) in map.iter().enumerate() {
                    let s = src as usize;
                    for ch in 0..c {
                        d[s * c + ch] += g.data()[o * c + ch];
                    }
                }
                self.send(grads, *x, make(xs, d));
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
