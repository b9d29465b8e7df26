//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradients of
//! a scalar with respect to every leaf that requires them. Parameters enter the
//! tape through [`Graph::param`] (trainable) or [`Graph::frozen`] (constant);
//! a frozen binding never produces a gradient, which is how stop-gradient
//! branches are expressed.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Per-sample input and weight gradients of a batched convolution.
type SampleGrads = (Option<Vec<f64>>, Option<Vec<f64>>);

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Tanh,
    Exp,
    Log,
    Square,
    Sqrt,
    Neg,
    Gelu,
    Softplus,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize { x: Var, norms: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    ConvT2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    IndexRows { x: Var, idx: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    leaf: Vec<Option<Tensor>>,
    params: HashMap<(u64, usize), usize>,
}

impl Grads {
    /// Gradient with respect to a leaf variable, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaf.get(v.0).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients for `store`, in parameter order. Parameters that
    /// were not bound as trainable, or received no gradient, are `None`.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Option<&Tensor>> {
        (0..store.len())
            .map(|i| {
                self.params
                    .get(&(store.uid(), i))
                    .and_then(|&node| self.leaf[node].as_ref())
            })
            .collect()
    }

    /// Like [`Grads::for_store`] but materialises zeros for missing entries.
    pub fn dense_for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        self.for_store(store)
            .into_iter()
            .zip(store.values())
            .map(|(g, v)| g.cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }

    pub fn touches(&self, store: &ParamStore) -> bool {
        self.for_store(store).iter().any(Option::is_some)
    }
}

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    trainable: HashMap<(u64, usize), Var>,
    frozen: HashMap<(u64, usize), Var>,
    param_of: HashMap<usize, (u64, usize)>,
}

fn view3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_out(size: usize, k: usize, stride: usize) -> usize {
    assert!(size >= k, "kernel {k} larger than input {size}");
    (size - k) / stride + 1
}

/// `cols[(c*kh + i)*kw + j, oy*wo + ox] = x[c, oy*s + i, ox*s + j]`
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, s: usize, ho: usize, wo: usize, cols: &mut [f64]) {
    let hw = ho * wo;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let src = &x[ci * h * w + (oy * s + i) * w..];
                    let d = &mut dst[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        d.copy_from_slice(&src[j..j + wo]);
                    } else {
                        for (ox, v) in d.iter_mut().enumerate() {
                            *v = src[ox * s + j];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, s: usize, ho: usize, wo: usize, x: &mut [f64]) {
    let hw = ho * wo;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let base = ci * h * w + (oy * s + i) * w + j;
                    for ox in 0..wo {
                        x[base + ox * s] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

fn gelu(x: f64) -> (f64, f64) {
    // tanh approximation; returns (value, derivative)
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Bind a trainable parameter. Binding the same parameter twice returns the
    /// same variable so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(&v) = self.trainable.get(&key) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.trainable.insert(key, v);
        self.param_of.insert(v.0, key);
        v
    }

    /// Bind a parameter as a constant (no gradient path).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(&v) = self.frozen.get(&key) {
            return v;
        }
        let v = self.constant(store.get(id).clone());
        self.frozen.insert(key, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        self.same_shape(a, b, what);
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "minimum", f64::min, Op::Minimum(a, b))
    }

    /// `x[..., j] + b[j]`
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let m = self.value(x).last_dim();
        assert_eq!(self.value(b).numel(), m, "add_row: bias length");
        let bv = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(m) {
            for (v, bb) in row.iter_mut().zip(&bv) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(t, Op::AddRow(x, b), rg)
    }

    /// `x[..., j] * b[j]`
    pub fn mul_row(&mut self, x: Var, b: Var) -> Var {
        let m = self.value(x).last_dim();
        assert_eq!(self.value(b).numel(), m, "mul_row: length");
        let bv = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(m) {
            for (v, bb) in row.iter_mut().zip(&bv) {
                *v *= bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(t, Op::MulRow(x, b), rg)
    }

    /// Multiply row `i` of `x` (viewed as `[n, last]`) by `c[i]`.
    pub fn scale_rows(&mut self, x: Var, c: Var) -> Var {
        let m = self.value(x).last_dim();
        let n = self.value(x).numel() / m;
        assert_eq!(self.value(c).numel(), n, "scale_rows: {} rows vs {} scales", n, self.value(c).numel());
        let cv = self.value(c).data().to_vec();
        let mut t = self.value(x).clone();
        for (row, s) in t.data_mut().chunks_mut(m).zip(&cv) {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        let rg = self.rg(x) || self.rg(c);
        self.push(t, Op::ScaleRows(x, c), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |v| v.max(0.0),
            Unary::Tanh => f64::tanh,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Square => |v| v * v,
            Unary::Sqrt => f64::sqrt,
            Unary::Neg => |v| -v,
            Unary::Gelu => |v| gelu(v).0,
            Unary::Softplus => softplus,
            Unary::Sigmoid => sigmoid,
        };
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, Op::Unary(x, kind), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    /// `a [n, k] @ b [k, m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: {:?} @ {:?}", sa, sb);
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[n, m], out), Op::MatMul(a, b), rg)
    }

    /// Batched matmul: `a [B, n, k] @ b [B, k, m]`, or `@ b[B, m, k]^T` with `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm: {:?} {:?}", sa, sb);
        let (bt, n, k) = (sa[0], sa[1], sa[2]);
        let m = if trans_b { sb[1] } else { sb[2] };
        assert_eq!(if trans_b { sb[2] } else { sb[1] }, k, "bmm inner dims");
        let mut out = vec![0.0; bt * n * m];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            gemm(
                n,
                k,
                m,
                &ad[i * n * k..(i + 1) * n * k],
                false,
                &bd[i * k * m..(i + 1) * k * m],
                trans_b,
                &mut out[i * n * m..(i + 1) * n * m],
                0.0,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[bt, n, m], out), Op::Bmm { a, b, trans_b }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.last_dim();
        let shape = &t.shape()[..t.shape().len().saturating_sub(1)];
        let data: Vec<f64> = t.data().chunks(m).map(|r| r.iter().sum()).collect();
        let out = Tensor::new(shape, data);
        let rg = self.rg(x);
        self.push(out, Op::SumLast(x), rg)
    }

    /// Layer normalisation over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let t = self.value(x);
        let m = t.last_dim();
        assert_eq!(self.value(gain).numel(), m);
        assert_eq!(self.value(bias).numel(), m);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.numel() / m;
        let mut out = vec![0.0; t.numel()];
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &t.data()[r * m..(r + 1) * m];
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..m {
                let h = (row[j] - mu) * rs;
                xhat[r * m + j] = h;
                out[r * m + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(t.shape(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.last_dim();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.last_dim();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// `x / max(||x||, eps)` over the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let m = t.last_dim();
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.numel() / m);
        for row in out.data_mut().chunks_mut(m) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms.push(n);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    /// Valid (unpadded) 2-D convolution: `x [B, C, H, W]`, `w [O, C, kh, kw]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1], "conv2d: x {:?} w {:?}", xs, ws);
        let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = (conv_out(h, kh, stride), conv_out(wd, kw, stride));
        let ckk = c * kh * kw;
        let mut out = vec![0.0; bn * o * ho * wo];
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let bias = b.map(|b| self.value(b).data().to_vec());
        out.par_chunks_mut(o * ho * wo).enumerate().for_each(|(i, dst)| {
            let mut cols = vec![0.0; ckk * ho * wo];
            im2col(&xd[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, kh, kw, stride, ho, wo, &mut cols);
            gemm(o, ckk, ho * wo, wdata, false, &cols, false, dst, 0.0);
            if let Some(bias) = &bias {
                for (oc, row) in dst.chunks_mut(ho * wo).enumerate() {
                    for v in row.iter_mut() {
                        *v += bias[oc];
                    }
                }
            }
        });
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[bn, o, ho, wo], out), Op::Conv2d { x, w, b, stride }, rg)
    }

    /// Transposed convolution: `x [B, C, H, W]`, `w [C, O, kh, kw]`, `b [O]`.
    /// Output size is `(H - 1) * stride + kh` (no padding).
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4 && xs[1] == ws[0], "conv_t2d: x {:?} w {:?}", xs, ws);
        let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[1], ws[2], ws[3]);
        let (ho, wo) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
        let okk = o * kh * kw;
        let mut out = vec![0.0; bn * o * ho * wo];
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let bias = b.map(|b| self.value(b).data().to_vec());
        out.par_chunks_mut(o * ho * wo).enumerate().for_each(|(i, dst)| {
            let mut cols = vec![0.0; okk * h * wd];
            // cols[OKK, HW] = w^T [OKK, C] @ x [C, HW]
            gemm(okk, c, h * wd, wdata, true, &xd[i * c * h * wd..(i + 1) * c * h * wd], false, &mut cols, 0.0);
            col2im(&cols, o, ho, wo, kh, kw, stride, h, wd, dst);
            if let Some(bias) = &bias {
                for (oc, row) in dst.chunks_mut(ho * wo).enumerate() {
                    for v in row.iter_mut() {
                        *v += bias[oc];
                    }
                }
            }
        });
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[bn, o, ho, wo], out), Op::ConvT2d { x, w, b, stride }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat: {:?} vs {:?}", s, first);
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = view3(&shape, axis);
        let mut out = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for &p in parts {
            let len = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&shape, out), Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let (outer, n, inner) = view3(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(x);
        self.push(Tensor::new(&oshape, out), Op::Narrow { x, axis, start }, rg)
    }

    /// Gather entries along the first axis.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        let inner: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            assert!(i < shape[0], "index_rows: {i} out of {}", shape[0]);
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut oshape = shape;
        oshape[0] = idx.len();
        let rg = self.rg(x);
        self.push(Tensor::new(&oshape, out), Op::IndexRows { x, idx: idx.to_vec() }, rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(node, &gout, &mut grads);
        }
        let params = self
            .param_of
            .iter()
            .map(|(&node, &key)| (key, node))
            .collect();
        Grads { leaf: grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape(), d));
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), d));
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // ties route the gradient to `a`
                let mut ga = vec![0.0; gd.len()];
                let mut gb = vec![0.0; gd.len()];
                for i in 0..gd.len() {
                    if av.data()[i] <= bv.data()[i] {
                        ga[i] = gd[i];
                    } else {
                        gb[i] = gd[i];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape(), ga));
                self.accumulate(grads, *b, Tensor::new(bv.shape(), gb));
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, gout.clone());
                if self.rg(*b) {
                    let m = self.value(*b).numel();
                    let mut gb = vec![0.0; m];
                    for row in gd.chunks(m) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b), gb));
                }
            }
            Op::MulRow(x, b) => {
                let m = self.value(*b).numel();
                let bv = self.value(*b).data();
                if self.rg(*x) {
                    let mut gx = gout.clone();
                    for row in gx.data_mut().chunks_mut(m) {
                        for (v, bb) in row.iter_mut().zip(bv) {
                            *v *= bb;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*b) {
                    let xv = self.value(*x).data();
                    let mut gb = vec![0.0; m];
                    for (grow, xrow) in gd.chunks(m).zip(xv.chunks(m)) {
                        for j in 0..m {
                            gb[j] += grow[j] * xrow[j];
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b), gb));
                }
            }
            Op::ScaleRows(x, c) => {
                let m = self.value(*x).last_dim();
                let cv = self.value(*c).data();
                if self.rg(*x) {
                    let mut gx = gout.clone();
                    for (row, s) in gx.data_mut().chunks_mut(m).zip(cv) {
                        for v in row.iter_mut() {
                            *v *= s;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*c) {
                    let xv = self.value(*x).data();
                    let gc = gd
                        .chunks(m)
                        .zip(xv.chunks(m))
                        .map(|(g, x)| g.iter().zip(x).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *c, Tensor::new(self.shape(*c), gc));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, gout.map(|v| v * s));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, gout.clone()),
            Op::Unary(x, kind) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let d: Vec<f64> = match kind {
                    Unary::Relu => gd.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                    Unary::Tanh => gd.iter().zip(yv).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::Exp => gd.iter().zip(yv).map(|(g, y)| g * y).collect(),
                    Unary::Log => gd.iter().zip(xv).map(|(g, x)| g / x).collect(),
                    Unary::Square => gd.iter().zip(xv).map(|(g, x)| 2.0 * g * x).collect(),
                    Unary::Sqrt => gd.iter().zip(yv).map(|(g, y)| g * 0.5 / y).collect(),
                    Unary::Neg => gd.iter().map(|g| -g).collect(),
                    Unary::Gelu => gd.iter().zip(xv).map(|(g, &x)| g * gelu(x).1).collect(),
                    Unary::Softplus => gd.iter().zip(xv).map(|(g, &x)| g * sigmoid(x)).collect(),
                    Unary::Sigmoid => gd.iter().zip(yv).map(|(g, y)| g * y * (1.0 - y)).collect(),
                };
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), d));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut ga = vec![0.0; n * k];
                    gemm(n, m, k, gd, false, self.value(*b).data(), true, &mut ga, 0.0);
                    self.accumulate(grads, *a, Tensor::new(sa, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * m];
                    gemm(k, n, m, self.value(*a).data(), true, gd, false, &mut gb, 0.0);
                    self.accumulate(grads, *b, Tensor::new(sb, gb));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (bt, n, k) = (sa[0], sa[1], sa[2]);
                let m = if *trans_b { sb[1] } else { sb[2] };
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut ga = vec![0.0; bt * n * k];
                    for i in 0..bt {
                        // dA = dC @ op(B)^T
                        gemm(
                            n,
                            m,
                            k,
                            &gd[i * n * m..(i + 1) * n * m],
                            false,
                            &bd[i * k * m..(i + 1) * k * m],
                            !*trans_b,
                            &mut ga[i * n * k..(i + 1) * n * k],
                            0.0,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(&sa, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; bt * k * m];
                    for i in 0..bt {
                        let (ai, gi) = (&ad[i * n * k..(i + 1) * n * k], &gd[i * n * m..(i + 1) * n * m]);
                        let dst = &mut gb[i * k * m..(i + 1) * k * m];
                        if *trans_b {
                            // B stored [m, k]; dB = dC^T @ A
                            gemm(m, n, k, gi, true, ai, false, dst, 0.0);
                        } else {
                            gemm(k, n, m, ai, true, gi, false, dst, 0.0);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&sb, gb));
                }
            }
            Op::Sum(x) => {
                let g = gd[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::Mean(x) => {
                let g = gd[0] / self.value(*x).numel() as f64;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::SumLast(x) => {
                let m = self.value(*x).last_dim();
                let mut gx = Vec::with_capacity(self.value(*x).numel());
                for g in gd {
                    gx.extend(std::iter::repeat_n(*g, m));
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let m = self.value(*x).last_dim();
                let g = self.value(*gain).data();
                if self.rg(*x) {
                    let mut gx = vec![0.0; gd.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let go = &gd[r * m..(r + 1) * m];
                        let xh = &xhat[r * m..(r + 1) * m];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..m {
                            let dxh = go[j] * g[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        let (s1, s2) = (s1 / m as f64, s2 / m as f64);
                        for j in 0..m {
                            let dxh = go[j] * g[j];
                            gx[r * m + j] = rs * (dxh - s1 - xh[j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx));
                }
                if self.rg(*gain) {
                    let mut gg = vec![0.0; m];
                    for (go, xh) in gd.chunks(m).zip(xhat.chunks(m)) {
                        for j in 0..m {
                            gg[j] += go[j] * xh[j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new(self.shape(*gain), gg));
                }
                if self.rg(*bias) {
                    let mut gb = vec![0.0; m];
                    for go in gd.chunks(m) {
                        for j in 0..m {
                            gb[j] += go[j];
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(self.shape(*bias), gb));
                }
            }
            Op::Softmax(x) => {
                let m = node.value.last_dim();
                let mut gx = vec![0.0; gd.len()];
                for ((dst, y), g) in gx.chunks_mut(m).zip(node.value.data().chunks(m)).zip(gd.chunks(m)) {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dst[j] = y[j] * (g[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx));
            }
            Op::LogSoftmax(x) => {
                let m = node.value.last_dim();
                let mut gx = vec![0.0; gd.len()];
                for ((dst, y), g) in gx.chunks_mut(m).zip(node.value.data().chunks(m)).zip(gd.chunks(m)) {
                    let s: f64 = g.iter().sum();
                    for j in 0..m {
                        dst[j] = g[j] - y[j].exp() * s;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx));
            }
            Op::L2Normalize { x, norms } => {
                let m = node.value.last_dim();
                let mut gx = vec![0.0; gd.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let y = &node.value.data()[r * m..(r + 1) * m];
                    let g = &gd[r * m..(r + 1) * m];
                    let xr = &self.value(*x).data()[r * m..(r + 1) * m];
                    let raw = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if raw < nrm {
                        // clamped: y = x / eps is linear in x
                        for j in 0..m {
                            gx[r * m + j] = g[j] / nrm;
                        }
                    } else {
                        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            gx[r * m + j] = (g[j] - y[j] * dot) / nrm;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx));
            }
            Op::Conv2d { x, w, b, stride } => self.conv2d_backward(*x, *w, *b, *stride, gout, grads),
            Op::ConvT2d { x, w, b, stride } => self.convt2d_backward(*x, *w, *b, *stride, gout, grads),
            Op::Reshape(x) => {
                let g = gout.clone().reshaped(self.shape(*x));
                self.accumulate(grads, *x, g);
            }
            Op::Concat { parts, axis } => {
                let total = node.value.shape()[*axis];
                let (outer, _, inner) = view3(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            gp.extend_from_slice(&gd[s..s + len * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.shape(p), gp));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = view3(shape, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let s = (o * n + start) * inner;
                    gx[s..s + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(shape, gx));
            }
            Op::IndexRows { x, idx } => {
                let shape = self.shape(*x);
                let inner: usize = shape[1..].iter().product();
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..inner {
                        gx[i * inner + j] += gd[r * inner + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, gx));
            }
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, b: Option<Var>, stride: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = (gout.shape()[2], gout.shape()[3]);
        let ckk = c * kh * kw;
        let gd = gout.data();
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        // per-sample partial results, reduced in sample order so the sum is deterministic
        let per_sample: Vec<SampleGrads> = (0..bn)
            .into_par_iter()
            .map(|i| {
                let go = &gd[i * o * ho * wo..(i + 1) * o * ho * wo];
                let xi = &xd[i * c * h * wd..(i + 1) * c * h * wd];
                let gw = need_w.then(|| {
                    let mut cols = vec![0.0; ckk * ho * wo];
                    im2col(xi, c, h, wd, kh, kw, stride, ho, wo, &mut cols);
                    let mut gw = vec![0.0; o * ckk];
                    gemm(o, ho * wo, ckk, go, false, &cols, true, &mut gw, 0.0);
                    gw
                });
                let gx = need_x.then(|| {
                    let mut dcols = vec![0.0; ckk * ho * wo];
                    gemm(ckk, o, ho * wo, wdata, true, go, false, &mut dcols, 0.0);
                    let mut gx = vec![0.0; c * h * wd];
                    col2im(&dcols, c, h, wd, kh, kw, stride, ho, wo, &mut gx);
                    gx
                });
                (gw, gx)
            })
            .collect();
        if need_w {
            let mut gw = vec![0.0; o * ckk];
            for (pw, _) in &per_sample {
                for (a, v) in gw.iter_mut().zip(pw.as_ref().unwrap()) {
                    *a += v;
                }
            }
            self.accumulate(grads, w, Tensor::new(&ws, gw));
        }
        if need_x {
            let mut gx = Vec::with_capacity(bn * c * h * wd);
            for (_, px) in per_sample {
                gx.extend(px.unwrap());
            }
            self.accumulate(grads, x, Tensor::new(&xs, gx));
        }
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            let mut gb = vec![0.0; o];
            for i in 0..bn {
                for (oc, s) in gb.iter_mut().enumerate() {
                    let base = (i * o + oc) * ho * wo;
                    *s += gd[base..base + ho * wo].iter().sum::<f64>();
                }
            }
            self.accumulate(grads, b, Tensor::new(&[o], gb));
        }
    }

    fn convt2d_backward(&self, x: Var, w: Var, b: Option<Var>, stride: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[1], ws[2], ws[3]);
        let (ho, wo) = (gout.shape()[2], gout.shape()[3]);
        let okk = o * kh * kw;
        let gd = gout.data();
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        let per_sample: Vec<SampleGrads> = (0..bn)
            .into_par_iter()
            .map(|i| {
                let go = &gd[i * o * ho * wo..(i + 1) * o * ho * wo];
                let xi = &xd[i * c * h * wd..(i + 1) * c * h * wd];
                let mut cols = vec![0.0; okk * h * wd];
                im2col(go, o, ho, wo, kh, kw, stride, h, wd, &mut cols);
                let gw = need_w.then(|| {
                    // dW [C, OKK] = x [C, HW] @ cols^T
                    let mut gw = vec![0.0; c * okk];
                    gemm(c, h * wd, okk, xi, false, &cols, true, &mut gw, 0.0);
                    gw
                });
                let gx = need_x.then(|| {
                    let mut gx = vec![0.0; c * h * wd];
                    gemm(c, okk, h * wd, wdata, false, &cols, false, &mut gx, 0.0);
                    gx
                });
                (gw, gx)
            })
            .collect();
        if need_w {
            let mut gw = vec![0.0; c * okk];
            for (pw, _) in &per_sample {
                for (a, v) in gw.iter_mut().zip(pw.as_ref().unwrap()) {
                    *a += v;
                }
            }
            self.accumulate(grads, w, Tensor::new(&ws, gw));
        }
        if need_x {
            let mut gx = Vec::with_capacity(bn * c * h * wd);
            for (_, px) in per_sample {
                gx.extend(px.unwrap());
            }
            self.accumulate(grads, x, Tensor::new(&xs, gx));
        }
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            let mut gb = vec![0.0; o];
            for i in 0..bn {
                for (oc, s) in gb.iter_mut().enumerate() {
                    let base = (i * o + oc) * ho * wo;
                    *s += gd[base..base + ho * wo].iter().sum::<f64>();
                }
            }
            self.accumulate(grads, b, Tensor::new(&[o], gb));
        }
    }
}
