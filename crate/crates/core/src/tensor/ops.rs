//! Differentiable primitives.

use rand::Rng;

use super::conv::{conv2d_backward, conv2d_forward, Conv2dSpec, ConvGeom};
use super::element::{gemm, Element};
use super::Tensor;
use crate::error::{Error, Result};

pub(super) enum Op<E: Element> {
    Add,
    Sub,
    Mul,
    Scale(E),
    AddScalar,
    MatMul { m: usize, k: usize, n: usize },
    Conv2d { geom: ConvGeom, cols: Vec<E>, has_bias: bool },
    Relu,
    LeakyRelu(E),
    Sigmoid,
    Dropout { mask: Vec<E> },
    Softmax { outer: usize, dim: usize, inner: usize },
    LogSoftmax { outer: usize, dim: usize, inner: usize },
    Log,
    Clamp { lo: E, hi: E },
    Sum,
    Mean,
    UpsampleNearest { n: usize, c: usize, h: usize, w: usize, factor: usize },
    Concat { outer: usize, inner: usize, sizes: Vec<usize> },
    Reshape,
}

fn zip_map<E: Element>(a: &[E], b: &[E], f: impl Fn(E, E) -> E) -> Vec<E> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl<E: Element> Op<E> {
    /// Gradients w.r.t. each input, given the output gradient `g` and the
    /// output values `out`. Inputs with `needs[i] == false` get `None`.
    pub(super) fn backward(
        &self,
        g: &[E],
        inputs: &[Tensor<E>],
        out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        match self {
            Op::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
            Op::Sub => vec![
                want(0).then(|| g.to_vec()),
                want(1).then(|| g.iter().map(|&v| -v).collect()),
            ],
            Op::Mul => {
                let a = inputs[0].data();
                let b = inputs[1].data();
                vec![
                    want(0).then(|| zip_map(g, &b, |x, y| x * y)),
                    want(1).then(|| zip_map(g, &a, |x, y| x * y)),
                ]
            }
            Op::Scale(c) => vec![want(0).then(|| g.iter().map(|&v| v * *c).collect())],
            Op::AddScalar | Op::Reshape => vec![want(0).then(|| g.to_vec())],
            Op::MatMul { m, k, n } => {
                let a = inputs[0].data();
                let b = inputs[1].data();
                let ga = want(0).then(|| {
                    let mut ga = vec![E::zero(); m * k];
                    gemm(*m, *n, *k, g, false, &b, true, E::zero(), &mut ga);
                    ga
                });
                let gb = want(1).then(|| {
                    let mut gb = vec![E::zero(); k * n];
                    gemm(*k, *m, *n, &a, true, g, false, E::zero(), &mut gb);
                    gb
                });
                vec![ga, gb]
            }
            Op::Conv2d { geom, cols, has_bias } => {
                let w = inputs[1].data();
                let grads = conv2d_backward(
                    geom,
                    g,
                    &w,
                    cols,
                    (want(0), want(1), *has_bias && want(2)),
                );
                let mut v = vec![grads.dx, grads.dw];
                if *has_bias {
                    v.push(grads.db);
                }
                v
            }
            Op::Relu => {
                let x = inputs[0].data();
                vec![want(0).then(|| zip_map(g, &x, |gv, xv| if xv > E::zero() { gv } else { E::zero() }))]
            }
            Op::LeakyRelu(slope) => {
                let x = inputs[0].data();
                vec![want(0).then(|| zip_map(g, &x, |gv, xv| if xv > E::zero() { gv } else { gv * *slope }))]
            }
            Op::Sigmoid => vec![want(0).then(|| zip_map(g, out, |gv, y| gv * y * (E::one() - y)))],
            Op::Dropout { mask } => vec![want(0).then(|| zip_map(g, mask, |gv, m| gv * m))],
            Op::Softmax { outer, dim, inner } => vec![want(0).then(|| {
                let mut gx = vec![E::zero(); g.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * dim * inner + i;
                        let mut dot = E::zero();
                        for d in 0..*dim {
                            let idx = base + d * inner;
                            dot = dot + g[idx] * out[idx];
                        }
                        for d in 0..*dim {
                            let idx = base + d * inner;
                            gx[idx] = out[idx] * (g[idx] - dot);
                        }
                    }
                }
                gx
            })],
            Op::LogSoftmax { outer, dim, inner } => vec![want(0).then(|| {
                let mut gx = vec![E::zero(); g.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * dim * inner + i;
                        let mut total = E::zero();
                        for d in 0..*dim {
                            total = total + g[base + d * inner];
                        }
                        for d in 0..*dim {
                            let idx = base + d * inner;
                            gx[idx] = g[idx] - out[idx].exp() * total;
                        }
                    }
                }
                gx
            })],
            Op::Log => {
                let x = inputs[0].data();
                vec![want(0).then(|| zip_map(g, &x, |gv, xv| gv / xv))]
            }
            Op::Clamp { lo, hi } => {
                let x = inputs[0].data();
                vec![want(0).then(|| {
                    zip_map(g, &x, |gv, xv| if xv >= *lo && xv <= *hi { gv } else { E::zero() })
                })]
            }
            Op::Sum => vec![want(0).then(|| vec![g[0]; inputs[0].numel()])],
            Op::Mean => {
                let n = inputs[0].numel();
                vec![want(0).then(|| vec![g[0] / E::lit(n as f64); n])]
            }
            Op::UpsampleNearest { n, c, h, w, factor } => vec![want(0).then(|| {
                let (oh, ow) = (h * factor, w * factor);
                let mut gx = vec![E::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        for x in 0..ow {
                            let j = (y / factor) * w + x / factor;
                            dst[j] = dst[j] + src[y * ow + x];
                        }
                    }
                }
                gx
            })],
            Op::Concat { outer, inner, sizes } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(idx, &sz)| {
                        let start = offset;
                        offset += sz;
                        want(idx).then(|| {
                            let mut gx = Vec::with_capacity(outer * sz * inner);
                            for o in 0..*outer {
                                let row = (o * total + start) * inner;
                                gx.extend_from_slice(&g[row..row + sz * inner]);
                            }
                            gx
                        })
                    })
                    .collect()
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<E: Element> Tensor<E> {
    fn check_same_shape(&self, other: &Tensor<E>, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("operands have shapes {:?} and {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    fn unary(&self, op: Op<E>, f: impl Fn(E) -> E) -> Tensor<E> {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::record(data, self.shape().to_vec(), op, &[self])
    }

    fn binary(&self, other: &Tensor<E>, op: Op<E>, name: &'static str, f: impl Fn(E, E) -> E) -> Result<Tensor<E>> {
        self.check_same_shape(other, name)?;
        let data = zip_map(&self.data(), &other.data(), f);
        Ok(Tensor::record(data, self.shape().to_vec(), op, &[self, other]))
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        self.unary(Op::Scale(c), |v| v * c)
    }

    pub fn add_scalar(&self, c: E) -> Tensor<E> {
        self.unary(Op::AddScalar, |v| v + c)
    }

    /// `[m, k] · [k, n] -> [m, n]`
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape("matmul", format!("cannot multiply {a:?} by {b:?}")));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![E::zero(); m * n];
        gemm(m, k, n, &self.data(), false, &other.data(), false, E::zero(), &mut out);
        Ok(Tensor::record(out, vec![m, n], Op::MatMul { m, k, n }, &[self, other]))
    }

    /// NCHW convolution with an `[O, C, KH, KW]` kernel and optional `[O]` bias.
    pub fn conv2d(&self, weight: &Tensor<E>, bias: Option<&Tensor<E>>, spec: Conv2dSpec) -> Result<Tensor<E>> {
        let geom = ConvGeom::new(self.shape(), weight.shape(), spec)?;
        if let Some(b) = bias {
            if b.shape() != [geom.o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} does not match {} output channels", b.shape(), geom.o),
                ));
            }
        }
        let (out, cols) = {
            let x = self.data();
            let w = weight.data();
            let b = bias.map(|b| b.data());
            conv2d_forward(&geom, &x, &w, b.as_deref().map(|v| v.as_slice()))
        };
        let shape = vec![geom.n, geom.o, geom.ho, geom.wo];
        let has_bias = bias.is_some();
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        // Columns are only needed if the result lands on the tape.
        let track = super::grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let cols = if track { cols } else { Vec::new() };
        Ok(Tensor::record(out, shape, Op::Conv2d { geom, cols, has_bias }, &inputs))
    }

    pub fn relu(&self) -> Tensor<E> {
        self.unary(Op::Relu, |v| if v > E::zero() { v } else { E::zero() })
    }

    pub fn leaky_relu(&self, slope: E) -> Tensor<E> {
        self.unary(Op::LeakyRelu(slope), |v| if v > E::zero() { v } else { v * slope })
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        self.unary(Op::Sigmoid, |v| {
            if v >= E::zero() {
                E::one() / (E::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (E::one() + e)
            }
        })
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)` so the
    /// inference path (`train == false`) is the identity.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, train: bool, rng: &mut R) -> Result<Tensor<E>> {
        if !(0.0..1.0).contains(&rate) || rate.is_nan() {
            return Err(Error::Argument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = E::lit(1.0 / (1.0 - rate));
        let mask: Vec<E> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < rate { E::zero() } else { keep })
            .collect();
        let data = zip_map(&self.data(), &mask, |x, m| x * m);
        Ok(Tensor::record(data, self.shape().to_vec(), Op::Dropout { mask }, &[self]))
    }

    fn axis_checked(&self, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        if axis >= self.ndim() {
            return Err(Error::shape(op, format!("axis {axis} out of range for shape {:?}", self.shape())));
        }
        Ok(split_axis(self.shape(), axis))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        let (outer, dim, inner) = self.axis_checked(axis, "softmax")?;
        let x = self.data();
        let mut y = vec![E::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let mut max = E::neg_infinity();
                for d in 0..dim {
                    max = max.max(x[base + d * inner]);
                }
                let mut total = E::zero();
                for d in 0..dim {
                    let e = (x[base + d * inner] - max).exp();
                    y[base + d * inner] = e;
                    total = total + e;
                }
                for d in 0..dim {
                    y[base + d * inner] = y[base + d * inner] / total;
                }
            }
        }
        drop(x);
        Ok(Tensor::record(y, self.shape().to_vec(), Op::Softmax { outer, dim, inner }, &[self]))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<E>> {
        let (outer, dim, inner) = self.axis_checked(axis, "log_softmax")?;
        let x = self.data();
        let mut y = vec![E::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let mut max = E::neg_infinity();
                for d in 0..dim {
                    max = max.max(x[base + d * inner]);
                }
                let mut total = E::zero();
                for d in 0..dim {
                    total = total + (x[base + d * inner] - max).exp();
                }
                let lse = max + total.ln();
                for d in 0..dim {
                    y[base + d * inner] = x[base + d * inner] - lse;
                }
            }
        }
        drop(x);
        Ok(Tensor::record(y, self.shape().to_vec(), Op::LogSoftmax { outer, dim, inner }, &[self]))
    }

    /// Natural logarithm. Callers clamp first when inputs may touch zero.
    pub fn log(&self) -> Tensor<E> {
        self.unary(Op::Log, |v| v.ln())
    }

    pub fn clamp(&self, lo: E, hi: E) -> Tensor<E> {
        self.unary(Op::Clamp { lo, hi }, |v| v.max(lo).min(hi))
    }

    pub fn sum(&self) -> Tensor<E> {
        let s = self.data().iter().copied().sum();
        Tensor::record(vec![s], Vec::new(), Op::Sum, &[self])
    }

    pub fn mean(&self) -> Tensor<E> {
        let n = self.numel().max(1);
        let s: E = self.data().iter().copied().sum();
        Tensor::record(vec![s / E::lit(n as f64)], Vec::new(), Op::Mean, &[self])
    }

    /// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("upsample_nearest", format!("expected NCHW, got {s:?}")));
        }
        if factor == 0 {
            return Err(Error::Argument("upsample factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let x = self.data();
        let mut y = vec![E::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut y[plane * oh * ow..(plane + 1) * oh * ow];
            for yy in 0..oh {
                let srow = &src[(yy / factor) * w..(yy / factor + 1) * w];
                for xx in 0..ow {
                    dst[yy * ow + xx] = srow[xx / factor];
                }
            }
        }
        drop(x);
        Ok(Tensor::record(
            y,
            vec![n, c, oh, ow],
            Op::UpsampleNearest { n, c, h, w, factor },
            &[self],
        ))
    }

    pub fn concat(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let (outer, _, inner) = first.axis_checked(axis, "concat")?;
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let ok = p.ndim() == first.ndim()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} incompatible with {:?} along axis {axis}", p.shape(), first.shape()),
                ));
            }
            sizes.push(p.shape()[axis]);
        }
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        let guards: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (g, &sz) in guards.iter().zip(&sizes) {
                out.extend_from_slice(&g[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        drop(guards);
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::record(out, shape, Op::Concat { outer, inner, sizes }, parts))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::record(self.to_vec(), shape.to_vec(), Op::Reshape, &[self]))
    }
}
