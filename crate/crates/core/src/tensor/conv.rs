use super::element::{gemm, Element};
use crate::error::{Error, Result};

/// Stride and zero-padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Conv2dSpec { stride, pad }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, pad: 0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], spec: Conv2dSpec) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW input and OIHW weight, got {input:?} and {weight:?}"),
            ));
        }
        if spec.stride == 0 {
            return Err(Error::Argument("conv2d stride must be positive".into()));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, ci, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if ci != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but weight expects {ci}"),
            ));
        }
        let (hp, wp) = (h + 2 * spec.pad, w + 2 * spec.pad);
        if kh == 0 || kw == 0 || hp < kh || wp < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit padded input {hp}x{wp}"),
            ));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.pad,
            ho: (hp - kh) / spec.stride + 1,
            wo: (wp - kw) / spec.stride + 1,
        })
    }

    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image `[C, H, W]` into `[C*KH*KW, HO*WO]` columns.
fn im2col<E: Element>(g: &ConvGeom, x: &[E], cols: &mut [E]) {
    if g.is_pointwise() {
        cols.copy_from_slice(x);
        return;
    }
    let l = g.out_hw();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * l;
                let dst = &mut cols[row..row + l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            E::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `[C, H, W]`.
fn col2im<E: Element>(g: &ConvGeom, cols: &[E], dx: &mut [E]) {
    if g.is_pointwise() {
        dx.iter_mut().zip(cols).for_each(|(a, b)| *a = *a + *b);
        return;
    }
    let l = g.out_hw();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * l;
                let src = &cols[row..row + l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output `[N, O, HO, WO]` and the unfolded columns of every image.
pub(crate) fn conv2d_forward<E: Element>(
    g: &ConvGeom,
    x: &[E],
    w: &[E],
    bias: Option<&[E]>,
) -> (Vec<E>, Vec<E>) {
    let (p, l) = (g.patch(), g.out_hw());
    let in_img = g.c * g.h * g.w;
    let out_img = g.o * l;
    let mut cols = vec![E::zero(); g.n * p * l];
    let mut out = vec![E::zero(); g.n * out_img];
    for n in 0..g.n {
        let col = &mut cols[n * p * l..(n + 1) * p * l];
        im2col(g, &x[n * in_img..(n + 1) * in_img], col);
        let y = &mut out[n * out_img..(n + 1) * out_img];
        if let Some(b) = bias {
            for (o, row) in y.chunks_mut(l).enumerate() {
                row.iter_mut().for_each(|v| *v = b[o]);
            }
            gemm(g.o, p, l, w, false, col, false, E::one(), y);
        } else {
            gemm(g.o, p, l, w, false, col, false, E::zero(), y);
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads<E> {
    pub dx: Option<Vec<E>>,
    pub dw: Option<Vec<E>>,
    pub db: Option<Vec<E>>,
}

pub(crate) fn conv2d_backward<E: Element>(
    g: &ConvGeom,
    gout: &[E],
    w: &[E],
    cols: &[E],
    need: (bool, bool, bool),
) -> ConvGrads<E> {
    let (p, l) = (g.patch(), g.out_hw());
    let in_img = g.c * g.h * g.w;
    let out_img = g.o * l;
    let mut dx = need.0.then(|| vec![E::zero(); g.n * in_img]);
    let mut dw = need.1.then(|| vec![E::zero(); g.o * p]);
    let mut db = need.2.then(|| vec![E::zero(); g.o]);
    let mut dcol = vec![E::zero(); if need.0 { p * l } else { 0 }];
    for n in 0..g.n {
        let go = &gout[n * out_img..(n + 1) * out_img];
        if let Some(dw) = dw.as_mut() {
            gemm(g.o, l, p, go, false, &cols[n * p * l..(n + 1) * p * l], true, E::one(), dw);
        }
        if let Some(db) = db.as_mut() {
            for (o, row) in go.chunks(l).enumerate() {
                db[o] = db[o] + row.iter().copied().sum::<E>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            gemm(p, g.o, l, w, true, go, false, E::zero(), &mut dcol);
            col2im(g, &dcol, &mut dx[n * in_img..(n + 1) * in_img]);
        }
    }
    ConvGrads { dx, dw, db }
}
