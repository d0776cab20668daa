//! Slice-level forward/backward kernels behind the tape operations.
//!
//! Convolution lowers each sample to an im2col matrix and calls GEMM. Every
//! reduction runs in a fixed order so results are bit-reproducible.

use super::Real;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv2dOptions {
    pub const fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
        }
    }

    /// Stride 1, padding chosen so the output keeps the input extent.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(1, dilation, dilation * (kernel - 1) / 2)
    }
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self::new(1, 1, 0)
    }
}

/// Resolved geometry of one convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub opts: Conv2dOptions,
}

impl ConvGeom {
    pub fn new(input: [usize; 4], weight: [usize; 4], opts: Conv2dOptions) -> Result<Self> {
        let [batch, cin, h, w] = input;
        let [cout, wcin, kh, kw] = weight;
        if cin != wcin {
            return Err(shape_err!(
                "conv2d: input {input:?} has {cin} channels but weight {weight:?} expects {wcin}"
            ));
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(shape_err!(
                "conv2d: stride and dilation must be ≥ 1, got {opts:?}"
            ));
        }
        let span_h = opts.dilation * (kh - 1) + 1;
        let span_w = opts.dilation * (kw - 1) + 1;
        let (ph, pw) = (h + 2 * opts.padding, w + 2 * opts.padding);
        if span_h > ph || span_w > pw {
            return Err(shape_err!(
                "conv2d: effective kernel {span_h}x{span_w} exceeds padded input {ph}x{pw} \
                 (input {input:?}, weight {weight:?}, {opts:?})"
            ));
        }
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho: (ph - span_h) / opts.stride + 1,
            wo: (pw - span_w) / opts.stride + 1,
            opts,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1×1, stride-1, unpadded convolution can use the input as its own column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }

    /// Source coordinate for output index `o` and kernel tap `k`, or `None` if it lands in padding.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos =
            (o * self.opts.stride + k * self.opts.dilation) as isize - self.opts.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.cin {
            let xc = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        match self.src(oy, ki, self.h) {
                            None => line.iter_mut().for_each(|v| *v = T::zero()),
                            Some(iy) => {
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.src(ox, kj, self.w) {
                                        Some(ix) => xc[iy * self.w + ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.cin {
            let dxc = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let Some(iy) = self.src(oy, ki, self.h) else {
                            continue;
                        };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.src(ox, kj, self.w) {
                                dxc[iy * self.w + ix] =
                                    dxc[iy * self.w + ix] + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let (k, plane) = (g.patch_len(), g.out_plane());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * plane;
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for b in 0..g.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        let rhs: &[T] = if g.is_pointwise() {
            xb
        } else {
            g.im2col(xb, &mut cols);
            &cols
        };
        T::gemm(g.cout, k, plane, weight, false, rhs, false, ob, false);
        for (oc, row) in ob.chunks_exact_mut(plane).enumerate() {
            let bv = bias[oc];
            row.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dout: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let [need_x, need_w, need_b] = need;
    let (k, plane) = (g.patch_len(), g.out_plane());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * plane;
    let mut dx = need_x.then(|| vec![T::zero(); g.batch * in_len]);
    let mut dw = need_w.then(|| vec![T::zero(); g.cout * k]);
    let mut db = need_b.then(|| vec![T::zero(); g.cout]);
    let pointwise = g.is_pointwise();
    let mut cols = if need_w && !pointwise {
        vec![T::zero(); k * plane]
    } else {
        Vec::new()
    };
    let mut dcols = if need_x && !pointwise {
        vec![T::zero(); k * plane]
    } else {
        Vec::new()
    };
    for b in 0..g.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let gb = &dout[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let rhs: &[T] = if pointwise {
                xb
            } else {
                g.im2col(xb, &mut cols);
                &cols
            };
            T::gemm(g.cout, plane, k, gb, false, rhs, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                T::gemm(k, g.cout, plane, weight, true, gb, false, dxb, true);
            } else {
                T::gemm(k, g.cout, plane, weight, true, gb, false, &mut dcols, false);
                g.col2im(&dcols, dxb);
            }
        }
        if let Some(db) = db.as_mut() {
            for (oc, row) in gb.chunks_exact(plane).enumerate() {
                db[oc] = db[oc] + row.iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// 2×2 / stride-2 max pooling. Returns the pooled values and the flat input index of
/// each window's maximum (first occurrence in row-major window order on ties).
pub(crate) fn maxpool2x2_forward<T: Real>(x: &[T], dims: [usize; 4]) -> (Vec<T>, Vec<usize>) {
    let [b, c, h, w] = dims;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2x_forward<T: Real>(x: &[T], dims: [usize; 4]) -> Vec<T> {
    let [b, c, h, w] = dims;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * c * ho * wo];
    for plane in 0..b * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[oy * wo + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(g: &[T], dims: [usize; 4]) -> Vec<T> {
    let [b, c, h, w] = dims;
    let wo = 2 * w;
    let mut dx = vec![T::zero(); b * c * h * w];
    for plane in 0..b * c {
        let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let o = 2 * y * wo + 2 * x;
                dst[y * w + x] = src[o] + src[o + 1] + src[o + wo] + src[o + wo + 1];
            }
        }
    }
    dx
}

/// Softmax across the channel axis of a `[B,C,H,W]` buffer.
pub(crate) fn softmax_channels_forward<T: Real>(x: &[T], dims: [usize; 4]) -> Vec<T> {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let mut out = vec![T::zero(); x.len()];
    for n in 0..b {
        let base = n * c * plane;
        for p in 0..plane {
            let at = |k: usize| base + k * plane + p;
            let max = (0..c).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..c {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                total = total + e;
            }
            for k in 0..c {
                out[at(k)] = out[at(k)] / total;
            }
        }
    }
    out
}

pub(crate) fn softmax_channels_backward<T: Real>(y: &[T], g: &[T], dims: [usize; 4]) -> Vec<T> {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let mut dx = vec![T::zero(); y.len()];
    for n in 0..b {
        let base = n * c * plane;
        for p in 0..plane {
            let at = |k: usize| base + k * plane + p;
            let dot: T = (0..c).map(|k| g[at(k)] * y[at(k)]).sum();
            for k in 0..c {
                dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
            }
        }
    }
    dx
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
