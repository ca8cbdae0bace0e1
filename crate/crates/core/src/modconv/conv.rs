//! Plain 2-D cross-correlation with zero padding, via im2col and a dense
//! GEMM, plus its exact backward pass.

use crate::error::{domain, Result};
use crate::tensor::Tensor;

/// Row-major view with explicit strides, for GEMM operands.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: isize,
    col_stride: isize,
}

impl<'a> View<'a> {
    fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = a·b + beta·c` with `c` row-major `a.rows x b.cols`.
fn gemm(a: View, b: View, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(c.len(), a.rows * b.cols);
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the views cover their slices for the given extents and
    // strides, and `c` is an exclusively borrowed row-major buffer of
    // `a.rows * b.cols` elements.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn pad_h(&self) -> usize {
        self.kh / 2
    }

    pub fn pad_w(&self) -> usize {
        self.kw / 2
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad_h() - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad_w() - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }
}

fn conv_shape(x: &Tensor, weights: &Tensor, stride: usize) -> Result<ConvShape> {
    let (in_c, h, w) = x.dims3()?;
    let (out_c, wc, kh, kw) = match *weights.shape() {
        [o, i, kh, kw] => (o, i, kh, kw),
        ref s => return Err(domain(format!("kernel must be [outC,inC,kH,kW], got {s:?}"))),
    };
    if wc != in_c {
        return Err(domain(format!(
            "kernel expects {wc} input channels, input has {in_c}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(domain(format!("kernel extent {kh}x{kw} must be odd")));
    }
    if stride == 0 {
        return Err(domain("stride must be >= 1"));
    }
    if h == 0 || w == 0 {
        return Err(domain("empty convolution input"));
    }
    Ok(ConvShape {
        in_c,
        out_c,
        kh,
        kw,
        h,
        w,
        stride,
    })
}

/// Output columns `ox` whose tap `ix = ox*stride + k - pad` lies inside
/// `[0, w)`, as a half-open range.
fn valid_range(k: usize, pad: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    // ox*stride + k >= pad  and  ox*stride + k - pad <= w - 1
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if w + pad > k { ((w + pad - k - 1) / stride + 1).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], s: &ConvShape) -> Vec<f64> {
    let (oh, ow) = (s.out_h(), s.out_w());
    let n = oh * ow;
    let (ph, pw) = (s.pad_h(), s.pad_w());
    let mut cols = vec![0.0; s.patch() * n];
    for c in 0..s.in_c {
        let plane = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ky in 0..s.kh {
            let (ylo, yhi) = valid_range(ky, ph, s.stride, s.h, oh);
            for kx in 0..s.kw {
                let (xlo, xhi) = valid_range(kx, pw, s.stride, s.w, ow);
                let row = (c * s.kh + ky) * s.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in ylo..yhi {
                    let iy = oy * s.stride + ky - ph;
                    let src_row = &plane[iy * s.w..(iy + 1) * s.w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if s.stride == 1 {
                        let off = xlo + kx - pw;
                        dst_row[xlo..xhi].copy_from_slice(&src_row[off..off + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            dst_row[ox] = src_row[ox * s.stride + kx - pw];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], s: &ConvShape) -> Vec<f64> {
    let (oh, ow) = (s.out_h(), s.out_w());
    let n = oh * ow;
    let (ph, pw) = (s.pad_h(), s.pad_w());
    let mut x = vec![0.0; s.in_c * s.h * s.w];
    for c in 0..s.in_c {
        let plane = &mut x[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ky in 0..s.kh {
            let (ylo, yhi) = valid_range(ky, ph, s.stride, s.h, oh);
            for kx in 0..s.kw {
                let (xlo, xhi) = valid_range(kx, pw, s.stride, s.w, ow);
                let row = (c * s.kh + ky) * s.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in ylo..yhi {
                    let iy = oy * s.stride + ky - ph;
                    let dst_row = &mut plane[iy * s.w..(iy + 1) * s.w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    if s.stride == 1 {
                        let off = xlo + kx - pw;
                        for (d, v) in dst_row[off..off + (xhi - xlo)].iter_mut().zip(&src_row[xlo..xhi]) {
                            *d += v;
                        }
                    } else {
                        for ox in xlo..xhi {
                            dst_row[ox * s.stride + kx - pw] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Stride-1 layers with this many output channels or fewer skip im2col and
/// accumulate shifted rows directly.
const DIRECT_MAX_OUT: usize = 4;

fn use_direct(s: &ConvShape) -> bool {
    s.stride == 1 && s.out_c <= DIRECT_MAX_OUT && !s.is_pointwise()
}

/// Calls `f(out_row_range, in_row_offset)` for every in-bounds row segment
/// of tap `(ky, kx)`; both frames are `h x w` at stride 1.
fn for_each_tap_row(s: &ConvShape, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (ylo, yhi) = valid_range(ky, s.pad_h(), 1, s.h, s.h);
    let (xlo, xhi) = valid_range(kx, s.pad_w(), 1, s.w, s.w);
    for oy in ylo..yhi {
        let iy = oy + ky - s.pad_h();
        f(oy * s.w + xlo, iy * s.w + xlo + kx - s.pad_w(), xhi - xlo);
    }
}

fn direct_forward(x: &[f64], w: &[f64], s: &ConvShape, out: &mut [f64]) {
    let plane = s.h * s.w;
    for o in 0..s.out_c {
        let dst = &mut out[o * plane..(o + 1) * plane];
        for c in 0..s.in_c {
            let src = &x[c * plane..(c + 1) * plane];
            for ky in 0..s.kh {
                for kx in 0..s.kw {
                    let wv = w[((o * s.in_c + c) * s.kh + ky) * s.kw + kx];
                    for_each_tap_row(s, ky, kx, |d0, s0, len| {
                        for (d, v) in dst[d0..d0 + len].iter_mut().zip(&src[s0..s0 + len]) {
                            *d += wv * v;
                        }
                    });
                }
            }
        }
    }
}

fn direct_backward(x: &[f64], w: &[f64], s: &ConvShape, up: &[f64], gw: &mut [f64], gx: Option<&mut [f64]>) {
    let plane = s.h * s.w;
    for o in 0..s.out_c {
        let g = &up[o * plane..(o + 1) * plane];
        for c in 0..s.in_c {
            let src = &x[c * plane..(c + 1) * plane];
            for ky in 0..s.kh {
                for kx in 0..s.kw {
                    let mut acc = 0.0;
                    for_each_tap_row(s, ky, kx, |d0, s0, len| {
                        acc += g[d0..d0 + len].iter().zip(&src[s0..s0 + len]).map(|(a, b)| a * b).sum::<f64>();
                    });
                    gw[((o * s.in_c + c) * s.kh + ky) * s.kw + kx] = acc;
                }
            }
        }
    }
    if let Some(gx) = gx {
        for c in 0..s.in_c {
            let dst = &mut gx[c * plane..(c + 1) * plane];
            for o in 0..s.out_c {
                let g = &up[o * plane..(o + 1) * plane];
                for ky in 0..s.kh {
                    for kx in 0..s.kw {
                        let wv = w[((o * s.in_c + c) * s.kh + ky) * s.kw + kx];
                        for_each_tap_row(s, ky, kx, |d0, s0, len| {
                            for (d, v) in dst[s0..s0 + len].iter_mut().zip(&g[d0..d0 + len]) {
                                *d += wv * v;
                            }
                        });
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [inC,H,W]` with `weights: [outC,inC,kH,kW]`,
/// zero padding `k/2`, the given stride, and an optional bias.
pub fn conv2d(x: &Tensor, weights: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let s = conv_shape(x, weights, stride)?;
    if let Some(b) = bias {
        if b.shape() != [s.out_c] {
            return Err(domain(format!("bias must be [{}], got {:?}", s.out_c, b.shape())));
        }
    }
    let n = s.out_h() * s.out_w();
    let mut out = vec![0.0; s.out_c * n];
    if let Some(b) = bias {
        for (o, &bv) in b.data().iter().enumerate() {
            out[o * n..(o + 1) * n].fill(bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    let wv = View::new(weights.data(), s.out_c, s.patch());
    if use_direct(&s) {
        direct_forward(x.data(), weights.data(), &s, &mut out);
    } else if s.is_pointwise() {
        gemm(wv, View::new(x.data(), s.patch(), n), &mut out, beta);
    } else {
        let cols = im2col(x.data(), &s);
        gemm(wv, View::new(&cols, s.patch(), n), &mut out, beta);
    }
    Tensor::from_vec(&[s.out_c, s.out_h(), s.out_w()], out)
}

/// Gradients of [`conv2d`]: `(grad_x, grad_weights, grad_bias)`.
/// `grad_x` is skipped (returned as `None`) when `need_input` is false.
pub fn conv2d_vjp(
    x: &Tensor,
    weights: &Tensor,
    stride: usize,
    upstream: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let s = conv_shape(x, weights, stride)?;
    let n = s.out_h() * s.out_w();
    if upstream.shape() != [s.out_c, s.out_h(), s.out_w()] {
        return Err(domain(format!(
            "upstream {:?} does not match conv output [{}, {}, {}]",
            upstream.shape(),
            s.out_c,
            s.out_h(),
            s.out_w()
        )));
    }
    let up = View::new(upstream.data(), s.out_c, n);
    let grad_b: Vec<f64> = upstream.data().chunks_exact(n).map(|r| r.iter().sum()).collect();

    let mut grad_w = vec![0.0; s.out_c * s.patch()];
    let wv = View::new(weights.data(), s.out_c, s.patch());
    let grad_x = if use_direct(&s) {
        let mut gx = need_input.then(|| vec![0.0; s.in_c * s.h * s.w]);
        direct_backward(x.data(), weights.data(), &s, upstream.data(), &mut grad_w, gx.as_deref_mut());
        gx
    } else if s.is_pointwise() {
        gemm(up, View::new(x.data(), s.patch(), n).t(), &mut grad_w, 0.0);
        need_input.then(|| {
            let mut gx = vec![0.0; s.patch() * n];
            gemm(wv.t(), up, &mut gx, 0.0);
            gx
        })
    } else {
        let cols = im2col(x.data(), &s);
        gemm(up, View::new(&cols, s.patch(), n).t(), &mut grad_w, 0.0);
        need_input.then(|| {
            let mut gcols = cols;
            gemm(wv.t(), up, &mut gcols, 0.0);
            col2im(&gcols, &s)
        })
    };
    Ok((
        grad_x
            .map(|g| Tensor::from_vec(&[s.in_c, s.h, s.w], g))
            .transpose()?,
        Tensor::from_vec(weights.shape(), grad_w)?,
        Tensor::from_vec(&[s.out_c], grad_b)?,
    ))
}
