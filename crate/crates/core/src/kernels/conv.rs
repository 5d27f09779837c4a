//! 2D cross-correlation via im2col + GEMM, one batch item at a time.

use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Element, Mat, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = *x else {
            return shape_err(format!("conv2d input must be NCHW, got {x:?}"));
        };
        let [cout, wcin, kh, kw] = *weight else {
            return shape_err(format!("conv2d weight must be [Cout,Cin,kh,kw], got {weight:?}"));
        };
        if wcin != cin {
            return shape_err(format!(
                "conv2d channel mismatch: input {x:?} has Cin={cin}, weight {weight:?} expects {wcin}"
            ));
        }
        if bias != [cout] {
            return shape_err(format!("conv2d bias must be [{cout}], got {bias:?}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return shape_err(format!("conv2d kernel extents must be odd, got {kh}x{kw}"));
        }
        if stride == 0 {
            return shape_err("conv2d stride must be positive");
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err(format!("conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { n, cin, h, w, cout, kh, kw, stride, pad, oh, ow })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx { (g.w + g.pad - kx - 1) / g.stride + 1 } else { 0 };
    (lo.min(g.ow), hi.min(g.ow).max(lo.min(g.ow)))
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let out = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let seg = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    if hi > lo {
                        let start = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            seg[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (d, s) in seg[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                if hi <= lo {
                    continue;
                }
                let start = lo * g.stride + kx - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(s) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(s) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), bias.shape(), stride, pad)?;
    let (k, p) = (g.k(), g.p());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;
    let mut out = vec![T::zero(); g.n * out_per];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for ni in 0..g.n {
        let xin = &x.data()[ni * in_per..(ni + 1) * in_per];
        let y = &mut out[ni * out_per..(ni + 1) * out_per];
        for (co, row) in y.chunks_exact_mut(p).enumerate() {
            row.fill(bias.data()[co]);
        }
        let b = if g.is_pointwise() {
            Mat::new(xin, k, p)
        } else {
            im2col(xin, &g, &mut cols);
            Mat::new(&cols, k, p)
        };
        gemm(Mat::new(weight.data(), g.cout, k), b, T::one(), y);
    }
    Tensor::new(&[g.n, g.cout, g.oh, g.ow], out)
}

/// Gradients of a conv2d with respect to each operand that was requested.
pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
    gy: &[T],
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), bias.shape(), stride, pad)?;
    let (k, p) = (g.k(), g.p());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;
    let mut dx = need[0].then(|| vec![T::zero(); x.numel()]);
    let mut dw = need[1].then(|| vec![T::zero(); weight.numel()]);
    let mut db = need[2].then(|| vec![T::zero(); g.cout]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for ni in 0..g.n {
        let gyn = &gy[ni * out_per..(ni + 1) * out_per];
        if let Some(db) = db.as_mut() {
            for (co, row) in gyn.chunks_exact(p).enumerate() {
                db[co] = row.iter().fold(db[co], |acc, &v| acc + v);
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xin = &x.data()[ni * in_per..(ni + 1) * in_per];
            let colsm = if g.is_pointwise() {
                Mat::t(xin, p, k)
            } else {
                im2col(xin, &g, &mut cols);
                Mat::t(&cols, p, k)
            };
            gemm(Mat::new(gyn, g.cout, p), colsm, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[ni * in_per..(ni + 1) * in_per];
            if g.is_pointwise() {
                gemm(Mat::t(weight.data(), k, g.cout), Mat::new(gyn, g.cout, p), T::one(), dxn);
            } else {
                gemm(Mat::t(weight.data(), k, g.cout), Mat::new(gyn, g.cout, p), T::zero(), &mut cols);
                col2im_add(&cols, &g, dxn);
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}
