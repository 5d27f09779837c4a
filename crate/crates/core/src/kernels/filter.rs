//! Per-pixel dynamic filtering: every spatial position of every channel owns
//! its own `k x k` kernel.
//!
//! Kernel tensor layout is `[N, k*k*C, H, W]` with channel index
//! `tap * C + c` (tap-major), `tap = dy * k + dx`. Borders are zero padded.

use crate::error::{shape_err, Result};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug)]
pub(crate) struct FilterGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl FilterGeom {
    pub fn new(u: &[usize], kernels: &[usize], k: usize) -> Result<Self> {
        let [n, c, h, w] = *u else {
            return shape_err(format!("dynamic filter input must be NCHW, got {u:?}"));
        };
        if k == 0 || k % 2 == 0 {
            return shape_err(format!("dynamic filter size must be odd, got {k}"));
        }
        if kernels != [n, k * k * c, h, w] {
            return shape_err(format!(
                "dynamic filter kernels must be {:?}, got {kernels:?}",
                [n, k * k * c, h, w]
            ));
        }
        Ok(Self { n, c, h, w, k })
    }

    fn taps(&self) -> impl Iterator<Item = (usize, isize, isize)> + '_ {
        let r = (self.k / 2) as isize;
        (0..self.k * self.k).map(move |t| (t, (t / self.k) as isize - r, (t % self.k) as isize - r))
    }
}

pub(crate) fn forward<T: Element>(u: &[T], kern: &[T], g: &FilterGeom) -> Vec<T> {
    let hw = g.h * g.w;
    let mut out = vec![T::zero(); u.len()];
    for n in 0..g.n {
        for c in 0..g.c {
            let src = &u[(n * g.c + c) * hw..][..hw];
            let dst = &mut out[(n * g.c + c) * hw..][..hw];
            for (t, dy, dx) in g.taps() {
                let kp = &kern[(n * g.k * g.k * g.c + t * g.c + c) * hw..][..hw];
                for y in 0..g.h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    for x in 0..g.w {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= g.w as isize {
                            continue;
                        }
                        let i = y * g.w + x;
                        dst[i] = dst[i] + src[sy as usize * g.w + sx as usize] * kp[i];
                    }
                }
            }
        }
    }
    out
}

/// Returns `(du, dkernels)` for the requested operands.
pub(crate) fn backward<T: Element>(
    u: &[T],
    kern: &[T],
    gy: &[T],
    g: &FilterGeom,
    need: [bool; 2],
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let hw = g.h * g.w;
    let mut du = need[0].then(|| vec![T::zero(); u.len()]);
    let mut dk = need[1].then(|| vec![T::zero(); kern.len()]);
    for n in 0..g.n {
        for c in 0..g.c {
            let base = (n * g.c + c) * hw;
            for (t, dy, dx) in g.taps() {
                let kbase = (n * g.k * g.k * g.c + t * g.c + c) * hw;
                for y in 0..g.h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    for x in 0..g.w {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= g.w as isize {
                            continue;
                        }
                        let i = y * g.w + x;
                        let s = sy as usize * g.w + sx as usize;
                        let gv = gy[base + i];
                        if let Some(du) = du.as_mut() {
                            du[base + s] = du[base + s] + gv * kern[kbase + i];
                        }
                        if let Some(dk) = dk.as_mut() {
                            dk[kbase + i] = dk[kbase + i] + gv * u[base + s];
                        }
                    }
                }
            }
        }
    }
    (du, dk)
}
