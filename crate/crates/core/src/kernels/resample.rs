//! Bilinear resampling with half-pixel sample centers (`align_corners = false`).

use crate::tensor::Element;

/// Two taps per output coordinate along one axis.
#[derive(Clone, Copy, Debug)]
struct Taps {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn axis_taps(src: usize, dst: usize) -> Vec<Taps> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = pos - i0 as f64;
            Taps { i0, i1, w0: 1.0 - frac, w1: frac }
        })
        .collect()
}

/// Resamples `planes` planes of `h x w` to `oh x ow`.
pub(crate) fn forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    if (h, w) == (oh, ow) {
        return x.to_vec();
    }
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let (r0, r1) = (&src[a.i0 * w..(a.i0 + 1) * w], &src[a.i1 * w..(a.i1 + 1) * w]);
            for (ox, b) in tx.iter().enumerate() {
                let v = a.w0 * (b.w0 * r0[b.i0].to_f64().unwrap() + b.w1 * r0[b.i1].to_f64().unwrap())
                    + a.w1 * (b.w0 * r1[b.i0].to_f64().unwrap() + b.w1 * r1[b.i1].to_f64().unwrap());
                dst[oy * ow + ox] = T::lit(v);
            }
        }
    }
    out
}

/// Adjoint of [`forward`]: scatters output cotangents back onto the source grid.
pub(crate) fn backward<T: Element>(gy: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    if (h, w) == (oh, ow) {
        return gy.to_vec();
    }
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut acc = vec![0.0f64; h * w];
    let mut out = Vec::with_capacity(planes * h * w);
    for pl in 0..planes {
        acc.fill(0.0);
        let g = &gy[pl * oh * ow..(pl + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = g[oy * ow + ox].to_f64().unwrap();
                acc[a.i0 * w + b.i0] += a.w0 * b.w0 * v;
                acc[a.i0 * w + b.i1] += a.w0 * b.w1 * v;
                acc[a.i1 * w + b.i0] += a.w1 * b.w0 * v;
                acc[a.i1 * w + b.i1] += a.w1 * b.w1 * v;
            }
        }
        out.extend(acc.iter().map(|&v| T::lit(v)));
    }
    out
}
