//! Unitary 2D DFT and amplitude/phase algebra.
//!
//! Every transform is applied independently to the trailing `H x W` plane of
//! the tensor, so `[N, C, H, W]` feature maps and `[3, H, W]` images are both
//! accepted. Both directions carry a `1/sqrt(HW)` factor, which makes the
//! transform unitary (Parseval holds with equality).
//!
//! Inside autodiff graphs a spectrum is a single tensor with a trailing axis
//! of length 2 holding `(re, im)`; [`Spectrum`] is the split form used by the
//! standalone toolkit.

use std::cell::RefCell;
use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Singularity guard used by the amplitude and phase derivatives.
pub const GRAD_EPS: f64 = 1e-8;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Split real/imaginary planes of a per-channel 2D transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<T = f32> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

impl<T: Element> Spectrum<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        re.expect_same_shape(&im, "spectrum re/im")?;
        Ok(Self { re, im })
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    /// Interleaves into the `[..., 2]` graph layout.
    pub fn to_packed(&self) -> Tensor<T> {
        let mut shape = self.re.shape().to_vec();
        shape.push(2);
        let data = self.re.data().iter().zip(self.im.data()).flat_map(|(&r, &i)| [r, i]).collect();
        Tensor::new(&shape, data).expect("packed shape")
    }

    pub fn from_packed(packed: &Tensor<T>) -> Result<Self> {
        let shape = packed_base_shape(packed.shape())?;
        let re = packed.data().iter().step_by(2).copied().collect();
        let im = packed.data().iter().skip(1).step_by(2).copied().collect();
        Ok(Self { re: Tensor::new(&shape, re)?, im: Tensor::new(&shape, im)? })
    }
}

pub(crate) fn packed_base_shape(shape: &[usize]) -> Result<Vec<usize>> {
    match shape.split_last() {
        Some((2, base)) if base.len() >= 2 => Ok(base.to_vec()),
        _ => shape_err(format!("expected packed spectrum [..., H, W, 2], got {shape:?}")),
    }
}

fn plane_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return shape_err(format!("2D transform needs rank >= 2, got {shape:?}"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h == 0 || w == 0 {
        return shape_err(format!("2D transform needs H, W >= 1, got {shape:?}"));
    }
    let planes = shape[..shape.len() - 2].iter().product();
    Ok((planes, h, w))
}

/// In-place unitary transform of one `h x w` complex plane.
fn fft2_plane(buf: &mut [Complex<f64>], h: usize, w: usize, direction: FftDirection) {
    let (row, col) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft(w, direction), p.plan_fft(h, direction))
    });
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

/// Frequencies that are their own conjugate partner. The transform of a real
/// plane is exactly real there.
fn self_conjugate(i: usize, j: usize, h: usize, w: usize) -> bool {
    (2 * i) % h == 0 && (2 * j) % w == 0
}

/// Forward transform of a real tensor into packed `[..., H, W, 2]` form.
pub(crate) fn dft2_packed<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = plane_dims(x.shape())?;
    let mut out = Vec::with_capacity(2 * x.numel());
    let mut buf = vec![Complex::new(0.0, 0.0); h * w];
    for pl in 0..planes {
        for (b, v) in buf.iter_mut().zip(&x.data()[pl * h * w..(pl + 1) * h * w]) {
            *b = Complex::new(v.to_f64().unwrap(), 0.0);
        }
        fft2_plane(&mut buf, h, w, FftDirection::Forward);
        for (idx, z) in buf.iter().enumerate() {
            let im = if self_conjugate(idx / w, idx % w, h, w) { 0.0 } else { z.im };
            out.push(T::lit(z.re));
            out.push(T::lit(im));
        }
    }
    let mut shape = x.shape().to_vec();
    shape.push(2);
    Tensor::new(&shape, out)
}

/// Inverse transform of a packed spectrum. Returns the real part and the
/// largest discarded imaginary magnitude.
pub(crate) fn idft2_packed<T: Element>(s: &Tensor<T>) -> Result<(Tensor<T>, f64)> {
    let shape = packed_base_shape(s.shape())?;
    let (planes, h, w) = plane_dims(&shape)?;
    let mut out = Vec::with_capacity(s.numel() / 2);
    let mut residue = 0.0f64;
    let mut buf = vec![Complex::new(0.0, 0.0); h * w];
    for pl in 0..planes {
        let src = &s.data()[2 * pl * h * w..2 * (pl + 1) * h * w];
        for (b, pair) in buf.iter_mut().zip(src.chunks_exact(2)) {
            *b = Complex::new(pair[0].to_f64().unwrap(), pair[1].to_f64().unwrap());
        }
        fft2_plane(&mut buf, h, w, FftDirection::Inverse);
        for z in &buf {
            residue = residue.max(z.im.abs());
            out.push(T::lit(z.re));
        }
    }
    Ok((Tensor::new(&shape, out)?, residue))
}

// Spectra here are far from overflow, so the plain form is accurate and much cheaper than `hypot`.
fn modulus(re: f64, im: f64) -> f64 {
    (re * re + im * im).sqrt()
}

fn principal_angle(im: f64, re: f64) -> f64 {
    let a = im.atan2(re);
    if a <= -PI {
        PI
    } else {
        a
    }
}

pub(crate) fn amplitude_packed<T: Element>(s: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = packed_base_shape(s.shape())?;
    let data = s
        .data()
        .chunks_exact(2)
        .map(|p| T::lit(modulus(p[0].to_f64().unwrap(), p[1].to_f64().unwrap())))
        .collect();
    Tensor::new(&shape, data)
}

pub(crate) fn phase_packed<T: Element>(s: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = packed_base_shape(s.shape())?;
    let data = s
        .data()
        .chunks_exact(2)
        .map(|p| T::lit(principal_angle(p[1].to_f64().unwrap(), p[0].to_f64().unwrap())))
        .collect();
    Tensor::new(&shape, data)
}

pub(crate) fn recompose_packed<T: Element>(a: &Tensor<T>, p: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_same_shape(p, "recompose amplitude/phase")?;
    let mut data = Vec::with_capacity(2 * a.numel());
    for (&m, &ph) in a.data().iter().zip(p.data()) {
        let (m, ph) = (m.to_f64().unwrap(), ph.to_f64().unwrap());
        let (sn, cs) = ph.sin_cos();
        data.push(T::lit(m * cs));
        data.push(T::lit(m * sn));
    }
    let mut shape = a.shape().to_vec();
    shape.push(2);
    Tensor::new(&shape, data)
}

/// `d|z|/d(re, im)` with the `max(|z|, eps)` guard.
pub(crate) fn amplitude_backward<T: Element>(s: &Tensor<T>, g: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(s.numel());
    for (p, &gv) in s.data().chunks_exact(2).zip(g) {
        let (re, im) = (p[0].to_f64().unwrap(), p[1].to_f64().unwrap());
        let r = modulus(re, im).max(GRAD_EPS);
        let gv = gv.to_f64().unwrap();
        out.push(T::lit(gv * re / r));
        out.push(T::lit(gv * im / r));
    }
    out
}

/// `d atan2(im, re)/d(re, im)` with the `max(r^2, eps)` guard.
pub(crate) fn phase_backward<T: Element>(s: &Tensor<T>, g: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(s.numel());
    for (p, &gv) in s.data().chunks_exact(2).zip(g) {
        let (re, im) = (p[0].to_f64().unwrap(), p[1].to_f64().unwrap());
        let r2 = (re * re + im * im).max(GRAD_EPS);
        let gv = gv.to_f64().unwrap();
        out.push(T::lit(-gv * im / r2));
        out.push(T::lit(gv * re / r2));
    }
    out
}

/// Returns `(d amplitude, d phase)` of `recompose`.
pub(crate) fn recompose_backward<T: Element>(a: &Tensor<T>, p: &Tensor<T>, g: &[T]) -> (Vec<T>, Vec<T>) {
    let mut da = Vec::with_capacity(a.numel());
    let mut dp = Vec::with_capacity(a.numel());
    for ((&m, &ph), gz) in a.data().iter().zip(p.data()).zip(g.chunks_exact(2)) {
        let (m, ph) = (m.to_f64().unwrap(), ph.to_f64().unwrap());
        let (gr, gi) = (gz[0].to_f64().unwrap(), gz[1].to_f64().unwrap());
        let (s, c) = ph.sin_cos();
        da.push(T::lit(gr * c + gi * s));
        dp.push(T::lit(m * (gi * c - gr * s)));
    }
    (da, dp)
}

/// Per-plane unitary 2D DFT of a real tensor (last two axes are `H, W`).
pub fn dft2<T: Element>(x: &Tensor<T>) -> Result<Spectrum<T>> {
    Spectrum::from_packed(&dft2_packed(x)?)
}

/// Inverse of [`dft2`]; keeps the real part.
pub fn idft2<T: Element>(s: &Spectrum<T>) -> Result<Tensor<T>> {
    Ok(idft2_with_residue(s)?.0)
}

/// Inverse transform plus the largest magnitude of the discarded imaginary
/// part, which stays at rounding level for conjugate-symmetric spectra.
pub fn idft2_with_residue<T: Element>(s: &Spectrum<T>) -> Result<(Tensor<T>, f64)> {
    idft2_packed(&s.to_packed())
}

/// `sqrt(re^2 + im^2)` per frequency.
pub fn amplitude<T: Element>(s: &Spectrum<T>) -> Tensor<T> {
    amplitude_packed(&s.to_packed()).expect("spectrum is well formed")
}

/// Quadrant-correct angle per frequency, in `(-pi, pi]`.
pub fn phase<T: Element>(s: &Spectrum<T>) -> Tensor<T> {
    phase_packed(&s.to_packed()).expect("spectrum is well formed")
}

/// Polar to rectangular: `(a cos p, a sin p)`.
pub fn recompose<T: Element>(a: &Tensor<T>, p: &Tensor<T>) -> Result<Spectrum<T>> {
    Spectrum::from_packed(&recompose_packed(a, p)?)
}

/// Exchanges amplitude and phase between two images.
///
/// Returns `(amplitude of a with phase of b, amplitude of b with phase of a)`.
pub fn swap_components<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("swap: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    let (sa, sb) = (dft2(a)?, dft2(b)?);
    let ab = idft2(&recompose(&amplitude(&sa), &phase(&sb))?)?;
    let ba = idft2(&recompose(&amplitude(&sb), &phase(&sa))?)?;
    Ok((ab, ba))
}
