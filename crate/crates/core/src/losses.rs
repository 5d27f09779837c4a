//! Two-stage objective: an amplitude-stage loss against a target that carries
//! the ground-truth amplitude and the input phase, and a phase-stage loss with
//! spatial, complex-spectrum and phase terms.
//!
//! Every `‖·‖₁` is a mean over all elements. The complex-spectrum term is the
//! mean absolute difference of the real parts plus that of the imaginary
//! parts. Phase differences are raw principal values (no wrap correction).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fourier;
use crate::network::ForwardResult;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.05, beta: 0.05, gamma: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted sub-terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub pixel_a: f64,
    pub amp_a: f64,
    pub pixel_p: f64,
    /// Mean |Δre| + mean |Δim|.
    pub fft_p: f64,
    pub phase_p: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_a: f64,
    pub l_p: f64,
    pub total: f64,
    pub terms: LossTerms,
    pub weights: LossWeights,
}

impl LossReport {
    /// `alpha * amp_a`.
    pub fn amp_contribution(&self) -> f64 {
        self.weights.alpha * self.terms.amp_a
    }

    pub fn fft_contribution(&self) -> f64 {
        self.weights.beta * self.terms.fft_p
    }

    pub fn phase_contribution(&self) -> f64 {
        self.weights.gamma * self.terms.phase_p
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// A stage loss inside a graph: the differentiable scalar and its parts.
#[derive(Clone, Copy, Debug)]
pub struct StageLoss {
    pub value: Var,
    pub pixel: f64,
    /// `amp_a` for the amplitude stage, `fft_p` for the phase stage.
    pub spectral: f64,
    /// `phase_p`; zero for the amplitude stage.
    pub phase: f64,
}

fn scalar<T: Element>(g: &Graph<'_, T>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64().unwrap_or(f64::NAN)
}

/// `T = idft2(recompose(amp(dft2(gt)), phase(dft2(low))))`.
pub fn amplitude_target<T: Element>(gt: &Tensor<T>, low: &Tensor<T>) -> Result<Tensor<T>> {
    gt.expect_same_shape(low, "amplitude target")?;
    let a = fourier::amplitude(&fourier::dft2(gt)?);
    let p = fourier::phase(&fourier::dft2(low)?);
    fourier::idft2(&fourier::recompose(&a, &p)?)
}

fn weighted_sum<T: Element>(g: &mut Graph<'_, T>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc = terms[0].0;
    for &(v, w) in &terms[1..] {
        let s = g.scale(v, w);
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

/// `mean|o_a - T| + alpha * mean|amp(dft2(o_a)) - amp(dft2(gt))|`.
pub fn loss_amplitude_stage<T: Element>(
    g: &mut Graph<'_, T>,
    o_a: Var,
    gt: &Tensor<T>,
    low: &Tensor<T>,
    w: &LossWeights,
) -> Result<StageLoss> {
    g.value(o_a).expect_same_shape(gt, "amplitude-stage loss")?;
    let target = amplitude_target(gt, low)?;
    let gt_amp = fourier::amplitude(&fourier::dft2(gt)?);

    let t = g.constant(target);
    let d = g.sub(o_a, t)?;
    let pixel = g.mean_abs(d);

    let spec = g.dft2(o_a)?;
    let amp = g.amplitude(spec)?;
    let ga = g.constant(gt_amp);
    let da = g.sub(amp, ga)?;
    let amp_term = g.mean_abs(da);

    let value = weighted_sum(g, &[(pixel, 1.0), (amp_term, w.alpha)])?;
    Ok(StageLoss { value, pixel: scalar(g, pixel), spectral: scalar(g, amp_term), phase: 0.0 })
}

/// `mean|o_p - gt| + beta * (mean|Δre| + mean|Δim|) + gamma * mean|Δphase|`.
pub fn loss_phase_stage<T: Element>(g: &mut Graph<'_, T>, o_p: Var, gt: &Tensor<T>, w: &LossWeights) -> Result<StageLoss> {
    g.value(o_p).expect_same_shape(gt, "phase-stage loss")?;
    let gt_spec = fourier::dft2(gt)?;
    let gt_phase = fourier::phase(&gt_spec);

    let target = g.constant(gt.clone());
    let d = g.sub(o_p, target)?;
    let pixel = g.mean_abs(d);

    let spec = g.dft2(o_p)?;
    let gs = g.constant(gt_spec.to_packed());
    let ds = g.sub(spec, gs)?;
    // Packed mean covers re and im together, so twice it is the sum of the two means.
    let half_fft = g.mean_abs(ds);
    let fft_term = g.scale(half_fft, 2.0);

    let ph = g.phase(spec)?;
    let gp = g.constant(gt_phase);
    let dp = g.sub(ph, gp)?;
    let phase_term = g.mean_abs(dp);

    let value = weighted_sum(g, &[(pixel, 1.0), (fft_term, w.beta), (phase_term, w.gamma)])?;
    Ok(StageLoss {
        value,
        pixel: scalar(g, pixel),
        spectral: scalar(g, fft_term),
        phase: scalar(g, phase_term),
    })
}

/// `L_A + L_P`. Single-stage variants have no amplitude stage, so `L_A = 0`.
/// Returns the graph scalar to differentiate and the report.
pub fn total_loss<T: Element>(
    g: &mut Graph<'_, T>,
    fr: &ForwardResult,
    gt: &Tensor<T>,
    low: &Tensor<T>,
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    w.validate()?;
    let lp = loss_phase_stage(g, fr.o_p, gt, w)?;
    let mut terms = LossTerms { pixel_p: lp.pixel, fft_p: lp.spectral, phase_p: lp.phase, ..LossTerms::default() };
    let l_p = lp.pixel + w.beta * lp.spectral + w.gamma * lp.phase;
    let (root, l_a) = if fr.single_stage {
        (lp.value, 0.0)
    } else {
        let la = loss_amplitude_stage(g, fr.o_a, gt, low, w)?;
        terms.pixel_a = la.pixel;
        terms.amp_a = la.spectral;
        (g.add(la.value, lp.value)?, la.pixel + w.alpha * la.spectral)
    };
    Ok((root, LossReport { l_a, l_p, total: l_a + l_p, terms, weights: *w }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    type Planes = Vec<(Vec<f64>, Vec<f64>)>;

    fn rand_img(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::rand_uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Direct-summation unitary DFT per plane, with a clean zero imaginary part
    /// on bins whose residue is pure rounding noise.
    fn naive_dft(x: &Tensor<f64>) -> Planes {
        let (n, c, h, w) = x.dims4().unwrap();
        let norm = 1.0 / ((h * w) as f64).sqrt();
        let mut out = Vec::new();
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            let (mut re, mut im) = (vec![0.0; h * w], vec![0.0; h * w]);
            for u in 0..h {
                for v in 0..w {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for y in 0..h {
                        for xx in 0..w {
                            let ang = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                            sr += src[y * w + xx] * ang.cos();
                            si += src[y * w + xx] * ang.sin();
                        }
                    }
                    re[u * w + v] = sr * norm;
                    im[u * w + v] = if si.abs() < 1e-12 { 0.0 } else { si * norm };
                }
            }
            out.push((re, im));
        }
        out
    }

    fn naive_idft(planes: &Planes, shape: &[usize]) -> Vec<f64> {
        let (h, w) = (shape[2], shape[3]);
        let norm = 1.0 / ((h * w) as f64).sqrt();
        let mut out = Vec::new();
        for (re, im) in planes {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for u in 0..h {
                        for v in 0..w {
                            let ang = 2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                            s += re[u * w + v] * ang.cos() - im[u * w + v] * ang.sin();
                        }
                    }
                    out.push(s * norm);
                }
            }
        }
        out
    }

    fn amp(p: &Planes) -> Vec<f64> {
        p.iter().flat_map(|(r, i)| r.iter().zip(i).map(|(a, b)| a.hypot(*b))).collect()
    }

    fn pha(p: &Planes) -> Vec<f64> {
        p.iter()
            .flat_map(|(r, i)| r.iter().zip(i).map(|(a, b)| if *b == 0.0 && *a < 0.0 { PI } else { b.atan2(*a) }))
            .collect()
    }

    fn mae(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    fn oracle_la(oa: &Tensor<f64>, gt: &Tensor<f64>, low: &Tensor<f64>, alpha: f64) -> f64 {
        let (sg, sl, so) = (naive_dft(gt), naive_dft(low), naive_dft(oa));
        let (ag, pl) = (amp(&sg), pha(&sl));
        let hw = gt.shape()[2] * gt.shape()[3];
        let mixed: Planes = (0..sg.len())
            .map(|k| {
                let r = (0..hw).map(|i| ag[k * hw + i] * pl[k * hw + i].cos()).collect();
                let m = (0..hw).map(|i| ag[k * hw + i] * pl[k * hw + i].sin()).collect();
                (r, m)
            })
            .collect();
        let target = naive_idft(&mixed, gt.shape());
        mae(oa.data(), &target) + alpha * mae(&amp(&so), &ag)
    }

    fn oracle_lp(op: &Tensor<f64>, gt: &Tensor<f64>, beta: f64, gamma: f64) -> f64 {
        let (so, sg) = (naive_dft(op), naive_dft(gt));
        let re = |p: &Planes| p.iter().flat_map(|(r, _)| r.clone()).collect::<Vec<_>>();
        let im = |p: &Planes| p.iter().flat_map(|(_, i)| i.clone()).collect::<Vec<_>>();
        mae(op.data(), gt.data())
            + beta * (mae(&re(&so), &re(&sg)) + mae(&im(&so), &im(&sg)))
            + gamma * mae(&pha(&so), &pha(&sg))
    }

    fn la(oa: &Tensor<f64>, gt: &Tensor<f64>, low: &Tensor<f64>, w: &LossWeights) -> f64 {
        let mut g = Graph::new();
        let v = g.input(oa.clone());
        let l = loss_amplitude_stage(&mut g, v, gt, low, w).unwrap();
        scalar(&g, l.value)
    }

    fn lp(op: &Tensor<f64>, gt: &Tensor<f64>, w: &LossWeights) -> f64 {
        let mut g = Graph::new();
        let v = g.input(op.clone());
        let l = loss_phase_stage(&mut g, v, gt, w).unwrap();
        scalar(&g, l.value)
    }

    fn two_stage(g: &mut Graph<'_, f64>, oa: &Tensor<f64>, op: &Tensor<f64>) -> ForwardResult {
        let o_a = g.input(oa.clone());
        let o_p = g.input(op.clone());
        ForwardResult { o_a, i_mix: o_a, o_p, a_feats: vec![], p_feats: vec![], u_feats: vec![], single_stage: false }
    }

    #[test]
    fn amplitude_stage_exact_target_is_zero() {
        let (gt, low) = (rand_img(&[1, 3, 8, 8], 1), rand_img(&[1, 3, 8, 8], 2));
        let t = amplitude_target(&gt, &low).unwrap();
        assert!(la(&t, &gt, &low, &LossWeights::default()) < 1e-12);
    }

    #[test]
    fn amplitude_stage_constant_offset() {
        let (gt, low) = (rand_img(&[1, 3, 8, 8], 3), rand_img(&[1, 3, 8, 8], 4));
        let t = amplitude_target(&gt, &low).unwrap().map(|v| v + 0.1);
        let w = LossWeights { alpha: 0.0, ..LossWeights::default() };
        assert!((la(&t, &gt, &low, &w) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn amplitude_stage_matches_recomputation() {
        let (oa, gt, low) = (rand_img(&[2, 3, 6, 8], 5), rand_img(&[2, 3, 6, 8], 6), rand_img(&[2, 3, 6, 8], 7));
        let w = LossWeights { alpha: 0.3, ..LossWeights::default() };
        let got = la(&oa, &gt, &low, &w);
        assert!((got - oracle_la(&oa, &gt, &low, 0.3)).abs() < 1e-6, "{got}");
    }

    #[test]
    fn phase_stage_identities() {
        let gt = rand_img(&[1, 3, 8, 8], 8);
        assert_eq!(lp(&gt, &gt, &LossWeights::default()), 0.0);
        let w = LossWeights { beta: 0.0, gamma: 0.0, ..LossWeights::default() };
        assert!((lp(&gt.map(|v| v + 0.2), &gt, &w) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn phase_stage_matches_recomputation() {
        let (op, gt) = (rand_img(&[2, 3, 8, 6], 9), rand_img(&[2, 3, 8, 6], 10));
        let w = LossWeights { alpha: 0.0, beta: 0.4, gamma: 0.7 };
        let got = lp(&op, &gt, &w);
        assert!((got - oracle_lp(&op, &gt, 0.4, 0.7)).abs() < 1e-6, "{got}");
    }

    #[test]
    fn total_is_sum_of_stages_and_zero_when_perfect() {
        let (oa, op, gt, low) =
            (rand_img(&[1, 3, 8, 8], 11), rand_img(&[1, 3, 8, 8], 12), rand_img(&[1, 3, 8, 8], 13), rand_img(&[1, 3, 8, 8], 14));
        let w = LossWeights::default();
        let mut g = Graph::new();
        let fr = two_stage(&mut g, &oa, &op);
        let (root, rep) = total_loss(&mut g, &fr, &gt, &low, &w).unwrap();
        let sum = la(&oa, &gt, &low, &w) + lp(&op, &gt, &w);
        assert!((scalar(&g, root) - sum).abs() < 1e-14);
        assert!((rep.total - sum).abs() < 1e-14);
        assert_eq!(rep.total, rep.l_a + rep.l_p);

        let t = amplitude_target(&gt, &low).unwrap();
        let mut g = Graph::new();
        let fr = two_stage(&mut g, &t, &gt);
        let (_, rep) = total_loss(&mut g, &fr, &gt, &low, &w).unwrap();
        assert!(rep.total < 1e-12, "{}", rep.total);
    }

    #[test]
    fn doubling_alpha_doubles_only_its_contribution() {
        let (oa, op, gt, low) =
            (rand_img(&[1, 3, 8, 8], 15), rand_img(&[1, 3, 8, 8], 16), rand_img(&[1, 3, 8, 8], 17), rand_img(&[1, 3, 8, 8], 18));
        let report = |w: LossWeights| {
            let mut g = Graph::new();
            let fr = two_stage(&mut g, &oa, &op);
            total_loss(&mut g, &fr, &gt, &low, &w).unwrap().1
        };
        let w1 = LossWeights::default();
        let r1 = report(w1);
        let r2 = report(LossWeights { alpha: 2.0 * w1.alpha, ..w1 });
        assert_eq!(r1.terms, r2.terms);
        assert_eq!(r2.amp_contribution() - r1.amp_contribution(), w1.alpha * r1.terms.amp_a);
        assert!((r2.total - r1.total - w1.alpha * r1.terms.amp_a).abs() < 1e-15);
    }

    #[test]
    fn negative_weight_is_rejected() {
        assert!(LossWeights { gamma: -0.1, ..LossWeights::default() }.validate().is_err());
    }

    #[test]
    fn total_gradient_wrt_output_pixels() {
        let (oa, gt, low) = (rand_img(&[1, 3, 8, 8], 19), rand_img(&[1, 3, 8, 8], 20), rand_img(&[1, 3, 8, 8], 21));
        let op = rand_img(&[1, 3, 8, 8], 22);
        let w = LossWeights::default();
        let r = grad_check(
            |g, v| {
                let o_a = g.constant(oa.clone());
                let fr = ForwardResult {
                    o_a,
                    i_mix: o_a,
                    o_p: v,
                    a_feats: vec![],
                    p_feats: vec![],
                    u_feats: vec![],
                    single_stage: false,
                };
                total_loss(g, &fr, &gt, &low, &w).map(|(root, _)| root)
            },
            &op,
            1e-4,
        )
        .unwrap();
        assert!(r.passes(1e-3), "{}", r.max_rel_err);
    }
}
