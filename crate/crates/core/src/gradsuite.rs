//! Finite-difference suite over every differentiable primitive, composite
//! block and loss, on small seeded instances in `f64`.
//!
//! Block parameters are checked by rebinding one parameter id to the probed
//! input, so the oracle exercises the same forward code used in training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_in, Graph, ParamId, ParamStore, Var};
use crate::blocks::{Component, Csam, DualBlock, Iam, Ifm, ParamBuilder, Topology};
use crate::error::Result;
use crate::losses::{loss_amplitude_stage, loss_phase_stage, LossWeights};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-3;
const EPS: f64 = 1e-4;
/// Coordinates probed per check; smaller tensors are checked exhaustively.
const MAX_COORDS: usize = 48;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
}

impl CheckOutcome {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `sum(y * R)` with a fixed random `R`, so every output coordinate matters.
fn probe(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let r = g.constant(rand_t(g.shape(y), seed ^ 0x9e37_79b9));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

struct Suite {
    out: Vec<CheckOutcome>,
    seed: u64,
}

impl Suite {
    fn check<'s>(
        &mut self,
        name: &str,
        store: Option<&'s ParamStore<f64>>,
        point: Tensor<f64>,
        f: impl Fn(&mut Graph<'s, f64>, Var) -> Result<Var>,
    ) -> Result<()> {
        self.seed += 1;
        let r = grad_check_in(store, f, &point, EPS, Some((MAX_COORDS, self.seed)))?;
        self.out.push(CheckOutcome { name: name.to_string(), max_rel_err: r.max_rel_err, coords: r.checked.len() });
        Ok(())
    }

    /// Gradient with respect to input `x` of `probe(f(x))`.
    fn unary(&mut self, name: &str, shape: &[usize], f: impl Fn(&mut Graph<'_, f64>, Var) -> Result<Var>) -> Result<()> {
        let s = self.seed + 100;
        self.check(name, None, rand_t(shape, s), |g, x| {
            let y = f(g, x)?;
            probe(g, y, s)
        })
    }

    /// Input gradient and the gradient of parameter `id` for a block forward.
    fn block(
        &mut self,
        name: &str,
        store: &ParamStore<f64>,
        x: Tensor<f64>,
        params: &[(&str, ParamId)],
        f: impl Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
    ) -> Result<()> {
        let s = self.seed + 200;
        self.check(&format!("{name} / input"), Some(store), x.clone(), |g, v| {
            let y = f(g, v)?;
            probe(g, y, s)
        })?;
        for &(pname, id) in params {
            let xc = x.clone();
            self.check(&format!("{name} / {pname}"), Some(store), store.value(id).clone(), |g, w| {
                g.bind_param(id, w);
                let input = g.constant(xc.clone());
                let y = f(g, input)?;
                probe(g, y, s)
            })?;
        }
        Ok(())
    }
}

fn build<O>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, ChaCha8Rng>) -> Result<O>) -> Result<(O, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = f(&mut ParamBuilder::new(&mut store, &mut rng))?;
    Ok((out, store.cast()))
}

fn primitives(s: &mut Suite) -> Result<()> {
    let img = [2, 3, 8, 8];
    let w33 = rand_t(&[4, 3, 3, 3], 1);
    let bias = rand_t(&[4], 2);
    {
        let (w, b) = (w33.clone(), bias.clone());
        s.unary("conv2d 3x3 / input", &img, move |g, x| {
            let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
            g.conv2d(x, w, b, 1, 1)
        })?;
    }
    {
        let (x, b) = (rand_t(&img, 3), bias.clone());
        s.unary("conv2d 3x3 / weight", &[4, 3, 3, 3], move |g, w| {
            let (x, b) = (g.constant(x.clone()), g.constant(b.clone()));
            g.conv2d(x, w, b, 1, 1)
        })?;
    }
    {
        let (x, w) = (rand_t(&img, 4), w33.clone());
        s.unary("conv2d 3x3 / bias", &[4], move |g, b| {
            let (x, w) = (g.constant(x.clone()), g.constant(w.clone()));
            g.conv2d(x, w, b, 1, 1)
        })?;
    }
    {
        let (w, b) = (w33.clone(), bias.clone());
        s.unary("conv2d stride 2 / input", &img, move |g, x| {
            let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
            g.conv2d(x, w, b, 2, 1)
        })?;
    }
    s.unary("relu", &img, |g, x| Ok(g.relu(x)))?;
    s.unary("sigmoid", &img, |g, x| Ok(g.sigmoid(x)))?;
    s.unary("scale", &img, |g, x| Ok(g.scale(x, -1.7)))?;
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let other = rand_t(&img, 10 + op);
        let bcast = rand_t(&[2, 3, 1, 1], 20 + op);
        let apply = move |g: &mut Graph<'_, f64>, a: Var, b: Var| match op {
            0 => g.add(a, b),
            1 => g.sub(a, b),
            _ => g.mul(a, b),
        };
        let o = other.clone();
        s.unary(&format!("{name} / left"), &img, move |g, x| {
            let b = g.constant(o.clone());
            apply(g, x, b)
        })?;
        let o = other.clone();
        s.unary(&format!("{name} / right"), &img, move |g, x| {
            let a = g.constant(o.clone());
            apply(g, a, x)
        })?;
        if op == 1 {
            continue;
        }
        let o = other.clone();
        s.unary(&format!("{name} / broadcast channel"), &[2, 3, 1, 1], move |g, x| {
            let a = g.constant(o.clone());
            apply(g, a, x)
        })?;
        let bc = bcast.clone();
        s.unary(&format!("{name} / broadcast big side"), &img, move |g, x| {
            let b = g.constant(bc.clone());
            apply(g, x, b)
        })?;
    }
    {
        let other = rand_t(&[2, 2, 8, 8], 30);
        s.unary("concat", &img, move |g, x| {
            let o = g.constant(other.clone());
            g.concat(&[o, x])
        })?;
    }
    s.unary("resample up", &img, |g, x| g.resample(x, 16, 16))?;
    s.unary("resample down", &img, |g, x| g.resample(x, 4, 4))?;
    s.unary("resample odd", &[1, 2, 8, 6], |g, x| g.resample(x, 5, 11))?;
    s.unary("global_avg_pool", &img, |g, x| g.global_avg_pool(x))?;
    s.unary("dft2", &img, |g, x| g.dft2(x))?;
    s.unary("idft2", &[2, 3, 8, 8, 2], |g, x| g.idft2(x))?;
    s.unary("amplitude", &[2, 3, 8, 8, 2], |g, x| g.amplitude(x))?;
    s.unary("phase", &[2, 3, 8, 8, 2], |g, x| g.phase(x))?;
    {
        let p = rand_t(&img, 40).map(|v| v * 3.0);
        s.unary("recompose / amplitude", &img, move |g, a| {
            let p = g.constant(p.clone());
            g.recompose(a, p)
        })?;
        let a = rand_t(&img, 41);
        s.unary("recompose / phase", &img, move |g, p| {
            let a = g.constant(a.clone());
            g.recompose(a, p)
        })?;
    }
    {
        let k = rand_t(&[2, 27, 8, 8], 50);
        s.unary("dynamic_filter / image", &img, move |g, u| {
            let k = g.constant(k.clone());
            g.dynamic_filter(u, k, 3)
        })?;
        let u = rand_t(&img, 51);
        s.unary("dynamic_filter / kernels", &[2, 27, 8, 8], move |g, k| {
            let u = g.constant(u.clone());
            g.dynamic_filter(u, k, 3)
        })?;
    }
    s.check("sum", None, rand_t(&img, 60), |g, x| Ok(g.sum(x)))?;
    s.check("mean_abs", None, rand_t(&img, 61), |g, x| Ok(g.mean_abs(x)))?;
    Ok(())
}

fn blocks(s: &mut Suite) -> Result<()> {
    let c = 3;
    let x = rand_t(&[1, c, 8, 8], 70);
    for (name, comp) in [("DDAB", Component::Amplitude), ("DDPB", Component::Phase)] {
        for (tname, topo) in [
            ("parallel", Topology::Parallel),
            ("spatial then frequency", Topology::SerialSpatialFirst),
            ("frequency then spatial", Topology::SerialFrequencyFirst),
        ] {
            let (blk, store) = build(71, |b| DualBlock::build(b, c, comp, topo))?;
            let f = blk.frequency.as_ref().expect("frequency branch");
            let params = [("spatial0.weight", blk.spatial[0].weight), ("freq_inner.weight", f.inner.weight)];
            s.block(&format!("{name} {tname}"), &store, x.clone(), &params, |g, v| blk.forward(g, v))?;
        }
    }

    let (csam, store) = build(72, |b| Csam::build(b, c))?;
    let low = rand_t(&[1, 3, 8, 8], 73);
    let params = [("attn.weight", csam.attn_conv.weight), ("img.bias", csam.img_conv.bias)];
    for (out, label) in [(0, "image"), (1, "features")] {
        let l = low.clone();
        s.block(&format!("CSAM {label}"), &store, x.clone(), &params, |g, v| {
            let lv = g.constant(l.clone());
            let pair = csam.forward(g, v, lv)?;
            Ok(if out == 0 { pair.0 } else { pair.1 })
        })?;
    }
    {
        let feat = x.clone();
        s.check("CSAM / low image", Some(&store), low.clone(), |g, l| {
            let f = g.constant(feat.clone());
            let (o, b) = csam.forward(g, f, l)?;
            let (po, pb) = (probe(g, o, 74)?, probe(g, b, 75)?);
            g.add(po, pb)
        })?;
    }

    let chans = [2, 3];
    let (ifm, store) = build(76, |b| Ifm::build(b, &chans))?;
    let coarse = rand_t(&[1, 3, 4, 4], 77);
    {
        let co = coarse.clone();
        let params = [("adapt1to0.weight", ifm.adapters[1][0].weight), ("fuse1.weight", ifm.fuse[1].weight)];
        s.block("IFM", &store, rand_t(&[1, 2, 8, 8], 78), &params, |g, fine| {
            let cv = g.constant(co.clone());
            let outs = ifm.forward(g, &[fine, cv])?;
            let (a, b) = (probe(g, outs[0], 79)?, probe(g, outs[1], 80)?);
            g.add(a, b)
        })?;
    }

    let (iam, mut store) = build(81, |b| Iam::build(b, c, 3))?;
    // Full-scale kernel predictor so upstream layers get gradients of normal size.
    let wf = rand_t(store.value(iam.filter.weight).shape(), 85).map(|v| 0.3 * v);
    store.set_value(iam.filter.weight, wf)?;
    let store = store;
    let (a_bar, p_bar) = (rand_t(&[1, c, 8, 8], 82), rand_t(&[1, c, 8, 8], 83));
    {
        let (a, p) = (a_bar.clone(), p_bar.clone());
        let params = [("filter.weight", iam.filter.weight), ("channel.weight", iam.channel.weight)];
        s.block("IAM", &store, x.clone(), &params, |g, u| {
            let (av, pv) = (g.constant(a.clone()), g.constant(p.clone()));
            iam.forward(g, av, pv, u)
        })?;
        let (u, p) = (x.clone(), p_bar.clone());
        s.check("IAM / guidance", Some(&store), a_bar.clone(), |g, av| {
            let (uv, pv) = (g.constant(u.clone()), g.constant(p.clone()));
            let y = iam.forward(g, av, pv, uv)?;
            probe(g, y, 84)
        })?;
    }
    Ok(())
}

fn losses(s: &mut Suite) -> Result<()> {
    let shape = [1, 3, 8, 8];
    let gt = rand_t(&shape, 90).map(|v| 0.5 + 0.4 * v);
    let low = gt.map(|v| 0.3 * v);
    let w = LossWeights::default();
    let pred = rand_t(&shape, 91).map(|v| 0.5 + 0.4 * v);
    {
        let (gt, low) = (gt.clone(), low.clone());
        s.check("amplitude-stage loss", None, pred.clone(), move |g, o| Ok(loss_amplitude_stage(g, o, &gt, &low, &w)?.value))?;
    }
    {
        let gt = gt.clone();
        s.check("phase-stage loss", None, pred, move |g, o| Ok(loss_phase_stage(g, o, &gt, &w)?.value))?;
    }
    Ok(())
}

/// Runs every check. Outcomes are reported, not asserted; compare against
/// [`TOLERANCE`].
pub fn run_suite() -> Result<Vec<CheckOutcome>> {
    let mut s = Suite { out: Vec::new(), seed: 0 };
    primitives(&mut s)?;
    blocks(&mut s)?;
    losses(&mut s)?;
    Ok(s.out)
}
