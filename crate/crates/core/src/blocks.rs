//! Composite building blocks: dual-domain amplitude/phase blocks, the
//! supervised-attention stage bridge, and the two halves of the cross-stage
//! fusion module (multi-scale fusion and per-pixel affine filtering).
//!
//! Blocks hold [`ParamId`]s only, so the same block definition runs in `f32`
//! for training and in `f64` under the finite-difference oracle.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Registers parameters under a dotted name prefix with fan-in uniform init.
pub struct ParamBuilder<'a, R: Rng> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut R,
    prefix: Vec<String>,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut R) -> Self {
        Self { store, rng, prefix: Vec::new() }
    }

    fn name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    /// Runs `f` with `scope` appended to the name prefix.
    pub fn scope<O>(&mut self, scope: impl Into<String>, f: impl FnOnce(&mut Self) -> Result<O>) -> Result<O> {
        self.prefix.push(scope.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    /// Weights uniform in `+-1 / sqrt(fan_in)`, zero bias.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Conv> {
        self.conv_with_gain(name, cin, cout, k, stride, 1.0)
    }

    /// Like [`ParamBuilder::conv`] with the weight bound scaled by `gain`.
    pub fn conv_with_gain(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> Result<Conv> {
        let fan_in = cin * k * k;
        let bound = gain * (1.0 / fan_in as f64).sqrt();
        let weight = Tensor::<f32>::rand_uniform(&[cout, cin, k, k], -bound, bound, self.rng);
        let weight = self.store.register(self.name(&format!("{name}.weight")), weight)?;
        let bias = self.store.register(self.name(&format!("{name}.bias")), Tensor::zeros(&[cout]))?;
        Ok(Conv { weight, bias, cin, cout, k, stride, pad: (k - 1) / 2 })
    }
}

/// A convolution layer with "same" padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    /// Conv followed by ReLU.
    pub fn forward_relu<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.forward(g, x)?;
        Ok(g.relu(y))
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Which spectral component the frequency branch learns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    /// DDAB: amplitude is transformed, phase passes through.
    Amplitude,
    /// DDPB: phase is transformed, amplitude passes through.
    Phase,
}

/// How the spatial and frequency branches of a block are wired.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    /// `spatial(x) + frequency(x)`.
    Parallel,
    /// `y = spatial(x); y + frequency(y)`.
    SerialSpatialFirst,
    /// `y = frequency(x); y + spatial(y)`.
    SerialFrequencyFirst,
    /// `spatial(x)` only, no frequency branch.
    SpatialOnly,
    /// `x + spatial(x)`, no frequency branch.
    PlainResidual,
}

impl Topology {
    fn has_frequency_branch(self) -> bool {
        !matches!(self, Topology::SpatialOnly | Topology::PlainResidual)
    }
}

#[derive(Clone, Debug)]
pub struct FrequencyBranch {
    /// 1x1 refinement before the transform.
    pub refine: Conv,
    /// 1x1 conv + ReLU on the learned component.
    pub inner: Conv,
    /// 1x1 conv after `inner`.
    pub outer: Conv,
}

/// DDAB / DDPB and their ablation topologies.
#[derive(Clone, Debug)]
pub struct DualBlock {
    pub component: Component,
    pub topology: Topology,
    pub spatial: [Conv; 2],
    pub frequency: Option<FrequencyBranch>,
}

impl DualBlock {
    pub fn build<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        c: usize,
        component: Component,
        topology: Topology,
    ) -> Result<Self> {
        let spatial = [b.conv("spatial0", c, c, 3, 1)?, b.conv("spatial1", c, c, 3, 1)?];
        let frequency = if topology.has_frequency_branch() {
            Some(FrequencyBranch {
                refine: b.conv("refine", c, c, 1, 1)?,
                inner: b.conv("freq_inner", c, c, 1, 1)?,
                outer: b.conv("freq_outer", c, c, 1, 1)?,
            })
        } else {
            None
        };
        Ok(Self { component, topology, spatial, frequency })
    }

    /// Two 3x3 conv + ReLU layers.
    pub fn spatial_branch<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.spatial[0].forward_relu(g, x)?;
        self.spatial[1].forward_relu(g, y)
    }

    /// refine -> DFT -> learn one component -> recompose -> inverse DFT.
    pub fn frequency_branch<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let f = self.frequency.as_ref().expect("block has a frequency branch");
        let refined = f.refine.forward(g, x)?;
        let spec = g.dft2(refined)?;
        let amp = g.amplitude(spec)?;
        let pha = g.phase(spec)?;
        let learned = match self.component {
            Component::Amplitude => amp,
            Component::Phase => pha,
        };
        let h = f.inner.forward_relu(g, learned)?;
        let h = f.outer.forward(g, h)?;
        let rebuilt = match self.component {
            Component::Amplitude => g.recompose(h, pha)?,
            Component::Phase => g.recompose(amp, h)?,
        };
        g.idft2(rebuilt)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self.topology {
            Topology::Parallel => {
                let s = self.spatial_branch(g, x)?;
                let f = self.frequency_branch(g, x)?;
                g.add(s, f)
            }
            Topology::SerialSpatialFirst => {
                let s = self.spatial_branch(g, x)?;
                let f = self.frequency_branch(g, s)?;
                g.add(s, f)
            }
            Topology::SerialFrequencyFirst => {
                let f = self.frequency_branch(g, x)?;
                let s = self.spatial_branch(g, f)?;
                g.add(f, s)
            }
            Topology::SpatialOnly => self.spatial_branch(g, x),
            Topology::PlainResidual => {
                let s = self.spatial_branch(g, x)?;
                g.add(x, s)
            }
        }
    }
}

/// Supervised-attention bridge between the stages.
#[derive(Clone, Debug)]
pub struct Csam {
    pub feat_conv: Conv,
    pub img_conv: Conv,
    pub attn_conv: Conv,
}

impl Csam {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, c: usize) -> Result<Self> {
        Ok(Self {
            feat_conv: b.conv("feat", c, c, 3, 1)?,
            img_conv: b.conv("img", c, 3, 3, 1)?,
            attn_conv: b.conv("attn", 3, c, 3, 1)?,
        })
    }

    /// Returns `(stage-1 image, features bridged into stage 2)`.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, feat: Var, img_low: Var) -> Result<(Var, Var)> {
        let (fshape, ishape) = (g.shape(feat).to_vec(), g.shape(img_low).to_vec());
        if fshape.len() != 4 || ishape.len() != 4 || fshape[0] != ishape[0] || fshape[2..] != ishape[2..] {
            return shape_err(format!("csam: features {fshape:?} and image {ishape:?} disagree"));
        }
        let x1 = self.feat_conv.forward(g, feat)?;
        let residual = self.img_conv.forward(g, feat)?;
        let o_a = g.add(residual, img_low)?;
        let logits = self.attn_conv.forward(g, o_a)?;
        let mask = g.sigmoid(logits);
        let gated = g.mul(x1, mask)?;
        let bridged = g.add(gated, feat)?;
        Ok((o_a, bridged))
    }
}

/// Multi-scale fusion over one set of features ordered fine to coarse.
#[derive(Clone, Debug)]
pub struct Ifm {
    pub channels: Vec<usize>,
    pub source_convs: Vec<Conv>,
    /// `adapters[src][tgt]`: 1x1 conv from source to target channel count.
    pub adapters: Vec<Vec<Conv>>,
    pub fuse: Vec<Conv>,
}

impl Ifm {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, channels: &[usize]) -> Result<Self> {
        let n = channels.len();
        let mut source_convs = Vec::with_capacity(n);
        let mut adapters = Vec::with_capacity(n);
        for (s, &cs) in channels.iter().enumerate() {
            source_convs.push(b.conv(&format!("src{s}"), cs, cs, 3, 1)?);
            let row = channels
                .iter()
                .enumerate()
                .map(|(t, &ct)| b.conv(&format!("adapt{s}to{t}"), cs, ct, 1, 1))
                .collect::<Result<Vec<_>>>()?;
            adapters.push(row);
        }
        let fuse = channels
            .iter()
            .enumerate()
            .map(|(t, &ct)| b.conv(&format!("fuse{t}"), n * ct, ct, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { channels: channels.to_vec(), source_convs, adapters, fuse })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, sources: &[Var]) -> Result<Vec<Var>> {
        let n = self.channels.len();
        if sources.len() != n {
            return shape_err(format!("ifm expects {n} source scales, got {}", sources.len()));
        }
        let mut processed = Vec::with_capacity(n);
        for (s, (&src, conv)) in sources.iter().zip(&self.source_convs).enumerate() {
            let (_, c, _, _) = g.value(src).dims4()?;
            if c != self.channels[s] {
                return shape_err(format!("ifm scale {s}: expected {} channels, got {c}", self.channels[s]));
            }
            processed.push(conv.forward(g, src)?);
        }
        let mut out = Vec::with_capacity(n);
        for t in 0..n {
            let (_, _, th, tw) = g.value(sources[t]).dims4()?;
            let mut parts = Vec::with_capacity(n);
            for (s, &p) in processed.iter().enumerate() {
                let r = g.resample(p, th, tw)?;
                parts.push(self.adapters[s][t].forward(g, r)?);
            }
            let cat = g.concat(&parts)?;
            out.push(self.fuse[t].forward(g, cat)?);
        }
        Ok(out)
    }
}

/// Init gain of the kernel predictor. A fresh IAM is then close to the
/// identity on `u` while every layer still receives gradient.
pub const IAM_FILTER_GAIN: f64 = 0.01;

/// Per-pixel affine filtering guided by fused features.
#[derive(Clone, Debug)]
pub struct Iam {
    pub fuse: Conv,
    pub spatial: Conv,
    pub channel: Conv,
    pub filter: Conv,
    pub k: usize,
}

impl Iam {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, c: usize, k: usize) -> Result<Self> {
        Ok(Self {
            fuse: b.conv("fuse", 3 * c, c, 1, 1)?,
            spatial: b.conv("spatial", c, c, 3, 1)?,
            channel: b.conv("channel", c, c, 1, 1)?,
            filter: b.conv_with_gain("filter", c, k * k * c, 1, 1, IAM_FILTER_GAIN)?,
            k,
        })
    }

    /// `u + per_pixel_filter(u, kernels(a_bar, p_bar, u))`.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, a_bar: Var, p_bar: Var, u: Var) -> Result<Var> {
        if g.shape(a_bar) != g.shape(u) || g.shape(p_bar) != g.shape(u) {
            return shape_err(format!(
                "iam inputs disagree: {:?}, {:?}, {:?}",
                g.shape(a_bar),
                g.shape(p_bar),
                g.shape(u)
            ));
        }
        let cat = g.concat(&[a_bar, p_bar, u])?;
        let fused = self.fuse.forward(g, cat)?;
        let spatial = self.spatial.forward(g, fused)?;
        let pooled = g.global_avg_pool(fused)?;
        let channel = self.channel.forward(g, pooled)?;
        let context = g.add(spatial, channel)?;
        let kernels = self.filter.forward(g, context)?;
        let filtered = g.dynamic_filter(u, kernels, self.k)?;
        g.add(filtered, u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_in;
    use crate::fourier;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build<O>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, ChaCha8Rng>) -> Result<O>) -> (O, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = f(&mut ParamBuilder::new(&mut store, &mut rng)).unwrap();
        (out, store.cast())
    }

    fn zero_all(store: &mut ParamStore<f64>) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let z = Tensor::zeros(store.value(id).shape());
            store.set_value(id, z).unwrap();
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn conv_ref(x: &Tensor<f64>, c: &Conv, store: &ParamStore<f64>) -> Tensor<f64> {
        let (w, b) = (store.value(c.weight), store.value(c.bias));
        let (n, cin, h, wd) = x.dims4().unwrap();
        let (oh, ow) = ((h + 2 * c.pad - c.k) / c.stride + 1, (wd + 2 * c.pad - c.k) / c.stride + 1);
        let mut out = vec![0.0; n * c.cout * oh * ow];
        for bi in 0..n {
            for co in 0..c.cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..c.k {
                                for kx in 0..c.k {
                                    let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                    let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.at4(bi, ci, iy as usize, ix as usize)
                                            * w.data()[((co * cin + ci) * c.k + ky) * c.k + kx];
                                    }
                                }
                            }
                        }
                        out[((bi * c.cout + co) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        Tensor::new(&[n, c.cout, oh, ow], out).unwrap()
    }

    fn relu(t: &Tensor<f64>) -> Tensor<f64> {
        t.map(|v| v.max(0.0))
    }

    fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        a.zip_map(b, |x, y| x + y).unwrap()
    }

    fn run<O>(store: &ParamStore<f64>, f: impl FnOnce(&mut Graph<'_, f64>) -> Result<O>) -> O {
        let mut g = Graph::with_params(store);
        f(&mut g).unwrap()
    }

    fn block_forward(blk: &DualBlock, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        run(store, |g| {
            let v = g.input(x.clone());
            let y = blk.forward(g, v)?;
            Ok(g.value(y).clone())
        })
    }

    fn block_ref(blk: &DualBlock, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let s = relu(&conv_ref(&relu(&conv_ref(x, &blk.spatial[0], store)), &blk.spatial[1], store));
        let f = blk.frequency.as_ref().unwrap();
        let spec = fourier::dft2(&conv_ref(x, &f.refine, store)).unwrap();
        let (a, p) = (fourier::amplitude(&spec), fourier::phase(&spec));
        let learn = |t: &Tensor<f64>| conv_ref(&relu(&conv_ref(t, &f.inner, store)), &f.outer, store);
        let rebuilt = match blk.component {
            Component::Amplitude => fourier::recompose(&learn(&a), &p),
            Component::Phase => fourier::recompose(&a, &learn(&p)),
        };
        add(&s, &fourier::idft2(&rebuilt.unwrap()).unwrap())
    }

    #[test]
    fn dual_blocks_zero_weights_and_shapes() {
        for (comp, c, hw) in [(Component::Amplitude, 20, 16), (Component::Phase, 40, 8)] {
            let (blk, mut store) = build(1, |b| DualBlock::build(b, c, comp, Topology::Parallel));
            let x = rand_t(&[1, c, hw, hw], 2);
            assert_eq!(block_forward(&blk, &store, &x).shape(), &[1, c, hw, hw]);
            zero_all(&mut store);
            assert_eq!(block_forward(&blk, &store, &x).max_abs(), 0.0);
        }
    }

    #[test]
    fn dual_blocks_match_composition() {
        for comp in [Component::Amplitude, Component::Phase] {
            let (blk, store) = build(3, |b| DualBlock::build(b, 4, comp, Topology::Parallel));
            let x = rand_t(&[2, 4, 8, 6], 4);
            let d = block_forward(&blk, &store, &x).max_abs_diff(&block_ref(&blk, &store, &x)).unwrap();
            assert!(d < 1e-5, "{comp:?}: {d}");
        }
    }

    #[test]
    fn serial_topologies_compose_branches() {
        let (blk, store) = build(5, |b| DualBlock::build(b, 3, Component::Amplitude, Topology::SerialSpatialFirst));
        let x = rand_t(&[1, 3, 8, 8], 6);
        let got = block_forward(&blk, &store, &x);
        let want = run(&store, |g| {
            let v = g.input(x.clone());
            let s = blk.spatial_branch(g, v)?;
            let f = blk.frequency_branch(g, s)?;
            let y = g.add(s, f)?;
            Ok(g.value(y).clone())
        });
        assert_eq!(got.data(), want.data());

        let (plain, store) = build(5, |b| DualBlock::build(b, 3, Component::Phase, Topology::PlainResidual));
        assert!(plain.frequency.is_none());
        let mut zeroed = store.clone();
        zero_all(&mut zeroed);
        assert_eq!(block_forward(&plain, &zeroed, &x).data(), x.data());
    }

    #[test]
    fn dual_block_is_batch_permutation_equivariant() {
        let (blk, store) = build(7, |b| DualBlock::build(b, 3, Component::Amplitude, Topology::Parallel));
        let x = rand_t(&[3, 3, 8, 8], 8);
        let items: Vec<_> = (0..3).map(|i| x.batch_item(i).unwrap()).collect();
        let perm = Tensor::stack(&[items[2].clone(), items[0].clone(), items[1].clone()]).unwrap();
        let (y, yp) = (block_forward(&blk, &store, &x), block_forward(&blk, &store, &perm));
        assert_eq!(yp.batch_item(0).unwrap().data(), y.batch_item(2).unwrap().data());
        assert_eq!(yp.batch_item(1).unwrap().data(), y.batch_item(0).unwrap().data());
    }

    fn csam_run(csam: &Csam, store: &ParamStore<f64>, feat: &Tensor<f64>, img: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
        run(store, |g| {
            let (f, i) = (g.input(feat.clone()), g.input(img.clone()));
            let (o, b) = csam.forward(g, f, i)?;
            Ok((g.value(o).clone(), g.value(b).clone()))
        })
    }

    #[test]
    fn csam_zero_weights_and_composition() {
        let (csam, store) = build(9, |b| Csam::build(b, 5));
        let (feat, img) = (rand_t(&[2, 5, 8, 8], 10), rand_t(&[2, 3, 8, 8], 11));
        let (o, b) = csam_run(&csam, &store, &feat, &img);
        assert_eq!((o.shape(), b.shape()), (&[2, 3, 8, 8][..], &[2, 5, 8, 8][..]));

        let want_o = add(&conv_ref(&feat, &csam.img_conv, &store), &img);
        let m = conv_ref(&want_o, &csam.attn_conv, &store).map(|v| 1.0 / (1.0 + (-v).exp()));
        let gated = conv_ref(&feat, &csam.feat_conv, &store).zip_map(&m, |a, b| a * b).unwrap();
        assert!(o.max_abs_diff(&want_o).unwrap() < 1e-12);
        assert!(b.max_abs_diff(&add(&gated, &feat)).unwrap() < 1e-12);

        let mut zeroed = store.clone();
        zero_all(&mut zeroed);
        let (o, b) = csam_run(&csam, &zeroed, &feat, &img);
        assert_eq!(o.data(), img.data());
        assert_eq!(b.data(), feat.data());

        let bad = rand_t(&[2, 3, 4, 8], 12);
        assert!(run(&store, |g| {
            let (f, i) = (g.input(feat.clone()), g.input(bad.clone()));
            Ok(csam.forward(g, f, i).is_err())
        }));
    }

    fn ifm_run(ifm: &Ifm, store: &ParamStore<f64>, srcs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        run(store, |g| {
            let vs: Vec<_> = srcs.iter().map(|s| g.input(s.clone())).collect();
            let out = ifm.forward(g, &vs)?;
            Ok(out.iter().map(|&v| g.value(v).clone()).collect())
        })
    }

    #[test]
    fn ifm_shapes_zero_weights_and_constants() {
        let (ifm, store) = build(13, |b| Ifm::build(b, &[20, 40, 80]));
        let srcs: Vec<_> = [(20, 64), (40, 32), (80, 16)]
            .iter()
            .enumerate()
            .map(|(i, &(c, s))| rand_t(&[1, c, s, s], 14 + i as u64))
            .collect();
        let out = ifm_run(&ifm, &store, &srcs);
        for (o, s) in out.iter().zip(&srcs) {
            assert_eq!(o.shape(), s.shape());
        }
        let mut zeroed = store.clone();
        zero_all(&mut zeroed);
        assert!(ifm_run(&ifm, &zeroed, &srcs).iter().all(|o| o.max_abs() == 0.0));

        // Constant input, spatial convs reduced to their centre taps so borders stay constant.
        let (small, mut st) = build(17, |b| Ifm::build(b, &[2, 3, 4]));
        for conv in &small.source_convs {
            let w = st.value(conv.weight).clone();
            let (co, ci) = (w.shape()[0], w.shape()[1]);
            let centred = Tensor::from_fn(w.shape(), |i| if i % 9 == 4 { w.data()[i] } else { 0.0 });
            assert_eq!(centred.shape(), &[co, ci, 3, 3]);
            st.set_value(conv.weight, centred).unwrap();
        }
        let consts: Vec<_> = [(2, 8), (3, 4), (4, 2)].iter().map(|&(c, s)| Tensor::full(&[1, c, s, s], 0.7)).collect();
        for o in ifm_run(&small, &st, &consts) {
            let (_, c, h, w) = o.dims4().unwrap();
            for ch in 0..c {
                let v0 = o.at4(0, ch, 0, 0);
                for y in 0..h {
                    for x in 0..w {
                        assert!((o.at4(0, ch, y, x) - v0).abs() < 1e-12);
                    }
                }
            }
        }
        assert!(run(&store, |g| {
            let v = g.input(srcs[0].clone());
            Ok(ifm.forward(g, &[v, v]).is_err())
        }));
    }

    fn iam_run(iam: &Iam, store: &ParamStore<f64>, a: &Tensor<f64>, p: &Tensor<f64>, u: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut g = Graph::with_params(store);
        let (av, pv, uv) = (g.input(a.clone()), g.input(p.clone()), g.input(u.clone()));
        let y = iam.forward(&mut g, av, pv, uv)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn iam_residual_and_degenerate_kernel() {
        let (iam, mut store) = build(19, |b| Iam::build(b, 4, 3));
        let (a, p, u) = (rand_t(&[2, 4, 6, 6], 20), rand_t(&[2, 4, 6, 6], 21), rand_t(&[2, 4, 6, 6], 22));
        for id in iam.filter.param_ids() {
            let z = Tensor::zeros(store.value(id).shape());
            store.set_value(id, z).unwrap();
        }
        assert_eq!(iam_run(&iam, &store, &a, &p, &u).unwrap().data(), u.data());

        let (iam1, mut store1) = build(23, |b| Iam::build(b, 4, 1));
        let z = Tensor::zeros(store1.value(iam1.filter.weight).shape());
        store1.set_value(iam1.filter.weight, z).unwrap();
        store1.set_value(iam1.filter.bias, Tensor::full(&[4], 1.0)).unwrap();
        let y = iam_run(&iam1, &store1, &a, &p, &u).unwrap();
        assert!(y.max_abs_diff(&u.map(|v| 2.0 * v)).unwrap() < 1e-15);

        assert!(iam_run(&iam, &store, &a, &rand_t(&[2, 4, 6, 4], 24), &u).is_err());
    }

    #[test]
    fn iam_matches_per_pixel_loop() {
        let (iam, store) = build(25, |b| Iam::build(b, 3, 3));
        let (a, p, u) = (rand_t(&[1, 3, 5, 7], 26), rand_t(&[1, 3, 5, 7], 27), rand_t(&[1, 3, 5, 7], 28));
        let got = iam_run(&iam, &store, &a, &p, &u).unwrap();

        let cat = Tensor::from_fn(&[1, 9, 5, 7], |i| {
            let (ch, rest) = (i / 35, i % 35);
            [&a, &p, &u][ch / 3].data()[(ch % 3) * 35 + rest]
        });
        let fused = conv_ref(&cat, &iam.fuse, &store);
        let sp = conv_ref(&fused, &iam.spatial, &store);
        let gap = Tensor::from_fn(&[1, 3, 1, 1], |c| fused.data()[c * 35..(c + 1) * 35].iter().sum::<f64>() / 35.0);
        let ch = conv_ref(&gap, &iam.channel, &store);
        let ctx = Tensor::from_fn(sp.shape(), |i| sp.data()[i] + ch.data()[i / 35]);
        let kern = conv_ref(&ctx, &iam.filter, &store);
        let mut want = vec![0.0; 105];
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..7 {
                    let mut s = u.at4(0, c, y, x);
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (yy, xx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                            if (0..5).contains(&yy) && (0..7).contains(&xx) {
                                s += u.at4(0, c, yy as usize, xx as usize) * kern.at4(0, (dy * 3 + dx) * 3 + c, y, x);
                            }
                        }
                    }
                    want[(c * 5 + y) * 7 + x] = s;
                }
            }
        }
        let want = Tensor::new(&[1, 3, 5, 7], want).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-5);
    }

    #[test]
    fn dual_block_gradients_match_finite_differences() {
        let (blk, store) = build(29, |b| DualBlock::build(b, 2, Component::Phase, Topology::Parallel));
        let x = rand_t(&[1, 2, 8, 8], 30);
        let r = grad_check_in(
            Some(&store),
            |g, v| {
                let y = blk.forward(g, v)?;
                Ok(g.sum(y))
            },
            &x,
            1e-4,
            Some((40, 1)),
        )
        .unwrap();
        assert!(r.passes(1e-3), "{}", r.max_rel_err);
    }
}
