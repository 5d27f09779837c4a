//! The two-stage network: an amplitude-illumination encoder/decoder with skip
//! connections and a supervised-attention bridge, followed by a
//! phase-refinement encoder/decoder whose decoder features are modulated by
//! the cross-stage fusion module.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::blocks::{Component, Conv, Csam, DualBlock, Iam, Ifm, ParamBuilder, Topology};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Element;

/// Architecture variants, including the ablation configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Both stages, amplitude/phase swap, cross-stage fusion.
    Full,
    /// Single stage, spatial branches only.
    MA,
    /// Single stage, dual-domain blocks.
    MB,
    /// Two stages, stage 2 consumes the stage-1 image directly (no swap), no fusion.
    MC,
    /// Two stages with swap, no fusion.
    MD,
    /// Like `MD`, with each block running spatial then frequency in series.
    SerialSpatialFirst,
    /// Like `MD`, with each block running frequency then spatial in series.
    SerialFreqFirst,
    /// Same network as `MD`.
    NoIfam,
    /// Full network with plain conv residual blocks instead of dual-domain blocks.
    NoDualBlocks,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::MA,
        Variant::MB,
        Variant::MC,
        Variant::MD,
        Variant::SerialSpatialFirst,
        Variant::SerialFreqFirst,
        Variant::NoIfam,
        Variant::NoDualBlocks,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::MA => "m_a",
            Variant::MB => "m_b",
            Variant::MC => "m_c",
            Variant::MD => "m_d",
            Variant::SerialSpatialFirst => "serial_spatial_first",
            Variant::SerialFreqFirst => "serial_freq_first",
            Variant::NoIfam => "no_ifam",
            Variant::NoDualBlocks => "no_dual_blocks",
        }
    }

    pub fn two_stage(self) -> bool {
        !matches!(self, Variant::MA | Variant::MB)
    }

    /// Stage 2 starts from the stage-1 amplitude recombined with the input phase.
    pub fn swaps(self) -> bool {
        self.two_stage() && self != Variant::MC
    }

    pub fn uses_ifam(self) -> bool {
        matches!(self, Variant::Full | Variant::NoDualBlocks)
    }

    pub fn topology(self) -> Topology {
        match self {
            Variant::MA => Topology::SpatialOnly,
            Variant::SerialSpatialFirst => Topology::SerialSpatialFirst,
            Variant::SerialFreqFirst => Topology::SerialFrequencyFirst,
            Variant::NoDualBlocks => Topology::PlainResidual,
            _ => Topology::Parallel,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DffnConfig {
    pub base_channels: usize,
    /// Channels per level, finest first. Empty means `C, 2C, 4C, 8C`.
    pub level_channels: Vec<usize>,
    pub blocks_per_level: Vec<usize>,
    pub ifam_kernel: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for DffnConfig {
    fn default() -> Self {
        Self {
            base_channels: 20,
            level_channels: vec![20, 40, 80, 160],
            blocks_per_level: vec![1, 1, 1, 1],
            ifam_kernel: 3,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl DffnConfig {
    /// A narrow ladder `C, 2C, ...` with one block per level.
    pub fn with_width(base: usize, levels: usize) -> Self {
        Self {
            base_channels: base,
            level_channels: (0..levels).map(|l| base << l).collect(),
            blocks_per_level: vec![1; levels],
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn channels(&self) -> Vec<usize> {
        if self.level_channels.is_empty() {
            (0..4).map(|l| self.base_channels << l).collect()
        } else {
            self.level_channels.clone()
        }
    }

    pub fn levels(&self) -> usize {
        self.channels().len()
    }

    /// Spatial extents must be divisible by this.
    pub fn required_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let ch = self.channels();
        if ch.is_empty() {
            return Err(Error::Config("level_channels must not be empty".into()));
        }
        if ch[0] != self.base_channels {
            return Err(Error::Config(format!(
                "base_channels {} must equal level_channels[0] {}",
                self.base_channels, ch[0]
            )));
        }
        if ch.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("level_channels must be strictly increasing, got {ch:?}")));
        }
        if self.blocks_per_level.len() != ch.len() {
            return Err(Error::Config(format!(
                "blocks_per_level has {} entries for {} levels",
                self.blocks_per_level.len(),
                ch.len()
            )));
        }
        if self.ifam_kernel == 0 || self.ifam_kernel % 2 == 0 {
            return Err(Error::Config(format!("ifam_kernel must be odd, got {}", self.ifam_kernel)));
        }
        if self.variant.uses_ifam() && ch.len() < 2 {
            return Err(Error::Config("cross-stage fusion needs at least two levels".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Shared encoder/decoder skeleton.
#[derive(Clone, Debug)]
pub struct EncoderDecoder {
    pub init: Conv,
    /// `encoder[l]`: blocks at level `l`; the last level is the bottleneck.
    pub encoder: Vec<Vec<DualBlock>>,
    /// `down[l]`: stride-2 3x3 conv from level `l` to `l + 1`.
    pub down: Vec<Conv>,
    /// `up[l]`: 1x1 conv from level `l + 1` to `l` after bilinear upsampling.
    pub up: Vec<Conv>,
    /// `decoder[l]`: blocks at level `l` on the way up (no bottleneck entry).
    pub decoder: Vec<Vec<DualBlock>>,
}

impl EncoderDecoder {
    fn build<R: rand::Rng>(
        b: &mut ParamBuilder<'_, R>,
        cfg: &DffnConfig,
        component: Component,
    ) -> Result<Self> {
        let ch = cfg.channels();
        let topo = cfg.variant.topology();
        let levels = ch.len();
        let init = b.conv("init", 3, ch[0], 3, 1)?;
        let mut encoder = Vec::with_capacity(levels);
        let mut down = Vec::new();
        for l in 0..levels {
            if l > 0 {
                down.push(b.conv(&format!("down{}", l - 1), ch[l - 1], ch[l], 3, 2)?);
            }
            let blocks = (0..cfg.blocks_per_level[l])
                .map(|i| b.scope(format!("enc{l}.b{i}"), |b| DualBlock::build(b, ch[l], component, topo)))
                .collect::<Result<Vec<_>>>()?;
            encoder.push(blocks);
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..levels - 1 {
            up.push(b.conv(&format!("up{l}"), ch[l + 1], ch[l], 1, 1)?);
            let blocks = (0..cfg.blocks_per_level[l])
                .map(|i| b.scope(format!("dec{l}.b{i}"), |b| DualBlock::build(b, ch[l], component, topo)))
                .collect::<Result<Vec<_>>>()?;
            decoder.push(blocks);
        }
        Ok(Self { init, encoder, down, up, decoder })
    }

    fn levels(&self) -> usize {
        self.encoder.len()
    }
}

fn run_blocks<T: Element>(g: &mut Graph<'_, T>, blocks: &[DualBlock], mut x: Var) -> Result<Var> {
    for blk in blocks {
        x = blk.forward(g, x)?;
    }
    Ok(x)
}

/// Output head of stage 1.
#[derive(Clone, Debug)]
pub enum Stage1Head {
    /// Two-stage variants: supervised attention bridge.
    Csam(Csam),
    /// Single-stage variants: residual image conv only.
    Image(Conv),
}

#[derive(Clone, Debug)]
pub struct Stage1 {
    pub body: EncoderDecoder,
    /// `merge[l]`: 1x1 conv fusing the upsampled feature with the level-`l` skip.
    pub merge: Vec<Conv>,
    pub head: Stage1Head,
}

#[derive(Clone, Debug)]
pub struct Ifam {
    pub ifm_a: Ifm,
    pub ifm_p: Ifm,
    /// One per decoder level, finest first.
    pub iam: Vec<Iam>,
}

#[derive(Clone, Debug)]
pub struct Stage2 {
    pub body: EncoderDecoder,
    pub ifam: Option<Ifam>,
    pub out: Conv,
}

/// Parameter layout of a whole network. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct DffnParams {
    pub cfg: DffnConfig,
    pub stage1: Stage1,
    pub stage2: Option<Stage2>,
}

/// Builds the layer layout and draws every weight from the config seed.
pub fn init_params(cfg: &DffnConfig) -> Result<(DffnParams, ParamStore<f32>)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let ch = cfg.channels();
    let two = cfg.variant.two_stage();

    let stage1 = b.scope("s1", |b| {
        let body = EncoderDecoder::build(b, cfg, Component::Amplitude)?;
        let merge = (0..ch.len() - 1)
            .map(|l| b.conv(&format!("merge{l}"), 2 * ch[l], ch[l], 1, 1))
            .collect::<Result<Vec<_>>>()?;
        let head = if two {
            Stage1Head::Csam(b.scope("csam", |b| Csam::build(b, ch[0]))?)
        } else {
            Stage1Head::Image(b.conv("head", ch[0], 3, 3, 1)?)
        };
        Ok(Stage1 { body, merge, head })
    })?;

    let stage2 = if two {
        Some(b.scope("s2", |b| {
            let body = EncoderDecoder::build(b, cfg, Component::Phase)?;
            let ifam = if cfg.variant.uses_ifam() {
                let scales = &ch[..ch.len() - 1];
                let ifm_a = b.scope("ifm_a", |b| Ifm::build(b, scales))?;
                let ifm_p = b.scope("ifm_p", |b| Ifm::build(b, scales))?;
                let iam = scales
                    .iter()
                    .enumerate()
                    .map(|(l, &c)| b.scope(format!("iam{l}"), |b| Iam::build(b, c, cfg.ifam_kernel)))
                    .collect::<Result<Vec<_>>>()?;
                Some(Ifam { ifm_a, ifm_p, iam })
            } else {
                None
            };
            let out = b.conv("out", ch[0], 3, 3, 1)?;
            Ok(Stage2 { body, ifam, out })
        })?)
    } else {
        None
    };

    Ok((DffnParams { cfg: cfg.clone(), stage1, stage2 }, store))
}

/// Graph handles for everything the losses and diagnostics need.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub o_a: Var,
    /// Stage-2 input. Equals `o_a` for single-stage variants and for `m_c`.
    pub i_mix: Var,
    pub o_p: Var,
    /// Stage-1 post-upsampling decoder features, finest first.
    pub a_feats: Vec<Var>,
    /// Stage-2 encoder features before each downsampling, finest first.
    pub p_feats: Vec<Var>,
    /// Stage-2 post-upsampling decoder features, finest first.
    pub u_feats: Vec<Var>,
    pub single_stage: bool,
}

/// Output of stage 1.
#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub o_a: Var,
    /// `None` for single-stage variants.
    pub bridged: Option<Var>,
    pub a_feats: Vec<Var>,
}

fn check_input<T: Element>(g: &Graph<'_, T>, x: Var, cfg: &DffnConfig) -> Result<(usize, usize)> {
    let (_, c, h, w) = g.value(x).dims4()?;
    if c != 3 {
        return shape_err(format!("network input must have 3 channels, got {c}"));
    }
    let m = cfg.required_multiple();
    if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
        return shape_err(format!("input extents {h}x{w} must be non-zero multiples of {m}"));
    }
    Ok((h, w))
}

pub fn stage1_forward<T: Element>(g: &mut Graph<'_, T>, params: &DffnParams, i_low: Var) -> Result<Stage1Output> {
    check_input(g, i_low, &params.cfg)?;
    let s1 = &params.stage1;
    let body = &s1.body;
    let levels = body.levels();
    let mut x = body.init.forward(g, i_low)?;
    let mut skips = Vec::with_capacity(levels);
    for l in 0..levels {
        if l > 0 {
            x = body.down[l - 1].forward(g, x)?;
        }
        x = run_blocks(g, &body.encoder[l], x)?;
        skips.push(x);
    }
    let mut a_feats = Vec::with_capacity(levels - 1);
    for l in (0..levels - 1).rev() {
        let (_, _, h, w) = g.value(skips[l]).dims4()?;
        let up = g.resample(x, h, w)?;
        let up = body.up[l].forward(g, up)?;
        a_feats.push(up);
        let cat = g.concat(&[up, skips[l]])?;
        x = s1.merge[l].forward(g, cat)?;
        x = run_blocks(g, &body.decoder[l], x)?;
    }
    a_feats.reverse();
    let (o_a, bridged) = match &s1.head {
        Stage1Head::Csam(csam) => {
            let (o, b) = csam.forward(g, x, i_low)?;
            (o, Some(b))
        }
        Stage1Head::Image(conv) => {
            let r = conv.forward(g, x)?;
            (g.add(r, i_low)?, None)
        }
    };
    Ok(Stage1Output { o_a, bridged, a_feats })
}

/// Amplitude of `o_a` recombined with the phase of `i_low`.
pub fn make_mix_input<T: Element>(g: &mut Graph<'_, T>, o_a: Var, i_low: Var) -> Result<Var> {
    if g.shape(o_a) != g.shape(i_low) {
        return shape_err(format!("mix input: {:?} vs {:?}", g.shape(o_a), g.shape(i_low)));
    }
    let sa = g.dft2(o_a)?;
    let amp = g.amplitude(sa)?;
    let sl = g.dft2(i_low)?;
    let pha = g.phase(sl)?;
    let spec = g.recompose(amp, pha)?;
    g.idft2(spec)
}

/// Returns `(o_p, p_feats, u_feats)`.
pub fn stage2_forward<T: Element>(
    g: &mut Graph<'_, T>,
    params: &DffnParams,
    i_mix: Var,
    bridged: Option<Var>,
    a_feats: &[Var],
) -> Result<(Var, Vec<Var>, Vec<Var>)> {
    check_input(g, i_mix, &params.cfg)?;
    let s2 = params
        .stage2
        .as_ref()
        .ok_or_else(|| Error::Config(format!("variant {} has no second stage", params.cfg.variant)))?;
    let body = &s2.body;
    let levels = body.levels();
    let mut x = body.init.forward(g, i_mix)?;
    if let Some(b) = bridged {
        x = g.add(x, b)?;
    }
    let mut p_feats = Vec::with_capacity(levels - 1);
    let mut extents = Vec::with_capacity(levels);
    for l in 0..levels {
        if l > 0 {
            p_feats.push(x);
            x = body.down[l - 1].forward(g, x)?;
        }
        x = run_blocks(g, &body.encoder[l], x)?;
        let (_, _, h, w) = g.value(x).dims4()?;
        extents.push((h, w));
    }

    let fused = match &s2.ifam {
        Some(ifam) => {
            if a_feats.len() != p_feats.len() {
                return shape_err(format!(
                    "stage 1 supplied {} feature scales, stage 2 has {}",
                    a_feats.len(),
                    p_feats.len()
                ));
            }
            for (a, p) in a_feats.iter().zip(&p_feats) {
                if g.shape(*a) != g.shape(*p) {
                    return shape_err(format!(
                        "stage-1 feature {:?} does not match stage-2 scale {:?}",
                        g.shape(*a),
                        g.shape(*p)
                    ));
                }
            }
            let a_bar = ifam.ifm_a.forward(g, a_feats)?;
            let p_bar = ifam.ifm_p.forward(g, &p_feats)?;
            Some((ifam, a_bar, p_bar))
        }
        None => None,
    };

    let mut u_feats = Vec::with_capacity(levels - 1);
    for l in (0..levels - 1).rev() {
        let (h, w) = extents[l];
        let up = g.resample(x, h, w)?;
        let u = body.up[l].forward(g, up)?;
        u_feats.push(u);
        x = match &fused {
            Some((ifam, a_bar, p_bar)) => ifam.iam[l].forward(g, a_bar[l], p_bar[l], u)?,
            None => u,
        };
        x = run_blocks(g, &body.decoder[l], x)?;
    }
    u_feats.reverse();
    let y = s2.out.forward(g, x)?;
    let o_p = g.add(y, i_mix)?;
    Ok((o_p, p_feats, u_feats))
}

pub fn full_forward<T: Element>(g: &mut Graph<'_, T>, params: &DffnParams, i_low: Var) -> Result<ForwardResult> {
    let s1 = stage1_forward(g, params, i_low)?;
    if !params.cfg.variant.two_stage() {
        return Ok(ForwardResult {
            o_a: s1.o_a,
            i_mix: s1.o_a,
            o_p: s1.o_a,
            a_feats: s1.a_feats,
            p_feats: Vec::new(),
            u_feats: Vec::new(),
            single_stage: true,
        });
    }
    let i_mix = if params.cfg.variant.swaps() { make_mix_input(g, s1.o_a, i_low)? } else { s1.o_a };
    let (o_p, p_feats, u_feats) = stage2_forward(g, params, i_mix, s1.bridged, &s1.a_feats)?;
    Ok(ForwardResult { o_a: s1.o_a, i_mix, o_p, a_feats: s1.a_feats, p_feats, u_feats, single_stage: false })
}

/// Scalar learnables per layer (`weight` and `bias` grouped), in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCount {
    pub total: usize,
    pub layers: Vec<(String, usize)>,
}

impl ParamCount {
    /// Sum over layers whose name starts with `prefix`.
    pub fn under(&self, prefix: &str) -> usize {
        self.layers.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, c)| c).sum()
    }

    pub fn table(&self) -> String {
        let mut s = String::from("layer\tparams\n");
        for (name, c) in &self.layers {
            s.push_str(&format!("{name}\t{c}\n"));
        }
        s.push_str(&format!("TOTAL\t{}\n", self.total));
        s
    }
}

pub fn param_count<T: Element>(store: &ParamStore<T>) -> ParamCount {
    let mut layers: Vec<(String, usize)> = Vec::new();
    for (_, p) in store.iter() {
        let layer = p
            .name
            .strip_suffix(".weight")
            .or_else(|| p.name.strip_suffix(".bias"))
            .unwrap_or(&p.name)
            .to_string();
        match layers.last_mut() {
            Some((name, c)) if *name == layer => *c += p.value.numel(),
            _ => layers.push((layer, p.value.numel())),
        }
    }
    ParamCount { total: store.numel(), layers }
}
