use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use super::config::TrainConfig;
use super::schedule::lr_at_epoch;
use crate::autodiff::{Graph, ParamStore};
use crate::datagen::{crop, crop_and_augment, item_seed, ImagePair};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport};
use crate::metrics::{psnr, ssim};
use crate::network::{full_forward, DffnConfig, DffnParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
}

/// One training batch, `[B, 3, crop, crop]` each.
#[derive(Clone, Debug)]
pub struct Batch {
    pub low: Tensor<f32>,
    pub gt: Tensor<f32>,
    pub hash: u64,
}

/// FNV-1a over the bit patterns of both tensors.
pub fn batch_hash(low: &Tensor<f32>, gt: &Tensor<f32>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in low.data().iter().chain(gt.data()) {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    /// 1-based.
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
    pub batch_hash: u64,
}

impl IterRecord {
    pub const TSV_HEADER: &'static str = "iter\tepoch\tlr\tl_a\tl_p\ttotal\tpixel_a\tamp_a\tpixel_p\tfft_p\tphase_p\tbatch_hash";

    pub fn tsv(&self) -> String {
        let (l, t) = (&self.loss, &self.loss.terms);
        format!(
            "{}\t{}\t{:.6e}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:016x}",
            self.iter, self.epoch, self.lr, l.l_a, l.l_p, l.total, t.pixel_a, t.amp_a, t.pixel_p, t.fft_p, t.phase_p, self.batch_hash
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValRecord {
    pub iter: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of the unprocessed low-light inputs, for reference.
    pub input_psnr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<IterRecord>,
    pub val: Vec<ValRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainSummary {
    /// Mean total loss over 1-based iterations `from..=to` present in the log.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let sel: Vec<f64> = self.records.iter().filter(|r| (from..=to).contains(&r.iter)).map(|r| r.loss.total).collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }
}

/// Largest top-left crop whose extents are multiples of `m`.
fn fit_to_multiple(t: &Tensor<f32>, m: usize) -> Result<Tensor<f32>> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let s = (h.min(w) / m) * m;
    if s == 0 {
        return Err(Error::InvalidArgument(format!("image {h}x{w} smaller than the required multiple {m}")));
    }
    if s == h && s == w {
        return Ok(t.clone());
    }
    crop(t, 0, 0, s)
}

/// Edge-replicates a `[3, H, W]` image on the bottom and right to `[3, oh, ow]`.
fn pad_edge(t: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = t.data();
    Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        d[(ch * h + y.min(h - 1)) * w + x.min(w - 1)]
    })
}

/// Enhances one `[3, H, W]` image of any extent: pads to the network's
/// required multiple, runs the full model, crops back and clamps to `[0, 1]`.
pub fn enhance_image(params: &DffnParams, store: &ParamStore<f32>, low: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = match *low.shape() {
        [3, h, w] if h > 0 && w > 0 => (h, w),
        _ => return Err(Error::Shape(format!("expected a [3, H, W] image, got {:?}", low.shape()))),
    };
    let m = params.cfg.required_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let padded = pad_edge(low, ph, pw);
    let out = Trainer::enhance(params, store, &padded)?;
    let d = out.data();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        d[(c * ph + y) * pw + x].clamp(0.0, 1.0)
    }))
}

pub struct Trainer {
    pub params: DffnParams,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(net_cfg: &DffnConfig, train_cfg: &TrainConfig) -> Result<Self> {
        train_cfg.validate()?;
        let (params, state) = TrainState::fresh(net_cfg, train_cfg)?;
        Ok(Self { params, state })
    }

    pub fn resume(path: &Path) -> Result<Self> {
        let (params, state) = load_checkpoint(path)?;
        Ok(Self { params, state })
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.state.train_cfg
    }

    pub fn iters_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.cfg().batch).max(1)
    }

    /// `max_iterations` overrides the epoch budget when set.
    pub fn total_iterations(&self, n_train: usize) -> usize {
        let by_epochs = self.cfg().epochs.saturating_mul(self.iters_per_epoch(n_train));
        self.cfg().max_iterations.unwrap_or(by_epochs)
    }

    /// The batch for 0-based iteration `it`: a seeded permutation per epoch,
    /// then a seeded crop and flip per item. Independent of any prior state.
    pub fn batch_at(&self, train: &[ImagePair], it: usize) -> Result<Batch> {
        if train.is_empty() {
            return Err(Error::NoMatchedPairs);
        }
        let cfg = self.cfg();
        let per_epoch = self.iters_per_epoch(train.len());
        let (epoch, slot) = (it / per_epoch, it % per_epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, &format!("epoch{epoch}"))));
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, &format!("iter{it}")));
        let (mut lows, mut gts) = (Vec::with_capacity(cfg.batch), Vec::with_capacity(cfg.batch));
        for b in 0..cfg.batch {
            let pair = &train[order[(slot * cfg.batch + b) % order.len()]];
            let c = crop_and_augment(pair, cfg.crop_size, cfg.flips, &mut rng)?;
            lows.push(c.low);
            gts.push(c.gt);
        }
        let (low, gt) = (Tensor::stack(&lows)?, Tensor::stack(&gts)?);
        let hash = batch_hash(&low, &gt);
        Ok(Batch { low, gt, hash })
    }

    /// Forward, loss, backward and one optimizer update.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<LossReport> {
        let st = &mut self.state;
        let (report, grads) = {
            let mut g = Graph::with_params(&st.store);
            let x = g.constant(batch.low.clone());
            let fr = full_forward(&mut g, &self.params, x)?;
            let (root, report) = total_loss(&mut g, &fr, &batch.gt, &batch.low, &st.train_cfg.loss)?;
            if !report.is_finite() {
                return Err(Error::NonFiniteLoss(st.iteration + 1));
            }
            (report, g.backward(root)?)
        };
        st.store.zero_grad();
        grads.accumulate_into(&mut st.store)?;
        st.adam.step(&mut st.store, lr)?;
        st.iteration += 1;
        Ok(report)
    }

    /// Raw `o_p` for a `[3, H, W]` or `[N, 3, H, W]` input whose extents are
    /// already multiples of the required multiple.
    pub fn enhance(params: &DffnParams, store: &ParamStore<f32>, low: &Tensor<f32>) -> Result<Tensor<f32>> {
        let batched = if low.shape().len() == 3 { low.reshape(&[1, low.shape()[0], low.shape()[1], low.shape()[2]])? } else { low.clone() };
        let mut g = Graph::with_params(store);
        let x = g.constant(batched);
        let fr = full_forward(&mut g, params, x)?;
        let out = g.value(fr.o_p).clone();
        if low.shape().len() == 3 {
            out.reshape(low.shape())
        } else {
            Ok(out)
        }
    }

    /// Mean PSNR/SSIM of `o_p` (clamped to `[0, 1]`) over the validation pairs.
    pub fn validate(&self, pairs: &[ImagePair]) -> Result<ValRecord> {
        let m = self.params.cfg.required_multiple();
        let (mut p, mut s, mut p_in) = (0.0, 0.0, 0.0);
        for pair in pairs {
            let low = fit_to_multiple(&pair.low, m)?;
            let gt = fit_to_multiple(&pair.gt, m)?;
            let out = Self::enhance(&self.params, &self.state.store, &low)?.map(|v| v.clamp(0.0, 1.0));
            p += psnr(&out, &gt)?;
            s += if gt.shape()[1] >= 11 && gt.shape()[2] >= 11 { ssim(&out, &gt)? } else { f64::NAN };
            p_in += psnr(&low, &gt)?;
        }
        let n = pairs.len().max(1) as f64;
        Ok(ValRecord { iter: self.state.iteration, psnr: p / n, ssim: s / n, input_psnr: p_in / n })
    }

    /// Runs until the iteration budget is spent. Writes one TSV line per
    /// iteration to `log`, validates every `val_interval` iterations and at the
    /// end, and checkpoints to `out_dir/last.ckpt` at each epoch end. Every
    /// checkpoint is read back and compared bitwise before training goes on.
    pub fn run(&mut self, data: &TrainData, out_dir: Option<&Path>, log: &mut dyn Write) -> Result<TrainSummary> {
        let n_train = data.train.len();
        let total = self.total_iterations(n_train);
        let per_epoch = self.iters_per_epoch(n_train);
        let mut summary = TrainSummary { records: Vec::new(), val: Vec::new(), checkpoints: Vec::new() };
        if self.state.iteration == 0 {
            writeln!(log, "{}", IterRecord::TSV_HEADER)?;
        }
        while self.state.iteration < total {
            let it = self.state.iteration;
            let epoch = it / per_epoch;
            let lr = lr_at_epoch(epoch, self.cfg());
            let batch = self.batch_at(&data.train, it)?;
            let loss = self.train_step(&batch, lr)?;
            let rec = IterRecord { iter: it + 1, epoch, lr, loss, batch_hash: batch.hash };
            writeln!(log, "{}", rec.tsv())?;
            summary.records.push(rec);

            let done = self.state.iteration;
            let interval = self.cfg().val_interval;
            if !data.val.is_empty() && ((interval > 0 && done % interval == 0) || done == total) {
                summary.val.push(self.validate(&data.val)?);
            }
            if done % per_epoch == 0 || done == total {
                self.state.epoch = done.div_ceil(per_epoch);
                if let Some(dir) = out_dir {
                    let path = dir.join("last.ckpt");
                    save_checkpoint(&path, &self.state)?;
                    let (_, back) = load_checkpoint(&path)?;
                    if !back.bitwise_eq(&self.state) {
                        return Err(Error::Manifest(format!("checkpoint {} did not round-trip", path.display())));
                    }
                    summary.checkpoints.push(path);
                }
            }
        }
        Ok(summary)
    }
}
