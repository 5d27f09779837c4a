//! PSNR and single-scale SSIM, plus directory-level evaluation.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::imageio;
use crate::tensor::{Element, Tensor};

/// Reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// `10 log10(1 / MSE)` for values in `[0, 1]`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    x.expect_same_shape(y, "psnr")?;
    let n = x.numel();
    if n == 0 {
        return shape_err("psnr of empty tensors");
    }
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a.to_f64().unwrap_or(f64::NAN) - b.to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filtering over valid windows only.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = win.iter().enumerate().map(|(k, &c)| c * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = win.iter().enumerate().map(|(k, &c)| c * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn planes<T: Element>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        [n, c, h, w] => Ok((n * c, h, w)),
        _ => shape_err(format!("ssim expects [C, H, W] or [N, C, H, W], got {:?}", t.shape())),
    }
}

/// Mean SSIM of one plane pair.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> f64 {
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, win);
    let mu_b = filter_valid(b, h, w, win);
    let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, win);
    let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, win);
    let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, win);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Gaussian-window SSIM (11x11, sigma 1.5, K1 = 0.01, K2 = 0.03, L = 1) over
/// valid windows, computed per channel and averaged.
pub fn ssim<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    x.expect_same_shape(y, "ssim")?;
    let (np, h, w) = planes(x)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("ssim needs extents of at least {SSIM_WINDOW}, got {h}x{w}")));
    }
    let win = gaussian_window();
    let to64 = |t: &Tensor<T>| t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect::<Vec<_>>();
    let (a, b) = (to64(x), to64(y));
    let hw = h * w;
    let sum: f64 = (0..np).map(|p| ssim_plane(&a[p * hw..(p + 1) * hw], &b[p * hw..(p + 1) * hw], h, w, &win)).sum();
    Ok(sum / np as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// File names present in only one of the two directories.
    pub unmatched: Vec<String>,
}

impl EvalReport {
    pub fn from_scores(images: Vec<ImageScore>, unmatched: Vec<String>) -> Self {
        let n = images.len().max(1) as f64;
        let mean_psnr = images.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|s| s.ssim).sum::<f64>() / n;
        Self { images, mean_psnr, mean_ssim, unmatched }
    }

    pub fn count(&self) -> usize {
        self.images.len()
    }

    pub fn warnings(&self) -> usize {
        self.unmatched.len()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("name\tpsnr\tssim\n");
        for r in &self.images {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}", r.name, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "MEAN\t{:.6}\t{:.6}", self.mean_psnr, self.mean_ssim);
        s
    }
}

/// Pairs images by file name and scores every pair.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let names = |d: &Path| -> Result<BTreeSet<String>> {
        Ok(imageio::list_images(d)?
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect())
    };
    let (pred, gt) = (names(pred_dir)?, names(gt_dir)?);
    let unmatched: Vec<String> = pred.symmetric_difference(&gt).cloned().collect();
    let mut scores = Vec::new();
    for name in pred.intersection(&gt) {
        let x = imageio::read_rgb(&pred_dir.join(name))?;
        let y = imageio::read_rgb(&gt_dir.join(name))?;
        scores.push(ImageScore { name: name.clone(), psnr: psnr(&x, &y)?, ssim: ssim(&x, &y)? });
    }
    if scores.is_empty() {
        return Err(Error::NoMatchedPairs);
    }
    Ok(EvalReport::from_scores(scores, unmatched))
}
