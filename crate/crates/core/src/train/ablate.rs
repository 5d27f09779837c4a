use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::config::TrainConfig;
use super::trainer::{TrainData, Trainer};
use crate::error::{Error, Result};
use crate::network::{param_count, DffnConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub params: usize,
    pub iterations: usize,
    /// Mean total loss over the last tenth of the run.
    pub final_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    /// Fold of every batch hash seen, so runs can be checked for identical data.
    pub data_digest: u64,
}

#[derive(Clone, Debug, Default)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
}

impl AblationSummary {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// True when every variant consumed the same batches in the same order.
    pub fn same_data(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].data_digest == w[1].data_digest && w[0].iterations == w[1].iterations)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\tseed\tparams\titerations\tfinal_loss\tval_psnr\tval_ssim\tdata_digest\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.6}\t{:.4}\t{:.5}\t{:016x}\n",
                r.variant.name(),
                r.seed,
                r.params,
                r.iterations,
                r.final_loss,
                r.val_psnr,
                r.val_ssim,
                r.data_digest
            ));
        }
        out
    }
}

/// Trains each variant from the same seed on the same batch sequence with the
/// same budget. Per-variant iteration logs go to `log_dir/<variant>.tsv`.
pub fn run_ablation(
    net: &DffnConfig,
    train: &TrainConfig,
    variants: &[Variant],
    data: &TrainData,
    log_dir: Option<&Path>,
) -> Result<AblationSummary> {
    if data.val.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one validation pair".into()));
    }
    if let Some(dir) = log_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut summary = AblationSummary::default();
    for &variant in variants {
        let cfg = net.clone().with_variant(variant);
        let mut t = Trainer::new(&cfg, train)?;
        let params = param_count(&t.state.store).total;
        let run = match log_dir {
            Some(dir) => {
                let mut log = BufWriter::new(File::create(dir.join(format!("{}.tsv", variant.name())))?);
                t.run(data, None, &mut log)?
            }
            None => t.run(data, None, &mut std::io::sink())?,
        };
        let n = run.records.len();
        let tail = (n / 10).max(1);
        let val = run.val.last().ok_or_else(|| Error::InvalidArgument("empty training budget".into()))?;
        let digest = run.records.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, r| (h ^ r.batch_hash).wrapping_mul(0x0100_0000_01b3));
        summary.rows.push(AblationRow {
            variant,
            seed: cfg.seed,
            params,
            iterations: n,
            final_loss: run.mean_loss(n + 1 - tail, n),
            val_psnr: val.psnr,
            val_ssim: val.ssim,
            data_digest: digest,
        });
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{procedural_pairs, SynthesisParams};

    #[test]
    fn variants_share_data_and_budget() {
        let mut train = procedural_pairs(3, 16, &SynthesisParams { seed: 9, ..SynthesisParams::default() }).unwrap();
        let data = TrainData { val: train.split_off(2), train };
        let net = DffnConfig::with_width(4, 2);
        let tc = TrainConfig { batch: 2, crop_size: 16, epochs: 2, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let s = run_ablation(&net, &tc, &[Variant::Full, Variant::MA, Variant::MC], &data, Some(dir.path())).unwrap();
        assert_eq!(s.rows.len(), 3);
        assert!(s.same_data());
        assert!(s.rows.iter().all(|r| r.iterations == 2 && r.final_loss.is_finite()));
        assert!(s.row(Variant::MA).unwrap().params < s.row(Variant::Full).unwrap().params);
        assert_eq!(s.to_tsv().lines().count(), 4);
        assert!(dir.path().join("m_a.tsv").exists());
    }
}
