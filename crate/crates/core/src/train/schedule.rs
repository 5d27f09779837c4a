use super::config::{LrMode, TrainConfig};

/// `lr(k * P) = lr_init / 2^k`. Ramp mode interpolates linearly inside each
/// period; step mode holds the value for the whole period.
pub fn lr_at_epoch(e: usize, cfg: &TrainConfig) -> f64 {
    let period = cfg.lr_half_period.max(1);
    let k = e / period;
    let base = cfg.lr_init / 2f64.powi(k as i32);
    match cfg.lr_mode {
        LrMode::Step => base,
        LrMode::Ramp => {
            let frac = (e % period) as f64 / period as f64;
            base * (1.0 - 0.5 * frac)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(0, &cfg), 2e-4);
        assert!((lr_at_epoch(100, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_at_epoch(50, &cfg) - 1.5e-4).abs() < 1e-18);
        assert!((lr_at_epoch(200, &cfg) - 5e-5).abs() < 1e-18);
        let step = TrainConfig { lr_mode: LrMode::Step, ..cfg };
        assert_eq!(lr_at_epoch(99, &step), 2e-4);
        assert_eq!(lr_at_epoch(100, &step), 1e-4);
    }

    #[test]
    fn non_increasing_and_positive() {
        for mode in [LrMode::Ramp, LrMode::Step] {
            let cfg = TrainConfig { lr_mode: mode, ..TrainConfig::default() };
            let mut prev = f64::INFINITY;
            for e in 0..1000 {
                let lr = lr_at_epoch(e, &cfg);
                assert!(lr > 0.0 && lr <= prev, "{mode:?} epoch {e}");
                prev = lr;
            }
        }
    }
}
