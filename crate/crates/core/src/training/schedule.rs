//! Per-epoch learning rate: linear warmup over the first epochs, then
//! stepped decay after each listed epoch boundary.

use super::TrainConfig;

/// Learning rate for a 1-based epoch index.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let mut lr = if cfg.warmup_epochs > 0 && epoch <= cfg.warmup_epochs {
        cfg.base_lr * epoch as f64 / cfg.warmup_epochs as f64
    } else {
        cfg.base_lr
    };
    for &boundary in &cfg.decay_epochs {
        if epoch > boundary {
            lr *= cfg.decay_factor;
        }
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_steps() {
        let cfg = TrainConfig { base_lr: 1e-4, ..TrainConfig::default() };
        // Linear over the first 5 epochs.
        assert!((lr_at_epoch(&cfg, 1) - 2e-5).abs() < 1e-18);
        assert!((lr_at_epoch(&cfg, 3) - 6e-5).abs() < 1e-18);
        assert!((lr_at_epoch(&cfg, 5) - 1e-4).abs() < 1e-18);
        // Plateau.
        assert_eq!(lr_at_epoch(&cfg, 6), 1e-4);
        assert_eq!(lr_at_epoch(&cfg, 30), 1e-4);
        // Halved after 30, 40, 45.
        assert!((lr_at_epoch(&cfg, 31) - 5e-5).abs() < 1e-18);
        assert!((lr_at_epoch(&cfg, 41) - 2.5e-5).abs() < 1e-18);
        assert!((lr_at_epoch(&cfg, 46) - 1.25e-5).abs() < 1e-18);
        assert!((lr_at_epoch(&cfg, 50) - 1.25e-5).abs() < 1e-18);
    }
}
