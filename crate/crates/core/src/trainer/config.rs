use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Weight of the new residual in `e ← (1 − α)e + αr`.
    pub ema_alpha: f64,
    pub beta_commit: f64,
    pub lambda_ortho: f64,
    pub epochs: usize,
    /// Peak learning rate of the one-cycle schedule.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of steps spent warming up to the peak learning rate.
    pub warmup_fraction: f64,
    /// The schedule starts and ends at `learning_rate / lr_divisor`.
    pub lr_divisor: f64,
    /// Re-seed codes that went unused for a whole epoch.
    pub reseed_dead_codes: bool,
    /// Least-squares fit of the expand projection right after codebook seeding.
    pub decoder_warm_start: bool,
    /// Residual vectors sampled from the first batch for k-means++ seeding.
    pub init_sample_points: usize,
    /// Residual vectors per stage kept from the latest batch for re-seeding.
    pub residual_pool: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            ema_alpha: 0.8,
            beta_commit: 0.05,
            lambda_ortho: 1e-4,
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 8,
            seed: 0,
            warmup_fraction: 0.3,
            lr_divisor: 25.0,
            reseed_dead_codes: true,
            decoder_warm_start: true,
            init_sample_points: 16_384,
            residual_pool: 4096,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return config_err(format!(
                "ema_alpha must lie in (0, 1), got {}",
                self.ema_alpha
            ));
        }
        for (name, v) in [
            ("beta_commit", self.beta_commit),
            ("lambda_ortho", self.lambda_ortho),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return config_err(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return config_err("learning_rate must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return config_err("epochs and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return config_err("warmup_fraction must lie in [0, 1)");
        }
        if self.lr_divisor.is_nan() || self.lr_divisor < 1.0 {
            return config_err("lr_divisor must be at least 1");
        }
        if self.init_sample_points == 0 || self.residual_pool == 0 {
            return config_err("sample sizes must be positive");
        }
        Ok(())
    }

    pub fn from_manifest_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_manifest_str(&text)
    }

    pub fn to_manifest_string(&self) -> String {
        toml::to_string(self).expect("training config serializes")
    }

    /// Learning rate at `step` of `total` steps: linear warmup from
    /// `lr / divisor` to `lr`, then cosine decay back to `lr / divisor`.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        let peak = self.learning_rate;
        let floor = peak / self.lr_divisor;
        let total = total.max(1);
        let warmup = (self.warmup_fraction * total as f64).round() as usize;
        if step < warmup {
            return floor + (peak - floor) * step as f64 / warmup as f64;
        }
        let decay_steps = (total - warmup).max(1);
        let t = ((step - warmup) as f64 / decay_steps as f64).min(1.0);
        floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Per-epoch training losses.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub epoch: usize,
    pub recon_mse: f64,
    pub commit_loss: f64,
    pub ortho_loss: f64,
    pub total: f64,
    /// Mean squared residual norm after each stage.
    pub per_stage_residual: Vec<f64>,
}
