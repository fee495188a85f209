use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Bits used by one uncompressed `f32` feature value.
pub const RAW_BITS_PER_VALUE: u64 = 32;

/// Codebook sizes of the standard operating points, smallest to largest.
pub const STANDARD_CODEBOOK_SIZES: [usize; 5] = [4, 16, 64, 256, 1024];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Feature channels `C` of the maps exchanged between agents.
    pub channels: usize,
    /// `C / C_r`.
    pub reduction_ratio: usize,
    /// Number of residual stages `n_q`.
    pub stages: usize,
    /// Entries per stage codebook `K`, a power of two.
    pub codebook_size: usize,
    /// Weight given to the new residual in the EMA codebook update.
    pub ema_alpha: f64,
    /// Group count of both group normalizations.
    pub groups: usize,
    /// Whether the post-affine projection on the receiver carries a bias.
    #[serde(default = "default_true")]
    pub post_affine_bias: bool,
}

fn default_true() -> bool {
    true
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            channels: 256,
            reduction_ratio: 16,
            stages: 3,
            codebook_size: 64,
            ema_alpha: 0.8,
            groups: 4,
            post_affine_bias: true,
        }
    }
}

impl CodecConfig {
    pub fn with_codebook_size(mut self, k: usize) -> Self {
        self.codebook_size = k;
        self
    }

    pub fn with_stages(mut self, n_q: usize) -> Self {
        self.stages = n_q;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduction_ratio == 0 || self.stages == 0 {
            return config_err("channels, reduction ratio and stages must be positive");
        }
        if !self.channels.is_multiple_of(self.reduction_ratio) {
            return config_err(format!(
                "reduction ratio {} does not divide {} channels",
                self.reduction_ratio, self.channels
            ));
        }
        if self.stages > u8::MAX as usize {
            return config_err(format!("at most 255 stages, got {}", self.stages));
        }
        if self.channels > u16::MAX as usize {
            return config_err(format!("at most 65535 channels, got {}", self.channels));
        }
        log2_codebook_size(self.codebook_size)?;
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return config_err(format!(
                "ema alpha must lie in (0, 1), got {}",
                self.ema_alpha
            ));
        }
        let c_r = self.reduced_channels();
        if self.groups == 0 || !c_r.is_multiple_of(self.groups) {
            return config_err(format!(
                "{} groups do not divide {c_r} reduced channels",
                self.groups
            ));
        }
        Ok(())
    }

    /// `C_r = C / C_rr`.
    pub fn reduced_channels(&self) -> usize {
        self.channels / self.reduction_ratio
    }

    pub fn log2_codebook_size(&self) -> Result<u32> {
        log2_codebook_size(self.codebook_size)
    }
}

/// `log₂ K` for a power-of-two `K` in `[2, 2¹⁶]`.
pub fn log2_codebook_size(k: usize) -> Result<u32> {
    if k < 2 || !k.is_power_of_two() || k > 1 << 16 {
        return config_err(format!(
            "codebook size must be a power of two in [2, 65536], got {k}"
        ));
    }
    Ok(k.trailing_zeros())
}

/// Transmitted bits per spatial location, `n_q · log₂ K`.
pub fn bits_per_pixel(config: &CodecConfig) -> Result<u64> {
    Ok(config.stages as u64 * config.log2_codebook_size()? as u64)
}

/// Raw `f32` feature bits over transmitted index bits, per pixel.
pub fn compression_ratio(config: &CodecConfig) -> Result<f64> {
    let raw = (RAW_BITS_PER_VALUE * config.channels as u64) as f64;
    Ok(raw / bits_per_pixel(config)? as f64)
}

/// Compression ratio rounded to the nearest integer, as printed in rate tables.
pub fn compression_ratio_rounded(config: &CodecConfig) -> Result<u64> {
    Ok(compression_ratio(config)?.round() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_rate_points() {
        let expected = [
            (4, 6, 1365),
            (16, 12, 683),
            (64, 18, 455),
            (256, 24, 341),
            (1024, 30, 273),
        ];
        for (k, bpp, compr) in expected {
            let cfg = CodecConfig::default().with_codebook_size(k);
            assert_eq!(bits_per_pixel(&cfg).unwrap(), bpp);
            assert_eq!(compression_ratio_rounded(&cfg).unwrap(), compr);
        }
    }

    #[test]
    fn smallest_config_is_one_bit() {
        let cfg = CodecConfig {
            stages: 1,
            codebook_size: 2,
            ..CodecConfig::default()
        };
        assert_eq!(bits_per_pixel(&cfg).unwrap(), 1);
    }

    #[test]
    fn reduced_channels_default() {
        assert_eq!(CodecConfig::default().reduced_channels(), 16);
    }

    #[test]
    fn rejects_non_power_of_two() {
        let cfg = CodecConfig::default().with_codebook_size(48);
        assert!(cfg.validate().is_err());
        assert!(bits_per_pixel(&cfg).is_err());
    }

    #[test]
    fn rejects_bad_alpha_and_groups() {
        let mut cfg = CodecConfig {
            ema_alpha: 1.0,
            ..CodecConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.ema_alpha = 0.8;
        cfg.groups = 3;
        assert!(cfg.validate().is_err());
    }
}
