//! Rate and distortion over a grid of codec settings.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::sync::Arc;

use serde::Serialize;

use super::metrics::FidelityMetrics;
use crate::codec::{bits_per_pixel, compression_ratio, CodecConfig, CodecModel};
use crate::error::{config_err, Result};
use crate::tensor::FeatureMap;
use crate::wire::{load_bundle, payload_size_bits};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub codebook_size: usize,
    pub stages: usize,
    pub reduction_ratio: usize,
    pub ema_alpha: f64,
}

impl SweepPoint {
    /// The codec configuration of this point for `channels`-wide maps, with
    /// every other setting taken from `base`.
    pub fn config(&self, base: &CodecConfig, channels: usize) -> CodecConfig {
        CodecConfig {
            channels,
            reduction_ratio: self.reduction_ratio,
            stages: self.stages,
            codebook_size: self.codebook_size,
            ema_alpha: self.ema_alpha,
            ..*base
        }
    }

    /// Cartesian product, `K` varying fastest.
    pub fn grid(sizes: &[usize], stages: &[usize], ratios: &[usize], alphas: &[f64]) -> Vec<Self> {
        let mut out = Vec::new();
        for &ema_alpha in alphas {
            for &reduction_ratio in ratios {
                for &n in stages {
                    for &k in sizes {
                        out.push(Self {
                            codebook_size: k,
                            stages: n,
                            reduction_ratio,
                            ema_alpha,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Supplies trained codecs for sweep points. `Ok(None)` means no model is
/// available and only the rate columns are reported.
pub trait ModelProvider {
    fn model(&self, point: &SweepPoint) -> Result<Option<Arc<CodecModel>>>;
}

/// Bundles named `k{K}_nq{n_q}_crr{C_rr}_a{alpha}.rvqc` in one directory.
#[derive(Debug, Clone)]
pub struct BundleDirProvider {
    pub dir: PathBuf,
}

impl BundleDirProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn file_name(point: &SweepPoint) -> String {
        format!(
            "k{}_nq{}_crr{}_a{}.rvqc",
            point.codebook_size, point.stages, point.reduction_ratio, point.ema_alpha
        )
    }
}

impl ModelProvider for BundleDirProvider {
    fn model(&self, point: &SweepPoint) -> Result<Option<Arc<CodecModel>>> {
        let path = self.dir.join(Self::file_name(point));
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(Arc::new(load_bundle(path)?)))
    }
}

/// Wraps a closure, typically one that trains on demand.
pub struct FnProvider<F>(pub F);

impl<F> ModelProvider for FnProvider<F>
where
    F: Fn(&SweepPoint) -> Result<Option<Arc<CodecModel>>>,
{
    fn model(&self, point: &SweepPoint) -> Result<Option<Arc<CodecModel>>> {
        (self.0)(point)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub bits_per_pixel: u64,
    /// Bitstream bits for one map of the evaluation shape.
    pub bits_per_map: u64,
    pub compression_ratio: f64,
    /// Mean over the evaluation maps; `None` without a model.
    pub fidelity: Option<FidelityMetrics>,
}

/// Evaluates every point on `maps`, which must share one shape.
pub fn run_sweep(
    points: &[SweepPoint],
    maps: &[FeatureMap],
    base: &CodecConfig,
    provider: &dyn ModelProvider,
) -> Result<Vec<SweepRow>> {
    let Some(first) = maps.first() else {
        return config_err("sweep needs at least one evaluation map");
    };
    let (h, w, c) = first.shape();
    let mut rows = Vec::with_capacity(points.len());
    for point in points {
        let cfg = point.config(base, c);
        cfg.validate()?;
        let fidelity = match provider.model(point)? {
            None => None,
            Some(model) => {
                let mc = model.config();
                if (mc.codebook_size, mc.stages, mc.reduction_ratio, mc.channels)
                    != (
                        cfg.codebook_size,
                        cfg.stages,
                        cfg.reduction_ratio,
                        cfg.channels,
                    )
                {
                    return config_err(format!(
                        "model for K={} n_q={} C_rr={} has K={} n_q={} C_rr={} C={}",
                        cfg.codebook_size,
                        cfg.stages,
                        cfg.reduction_ratio,
                        mc.codebook_size,
                        mc.stages,
                        mc.reduction_ratio,
                        mc.channels
                    ));
                }
                let metrics = maps
                    .iter()
                    .map(|f| FidelityMetrics::measure(f, &model.reconstruct(f)?))
                    .collect::<Result<Vec<_>>>()?;
                FidelityMetrics::mean(&metrics)
            }
        };
        rows.push(SweepRow {
            point: *point,
            bits_per_pixel: bits_per_pixel(&cfg)?,
            bits_per_map: payload_size_bits(h, w, cfg.stages, cfg.codebook_size)?,
            compression_ratio: compression_ratio(&cfg)?,
            fidelity,
        });
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "codebook_size",
        "stages",
        "reduction_ratio",
        "ema_alpha",
        "bits_per_pixel",
        "bits_per_map",
        "compression_ratio",
        "mse",
        "cosine",
        "psnr",
    ])
    .expect("in-memory csv");
    for r in rows {
        let f = r.fidelity.as_ref();
        w.write_record([
            r.point.codebook_size.to_string(),
            r.point.stages.to_string(),
            r.point.reduction_ratio.to_string(),
            r.point.ema_alpha.to_string(),
            r.bits_per_pixel.to_string(),
            r.bits_per_map.to_string(),
            r.compression_ratio.to_string(),
            opt(f.map(|m| m.mse)),
            opt(f.map(|m| m.cosine)),
            opt(f.map(|m| m.psnr)),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

/// Aligned plain-text table.
pub struct SweepTable<'a>(pub &'a [SweepRow]);

impl fmt::Display for SweepTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        writeln!(
            s,
            "{:>6} {:>4} {:>5} {:>6} {:>6} {:>10} {:>8} {:>12} {:>8} {:>8}",
            "K", "n_q", "C_rr", "alpha", "bpp", "bits/map", "ratio", "mse", "cosine", "psnr"
        )?;
        for r in self.0 {
            let (mse, cos, psnr) = match &r.fidelity {
                Some(m) => (
                    format!("{:.6}", m.mse),
                    format!("{:.4}", m.cosine),
                    format!("{:.2}", m.psnr),
                ),
                None => ("-".into(), "-".into(), "-".into()),
            };
            writeln!(
                s,
                "{:>6} {:>4} {:>5} {:>6} {:>6} {:>10} {:>8.0} {:>12} {:>8} {:>8}",
                r.point.codebook_size,
                r.point.stages,
                r.point.reduction_ratio,
                r.point.ema_alpha,
                r.bits_per_pixel,
                r.bits_per_map,
                r.compression_ratio,
                mse,
                cos,
                psnr
            )?;
        }
        f.write_str(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct NoModels;

    impl ModelProvider for NoModels {
        fn model(&self, _: &SweepPoint) -> Result<Option<Arc<CodecModel>>> {
            Ok(None)
        }
    }

    #[test]
    fn rate_columns_without_models() {
        let maps = [FeatureMap::zeros(128, 128, 256)];
        let points = SweepPoint::grid(&[4, 16, 64, 256, 1024], &[3], &[16], &[0.8]);
        let rows = run_sweep(&points, &maps, &CodecConfig::default(), &NoModels).unwrap();
        let ratios: Vec<u64> = rows
            .iter()
            .map(|r| r.compression_ratio.round() as u64)
            .collect();
        assert_eq!(ratios, [1365, 683, 455, 341, 273]);
        assert_eq!(rows[2].bits_per_map, 294_912);
        assert!(rows.iter().all(|r| r.fidelity.is_none()));
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 6);
        assert!(SweepTable(&rows).to_string().contains("1365"));
    }

    #[test]
    fn bundle_file_names() {
        let p = SweepPoint {
            codebook_size: 64,
            stages: 3,
            reduction_ratio: 16,
            ema_alpha: 0.8,
        };
        assert_eq!(BundleDirProvider::file_name(&p), "k64_nq3_crr16_a0.8.rvqc");
    }

    #[test]
    fn empty_evaluation_set() {
        assert!(run_sweep(&[], &[], &CodecConfig::default(), &NoModels).is_err());
    }
}
