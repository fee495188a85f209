use serde::Serialize;

use crate::error::Result;
use crate::tensor::FeatureMap;

/// Reconstruction quality of `F̂` against the sender's `F`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FidelityMetrics {
    pub mse: f64,
    pub cosine: f64,
    /// Peak is the largest magnitude in the reference map; infinite when
    /// the reconstruction is exact.
    pub psnr: f64,
}

impl FidelityMetrics {
    pub fn measure(reference: &FeatureMap, reconstructed: &FeatureMap) -> Result<Self> {
        let mse = reference.mse(reconstructed)?;
        Ok(Self {
            mse,
            cosine: cosine_similarity(reference.data(), reconstructed.data()),
            psnr: psnr(reference.max_abs(), mse),
        })
    }

    /// Componentwise mean; `None` for an empty slice.
    pub fn mean(all: &[FidelityMetrics]) -> Option<Self> {
        if all.is_empty() {
            return None;
        }
        let n = all.len() as f64;
        Some(Self {
            mse: all.iter().map(|m| m.mse).sum::<f64>() / n,
            cosine: all.iter().map(|m| m.cosine).sum::<f64>() / n,
            psnr: all.iter().map(|m| m.psnr).sum::<f64>() / n,
        })
    }
}

/// Cosine of the angle between two flattened maps. Two zero vectors count
/// as identical; one zero vector against a non-zero one as orthogonal.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na > 0.0, nb > 0.0) {
        (true, true) => dot / (na * nb),
        (false, false) => 1.0,
        _ => 0.0,
    }
}

pub fn psnr(peak: f64, mse: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

/// Median of a non-empty sample; the mean of the two middle values for even
/// lengths. NaNs sort last.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}
