use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kmeans::kmeanspp_extend;
use crate::codec::{Codebook, CodebookStack, TrainingHook};
use crate::error::{config_err, Error, Result};

/// Moves entry `k` toward `residual`: `e ← (1 − α)·e + α·r`.
pub fn ema_update(cb: &mut Codebook, chosen_k: usize, residual: &[f64], alpha: f64) -> Result<()> {
    if cb.is_frozen() {
        return Err(Error::State(format!(
            "EMA update on frozen codebook (stage {})",
            cb.stage()
        )));
    }
    if chosen_k >= cb.size() {
        return Err(Error::Config(format!(
            "code {chosen_k} out of range for K = {}",
            cb.size()
        )));
    }
    if residual.len() != cb.dim() {
        return Err(Error::Shape(format!(
            "residual of length {} for {}-dimensional codebook",
            residual.len(),
            cb.dim()
        )));
    }
    let keep = 1.0 - alpha;
    for (e, r) in cb.entry_mut(chosen_k).iter_mut().zip(residual) {
        *e = keep * *e + alpha * r;
    }
    cb.usage_counts_mut()[chosen_k] += 1;
    Ok(())
}

/// Residual sums per entry since the last [`EmaAccumulator::flush`], so a
/// whole batch is quantized against fixed entries before any of them move.
#[derive(Debug, Clone)]
pub struct EmaAccumulator {
    dim: usize,
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl EmaAccumulator {
    pub fn new(k: usize, dim: usize) -> Self {
        Self {
            dim,
            sums: vec![0.0; k * dim],
            counts: vec![0; k],
        }
    }

    pub fn add(&mut self, k: usize, residual: &[f64]) {
        self.counts[k] += 1;
        for (s, r) in self.sums[k * self.dim..(k + 1) * self.dim]
            .iter_mut()
            .zip(residual)
        {
            *s += r;
        }
    }

    /// Applies [`ema_update`] once to every entry assigned since the last
    /// flush, with `r` the mean of its assigned residuals. Usage counts grow
    /// by the number of assignments.
    pub fn flush(&mut self, cb: &mut Codebook, alpha: f64) -> Result<()> {
        if cb.size() != self.counts.len() || cb.dim() != self.dim {
            return Err(Error::Shape(format!(
                "accumulator is {}x{}, codebook is {}x{}",
                self.counts.len(),
                self.dim,
                cb.size(),
                cb.dim()
            )));
        }
        let mut mean = vec![0.0; self.dim];
        for k in 0..self.counts.len() {
            let n = self.counts[k];
            if n == 0 {
                continue;
            }
            let sum = &self.sums[k * self.dim..(k + 1) * self.dim];
            for (m, s) in mean.iter_mut().zip(sum) {
                *m = s / n as f64;
            }
            ema_update(cb, k, &mean, alpha)?;
            cb.usage_counts_mut()[k] += n - 1;
        }
        self.sums.fill(0.0);
        self.counts.fill(0);
        Ok(())
    }
}

/// Single-codebook EMA learning: k-means++ seeds, then `passes` sweeps that
/// assign every point to its nearest entry and flush one update per entry.
/// Returns `k × dim` entries.
pub fn ema_codebook_fit(
    points: &[f64],
    dim: usize,
    k: usize,
    alpha: f64,
    passes: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return config_err("point buffer is not a whole number of vectors");
    }
    let n = points.len() / dim;
    if k == 0 || k > n {
        return config_err(format!("cannot fit {k} entries to {n} points"));
    }
    let mut seeds = Vec::with_capacity(k * dim);
    kmeanspp_extend(points, dim, &mut seeds, k, rng);
    let mut cb = Codebook::new(0, k, dim, seeds)?;
    let mut acc = EmaAccumulator::new(k, dim);
    for _ in 0..passes {
        for p in points.chunks_exact(dim) {
            acc.add(cb.nearest(p).0, p);
        }
        acc.flush(&mut cb, alpha)?;
    }
    Ok(cb.entries().to_vec())
}

/// Training hook collecting assignments for batched EMA updates. It also
/// counts code usage since its creation and keeps a reservoir sample of each
/// stage's residuals for re-seeding dead codes.
pub(crate) struct EmaHook {
    alpha: f64,
    pub(crate) epoch_usage: Vec<Vec<u64>>,
    pending: Vec<EmaAccumulator>,
    pool_capacity: usize,
    pub(crate) pools: Vec<Vec<f64>>,
    seen: Vec<u64>,
    dim: usize,
    rng: ChaCha8Rng,
}

impl EmaHook {
    pub(crate) fn new(
        alpha: f64,
        stages: usize,
        k: usize,
        dim: usize,
        pool_capacity: usize,
        rng: ChaCha8Rng,
    ) -> Self {
        Self {
            alpha,
            epoch_usage: vec![vec![0; k]; stages],
            pending: vec![EmaAccumulator::new(k, dim); stages],
            pool_capacity,
            pools: vec![Vec::new(); stages],
            seen: vec![0; stages],
            dim,
            rng,
        }
    }

    pub(crate) fn reset_pools(&mut self) {
        self.pools.iter_mut().for_each(Vec::clear);
        self.seen.fill(0);
    }

    /// Moves every codebook by the assignments observed since the last call.
    pub(crate) fn flush(&mut self, stack: &mut CodebookStack) -> Result<()> {
        for (cb, acc) in stack.stages_mut().iter_mut().zip(&mut self.pending) {
            acc.flush(cb, self.alpha)?;
        }
        Ok(())
    }

    fn sample(&mut self, stage: usize, residual: &[f64]) {
        let seen = self.seen[stage];
        self.seen[stage] += 1;
        let pool = &mut self.pools[stage];
        if (pool.len() / self.dim) < self.pool_capacity {
            pool.extend_from_slice(residual);
        } else {
            let j = self.rng.random_range(0..=seen);
            if (j as usize) < self.pool_capacity {
                let at = j as usize * self.dim;
                pool[at..at + self.dim].copy_from_slice(residual);
            }
        }
    }
}

impl TrainingHook for EmaHook {
    fn observe(&mut self, codebook: &mut Codebook, chosen: usize, residual: &[f64]) -> Result<()> {
        let stage = codebook.stage();
        self.epoch_usage[stage][chosen] += 1;
        self.sample(stage, residual);
        self.pending[stage].add(chosen, residual);
        Ok(())
    }
}
