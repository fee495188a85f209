use std::hash::Hasher;
use std::sync::OnceLock;

use fnv::FnvHasher;

use super::config::log2_codebook_size;
use crate::error::{config_err, shape_err, Error, Result};

/// One stage's table of `K` code vectors of dimension `C_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    stage: usize,
    size: usize,
    dim: usize,
    /// Row-major `K × C_r`.
    entries: Vec<f64>,
    usage_counts: Vec<u64>,
    frozen: bool,
}

impl Codebook {
    pub fn new(stage: usize, size: usize, dim: usize, entries: Vec<f64>) -> Result<Self> {
        log2_codebook_size(size)?;
        if dim == 0 {
            return config_err("codebook dimension must be positive");
        }
        if entries.len() != size * dim {
            return shape_err(format!(
                "codebook entries length {} != {size}x{dim}",
                entries.len()
            ));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite codebook entry in stage {stage}"
            )));
        }
        Ok(Self {
            stage,
            size,
            dim,
            entries,
            usage_counts: vec![0; size],
            frozen: false,
        })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn entry_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.entries[k * self.dim..(k + 1) * self.dim]
    }

    pub(crate) fn usage_counts_mut(&mut self) -> &mut [u64] {
        &mut self.usage_counts
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    /// Nearest entry by squared ℓ2 distance, accumulated in `f64`.
    /// Exact ties resolve to the lowest index.
    #[inline]
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        debug_assert_eq!(x.len(), self.dim);
        let mut best = (0, f64::INFINITY);
        for (k, e) in self.entries.chunks_exact(self.dim).enumerate() {
            let mut d = 0.0;
            for (a, b) in x.iter().zip(e) {
                let t = a - b;
                d += t * t;
            }
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    /// True when no two entries are bitwise identical.
    pub fn entries_distinct(&self) -> bool {
        let mut rows: Vec<Vec<u64>> = self
            .entries
            .chunks_exact(self.dim)
            .map(|e| e.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort_unstable();
        rows.windows(2).all(|w| w[0] != w[1])
    }
}

/// The `n_q` pre-shared codebooks, one per residual stage.
#[derive(Debug)]
pub struct CodebookStack {
    stages: Vec<Codebook>,
    reduced_channels: usize,
    hash: OnceLock<u64>,
}

impl Clone for CodebookStack {
    fn clone(&self) -> Self {
        Self {
            stages: self.stages.clone(),
            reduced_channels: self.reduced_channels,
            hash: self.hash.clone(),
        }
    }
}

impl PartialEq for CodebookStack {
    fn eq(&self, other: &Self) -> bool {
        self.stages == other.stages && self.reduced_channels == other.reduced_channels
    }
}

impl CodebookStack {
    pub fn new(stages: Vec<Codebook>) -> Result<Self> {
        let first = stages
            .first()
            .ok_or_else(|| Error::Config("codebook stack needs at least one stage".into()))?;
        let (size, dim) = (first.size, first.dim);
        for (i, cb) in stages.iter().enumerate() {
            if cb.size != size || cb.dim != dim {
                return config_err(format!(
                    "stage {i} is {}x{}, stage 0 is {size}x{dim}",
                    cb.size, cb.dim
                ));
            }
            if cb.stage != i {
                return config_err(format!(
                    "codebook at position {i} is labelled stage {}",
                    cb.stage
                ));
            }
        }
        Ok(Self {
            stages,
            reduced_channels: dim,
            hash: OnceLock::new(),
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.stages[0].size
    }

    pub fn reduced_channels(&self) -> usize {
        self.reduced_channels
    }

    pub fn stages(&self) -> &[Codebook] {
        &self.stages
    }

    pub fn stage(&self, i: usize) -> &Codebook {
        &self.stages[i]
    }

    pub fn is_frozen(&self) -> bool {
        self.stages.iter().all(|cb| cb.frozen)
    }

    /// Mutable access to one stage; invalidates the cached content hash.
    pub(crate) fn stage_mut(&mut self, i: usize) -> &mut Codebook {
        self.hash = OnceLock::new();
        &mut self.stages[i]
    }

    pub(crate) fn stages_mut(&mut self) -> &mut [Codebook] {
        self.hash = OnceLock::new();
        &mut self.stages
    }

    pub(crate) fn freeze(&mut self) {
        for cb in &mut self.stages {
            cb.frozen = true;
        }
    }

    /// 64-bit FNV-1a over every entry narrowed to little-endian `f32`, stage
    /// by stage, row-major. This is the value carried in payload headers.
    pub fn content_hash(&self) -> u64 {
        *self.hash.get_or_init(|| {
            let mut h = FnvHasher::default();
            for cb in &self.stages {
                for &v in &cb.entries {
                    h.write(&(v as f32).to_le_bytes());
                }
            }
            h.finish()
        })
    }
}
