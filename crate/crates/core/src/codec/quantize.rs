//! Multi-stage residual quantization and its inverse lookup.

use rayon::prelude::*;

use super::codebook::{Codebook, CodebookStack};
use crate::error::{shape_err, Error, Result};
use crate::tensor::FeatureMap;

/// Absolute per-element tolerance of the telescoping check
/// `Σ_i q_i + r_final == r_0`.
pub const TELESCOPE_TOLERANCE: f64 = 1e-6;

const PIXEL_CHUNK: usize = 256;

/// Per-pixel code indices, stages innermost: the only transmitted content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    height: usize,
    width: usize,
    stages: usize,
    codebook_size: usize,
    indices: Vec<u16>,
}

impl IndexMap {
    pub fn new(
        height: usize,
        width: usize,
        stages: usize,
        codebook_size: usize,
        indices: Vec<u16>,
    ) -> Result<Self> {
        super::config::log2_codebook_size(codebook_size)?;
        if height == 0 || width == 0 || stages == 0 {
            return Err(Error::Config(
                "index map dimensions must be positive".into(),
            ));
        }
        if indices.len() != height * width * stages {
            return shape_err(format!(
                "{} indices for {height}x{width}x{stages}",
                indices.len()
            ));
        }
        if let Some(bad) = indices.iter().find(|&&k| k as usize >= codebook_size) {
            return Err(Error::CorruptPayload(format!(
                "index {bad} out of range for K = {codebook_size}"
            )));
        }
        Ok(Self {
            height,
            width,
            stages,
            codebook_size,
            indices,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn indices(&self) -> &[u16] {
        &self.indices
    }

    pub fn index(&self, pixel: usize, stage: usize) -> u16 {
        self.indices[pixel * self.stages + stage]
    }

    pub fn permute_pixels(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_pixels() {
            return shape_err("permutation length does not match pixel count");
        }
        let mut indices = Vec::with_capacity(self.indices.len());
        for &src in perm {
            indices.extend_from_slice(&self.indices[src * self.stages..(src + 1) * self.stages]);
        }
        Ok(Self {
            indices,
            ..self.clone()
        })
    }
}

/// Observer invoked for every (stage, chosen code, pre-quantization residual)
/// during training-mode quantization.
pub trait TrainingHook {
    fn observe(&mut self, codebook: &mut Codebook, chosen: usize, residual: &[f64]) -> Result<()>;
}

#[derive(Debug, Clone)]
pub struct Quantization {
    pub indices: IndexMap,
    /// Accumulated code vectors `z_q`, using entries as they were when chosen.
    pub quantized: FeatureMap,
    /// Residual left after the last stage.
    pub residual: FeatureMap,
    /// Mean squared residual norm per pixel before any stage.
    pub input_energy: f64,
    /// Mean squared residual norm per pixel after each stage.
    pub residual_energy: Vec<f64>,
}

fn check_input(stack: &CodebookStack, fr: &FeatureMap) -> Result<()> {
    if fr.channels() != stack.reduced_channels() {
        return shape_err(format!(
            "codebooks are {}-dimensional, map has {} channels",
            stack.reduced_channels(),
            fr.channels()
        ));
    }
    if stack.codebook_size() > 1 << 16 {
        return shape_err("codebook size exceeds index width");
    }
    Ok(())
}

fn telescope_check(r0: &[f64], zq: &[f64], r: &[f64]) {
    for ((a, q), b) in r0.iter().zip(zq).zip(r) {
        assert!(
            (q + b - a).abs() <= TELESCOPE_TOLERANCE,
            "telescoping identity violated: {q} + {b} != {a}"
        );
    }
}

/// Sequential per-pixel quantization. `energies[0]` receives the input norm,
/// `energies[i + 1]` the norm after stage `i`.
#[inline]
fn quantize_pixel(
    stages: &[Codebook],
    x: &[f64],
    idx: &mut [u16],
    zq: &mut [f64],
    r: &mut [f64],
    energies: &mut [f64],
) {
    r.copy_from_slice(x);
    zq.iter_mut().for_each(|v| *v = 0.0);
    energies[0] += r.iter().map(|v| v * v).sum::<f64>();
    for (i, cb) in stages.iter().enumerate() {
        let (k, _) = cb.nearest(r);
        idx[i] = k as u16;
        let e = cb.entry(k);
        for ((rv, zv), ev) in r.iter_mut().zip(zq.iter_mut()).zip(e) {
            *rv -= ev;
            *zv += ev;
        }
        energies[i + 1] += r.iter().map(|v| v * v).sum::<f64>();
    }
    if cfg!(debug_assertions) {
        telescope_check(x, zq, r);
    }
}

fn finish(
    fr: &FeatureMap,
    stack: &CodebookStack,
    indices: Vec<u16>,
    zq: Vec<f64>,
    r: Vec<f64>,
    energies: Vec<f64>,
) -> Result<Quantization> {
    let n_q = stack.num_stages();
    let (h, w, c) = fr.shape();
    let pixels = fr.num_pixels() as f64;
    Ok(Quantization {
        indices: IndexMap::new(h, w, n_q, stack.codebook_size(), indices)?,
        quantized: FeatureMap::from_parts(h, w, c, zq),
        residual: FeatureMap::from_parts(h, w, c, r),
        input_energy: energies[0] / pixels,
        residual_energy: energies[1..].iter().map(|e| e / pixels).collect(),
    })
}

/// Inference-mode residual quantization of a reduced feature map. Codebooks
/// are read-only, so pixels are processed in parallel.
pub fn quantize(stack: &CodebookStack, fr: &FeatureMap) -> Result<Quantization> {
    check_input(stack, fr)?;
    let (n_q, c) = (stack.num_stages(), fr.channels());
    let n = fr.num_pixels();
    let mut indices = vec![0u16; n * n_q];
    let mut zq = vec![0.0; n * c];
    let mut r = vec![0.0; n * c];
    let chunk_energies: Vec<Vec<f64>> = indices
        .par_chunks_mut(PIXEL_CHUNK * n_q)
        .zip(zq.par_chunks_mut(PIXEL_CHUNK * c))
        .zip(r.par_chunks_mut(PIXEL_CHUNK * c))
        .zip(fr.data().par_chunks(PIXEL_CHUNK * c))
        .map(|(((idx, zq), r), x)| {
            let mut energies = vec![0.0; n_q + 1];
            for (((idx, zq), r), x) in idx
                .chunks_exact_mut(n_q)
                .zip(zq.chunks_exact_mut(c))
                .zip(r.chunks_exact_mut(c))
                .zip(x.chunks_exact(c))
            {
                quantize_pixel(stack.stages(), x, idx, zq, r, &mut energies);
            }
            energies
        })
        .collect();
    // Ordered reduction keeps the energies independent of the thread count.
    let mut energies = vec![0.0; n_q + 1];
    for ce in &chunk_energies {
        for (e, v) in energies.iter_mut().zip(ce) {
            *e += v;
        }
    }
    finish(fr, stack, indices, zq, r, energies)
}

/// Training-mode quantization: pixels are visited in row-major order and the
/// hook sees every assignment immediately, so later pixels observe updated
/// entries.
pub fn quantize_with_hook(
    stack: &mut CodebookStack,
    fr: &FeatureMap,
    hook: &mut dyn TrainingHook,
) -> Result<Quantization> {
    check_input(stack, fr)?;
    if stack.is_frozen() {
        return Err(Error::State("cannot train frozen codebooks".into()));
    }
    let (n_q, c) = (stack.num_stages(), fr.channels());
    let n = fr.num_pixels();
    let mut indices = vec![0u16; n * n_q];
    let mut zq = vec![0.0; n * c];
    let mut r = vec![0.0; n * c];
    let mut energies = vec![0.0; n_q + 1];
    let mut before = vec![0.0; c];
    for p in 0..n {
        let x = fr.pixel(p);
        let (idx, zq, r) = (
            &mut indices[p * n_q..(p + 1) * n_q],
            &mut zq[p * c..(p + 1) * c],
            &mut r[p * c..(p + 1) * c],
        );
        r.copy_from_slice(x);
        energies[0] += r.iter().map(|v| v * v).sum::<f64>();
        for i in 0..n_q {
            let cb = stack.stage_mut(i);
            let (k, _) = cb.nearest(r);
            idx[i] = k as u16;
            before.copy_from_slice(r);
            let e = cb.entry(k);
            for ((rv, zv), ev) in r.iter_mut().zip(zq.iter_mut()).zip(e) {
                *rv -= ev;
                *zv += ev;
            }
            energies[i + 1] += r.iter().map(|v| v * v).sum::<f64>();
            hook.observe(cb, k, &before)?;
        }
        if cfg!(debug_assertions) {
            telescope_check(x, zq, r);
        }
    }
    finish(fr, stack, indices, zq, r, energies)
}

/// Receiver-side reconstruction `z_q = Σ_i e^{(i)}_{k_i}` per pixel.
pub fn lookup_accumulate(stack: &CodebookStack, idx: &IndexMap) -> Result<FeatureMap> {
    if idx.stages() != stack.num_stages() || idx.codebook_size() != stack.codebook_size() {
        return Err(Error::CorruptPayload(format!(
            "index map is n_q={}, K={}; codebooks are n_q={}, K={}",
            idx.stages(),
            idx.codebook_size(),
            stack.num_stages(),
            stack.codebook_size()
        )));
    }
    let c = stack.reduced_channels();
    let n_q = stack.num_stages();
    let k_max = stack.codebook_size();
    let mut out = vec![0.0; idx.num_pixels() * c];
    for (p, z) in out.chunks_exact_mut(c).enumerate() {
        for i in 0..n_q {
            let k = idx.index(p, i) as usize;
            if k >= k_max {
                return Err(Error::CorruptPayload(format!(
                    "index {k} at pixel {p} stage {i} out of range for K = {k_max}"
                )));
            }
            for (zv, ev) in z.iter_mut().zip(stack.stage(i).entry(k)) {
                *zv += ev;
            }
        }
    }
    Ok(FeatureMap::from_parts(idx.height(), idx.width(), c, out))
}

/// Fraction of pixels assigned to each code at `stage`.
pub fn usage_histogram(stack: &CodebookStack, idx: &IndexMap, stage: usize) -> Result<Vec<f64>> {
    if stage >= idx.stages() || stage >= stack.num_stages() {
        return Err(Error::Config(format!(
            "stage {stage} out of range for {} stages",
            idx.stages().min(stack.num_stages())
        )));
    }
    if idx.codebook_size() != stack.codebook_size() {
        return shape_err("index map and codebooks disagree on K");
    }
    let mut counts = vec![0u64; stack.codebook_size()];
    for p in 0..idx.num_pixels() {
        counts[idx.index(p, stage) as usize] += 1;
    }
    let n = idx.num_pixels() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}
