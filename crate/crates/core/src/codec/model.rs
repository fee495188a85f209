use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::codebook::{Codebook, CodebookStack};
use super::config::CodecConfig;
use super::quantize::{lookup_accumulate, quantize, IndexMap, Quantization};
use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{
    apply_projection, group_normalize, relu, FeatureMap, GroupNormParams, ProjectionWeights,
};

/// Sender and receiver halves of the codec together with the pre-shared
/// codebooks.
///
/// Sender: `F → Conv1×1 → GroupNorm → RVQ → indices`.
/// Receiver: `indices → Σ lookups → Conv1×1 → ReLU → GroupNorm → Conv1×1 → ReLU`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecModel {
    config: CodecConfig,
    reduce_proj: ProjectionWeights,
    reduce_norm: GroupNormParams,
    post_affine: ProjectionWeights,
    expand_norm: GroupNormParams,
    expand_proj: ProjectionWeights,
    codebooks: CodebookStack,
    frozen: bool,
}

/// Receiver-side activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DecoderTrace {
    pub post_affine_pre: FeatureMap,
    pub post_affine_out: FeatureMap,
    pub normalized: FeatureMap,
    pub expand_pre: FeatureMap,
    pub output: FeatureMap,
}

impl CodecModel {
    /// Randomly initialized, trainable model. Stage 0 reserves entry 0 as the
    /// zero vector.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, c_r, k) = (
            config.channels,
            config.reduced_channels(),
            config.codebook_size,
        );
        let mut gaussian = |n: usize, std: f64| -> Vec<f64> {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let reduce_proj = ProjectionWeights::new(
            c,
            c_r,
            gaussian(c * c_r, 1.0 / (c as f64).sqrt()),
            vec![0.0; c_r],
        )?;
        let post_affine = ProjectionWeights::identity(c_r);
        let expand_proj = ProjectionWeights::new(
            c_r,
            c,
            gaussian(c * c_r, 1.0 / (c_r as f64).sqrt()),
            vec![0.0; c],
        )?;
        let mut stages = Vec::with_capacity(config.stages);
        for i in 0..config.stages {
            let mut entries = gaussian(k * c_r, 0.5f64.powi(i as i32));
            if i == 0 {
                entries[..c_r].iter_mut().for_each(|v| *v = 0.0);
            }
            stages.push(Codebook::new(i, k, c_r, entries)?);
        }
        Ok(Self {
            config,
            reduce_proj,
            reduce_norm: GroupNormParams::plain(c_r, config.groups)?,
            post_affine,
            expand_norm: GroupNormParams::plain(c_r, config.groups)?,
            expand_proj,
            codebooks: CodebookStack::new(stages)?,
            frozen: false,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: CodecConfig,
        reduce_proj: ProjectionWeights,
        reduce_norm: GroupNormParams,
        post_affine: ProjectionWeights,
        expand_norm: GroupNormParams,
        expand_proj: ProjectionWeights,
        codebooks: CodebookStack,
        frozen: bool,
    ) -> Result<Self> {
        config.validate()?;
        let (c, c_r) = (config.channels, config.reduced_channels());
        let chain = [
            (
                "reduce projection",
                reduce_proj.in_channels(),
                reduce_proj.out_channels(),
                c,
                c_r,
            ),
            (
                "post-affine",
                post_affine.in_channels(),
                post_affine.out_channels(),
                c_r,
                c_r,
            ),
            (
                "expand projection",
                expand_proj.in_channels(),
                expand_proj.out_channels(),
                c_r,
                c,
            ),
        ];
        for (name, i, o, want_i, want_o) in chain {
            if (i, o) != (want_i, want_o) {
                return config_err(format!("{name} maps {i}→{o}, expected {want_i}→{want_o}"));
            }
        }
        if reduce_norm.channels() != c_r || expand_norm.channels() != c_r {
            return config_err("group norms must act on the reduced channels");
        }
        if codebooks.reduced_channels() != c_r
            || codebooks.num_stages() != config.stages
            || codebooks.codebook_size() != config.codebook_size
        {
            return config_err("codebooks do not match the codec configuration");
        }
        let mut model = Self {
            config,
            reduce_proj,
            reduce_norm,
            post_affine,
            expand_norm,
            expand_proj,
            codebooks,
            frozen: false,
        };
        if frozen {
            model.freeze();
        }
        Ok(model)
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn reduce_proj(&self) -> &ProjectionWeights {
        &self.reduce_proj
    }

    pub fn reduce_norm(&self) -> &GroupNormParams {
        &self.reduce_norm
    }

    pub fn post_affine(&self) -> &ProjectionWeights {
        &self.post_affine
    }

    pub fn expand_norm(&self) -> &GroupNormParams {
        &self.expand_norm
    }

    pub fn expand_proj(&self) -> &ProjectionWeights {
        &self.expand_proj
    }

    pub fn codebooks(&self) -> &CodebookStack {
        &self.codebooks
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn codebooks_mut(&mut self) -> Result<&mut CodebookStack> {
        if self.frozen {
            return Err(Error::State("model is frozen".into()));
        }
        Ok(&mut self.codebooks)
    }

    pub(crate) fn set_ema_alpha(&mut self, alpha: f64) {
        self.config.ema_alpha = alpha;
    }

    pub(crate) fn projections_mut(
        &mut self,
    ) -> Result<(
        &mut ProjectionWeights,
        &mut ProjectionWeights,
        &mut ProjectionWeights,
    )> {
        if self.frozen {
            return Err(Error::State("model is frozen".into()));
        }
        Ok((
            &mut self.reduce_proj,
            &mut self.post_affine,
            &mut self.expand_proj,
        ))
    }

    /// Marks the model immutable and rounds every parameter to `f32` so the
    /// bundle file reproduces it bit for bit.
    pub fn freeze(&mut self) {
        let round = |v: &mut [f64]| v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        for p in [
            &mut self.reduce_proj,
            &mut self.post_affine,
            &mut self.expand_proj,
        ] {
            round(p.weights_mut());
            round(p.bias_mut());
        }
        self.reduce_norm.round_to_f32();
        self.expand_norm.round_to_f32();
        for cb in self.codebooks.stages_mut() {
            round(cb.entries_mut());
        }
        self.codebooks.freeze();
        self.frozen = true;
    }

    fn check_input(&self, f: &FeatureMap) -> Result<()> {
        if f.channels() != self.config.channels {
            return shape_err(format!(
                "codec expects {} channels, map has {}",
                self.config.channels,
                f.channels()
            ));
        }
        Ok(())
    }

    /// Channel reduction `F_r = GroupNorm(Conv1×1(F))`.
    pub fn reduce(&self, f: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(f)?;
        group_normalize(&apply_projection(f, &self.reduce_proj)?, &self.reduce_norm)
    }

    /// Reduction followed by residual quantization, with per-stage energies.
    pub fn quantize(&self, f: &FeatureMap) -> Result<Quantization> {
        quantize(&self.codebooks, &self.reduce(f)?)
    }

    pub fn encode(&self, f: &FeatureMap) -> Result<IndexMap> {
        Ok(self.quantize(f)?.indices)
    }

    /// Receiver path from accumulated code vectors, keeping intermediates.
    pub fn decode_trace(&self, zq: &FeatureMap) -> Result<DecoderTrace> {
        let post_affine_pre = apply_projection(zq, &self.post_affine)?;
        let post_affine_out = relu(&post_affine_pre);
        let normalized = group_normalize(&post_affine_out, &self.expand_norm)?;
        let expand_pre = apply_projection(&normalized, &self.expand_proj)?;
        let output = relu(&expand_pre);
        Ok(DecoderTrace {
            post_affine_pre,
            post_affine_out,
            normalized,
            expand_pre,
            output,
        })
    }

    pub fn decode_quantized(&self, zq: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.decode_trace(zq)?.output)
    }

    /// Reconstructs `F̂` with `C` channels from received indices.
    pub fn decompress(&self, idx: &IndexMap) -> Result<FeatureMap> {
        self.decode_quantized(&lookup_accumulate(&self.codebooks, idx)?)
    }

    /// `decompress(encode(f))`.
    pub fn reconstruct(&self, f: &FeatureMap) -> Result<FeatureMap> {
        self.decompress(&self.encode(f)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> CodecConfig {
        CodecConfig {
            channels: 8,
            reduction_ratio: 2,
            stages: 2,
            codebook_size: 4,
            ema_alpha: 0.8,
            groups: 2,
            post_affine_bias: true,
        }
    }

    #[test]
    fn default_config_reduces_to_sixteen_channels() {
        let model = CodecModel::new(CodecConfig::default(), 1).unwrap();
        let f =
            FeatureMap::from_fn(2, 2, 256, |p, c| ((p * 31 + c * 7) % 13) as f64 * 0.1).unwrap();
        assert_eq!(model.reduce(&f).unwrap().channels(), 16);
        assert_eq!(model.reconstruct(&f).unwrap().channels(), 256);
    }

    #[test]
    fn reduce_with_identity_projection_is_group_norm() {
        let cfg = CodecConfig {
            reduction_ratio: 1,
            ..small_config()
        };
        let base = CodecModel::new(cfg, 3).unwrap();
        let model = CodecModel::from_parts(
            cfg,
            ProjectionWeights::identity(8),
            base.reduce_norm().clone(),
            base.post_affine().clone(),
            base.expand_norm().clone(),
            base.expand_proj().clone(),
            base.codebooks().clone(),
            false,
        )
        .unwrap();
        let f = FeatureMap::from_fn(3, 3, 8, |p, c| (p as f64).sin() + c as f64).unwrap();
        assert_eq!(
            model.reduce(&f).unwrap(),
            group_normalize(&f, model.reduce_norm()).unwrap()
        );
    }

    #[test]
    fn zero_model_decodes_to_zero() {
        let cfg = small_config();
        let stages = (0..2)
            .map(|i| Codebook::new(i, 4, 4, vec![0.0; 16]).unwrap())
            .collect();
        let model = CodecModel::from_parts(
            cfg,
            ProjectionWeights::zeros(8, 4),
            GroupNormParams::plain(4, 2).unwrap(),
            ProjectionWeights::zeros(4, 4),
            GroupNormParams::plain(4, 2).unwrap(),
            ProjectionWeights::zeros(4, 8),
            CodebookStack::new(stages).unwrap(),
            true,
        )
        .unwrap();
        let idx = IndexMap::new(2, 2, 2, 4, vec![3, 1, 0, 2, 1, 1, 2, 0]).unwrap();
        assert!(model
            .decompress(&idx)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn from_parts_rejects_broken_chain() {
        let base = CodecModel::new(small_config(), 0).unwrap();
        let err = CodecModel::from_parts(
            *base.config(),
            ProjectionWeights::zeros(8, 3),
            base.reduce_norm().clone(),
            base.post_affine().clone(),
            base.expand_norm().clone(),
            base.expand_proj().clone(),
            base.codebooks().clone(),
            false,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let model = CodecModel::new(small_config(), 0).unwrap();
        assert!(matches!(
            model.encode(&FeatureMap::zeros(2, 2, 5)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn freeze_rounds_and_blocks_mutation() {
        let mut model = CodecModel::new(small_config(), 5).unwrap();
        model.freeze();
        assert!(model.is_frozen());
        assert!(model.codebooks().is_frozen());
        assert!(model
            .reduce_proj()
            .weights()
            .iter()
            .all(|&w| w == w as f32 as f64));
        assert!(model.codebooks_mut().is_err());
    }
}
