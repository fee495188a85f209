use rayon::prelude::*;

use super::FeatureMap;
use crate::error::{config_err, shape_err, Result};

/// Pixels handed to one rayon task. Results do not depend on it.
const PIXEL_CHUNK: usize = 512;

/// A 1×1 convolution, i.e. the same affine map applied to every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    in_channels: usize,
    out_channels: usize,
    /// Row-major `out × in`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ProjectionWeights {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return config_err("projection channels must be positive");
        }
        if weights.len() != in_channels * out_channels {
            return shape_err(format!(
                "weights length {} != {out_channels}x{in_channels}",
                weights.len()
            ));
        }
        if bias.len() != out_channels {
            return shape_err(format!("bias length {} != {out_channels}", bias.len()));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return config_err("projection parameters must be finite");
        }
        Ok(Self {
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    /// Square identity map with zero bias.
    pub fn identity(channels: usize) -> Self {
        let mut weights = vec![0.0; channels * channels];
        for i in 0..channels {
            weights[i * channels + i] = 1.0;
        }
        Self {
            in_channels: channels,
            out_channels: channels,
            weights,
            bias: vec![0.0; channels],
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weights: vec![0.0; in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.in_channels + inp]
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub(crate) fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// `in × out` copy, so the per-pixel kernel can run over contiguous output lanes.
    pub(crate) fn transposed(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.weights.len()];
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                t[i * self.out_channels + o] = self.weights[o * self.in_channels + i];
            }
        }
        t
    }
}

/// Applies `out = W·x + b` to one pixel. `wt` is the transposed weight matrix.
#[inline]
pub(crate) fn project_pixel(wt: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let n_out = bias.len();
    out.copy_from_slice(bias);
    for (i, &xi) in x.iter().enumerate() {
        let row = &wt[i * n_out..(i + 1) * n_out];
        for (o, w) in out.iter_mut().zip(row) {
            *o += w * xi;
        }
    }
}

pub fn apply_projection(map: &FeatureMap, w: &ProjectionWeights) -> Result<FeatureMap> {
    if map.channels() != w.in_channels {
        return shape_err(format!(
            "projection expects {} input channels, map has {}",
            w.in_channels,
            map.channels()
        ));
    }
    let wt = w.transposed();
    let (c_in, c_out) = (w.in_channels, w.out_channels);
    let mut out = vec![0.0; map.num_pixels() * c_out];
    out.par_chunks_mut(PIXEL_CHUNK * c_out)
        .zip(map.data().par_chunks(PIXEL_CHUNK * c_in))
        .for_each(|(dst, src)| {
            for (o, x) in dst.chunks_exact_mut(c_out).zip(src.chunks_exact(c_in)) {
                project_pixel(&wt, &w.bias, x, o);
            }
        });
    Ok(FeatureMap::from_parts(
        map.height(),
        map.width(),
        c_out,
        out,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupNormParams {
    channels: usize,
    groups: usize,
    gain: Vec<f64>,
    shift: Vec<f64>,
    epsilon: f64,
}

pub const DEFAULT_GN_EPSILON: f64 = 1e-5;

impl GroupNormParams {
    pub fn new(
        channels: usize,
        groups: usize,
        gain: Vec<f64>,
        shift: Vec<f64>,
        epsilon: f64,
    ) -> Result<Self> {
        if channels == 0 || groups == 0 {
            return config_err("group norm channels and groups must be positive");
        }
        if !channels.is_multiple_of(groups) {
            return config_err(format!("{groups} groups do not divide {channels} channels"));
        }
        if gain.len() != channels || shift.len() != channels {
            return shape_err("group norm gain/shift length must equal channels");
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return config_err(format!("epsilon must be positive, got {epsilon}"));
        }
        if gain.iter().chain(&shift).any(|v| !v.is_finite()) {
            return config_err("group norm parameters must be finite");
        }
        Ok(Self {
            channels,
            groups,
            gain,
            shift,
            epsilon,
        })
    }

    /// Unit gain, zero shift, default epsilon.
    pub fn plain(channels: usize, groups: usize) -> Result<Self> {
        Self::new(
            channels,
            groups,
            vec![1.0; channels],
            vec![0.0; channels],
            DEFAULT_GN_EPSILON,
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn group_size(&self) -> usize {
        self.channels / self.groups
    }

    pub fn gain(&self) -> &[f64] {
        &self.gain
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub(crate) fn round_to_f32(&mut self) {
        for v in self.gain.iter_mut().chain(self.shift.iter_mut()) {
            *v = *v as f32 as f64;
        }
        self.epsilon = self.epsilon as f32 as f64;
    }
}

/// Per-group statistics of one map.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    /// Population variance over positions × group channels.
    pub variance: Vec<f64>,
}

pub fn group_statistics(map: &FeatureMap, p: &GroupNormParams) -> Result<GroupStats> {
    if map.channels() != p.channels {
        return shape_err(format!(
            "group norm expects {} channels, map has {}",
            p.channels,
            map.channels()
        ));
    }
    let gs = p.group_size();
    let n = (map.num_pixels() * gs) as f64;
    let mut mean = vec![0.0; p.groups];
    for px in map.pixels() {
        for (g, m) in mean.iter_mut().enumerate() {
            *m += px[g * gs..(g + 1) * gs].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut variance = vec![0.0; p.groups];
    for px in map.pixels() {
        for (g, v) in variance.iter_mut().enumerate() {
            let mu = mean[g];
            *v += px[g * gs..(g + 1) * gs]
                .iter()
                .map(|x| (x - mu) * (x - mu))
                .sum::<f64>();
        }
    }
    variance.iter_mut().for_each(|v| *v /= n);
    Ok(GroupStats { mean, variance })
}

pub fn group_normalize(map: &FeatureMap, p: &GroupNormParams) -> Result<FeatureMap> {
    let stats = group_statistics(map, p)?;
    let gs = p.group_size();
    // Fold the normalization and the affine part into one scale/offset per channel.
    let mut scale = vec![0.0; p.channels];
    let mut offset = vec![0.0; p.channels];
    for c in 0..p.channels {
        let g = c / gs;
        let inv_std = 1.0 / (stats.variance[g] + p.epsilon).sqrt();
        scale[c] = p.gain[c] * inv_std;
        offset[c] = p.shift[c] - stats.mean[g] * scale[c];
    }
    let data = map
        .data()
        .chunks_exact(p.channels)
        .flat_map(|px| {
            px.iter()
                .zip(scale.iter().zip(&offset))
                .map(|(x, (s, o))| x * s + o)
        })
        .collect();
    Ok(FeatureMap::from_parts(
        map.height(),
        map.width(),
        map.channels(),
        data,
    ))
}

pub fn relu(map: &FeatureMap) -> FeatureMap {
    let data = map.data().iter().map(|&v| v.max(0.0)).collect();
    FeatureMap::from_parts(map.height(), map.width(), map.channels(), data)
}
