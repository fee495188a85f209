//! Dense `H × W × C` feature maps and the per-pixel numerical primitives the
//! codec is assembled from.
//!
//! Data is stored row-major, pixel-major: the `C` values of pixel `(y, x)`
//! occupy `data[(y * W + x) * C .. (y * W + x + 1) * C]`.

mod format;
mod ops;

pub use format::{
    load_tensor, read_tensor, save_tensor, write_tensor, TENSOR_MAGIC, TENSOR_VERSION,
};
pub use ops::{
    apply_projection, group_normalize, group_statistics, relu, GroupNormParams, GroupStats,
    ProjectionWeights,
};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    /// Builds a map, rejecting inconsistent lengths and non-finite values.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return shape_err(format!(
                "data length {} does not match {height}x{width}x{channels} = {expected}",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(
            height > 0 && width > 0 && channels > 0,
            "dimensions must be positive"
        );
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Builds a map from `f(pixel_index, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for p in 0..height * width {
            for c in 0..channels {
                data.push(f(p, c));
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Internal constructor for results of finite arithmetic on finite maps.
    pub(crate) fn from_parts(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels)
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Reorders pixels so that output pixel `i` is input pixel `perm[i]`.
    pub fn permute_pixels(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_pixels() {
            return shape_err(format!(
                "permutation of length {} for {} pixels",
                perm.len(),
                self.num_pixels()
            ));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &src in perm {
            if src >= self.num_pixels() {
                return shape_err(format!("permutation entry {src} out of range"));
            }
            data.extend_from_slice(self.pixel(src));
        }
        Ok(Self::from_parts(
            self.height,
            self.width,
            self.channels,
            data,
        ))
    }

    /// Mean of squared element differences.
    pub fn mse(&self, other: &FeatureMap) -> Result<f64> {
        if !self.same_shape(other) {
            return shape_err(format!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}
