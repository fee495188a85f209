//! Synthetic bird's-eye-view feature scenes and file-backed corpora.
//!
//! A scene is mostly low-magnitude background with a few elongated blobs of
//! strong activations. Each blob belongs to one of a handful of classes; a
//! class fixes which channels are active and their relative pattern. Class
//! prototypes depend only on the channel count and sparsity, so scenes with
//! different seeds share them and a codec trained on some scenes transfers
//! to others.

use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::FeatureMap;
use crate::trainer::Corpus;

pub use crate::tensor::{load_tensor, save_tensor};

/// Pixels whose mean absolute activation exceeds this count as foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.1;

const BACKGROUND_SCALE: f64 = 0.02;
const AMPLITUDE_RANGE: (f64, f64) = (3.0, 5.0);
const PATTERN_RANGE: (f64, f64) = (0.5, 1.5);
const JITTER: f64 = 0.1;
const MAX_ASPECT: f64 = 3.0;
const PROTOTYPE_SEED: u64 = 0x5eed_b10b;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub background_fraction: f64,
    pub n_blobs: usize,
    /// Radius in pixels over which a blob's activation falls to half its peak.
    pub blob_scale: f64,
    /// Fraction of channels that stay inactive inside a blob.
    pub channel_sparsity: f64,
    /// Number of blob classes.
    pub classes: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            channels: 256,
            background_fraction: 0.97,
            n_blobs: 12,
            blob_scale: 6.0,
            channel_sparsity: 0.75,
            classes: 4,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return config_err("scene dimensions must be positive");
        }
        if !(self.background_fraction > 0.0 && self.background_fraction <= 1.0) {
            return config_err(format!(
                "background_fraction must lie in (0, 1], got {}",
                self.background_fraction
            ));
        }
        if !(self.channel_sparsity >= 0.0 && self.channel_sparsity < 1.0) {
            return config_err(format!(
                "channel_sparsity must lie in [0, 1), got {}",
                self.channel_sparsity
            ));
        }
        if !(self.blob_scale > 0.0 && self.blob_scale.is_finite()) {
            return config_err("blob_scale must be positive");
        }
        if self.classes == 0 {
            return config_err("at least one blob class is required");
        }
        let area = std::f64::consts::PI * self.blob_scale * self.blob_scale;
        if area > (self.height * self.width) as f64 {
            return config_err(format!(
                "blob area {area:.1} exceeds the {}x{} map",
                self.height, self.width
            ));
        }
        if self.foreground_pixels() > 0 && self.n_blobs == 0 {
            return config_err("a foreground fraction needs at least one blob");
        }
        Ok(())
    }

    /// Exact number of foreground pixels a scene will contain.
    pub fn foreground_pixels(&self) -> usize {
        ((1.0 - self.background_fraction) * (self.height * self.width) as f64).round() as usize
    }

    pub fn active_channels(&self) -> usize {
        (((1.0 - self.channel_sparsity) * self.channels as f64).round() as usize).max(1)
    }
}

struct Prototype {
    channels: Vec<usize>,
    pattern: Vec<f64>,
}

fn prototypes(spec: &SceneSpec) -> Vec<Prototype> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROTOTYPE_SEED ^ spec.channels as u64);
    let active = spec.active_channels();
    (0..spec.classes)
        .map(|_| {
            let mut channels = index::sample(&mut rng, spec.channels, active).into_vec();
            channels.sort_unstable();
            let pattern = (0..active)
                .map(|_| rng.random_range(PATTERN_RANGE.0..PATTERN_RANGE.1))
                .collect();
            Prototype { channels, pattern }
        })
        .collect()
}

struct Blob {
    row: f64,
    col: f64,
    cos: f64,
    sin: f64,
    aspect: f64,
    class: usize,
    amplitude: f64,
}

impl Blob {
    /// Anisotropic distance: the blob is stretched along its orientation.
    fn distance(&self, r: usize, c: usize) -> f64 {
        let (dr, dc) = (r as f64 - self.row, c as f64 - self.col);
        let along = dr * self.cos + dc * self.sin;
        let across = -dr * self.sin + dc * self.cos;
        ((along / self.aspect).powi(2) + (across * self.aspect).powi(2)).sqrt()
    }
}

/// Generates one scene. Deterministic in `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<FeatureMap> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data: Vec<f64> = (0..h * w * c)
        .map(|_| BACKGROUND_SCALE * f64::abs(normal.sample(&mut rng)))
        .collect();

    let foreground = spec.foreground_pixels();
    if foreground > 0 {
        let protos = prototypes(spec);
        let blobs: Vec<Blob> = (0..spec.n_blobs)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                Blob {
                    row: rng.random_range(0.0..h as f64),
                    col: rng.random_range(0.0..w as f64),
                    cos: angle.cos(),
                    sin: angle.sin(),
                    aspect: rng.random_range(1.0..MAX_ASPECT),
                    class: rng.random_range(0..spec.classes),
                    amplitude: rng.random_range(AMPLITUDE_RANGE.0..AMPLITUDE_RANGE.1),
                }
            })
            .collect();
        // Blobs claim their quota of unclaimed pixels, nearest first.
        let mut owner: Vec<Option<(usize, f64)>> = vec![None; h * w];
        for (b, blob) in blobs.iter().enumerate() {
            let quota = foreground / spec.n_blobs + usize::from(b < foreground % spec.n_blobs);
            let mut candidates: Vec<(f64, usize)> = (0..h * w)
                .filter(|&p| owner[p].is_none())
                .map(|p| (blob.distance(p / w, p % w), p))
                .collect();
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(d, p) in candidates.iter().take(quota) {
                owner[p] = Some((b, d));
            }
        }
        for (p, slot) in owner.iter().enumerate() {
            let Some((b, d)) = *slot else { continue };
            let blob = &blobs[b];
            let proto = &protos[blob.class];
            let profile = 0.5 + 0.5 * (-(d * d) / (2.0 * spec.blob_scale * spec.blob_scale)).exp();
            let px = &mut data[p * c..(p + 1) * c];
            for (&ch, &pat) in proto.channels.iter().zip(&proto.pattern) {
                let jitter = (1.0 + JITTER * normal.sample(&mut rng)).clamp(0.5, 1.5);
                px[ch] += (blob.amplitude * profile * pat * jitter).max(0.0);
            }
        }
    }
    data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    FeatureMap::new(h, w, c, data)
}

/// Fraction of pixels whose mean absolute activation is at most
/// [`FOREGROUND_THRESHOLD`].
pub fn background_fraction(map: &FeatureMap) -> f64 {
    let c = map.channels() as f64;
    let bg = map
        .pixels()
        .filter(|px| px.iter().map(|v| v.abs()).sum::<f64>() / c <= FOREGROUND_THRESHOLD)
        .count();
    bg as f64 / map.num_pixels() as f64
}

/// Scenes generated on demand from a template spec and a list of seeds.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SceneSpec,
    pub seeds: Vec<u64>,
}

impl SyntheticCorpus {
    pub fn new(spec: SceneSpec, seeds: Vec<u64>) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, seeds })
    }

    /// Seeds `first..first + count`.
    pub fn range(spec: SceneSpec, first: u64, count: usize) -> Result<Self> {
        Self::new(spec, (first..first + count as u64).collect())
    }
}

impl Corpus for SyntheticCorpus {
    fn len(&self) -> usize {
        self.seeds.len()
    }

    fn get(&self, i: usize) -> Result<Cow<'_, FeatureMap>> {
        let seed = *self
            .seeds
            .get(i)
            .ok_or_else(|| Error::Config(format!("corpus index {i} out of range")))?;
        Ok(Cow::Owned(generate_scene(&self.spec.with_seed(seed))?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub split: String,
}

/// List of tensor files with split tags, stored as TOML.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    #[serde(default, rename = "entry")]
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    base: PathBuf,
}

impl CorpusManifest {
    pub fn from_toml_str(text: &str, base: impl Into<PathBuf>) -> Result<Self> {
        let mut m: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        m.base = base.into();
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn push(&mut self, path: impl Into<PathBuf>, split: impl Into<String>) {
        self.entries.push(ManifestEntry {
            path: path.into(),
            split: split.into(),
        });
    }

    /// Files tagged `split`, or every file when `split` is `None`.
    pub fn corpus(&self, split: Option<&str>) -> FileCorpus {
        let paths = self
            .entries
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .map(|e| self.base.join(&e.path))
            .collect();
        FileCorpus { paths }
    }
}

/// Tensor files read from disk on every access.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileCorpus {
    pub paths: Vec<PathBuf>,
}

impl Corpus for FileCorpus {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn get(&self, i: usize) -> Result<Cow<'_, FeatureMap>> {
        let path = self
            .paths
            .get(i)
            .ok_or_else(|| Error::Config(format!("corpus index {i} out of range")))?;
        Ok(Cow::Owned(load_tensor(path)?))
    }
}

/// Writes `scene_<seed>.rvqt` for each seed into `dir` and returns the
/// manifest entries, tagged `split`.
pub fn write_scenes(
    dir: impl AsRef<Path>,
    spec: &SceneSpec,
    seeds: &[u64],
    split: &str,
    manifest: &mut CorpusManifest,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for &seed in seeds {
        let name = format!("scene_{seed:05}.rvqt");
        save_tensor(&generate_scene(&spec.with_seed(seed))?, dir.join(&name))?;
        manifest.push(name, split);
    }
    Ok(())
}
