//! Training checkpoints: a regular codebook bundle followed by a footer with
//! the exact training state, so `load_bundle` also accepts checkpoint files.
//!
//! Footer (little-endian): magic `RVQS`, u8 version, u32 epochs done,
//! u64 optimizer step, u32 value count `n`, `n` f64 model values in bundle
//! order, `n_q × K` u64 code usage counts, u32 parameter count `m`, then `m`
//! f64 first moments and `m` f64 second moments.

use std::fs;
use std::path::Path;

use super::optim::Adam;
use crate::codec::CodecModel;
use crate::error::{Error, Result};
use crate::wire::bundle::{decode_bundle_values, model_from_values, model_values, BundleShape};
use crate::wire::encode_bundle;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RVQS";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Trainable (not frozen) model at full precision.
    pub model: CodecModel,
    pub epochs_done: usize,
    pub step: u64,
    pub optimizer: Adam,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = encode_bundle(&ckpt.model)?;
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(ckpt.epochs_done as u32).to_le_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    let values = model_values(&ckpt.model);
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    values
        .iter()
        .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    for cb in ckpt.model.codebooks().stages() {
        cb.usage_counts()
            .iter()
            .for_each(|u| out.extend_from_slice(&u.to_le_bytes()));
    }
    out.extend_from_slice(&(ckpt.optimizer.m.len() as u32).to_le_bytes());
    for moments in [&ckpt.optimizer.m, &ckpt.optimizer.v] {
        moments
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                expected: self.pos + n,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (shape, narrow, used): (BundleShape, Vec<f64>, usize) = decode_bundle_values(bytes)?;
    let mut r = Reader { bytes, pos: used };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Protocol(
            "bundle has no training-state footer".into(),
        ));
    }
    let version = r.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Protocol(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let epochs_done = r.u32()? as usize;
    let step = r.u64()?;
    let n = r.u32()? as usize;
    if n != shape.value_count() {
        return Err(Error::Protocol(format!(
            "checkpoint stores {n} values, bundle shape needs {}",
            shape.value_count()
        )));
    }
    let values = r.f64s(n)?;
    if values
        .iter()
        .zip(&narrow)
        .any(|(v, w)| *v as f32 as f64 != *w)
    {
        return Err(Error::CorruptPayload(
            "checkpoint values disagree with the bundle block".into(),
        ));
    }
    let mut model = model_from_values(shape, &values, false)?;
    let stack = model.codebooks_mut()?;
    for cb in stack.stages_mut() {
        for u in cb.usage_counts_mut() {
            *u = r.u64()?;
        }
    }
    let m_len = r.u32()? as usize;
    let m = r.f64s(m_len)?;
    let v = r.f64s(m_len)?;
    let optimizer = Adam::from_state(m, v, step)?;
    Ok(Checkpoint {
        model,
        epochs_done,
        step,
        optimizer,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::tensor::FeatureMap;
    use crate::trainer::{Trainer, TrainingConfig};
    use crate::wire::decode_bundle;

    fn setup() -> (CodecModel, Vec<FeatureMap>, TrainingConfig) {
        let cfg = CodecConfig {
            channels: 8,
            reduction_ratio: 2,
            stages: 2,
            codebook_size: 4,
            ema_alpha: 0.8,
            groups: 2,
            post_affine_bias: true,
        };
        let maps = (0..3)
            .map(|s| {
                FeatureMap::from_fn(5, 4, 8, |p, c| ((p * 5 + c + s) % 7) as f64 * 0.3).unwrap()
            })
            .collect();
        let tcfg = TrainingConfig {
            epochs: 4,
            batch_size: 2,
            seed: 9,
            ..TrainingConfig::default()
        };
        (CodecModel::new(cfg, 2).unwrap(), maps, tcfg)
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (model, maps, cfg) = setup();
        let (straight, _) = Trainer::new(&model, &maps, &cfg).unwrap().run().unwrap();

        let mut t = Trainer::new(&model, &maps, &cfg).unwrap();
        t.run_epoch().unwrap();
        t.run_epoch().unwrap();
        let ckpt = Checkpoint {
            model: t.model().clone(),
            epochs_done: t.epochs_done(),
            step: t.step(),
            optimizer: t.optimizer().clone(),
        };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        let resumed = Trainer::resume(
            back.model,
            &maps,
            &cfg,
            back.optimizer,
            back.epochs_done,
            back.step,
        )
        .unwrap();
        let (finished, _) = resumed.run().unwrap();
        assert_eq!(finished, straight);
    }

    #[test]
    fn checkpoint_is_also_a_bundle() {
        let (model, _, _) = setup();
        let ckpt = Checkpoint {
            model: model.clone(),
            epochs_done: 0,
            step: 0,
            optimizer: Adam::new(crate::trainer::parameter_vector(&model).len()),
        };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let (bundle_model, used) = decode_bundle(&bytes).unwrap();
        assert!(bundle_model.is_frozen());
        assert!(used < bytes.len());
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..used]),
            Err(Error::Truncated { .. })
        ));
    }
}
