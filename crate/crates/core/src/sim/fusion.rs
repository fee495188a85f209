//! Combining an agent's own features with decoded collaborator features.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{config_err, shape_err, Result};
use crate::tensor::FeatureMap;

pub trait FusionOp: Send + Sync {
    fn name(&self) -> &str;

    /// Fuses `remotes` into `local`. All maps must share one shape.
    fn fuse(&self, local: &FeatureMap, remotes: &[FeatureMap]) -> Result<FeatureMap>;
}

fn check_shapes(local: &FeatureMap, remotes: &[FeatureMap]) -> Result<()> {
    for (i, r) in remotes.iter().enumerate() {
        if !r.same_shape(local) {
            return shape_err(format!(
                "remote {i} is {:?}, local map is {:?}",
                r.shape(),
                local.shape()
            ));
        }
    }
    Ok(())
}

/// Elementwise maximum over the local map and every remote.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxFusion;

impl FusionOp for MaxFusion {
    fn name(&self) -> &str {
        "max"
    }

    fn fuse(&self, local: &FeatureMap, remotes: &[FeatureMap]) -> Result<FeatureMap> {
        check_shapes(local, remotes)?;
        let mut data = local.data().to_vec();
        for r in remotes {
            for (d, v) in data.iter_mut().zip(r.data()) {
                *d = d.max(*v);
            }
        }
        let (h, w, c) = local.shape();
        FeatureMap::new(h, w, c, data)
    }
}

/// Elementwise mean over the local map and every remote.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanFusion;

impl FusionOp for MeanFusion {
    fn name(&self) -> &str {
        "mean"
    }

    fn fuse(&self, local: &FeatureMap, remotes: &[FeatureMap]) -> Result<FeatureMap> {
        check_shapes(local, remotes)?;
        let mut data = local.data().to_vec();
        for r in remotes {
            for (d, v) in data.iter_mut().zip(r.data()) {
                *d += v;
            }
        }
        let n = (remotes.len() + 1) as f64;
        data.iter_mut().for_each(|d| *d /= n);
        let (h, w, c) = local.shape();
        FeatureMap::new(h, w, c, data)
    }
}

/// Default fusion: elementwise maximum.
pub fn fuse(local: &FeatureMap, remotes: &[FeatureMap]) -> Result<FeatureMap> {
    MaxFusion.fuse(local, remotes)
}

/// Fusion operators by name.
#[derive(Clone)]
pub struct FusionRegistry {
    ops: BTreeMap<String, Arc<dyn FusionOp>>,
}

impl fmt::Debug for FusionRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.ops.keys()).finish()
    }
}

impl Default for FusionRegistry {
    fn default() -> Self {
        let mut r = Self {
            ops: BTreeMap::new(),
        };
        r.register(Arc::new(MaxFusion));
        r.register(Arc::new(MeanFusion));
        r
    }
}

impl FusionRegistry {
    /// Adds or replaces the operator under its own name.
    pub fn register(&mut self, op: Arc<dyn FusionOp>) {
        self.ops.insert(op.name().to_string(), op);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn FusionOp>> {
        match self.ops.get(name) {
            Some(op) => Ok(Arc::clone(op)),
            None => config_err(format!(
                "unknown fusion operator {name:?}; known: {:?}",
                self.ops.keys().collect::<Vec<_>>()
            )),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ops.keys().map(String::as_str)
    }
}
