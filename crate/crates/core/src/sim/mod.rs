//! Budgeted multi-agent exchange: agents encode local features, send index
//! payloads over lossy links, decode with pre-shared codebooks and fuse.

mod fusion;
mod metrics;
mod round;
mod sweep;
mod world;

pub use fusion::{fuse, FusionOp, FusionRegistry, MaxFusion, MeanFusion};
pub use metrics::{cosine_similarity, median, psnr, FidelityMetrics};
pub use round::{
    run_round, run_round_detailed, AgentReport, Fidelity, LinkReport, RoundOutcome, RoundReport,
};
pub use sweep::{
    run_sweep, sweep_csv, BundleDirProvider, FnProvider, ModelProvider, SweepPoint, SweepRow,
    SweepTable,
};
pub use world::{AgentRole, AgentSpec, BudgetConfig, FeatureSource, LinkSpec, SimWorld};
