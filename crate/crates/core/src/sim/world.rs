use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::fusion::{FusionOp, FusionRegistry, MaxFusion};
use crate::codec::CodecModel;
use crate::datagen::{generate_scene, CorpusManifest, FileCorpus, SceneSpec};
use crate::error::{config_err, Error, Result};
use crate::tensor::FeatureMap;
use crate::trainer::Corpus;
use crate::wire::load_bundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Vehicle,
    Infrastructure,
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentRole::Vehicle => "vehicle",
            AgentRole::Infrastructure => "infrastructure",
        })
    }
}

/// Where an agent's per-frame local features come from.
#[derive(Debug, Clone)]
pub enum FeatureSource {
    /// Frame `f` is the scene generated with seed `spec.seed + f`.
    Generator(SceneSpec),
    /// Frame `f` is file `f mod n`.
    Files(FileCorpus),
    /// Frame `f` is map `f mod n`.
    Maps(Arc<Vec<FeatureMap>>),
}

impl FeatureSource {
    pub fn frame(&self, frame: u32) -> Result<FeatureMap> {
        match self {
            FeatureSource::Generator(spec) => {
                generate_scene(&spec.with_seed(spec.seed.wrapping_add(frame as u64)))
            }
            FeatureSource::Files(files) => {
                if files.is_empty() {
                    return config_err("feature source has no files");
                }
                Ok(files.get(frame as usize % files.len())?.into_owned())
            }
            FeatureSource::Maps(maps) => {
                if maps.is_empty() {
                    return config_err("feature source has no maps");
                }
                Ok(maps[frame as usize % maps.len()].clone())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub agent_id: u16,
    pub role: AgentRole,
    pub codec: Arc<CodecModel>,
    pub source: FeatureSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub from: u16,
    pub to: u16,
    /// Bits per simulated second; `f64::INFINITY` for an unconstrained link.
    pub rate: f64,
    /// Seconds.
    pub latency: f64,
    pub loss_probability: f64,
}

impl LinkSpec {
    pub fn ideal(from: u16, to: u16) -> Self {
        Self {
            from,
            to,
            rate: f64::INFINITY,
            latency: 0.0,
            loss_probability: 0.0,
        }
    }

    /// Time from send to arrival for a payload of `bits`.
    pub fn delivery_delay(&self, bits: u64) -> f64 {
        if self.rate.is_infinite() {
            self.latency
        } else {
            self.latency + bits as f64 / self.rate
        }
    }

    fn validate(&self) -> Result<()> {
        if self.from == self.to {
            return config_err(format!("link {} -> {} is a self-loop", self.from, self.to));
        }
        if self.rate.is_nan() || self.rate <= 0.0 {
            return config_err(format!(
                "link {} -> {} needs a positive rate",
                self.from, self.to
            ));
        }
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            return config_err(format!(
                "link {} -> {} has invalid latency",
                self.from, self.to
            ));
        }
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return config_err(format!(
                "link {} -> {} loss probability {} outside [0, 1]",
                self.from, self.to, self.loss_probability
            ));
        }
        Ok(())
    }
}

/// Per-round bit budget over all transmissions, and who sends to whom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetConfig {
    pub total_budget: u64,
    /// Agent → agents it sends its payload to.
    pub neighborhoods: BTreeMap<u16, BTreeSet<u16>>,
}

impl BudgetConfig {
    /// Every link carries one message per round.
    pub fn from_links(total_budget: u64, links: &[LinkSpec]) -> Self {
        let mut neighborhoods: BTreeMap<u16, BTreeSet<u16>> = BTreeMap::new();
        for l in links {
            neighborhoods.entry(l.from).or_default().insert(l.to);
        }
        Self {
            total_budget,
            neighborhoods,
        }
    }
}

/// A fully resolved simulation: agents with loaded codecs, links, budget and
/// fusion operator.
#[derive(Clone)]
pub struct SimWorld {
    agents: Vec<AgentSpec>,
    links: Vec<LinkSpec>,
    budget: BudgetConfig,
    seed: u64,
    fusion: Arc<dyn FusionOp>,
}

impl fmt::Debug for SimWorld {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimWorld")
            .field(
                "agents",
                &self.agents.iter().map(|a| a.agent_id).collect::<Vec<_>>(),
            )
            .field("links", &self.links)
            .field("budget", &self.budget)
            .field("seed", &self.seed)
            .field("fusion", &self.fusion.name())
            .finish()
    }
}

impl SimWorld {
    pub fn new(
        mut agents: Vec<AgentSpec>,
        links: Vec<LinkSpec>,
        budget: BudgetConfig,
        seed: u64,
    ) -> Result<Self> {
        agents.sort_by_key(|a| a.agent_id);
        if agents.windows(2).any(|w| w[0].agent_id == w[1].agent_id) {
            return config_err("agent ids must be unique");
        }
        if let Some(a) = agents.iter().find(|a| !a.codec.is_frozen()) {
            return config_err(format!(
                "agent {} has a codec that is not frozen",
                a.agent_id
            ));
        }
        if budget.total_budget == 0 {
            return config_err("budget must be positive");
        }
        let ids: BTreeSet<u16> = agents.iter().map(|a| a.agent_id).collect();
        let mut seen = BTreeSet::new();
        for l in &links {
            l.validate()?;
            if !ids.contains(&l.from) || !ids.contains(&l.to) {
                return config_err(format!(
                    "link {} -> {} names an unknown agent",
                    l.from, l.to
                ));
            }
            if !seen.insert((l.from, l.to)) {
                return config_err(format!("duplicate link {} -> {}", l.from, l.to));
            }
        }
        for (from, tos) in &budget.neighborhoods {
            for to in tos {
                if !seen.contains(&(*from, *to)) {
                    return config_err(format!(
                        "agent {to} is a neighbor of {from} but no link {from} -> {to} exists"
                    ));
                }
            }
        }
        Ok(Self {
            agents,
            links,
            budget,
            seed,
            fusion: Arc::new(MaxFusion),
        })
    }

    pub fn with_fusion(mut self, fusion: Arc<dyn FusionOp>) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn agents(&self) -> &[AgentSpec] {
        &self.agents
    }

    pub fn agent(&self, id: u16) -> Option<&AgentSpec> {
        self.agents.iter().find(|a| a.agent_id == id)
    }

    pub fn links(&self) -> &[LinkSpec] {
        &self.links
    }

    pub fn link(&self, from: u16, to: u16) -> Option<&LinkSpec> {
        self.links.iter().find(|l| l.from == from && l.to == to)
    }

    pub fn budget(&self) -> &BudgetConfig {
        &self.budget
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fusion(&self) -> &dyn FusionOp {
        self.fusion.as_ref()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with(path, &FusionRegistry::default())
    }

    /// Reads a TOML world file. Relative paths resolve against its directory.
    pub fn load_with(path: impl AsRef<Path>, registry: &FusionRegistry) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let file: WorldFile = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        file.resolve(&base, registry)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_fusion")]
    fusion: String,
    budget: BudgetFile,
    #[serde(rename = "agent")]
    agents: Vec<AgentFile>,
    #[serde(default, rename = "link")]
    links: Vec<LinkFile>,
}

fn default_fusion() -> String {
    "max".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BudgetFile {
    total_bits: u64,
    /// Sender id (as a string key) → receiver ids. Defaults to every link.
    neighborhoods: Option<BTreeMap<String, Vec<u16>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    id: u16,
    role: AgentRole,
    bundle: PathBuf,
    scene: Option<SceneSpec>,
    corpus: Option<PathBuf>,
    split: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkFile {
    from: u16,
    to: u16,
    /// Omitted for an unconstrained link.
    rate: Option<f64>,
    #[serde(default)]
    latency: f64,
    #[serde(default)]
    loss_probability: f64,
}

impl WorldFile {
    fn resolve(self, base: &Path, registry: &FusionRegistry) -> Result<SimWorld> {
        let mut codecs: HashMap<PathBuf, Arc<CodecModel>> = HashMap::new();
        let mut agents = Vec::with_capacity(self.agents.len());
        for a in self.agents {
            let bundle = base.join(&a.bundle);
            let codec = match codecs.get(&bundle) {
                Some(c) => Arc::clone(c),
                None => {
                    let c = Arc::new(load_bundle(&bundle)?);
                    codecs.insert(bundle, Arc::clone(&c));
                    c
                }
            };
            let source = match (a.scene, a.corpus) {
                (Some(spec), None) => FeatureSource::Generator(spec),
                (None, Some(manifest)) => FeatureSource::Files(
                    CorpusManifest::load(base.join(manifest))?.corpus(a.split.as_deref()),
                ),
                _ => {
                    return config_err(format!(
                        "agent {} needs exactly one of `scene` or `corpus`",
                        a.id
                    ))
                }
            };
            agents.push(AgentSpec {
                agent_id: a.id,
                role: a.role,
                codec,
                source,
            });
        }
        let links: Vec<LinkSpec> = self
            .links
            .into_iter()
            .map(|l| LinkSpec {
                from: l.from,
                to: l.to,
                rate: l.rate.unwrap_or(f64::INFINITY),
                latency: l.latency,
                loss_probability: l.loss_probability,
            })
            .collect();
        let budget = match self.budget.neighborhoods {
            None => BudgetConfig::from_links(self.budget.total_bits, &links),
            Some(map) => {
                let mut neighborhoods = BTreeMap::new();
                for (k, v) in map {
                    let from: u16 = k.parse().map_err(|_| {
                        Error::Config(format!("neighborhood key {k:?} is not an agent id"))
                    })?;
                    neighborhoods.insert(from, v.into_iter().collect());
                }
                BudgetConfig {
                    total_budget: self.budget.total_bits,
                    neighborhoods,
                }
            }
        };
        Ok(SimWorld::new(agents, links, budget, self.seed)?
            .with_fusion(registry.get(&self.fusion)?))
    }
}
