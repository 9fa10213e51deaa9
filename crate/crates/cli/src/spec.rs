//! Run specifications: which workload to build, how to simulate it, and
//! where its trace comes from. Loaded from JSON, then overridden by flags.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use step::cost::CostConfig;
use step::graph::{ChannelId, Graph};
use step::sim::SimConfig;
use step::stream::Token;
use step::sym::Bindings;
use step::workloads::traces::{
    load_expert_trace, load_kv_trace, routes_for_iteration, synth_kv, synth_routes, KvSpec, RoutingSpec,
};
use step::workloads::{build_gqa, build_moe, build_swiglu, GqaConfig, MoeConfig, Strategy, SwigluConfig, Tiling, Workload};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub workload: WorkloadSpec,
    /// Simulator parameters; `validate` falls back to the validation preset.
    #[serde(default)]
    pub sim: Option<SimConfig>,
    #[serde(default)]
    pub cost: CostConfig,
    /// Extra symbol values, taking precedence over those the trace implies.
    #[serde(default)]
    pub bindings: Bindings,
    #[serde(default)]
    pub sweep: Option<SweepAxis>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSpec {
    Swiglu {
        #[serde(default)]
        config: SwigluConfig,
    },
    Moe {
        #[serde(default)]
        config: MoeConfig,
        routes: RouteSource,
    },
    Gqa {
        config: GqaParams,
        kv: KvSource,
    },
    /// A serialized graph with token streams for its inputs, keyed by channel name.
    Graph {
        path: PathBuf,
        #[serde(default)]
        inputs: BTreeMap<String, Vec<Token>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        iteration: usize,
    },
    Synth(RoutingSpec),
    /// Expert ids per token.
    Explicit(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvSource {
    Csv { path: PathBuf },
    Synth(KvSpec),
    Lengths(Vec<usize>),
}

/// Everything in a [`GqaConfig`] except the KV lengths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GqaParams {
    pub regions: usize,
    pub strategy: Strategy,
    #[serde(default = "d64")]
    pub head_dim: usize,
    #[serde(default = "d4")]
    pub group: usize,
    #[serde(default = "d16")]
    pub kv_tile: usize,
    #[serde(default = "d16")]
    pub coarse_chunk: usize,
    #[serde(default = "d1")]
    pub seed_reps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn d64() -> usize {
    64
}
fn d16() -> usize {
    16
}
fn d4() -> usize {
    4
}
fn d1() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Tile(Vec<TileChoice>),
    Regions(Vec<usize>),
    Strategy(Vec<Strategy>),
}

/// A tile setting: `dynamic`, a number, or `BxF` for SwiGLU batch and
/// intermediate tiles. A bare number is the intermediate tile for SwiGLU
/// and the static tile for MoE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileChoice {
    Dynamic,
    Size(usize),
    Pair(usize, usize),
}

impl std::str::FromStr for TileChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let num = |x: &str| x.trim().parse::<usize>().map_err(|_| format!("bad tile `{s}`"));
        let s = s.trim();
        if s == "dynamic" {
            return Ok(TileChoice::Dynamic);
        }
        match s.split_once('x') {
            Some((a, b)) => Ok(TileChoice::Pair(num(a)?, num(b)?)),
            None => Ok(TileChoice::Size(num(s)?)),
        }
    }
}

impl std::fmt::Display for TileChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TileChoice::Dynamic => write!(f, "dynamic"),
            TileChoice::Size(n) => write!(f, "{n}"),
            TileChoice::Pair(a, b) => write!(f, "{a}x{b}"),
        }
    }
}

impl Serialize for TileChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TileChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(TileChoice::Size(n)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl RunSpec {
    pub fn load(path: &Path) -> Result<RunSpec, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut spec: RunSpec =
            serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            spec.rebase(dir);
        }
        Ok(spec)
    }

    /// Default spec for a workload kind, used when no config file is given.
    pub fn default_for(kind: &str) -> Result<RunSpec, CliError> {
        let workload = match kind {
            "swiglu" => WorkloadSpec::Swiglu { config: SwigluConfig::default() },
            "moe" => {
                let c = MoeConfig::default();
                let r = RoutingSpec {
                    experts: c.experts,
                    k: c.k,
                    tokens: c.batch,
                    dist: step::workloads::traces::RoutingDist::Zipf { s: 1.2 },
                    active: None,
                    seed: 0,
                };
                WorkloadSpec::Moe { config: c, routes: RouteSource::Synth(r) }
            }
            "gqa" => WorkloadSpec::Gqa {
                config: GqaParams {
                    regions: 4,
                    strategy: Strategy::Dynamic,
                    head_dim: d64(),
                    group: d4(),
                    kv_tile: d16(),
                    coarse_chunk: d16(),
                    seed_reps: d1(),
                    seed: 0,
                },
                kv: KvSource::Synth(KvSpec {
                    requests: 16,
                    dist: step::workloads::traces::KvDist::LogNormal { mu: 6.0, sigma: 1.5, min: 16, max: 4096 },
                    seed: 0,
                }),
            },
            other => return Err(CliError::Invalid(format!("unknown workload `{other}` (swiglu, moe, gqa)"))),
        };
        Ok(RunSpec { workload, sim: None, cost: CostConfig::default(), bindings: Bindings::new(), sweep: None, out: None })
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        match &mut self.workload {
            WorkloadSpec::Moe { routes: RouteSource::Csv { path, .. }, .. } => fix(path),
            WorkloadSpec::Gqa { kv: KvSource::Csv { path }, .. } => fix(path),
            WorkloadSpec::Graph { path, .. } => fix(path),
            _ => {}
        }
        if let Some(out) = &mut self.out {
            fix(out);
        }
    }

    /// Sets the data seed and any synthetic trace seed.
    pub fn set_seed(&mut self, seed: u64) {
        match &mut self.workload {
            WorkloadSpec::Swiglu { config } => config.seed = seed,
            WorkloadSpec::Moe { config, routes } => {
                config.seed = seed;
                if let RouteSource::Synth(r) = routes {
                    r.seed = seed;
                }
            }
            WorkloadSpec::Gqa { config, kv } => {
                config.seed = seed;
                if let KvSource::Synth(k) = kv {
                    k.seed = seed;
                }
            }
            WorkloadSpec::Graph { .. } => {}
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match &self.workload {
            WorkloadSpec::Swiglu { config } => Some(config.seed),
            WorkloadSpec::Moe { config, .. } => Some(config.seed),
            WorkloadSpec::Gqa { config, .. } => Some(config.seed),
            WorkloadSpec::Graph { .. } => None,
        }
    }

    pub fn set_strategy(&mut self, s: Strategy) -> Result<(), CliError> {
        match &mut self.workload {
            WorkloadSpec::Gqa { config, .. } => {
                config.strategy = s;
                Ok(())
            }
            _ => Err(CliError::Invalid("--strategy applies to gqa workloads".into())),
        }
    }

    pub fn set_regions(&mut self, r: usize) -> Result<(), CliError> {
        match &mut self.workload {
            WorkloadSpec::Gqa { config, .. } => config.regions = r,
            WorkloadSpec::Moe { config, .. } => config.regions = Some(r),
            _ => return Err(CliError::Invalid("--regions applies to moe and gqa workloads".into())),
        }
        Ok(())
    }

    pub fn set_tile(&mut self, t: TileChoice) -> Result<(), CliError> {
        match (&mut self.workload, t) {
            (WorkloadSpec::Swiglu { config }, TileChoice::Size(f)) => config.inter_tile = f,
            (WorkloadSpec::Swiglu { config }, TileChoice::Pair(b, f)) => {
                config.batch_tile = b;
                config.inter_tile = f;
            }
            (WorkloadSpec::Moe { config, .. }, TileChoice::Dynamic) => config.tiling = Tiling::Dynamic,
            (WorkloadSpec::Moe { config, .. }, TileChoice::Size(n)) => config.tiling = Tiling::Static { tile: n },
            (WorkloadSpec::Gqa { config, .. }, TileChoice::Size(n)) => config.kv_tile = n,
            (_, t) => return Err(CliError::Invalid(format!("tile `{t}` does not apply to this workload"))),
        }
        Ok(())
    }

    /// A short label of the settings a sweep varies.
    pub fn label(&self) -> String {
        match &self.workload {
            WorkloadSpec::Swiglu { config: c } => format!("tile={}x{}", c.batch_tile, c.inter_tile),
            WorkloadSpec::Moe { config: c, .. } => {
                let t = match c.tiling {
                    Tiling::Dynamic => "dynamic".to_string(),
                    Tiling::Static { tile } => tile.to_string(),
                };
                format!("tile={t} regions={}", c.regions.map_or("none".into(), |r| r.to_string()))
            }
            WorkloadSpec::Gqa { config: c, .. } => {
                format!("strategy={} regions={} kv_tile={}", c.strategy.name(), c.regions, c.kv_tile)
            }
            WorkloadSpec::Graph { path, .. } => path.display().to_string(),
        }
    }

    pub fn build(&self) -> Result<Built, CliError> {
        let w = match &self.workload {
            WorkloadSpec::Swiglu { config } => build_swiglu(config)?,
            WorkloadSpec::Moe { config, routes } => {
                let routes = match routes {
                    RouteSource::Csv { path, iteration } => {
                        let t = load_expert_trace(path, config.experts, config.k)
                            .map_err(|e| CliError::trace(path, e))?;
                        routes_for_iteration(&t, *iteration)
                    }
                    RouteSource::Synth(spec) => {
                        routes_for_iteration(&synth_routes(spec).map_err(|e| CliError::Invalid(e.to_string()))?, 0)
                    }
                    RouteSource::Explicit(r) => r.clone(),
                };
                build_moe(config, &routes)?
            }
            WorkloadSpec::Gqa { config: p, kv } => {
                let lens: Vec<usize> = match kv {
                    KvSource::Csv { path } => {
                        load_kv_trace(path).map_err(|e| CliError::trace(path, e))?.iter().map(|r| r.kv_len).collect()
                    }
                    KvSource::Synth(spec) => synth_kv(spec)
                        .map_err(|e| CliError::Invalid(e.to_string()))?
                        .iter()
                        .map(|r| r.kv_len)
                        .collect(),
                    KvSource::Lengths(l) => l.clone(),
                };
                let cfg = GqaConfig {
                    regions: p.regions,
                    head_dim: p.head_dim,
                    group: p.group,
                    kv_tile: p.kv_tile,
                    kv_lens: lens,
                    strategy: p.strategy,
                    coarse_chunk: p.coarse_chunk,
                    seed_reps: p.seed_reps,
                    seed: p.seed,
                };
                build_gqa(&cfg)?
            }
            WorkloadSpec::Graph { path, inputs } => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                let g = Graph::from_json(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
                let mut feeds = HashMap::new();
                for (name, toks) in inputs {
                    let ch = g
                        .inputs
                        .iter()
                        .copied()
                        .find(|&c| &g.channels[c].name == name)
                        .ok_or_else(|| CliError::Invalid(format!("graph has no input channel `{name}`")))?;
                    feeds.insert(ch, toks.clone());
                }
                return Ok(Built::Graph(g, feeds));
            }
        };
        Ok(Built::Workload(Box::new(w)))
    }
}

pub enum Built {
    Workload(Box<Workload>),
    Graph(Graph, HashMap<ChannelId, Vec<Token>>),
}
