//! Run configuration: one JSON file, optionally overridden from the command
//! line.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ade_core::execflow::{Flow, PruneMode, ScheduleOptions};
use ade_core::hetgraph::{MetapathSpec, SyntheticSpec};
use ade_core::model::{FusionMode, ShapeConfig};
use ade_core::simcore::HardwareConfig;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CliError, Result};

/// Retention capacity: a positive integer or `unbounded`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum KSetting {
    Bounded(u32),
    #[default]
    Unbounded,
}

impl KSetting {
    pub fn get(self) -> Option<u32> {
        match self {
            KSetting::Bounded(k) => Some(k),
            KSetting::Unbounded => None,
        }
    }
}

impl From<Option<u32>> for KSetting {
    fn from(k: Option<u32>) -> Self {
        k.map_or(KSetting::Unbounded, KSetting::Bounded)
    }
}

impl fmt::Display for KSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KSetting::Bounded(k) => write!(f, "{k}"),
            KSetting::Unbounded => f.write_str("unbounded"),
        }
    }
}

impl FromStr for KSetting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("unbounded") {
            return Ok(KSetting::Unbounded);
        }
        match s.parse::<u32>() {
            Ok(0) => Err("K must be at least 1".into()),
            Ok(k) => Ok(KSetting::Bounded(k)),
            Err(_) => Err(format!("'{s}' is neither a positive integer nor 'unbounded'")),
        }
    }
}

impl Serialize for KSetting {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KSetting::Bounded(k) => s.serialize_u32(*k),
            KSetting::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for KSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => u32::try_from(n)
                .map_err(|_| format!("K = {n} is too large"))
                .and_then(|n| n.to_string().parse())
                .map_err(serde::de::Error::custom),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSource {
    /// Graph manifest; relative paths resolve against the config file.
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim_out: usize,
    pub heads: usize,
    pub semantic_dim: usize,
    pub leaky_slope: f32,
    pub fusion: FusionMode,
    pub seed: u64,
    /// Parameter manifest to load instead of seeded initialization.
    pub params: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = ShapeConfig::default();
        Self {
            layers: s.layers,
            dim_out: s.dim_out,
            heads: s.heads,
            semantic_dim: s.semantic_dim,
            leaky_slope: s.leaky_slope,
            fusion: s.fusion,
            seed: 0,
            params: None,
        }
    }
}

impl ModelConfig {
    pub fn shape(&self) -> ShapeConfig {
        ShapeConfig {
            layers: self.layers,
            dim_out: self.dim_out,
            heads: self.heads,
            semantic_dim: self.semantic_dim,
            leaky_slope: self.leaky_slope,
            fusion: self.fusion,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SemanticConfig {
    #[default]
    Relations,
    Metapaths {
        specs: Vec<MetapathSpec>,
        #[serde(default = "yes")]
        include_self: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSampling {
    pub p: f64,
    /// Targets drawn per semantic graph.
    pub samples: usize,
    pub seed: u64,
}

impl Default for AttentionSampling {
    fn default() -> Self {
        Self {
            p: 0.2,
            samples: 1000,
            seed: 42,
        }
    }
}

fn default_flow() -> Flow {
    Flow::Fused
}

fn default_k() -> KSetting {
    KSetting::Bounded(50)
}

fn default_fp_batch() -> u32 {
    64
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub graph: GraphSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub semantics: SemanticConfig,
    #[serde(default = "default_flow")]
    pub flow: Flow,
    #[serde(default = "default_k")]
    pub k: KSetting,
    #[serde(default)]
    pub prune_mode: PruneMode,
    #[serde(default = "default_fp_batch")]
    pub fp_batch: u32,
    #[serde(default)]
    pub hardware: HardwareConfig,
    #[serde(default)]
    pub attention: AttentionSampling,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

impl RunConfig {
    pub fn new(graph: GraphSource) -> Self {
        Self {
            graph,
            model: ModelConfig::default(),
            semantics: SemanticConfig::default(),
            flow: default_flow(),
            k: default_k(),
            prune_mode: PruneMode::default(),
            fp_batch: default_fp_batch(),
            hardware: HardwareConfig::default(),
            attention: AttentionSampling::default(),
            out: default_out(),
        }
    }

    /// Reads a config file and makes its relative paths absolute with
    /// respect to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(CliError::io(path))?;
        let mut cfg: RunConfig = serde_json::from_slice(&text).map_err(CliError::json(path))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let GraphSource::Path(p) = &mut cfg.graph {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = cfg.model.params.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
        Ok(cfg)
    }

    pub fn schedule_options(&self, k: KSetting) -> ScheduleOptions {
        ScheduleOptions {
            k: k.get(),
            prune_mode: self.prune_mode,
            fp_batch: self.fp_batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fp_batch == 0 {
            return Err(CliError::Input("fp_batch must be at least 1".into()));
        }
        let a = &self.attention;
        if !(a.p > 0.0 && a.p <= 1.0) {
            return Err(CliError::Input(format!("attention.p = {} is outside (0, 1]", a.p)));
        }
        if a.samples == 0 {
            return Err(CliError::Input("attention.samples must be at least 1".into()));
        }
        if let GraphSource::Path(p) = &self.graph {
            if !p.exists() {
                return Err(CliError::Input(format!("graph manifest {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.model.params {
            if !p.exists() {
                return Err(CliError::Input(format!("parameter manifest {} does not exist", p.display())));
            }
        }
        self.hardware.validate()?;
        Ok(())
    }
}
