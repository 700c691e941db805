//! Run configuration: the TOML file, its resolution against the run seed,
//! and the content hash that names a run.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use diffprobe::attacks::{AttackConfig, LossKind, ThreatModel};
use diffprobe::backbone::{PretrainConfig, UNetConfig};
use diffprobe::heads::{HeadKind, HeadTrainConfig};
use diffprobe::ScheduleParams;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generated two-class blobs; needs no files.
    Synthetic,
    /// CIFAR-10 binary batches under `root`.
    Cifar10,
    /// Image archives at `root/train` and `root/test`.
    Archive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: Option<PathBuf>,
    /// Training images; `None` takes the source default.
    pub train: Option<usize>,
    pub test: Option<usize>,
    /// Synthetic images only.
    pub resolution: usize,
    pub margin: f64,
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root: None,
            train: None,
            test: None,
            resolution: 16,
            margin: 0.1,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub preset: Preset,
    /// Full architecture; overrides `preset` when given.
    pub unet: Option<UNetConfig>,
    /// Existing checkpoint directory to load instead of pretraining.
    pub checkpoint: Option<PathBuf>,
    pub pretrain: PretrainConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Tiny,
            unet: None,
            checkpoint: None,
            pretrain: PretrainConfig {
                steps: 200,
                batch_size: 16,
                learning_rate: 1e-3,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Pooled grid side `k`.
    pub pool: usize,
    pub noise_seed: Option<u64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            pool: 2,
            noise_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    /// Empty means the three taps nearest the bottleneck.
    pub blocks: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub heads: Vec<HeadKind>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self {
            blocks: Vec::new(),
            timesteps: vec![10, 30, 90, 150],
            heads: vec![HeadKind::Linear, HeadKind::Attention],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Every random stream in the run derives from this.
    pub seed: u64,
    pub data: DataConfig,
    pub schedule: ScheduleParams,
    pub backbone: BackboneConfig,
    pub probe: ProbeConfig,
    pub head: HeadTrainConfig,
    pub threat: ThreatModel,
    pub attacks: Vec<AttackConfig>,
    pub sweep: SweepAxes,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            schedule: ScheduleParams::default(),
            backbone: BackboneConfig::default(),
            probe: ProbeConfig::default(),
            head: HeadTrainConfig::default(),
            threat: ThreatModel::default(),
            attacks: default_attacks(),
            sweep: SweepAxes::default(),
        }
    }
}

pub fn default_attacks() -> Vec<AttackConfig> {
    vec![
        AttackConfig::fgsm(),
        AttackConfig::pgd10(),
        AttackConfig::pgd20(),
        AttackConfig::cw(20, 2.0 / 255.0, 0.0).with_label("CW"),
        AttackConfig::apgd(20, LossKind::Ce),
    ]
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run configs serialize to TOML")
    }

    /// Fills every defaulted field, applies the run seed to all component
    /// seeds, and validates what can be checked without a backbone.
    pub fn resolve(mut self) -> Result<Self> {
        let seed = self.seed;
        let d = &mut self.data;
        d.seed.get_or_insert(seed);
        let (train, test) = match d.source {
            DataSource::Synthetic => (300, 100),
            DataSource::Cifar10 => (5000, 1000),
            DataSource::Archive => (0, 0),
        };
        if d.source != DataSource::Archive {
            d.train.get_or_insert(train);
            d.test.get_or_insert(test);
        }
        if d.source != DataSource::Synthetic && d.root.is_none() {
            return Err(HarnessError::Config(format!("data source {:?} needs `data.root`", d.source)));
        }
        if d.source == DataSource::Cifar10 {
            d.resolution = 32;
        }
        if d.source == DataSource::Synthetic {
            for n in [d.train, d.test].into_iter().flatten() {
                if n == 0 || n % 2 != 0 {
                    return Err(HarnessError::Config(format!(
                        "synthetic split sizes must be positive and even, got {n}"
                    )));
                }
            }
        }

        let res = self.data.resolution;
        if self.backbone.unet.is_none() {
            self.backbone.unet = Some(match self.backbone.preset {
                Preset::Tiny => UNetConfig::tiny(res),
                Preset::Standard => UNetConfig {
                    resolution: res,
                    attention_resolutions: vec![res / 2],
                    ..UNetConfig::default()
                },
            });
        }
        if let Some(u) = &self.backbone.unet {
            u.validate()?;
        }
        self.backbone.pretrain.seed = seed;
        self.head.seed = seed;
        self.probe.noise_seed.get_or_insert(seed);
        for a in &mut self.attacks {
            a.seed = seed;
            a.validate()?;
            a.threat(&self.threat)?;
        }
        self.schedule.build()?;
        self.threat.validate()?;
        if self.probe.pool == 0 {
            return Err(HarnessError::Config("probe.pool must be at least 1".into()));
        }
        let s = &self.sweep;
        if s.timesteps.is_empty() || s.heads.is_empty() {
            return Err(HarnessError::Config("sweep axes must be non-empty".into()));
        }
        if let Some(&t) = s.timesteps.iter().find(|&&t| t == 0 || t > self.schedule.steps) {
            return Err(HarnessError::Config(format!(
                "timestep {t} outside 1..={}",
                self.schedule.steps
            )));
        }
        dedup(&mut self.sweep.timesteps);
        dedup(&mut self.sweep.blocks);
        dedup(&mut self.sweep.heads);
        let mut names: Vec<String> = self.attacks.iter().map(|a| a.name()).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(HarnessError::Config("attack names must be unique; set `label`".into()));
        }
        Ok(self)
    }

    pub fn unet(&self) -> &UNetConfig {
        self.backbone.unet.as_ref().expect("resolved config")
    }

    pub fn noise_seed(&self) -> u64 {
        self.probe.noise_seed.unwrap_or(self.seed)
    }
}

fn dedup<T: Ord>(v: &mut Vec<T>) {
    v.sort();
    v.dedup();
}

/// JSON text with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    fn sorted(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                Value::Object(keys.into_iter().map(|k| (k.clone(), sorted(&m[k]))).collect())
            }
            Value::Array(a) => Value::Array(a.iter().map(sorted).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sorted(v)).expect("JSON values serialize")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the resolved configuration without its sweep axes, so a grid
/// can be extended without invalidating finished cells. The worker count is
/// a command-line setting and never part of the config.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut v = serde_json::to_value(cfg).expect("configs serialize");
    if let Value::Object(m) = &mut v {
        m.remove("sweep");
    }
    sha256_hex(canonical_json(&v).as_bytes())
}

/// Digest of the parts that determine the backbone weights.
pub fn backbone_key(cfg: &RunConfig) -> String {
    let v = serde_json::json!({
        "data": cfg.data,
        "schedule": cfg.schedule,
        "unet": cfg.backbone.unet,
        "pretrain": cfg.backbone.pretrain,
        "checkpoint": cfg.backbone.checkpoint,
    });
    sha256_hex(canonical_json(&v).as_bytes())
}

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub head: HeadKind,
    pub block: usize,
    pub timestep: usize,
}

impl Cell {
    pub fn new(head: HeadKind, block: usize, timestep: usize) -> Self {
        Self { head, block, timestep }
    }

    /// File-name-safe key, e.g. `linear-b4-t10`.
    pub fn key(&self) -> String {
        format!("{}-b{}-t{}", self.head.name(), self.block, self.timestep)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} head, block {}, t = {}", self.head.name(), self.block, self.timestep)
    }
}

impl FromStr for Cell {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || HarnessError::Config(format!("bad cell key {s:?}"));
        let mut parts = s.split('-');
        let head: HeadKind = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let block = parts
            .next()
            .and_then(|p| p.strip_prefix('b'))
            .and_then(|p| p.parse().ok())
            .ok_or_else(bad)?;
        let timestep = parts
            .next()
            .and_then(|p| p.strip_prefix('t'))
            .and_then(|p| p.parse().ok())
            .ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Cell { head, block, timestep })
    }
}

/// The `n` block indices closest to `center`, ties to the lower index.
pub fn nearest_blocks(count: usize, center: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.sort_by_key(|&i| (i.abs_diff(center), i));
    idx.truncate(n);
    idx.sort_unstable();
    idx
}
