//! Run configuration: one JSON document holding data, architecture, memory,
//! loss weights, ablation switches, schedule and seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autoencoder::ArchitectureConfig;
use crate::datasets::{DatasetLayout, SyntheticSuite};
use crate::error::{Error, Result};
use crate::flow::ProviderKind;
use crate::memory::UNCONSTRAINED;
use crate::scoring::NormalizationScope;

/// Weights of the motion, separation and adversarial terms of the generator loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_motion")]
    pub motion: f64,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_adversarial")]
    pub adversarial: f64,
}

fn default_motion() -> f64 {
    0.6
}
fn default_separation() -> f64 {
    0.01
}
fn default_adversarial() -> f64 {
    0.05
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            motion: default_motion(),
            separation: default_separation(),
            adversarial: default_adversarial(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("motion", self.motion),
            ("separation", self.separation),
            ("adversarial", self.adversarial),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Switches selecting streams, memories and loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default = "yes")]
    pub use_appearance_stream: bool,
    #[serde(default = "yes")]
    pub use_motion_stream: bool,
    #[serde(default = "yes")]
    pub use_spatial_memory: bool,
    #[serde(default = "yes")]
    pub use_temporal_memory: bool,
    #[serde(default = "yes")]
    pub use_l_a: bool,
    #[serde(default = "yes")]
    pub use_l_m: bool,
    #[serde(default = "yes")]
    pub use_l_r: bool,
    #[serde(default = "yes")]
    pub use_l_adv: bool,
}

fn yes() -> bool {
    true
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationConfig {
    pub fn full() -> Self {
        Self {
            use_appearance_stream: true,
            use_motion_stream: true,
            use_spatial_memory: true,
            use_temporal_memory: true,
            use_l_a: true,
            use_l_m: true,
            use_l_r: true,
            use_l_adv: true,
        }
    }

    /// The eight model rows of the ablation table.
    pub fn table_row(row: usize) -> Result<Self> {
        let f = Self::full();
        let cfg = match row {
            1 => Self {
                use_motion_stream: false,
                use_temporal_memory: false,
                use_l_m: false,
                ..f
            },
            2 => Self {
                use_appearance_stream: false,
                use_spatial_memory: false,
                use_l_a: false,
                ..f
            },
            3 => Self {
                use_spatial_memory: false,
                use_temporal_memory: false,
                use_l_r: false,
                ..f
            },
            4 => f,
            5 => Self {
                use_l_m: false,
                use_l_adv: false,
                ..f
            },
            6 => Self { use_l_adv: false, ..f },
            7 => Self { use_l_m: false, ..f },
            8 => Self { use_l_r: false, ..f },
            _ => return Err(Error::Config(format!("ablation rows are 1..=8, got {row}"))),
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("ablation: {m}")));
        if !self.use_appearance_stream && !self.use_motion_stream {
            return fail("at least one stream must be enabled");
        }
        if self.use_spatial_memory && !self.use_appearance_stream {
            return fail("the spatial memory requires the appearance stream");
        }
        if self.use_temporal_memory && !self.use_motion_stream {
            return fail("the temporal memory requires the motion stream");
        }
        if self.use_l_a && !self.use_appearance_stream {
            return fail("the appearance loss requires the appearance stream");
        }
        if self.use_l_m && !self.use_motion_stream {
            return fail("the motion loss requires the motion stream");
        }
        if self.use_l_r && !self.use_spatial_memory && !self.use_temporal_memory {
            return fail("the separation loss requires a memory pool");
        }
        if !self.use_l_a && !self.use_l_m {
            return fail("the predictor needs the appearance or the motion loss");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unconstrained {
    All,
}

/// Write sparsity: a fixed `k` or `"all"` (every query, `k = N̂`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopK {
    Fixed(usize),
    Keyword(Unconstrained),
}

impl TopK {
    /// The pool's `k_top`; "all" keeps every query of each write.
    pub fn resolve(self) -> usize {
        match self {
            TopK::Fixed(k) => k,
            TopK::Keyword(Unconstrained::All) => UNCONSTRAINED,
        }
    }
}

impl std::fmt::Display for TopK {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TopK::Fixed(k) => write!(f, "{k}"),
            TopK::Keyword(Unconstrained::All) => write!(f, "all"),
        }
    }
}

/// How the separation loss is reduced over queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Summed over queries, averaged over the batch.
    #[default]
    Sum,
    /// Averaged over queries and batch.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    #[serde(default = "default_n_items")]
    pub n_items: usize,
    #[serde(default = "default_k_top")]
    pub k_top: TopK,
    #[serde(default)]
    pub separation_reduction: Reduction,
}

fn default_n_items() -> usize {
    32
}
fn default_k_top() -> TopK {
    TopK::Fixed(8)
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            n_items: default_n_items(),
            k_top: default_k_top(),
            separation_reduction: Reduction::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "default_main_epochs")]
    pub main_epochs: usize,
    /// Fraction of pixel positions corrupted for the denoising objective.
    #[serde(default = "default_noise")]
    pub pretrain_noise: f64,
    /// Step between consecutive training clip starts.
    #[serde(default = "default_stride")]
    pub clip_stride: usize,
}

fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    4e-4
}
fn default_pretrain_epochs() -> usize {
    20
}
fn default_main_epochs() -> usize {
    60
}
fn default_noise() -> f64 {
    0.2
}
fn default_stride() -> usize {
    1
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            learning_rate: default_lr(),
            pretrain_epochs: default_pretrain_epochs(),
            main_epochs: default_main_epochs(),
            pretrain_noise: default_noise(),
            clip_stride: default_stride(),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.clip_stride == 0 {
            return Err(Error::Config("batch size and clip stride must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pretrain_noise) {
            return Err(Error::Config("pretrain noise fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// Provider for motion-stream inputs and pretraining targets.
    #[serde(default = "default_input_flow")]
    pub input: ProviderKind,
    /// Provider inside the motion loss; only a differentiable provider
    /// passes gradients to the predicted frame.
    #[serde(default = "default_loss_flow")]
    pub loss: ProviderKind,
    /// Optional directory for flow archives.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_input_flow() -> ProviderKind {
    ProviderKind::Farneback
}
fn default_loss_flow() -> ProviderKind {
    ProviderKind::Proxy
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            input: default_input_flow(),
            loss: default_loss_flow(),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Procedurally generated benchmark, rendered from the run seed.
    Synthetic { suite: SyntheticSuite },
    /// Frame directories on disk; `test` must provide labels.
    Directory {
        name: String,
        root: PathBuf,
        train: DatasetLayout,
        test: DatasetLayout,
    },
}

impl DataConfig {
    pub fn name(&self) -> &str {
        match self {
            DataConfig::Synthetic { .. } => "synthetic",
            DataConfig::Directory { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    #[serde(default)]
    pub normalization: NormalizationScope,
    /// Number of error maps exported per evaluation (most anomalous-labeled
    /// frames first, then one normal frame).
    #[serde(default = "default_error_maps")]
    pub error_maps: usize,
}

fn default_error_maps() -> usize {
    4
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            normalization: NormalizationScope::default(),
            error_maps: default_error_maps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        self.weights.validate()?;
        self.ablation.validate()?;
        self.schedule.validate()?;
        if self.memory.n_items < 2 {
            return Err(Error::Config(format!(
                "memory needs at least 2 items, got {}",
                self.memory.n_items
            )));
        }
        if self.memory.k_top.resolve() == 0 {
            return Err(Error::Config("k_top must be at least 1".into()));
        }
        if let DataConfig::Synthetic { suite } = &self.data {
            suite.validate(self.architecture.k_in)?;
            if (suite.height, suite.width) != self.architecture.resolution {
                return Err(Error::Config(format!(
                    "synthetic suite renders {}x{} but the architecture expects {:?}",
                    suite.height, suite.width, self.architecture.resolution
                )));
            }
        }
        Ok(())
    }

    /// Reads a config file, applies `key.path=value` overrides and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)?;
        Self::from_value(value, overrides)
    }

    pub fn from_value(mut value: Value, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_value(serde_json::to_value(self)?, overrides)
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as JSON and
/// falls back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override path {path:?} has an empty segment")));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert((*key).to_string(), parsed);
                    return Ok(());
                }
                map.entry((*key).to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| Error::Config(format!("override {path:?}: {key:?} is not an index")))?;
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("override {path:?}: index {idx} out of range")))?;
                if last {
                    *slot = parsed;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(Error::Config(format!(
                    "override {path:?}: {key:?} is below a non-container value"
                )))
            }
        };
    }
    unreachable!("loop returns on the last key")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn paper_defaults() {
        let w = LossWeights::default();
        assert_eq!((w.motion, w.separation, w.adversarial), (0.6, 0.01, 0.05));
        let s = TrainSchedule::default();
        assert_eq!((s.batch_size, s.learning_rate), (8, 4e-4));
        let m = MemoryConfig::default();
        assert_eq!((m.n_items, m.k_top), (32, TopK::Fixed(8)));
    }

    #[test]
    fn table_rows() {
        assert_eq!(AblationConfig::table_row(4).unwrap(), AblationConfig::full());
        let r1 = AblationConfig::table_row(1).unwrap();
        assert!(r1.use_appearance_stream && r1.use_spatial_memory && r1.use_l_a && r1.use_l_r && r1.use_l_adv);
        assert!(!r1.use_motion_stream && !r1.use_temporal_memory && !r1.use_l_m);
        for row in 1..=8 {
            AblationConfig::table_row(row).unwrap().validate().unwrap();
        }
        assert!(AblationConfig::table_row(0).is_err());
        assert!(AblationConfig::table_row(9).is_err());
    }

    #[test]
    fn invalid_ablations_are_rejected() {
        let f = AblationConfig::full();
        let bad = [
            AblationConfig {
                use_appearance_stream: false,
                use_motion_stream: false,
                ..f
            },
            AblationConfig {
                use_motion_stream: false,
                use_l_m: false,
                ..f
            },
            AblationConfig {
                use_appearance_stream: false,
                use_spatial_memory: false,
                ..f
            },
            AblationConfig {
                use_spatial_memory: false,
                use_temporal_memory: false,
                ..f
            },
        ];
        for b in bad {
            assert!(b.validate().is_err(), "{b:?}");
        }
    }

    #[test]
    fn top_k_parses_numbers_and_all() {
        let m: MemoryConfig = serde_json::from_value(json!({"k_top": "all"})).unwrap();
        assert_eq!(m.k_top.resolve(), UNCONSTRAINED);
        let m: MemoryConfig = serde_json::from_value(json!({"k_top": 4})).unwrap();
        assert_eq!(m.k_top.resolve(), 4);
        assert!(serde_json::from_value::<MemoryConfig>(json!({"k_top": "some"})).is_err());
    }

    #[test]
    fn overrides() {
        let mut v = json!({"a": {"b": 1, "list": [1, 2]}, "s": "x"});
        apply_override(&mut v, "a.b=2.5").unwrap();
        apply_override(&mut v, "a.c.d=true").unwrap();
        apply_override(&mut v, "a.list.1=7").unwrap();
        apply_override(&mut v, "s=hello").unwrap();
        assert_eq!(v, json!({"a": {"b": 2.5, "c": {"d": true}, "list": [1, 7]}, "s": "hello"}));
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "s.x=1").is_err());
        assert!(apply_override(&mut v, "a.list.9=1").is_err());
    }
}
