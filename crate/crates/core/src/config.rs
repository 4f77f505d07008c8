//! JSON run configuration. Unknown keys are rejected, and the fully
//! defaulted configuration is written next to every run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::QueryTransformerConfig;
use crate::checkpoint::write_atomic;
use crate::connector::{Branches, SfSlotsConfig};
use crate::error::{Error, Result};
use crate::synthetic::{ProbeSpec, SceneRanges};

/// File name of the effective configuration inside the output directory.
pub const EFFECTIVE_CONFIG: &str = "effective-config.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

/// Which token aggregation the connector uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConnectorKind {
    #[default]
    SfSlots,
    QueryTransformer,
    Pooling,
}

impl ConnectorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::SfSlots => "sf-slots",
            Self::QueryTransformer => "query-transformer",
            Self::Pooling => "pooling",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    /// 1 = reconstruction pretraining, 2 = per-branch tuning, 3 = joint tuning.
    pub stage: u8,
    pub branch: Branches,
    pub connector: ConnectorKind,
    pub steps: u64,
    pub lr_max: f32,
    pub lr_min: f32,
    pub schedule: Schedule,
    /// Scenes per step.
    pub batch: usize,
    pub clip_norm: f32,
    pub log_every: u64,
    /// Size of the cycled training-scene pool.
    pub train_scenes: usize,
    /// Stage-2 source for the slow branch (stage 1 output) or stage-3 source
    /// (stage 2 output); defaults to the conventional file in the output directory.
    pub load_slow: Option<PathBuf>,
    pub load_fast: Option<PathBuf>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::for_stage(1)
    }
}

impl StageConfig {
    /// Desk-scale defaults of each stage.
    pub fn for_stage(stage: u8) -> Self {
        let (steps, lr_max, schedule, branch) = match stage {
            1 => (2000, 1e-3, Schedule::Constant, Branches::Slow),
            2 => (1000, 2e-4, Schedule::Cosine, Branches::Slow),
            _ => (1000, 2e-4, Schedule::Cosine, Branches::Both),
        };
        Self {
            stage,
            branch,
            connector: ConnectorKind::SfSlots,
            steps,
            lr_max,
            lr_min: 0.0,
            schedule,
            batch: if stage == 1 { 8 } else { 4 },
            clip_norm: 1.0,
            log_every: 50,
            train_scenes: 128,
            load_slow: None,
            load_fast: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage.stage must be 1, 2 or 3, got {}", self.stage)));
        }
        if self.batch == 0 || self.train_scenes == 0 || self.log_every == 0 {
            return Err(Error::Config("stage: batch, train_scenes and log_every must be positive".into()));
        }
        if !(self.lr_max >= 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "stage: need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("stage.clip_norm must be positive".into()));
        }
        if self.stage == 1 && self.branch == Branches::Both {
            return Err(Error::Config("stage 1 pretrains one branch at a time".into()));
        }
        if self.stage == 1 && self.connector == ConnectorKind::Pooling {
            return Err(Error::Config("the pooling connector has nothing to pretrain".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSettings {
    pub layers: usize,
    pub ff_hidden: usize,
}

impl Default for DecoderSettings {
    fn default() -> Self {
        Self {
            layers: 2,
            ff_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out scenes per evaluation.
    pub scenes: usize,
    /// Object-count range of the decomposition scenes; `None` keeps the data range.
    pub objects: Option<(usize, usize)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scenes: 50,
            objects: Some((3, 3)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub connector: SfSlotsConfig,
    /// Aggregator settings of the query-transformer baseline.
    pub query: QueryTransformerConfig,
    pub decoder: DecoderSettings,
    pub data: SceneRanges,
    pub probe: ProbeSpec,
    pub stage: StageConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            connector: SfSlotsConfig::default(),
            query: QueryTransformerConfig::default(),
            decoder: DecoderSettings::default(),
            data: SceneRanges::default(),
            probe: ProbeSpec::default(),
            stage: StageConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_config(path)?)
    }

    /// Parses `text` over the defaults of `stage`: keys missing from the
    /// `stage` section take that stage's defaults rather than stage 1's.
    pub fn for_stage_json(text: &str, stage: u8) -> Result<Self> {
        let user: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !user.is_object() {
            return Err(Error::Config("configuration must be a JSON object".into()));
        }
        let base = Self {
            stage: StageConfig::for_stage(stage),
            ..Self::default()
        };
        let mut merged = serde_json::to_value(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.stage.stage != stage {
            return Err(Error::Config(format!(
                "stage.stage is {} but the command runs stage {stage}",
                cfg.stage.stage
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_for_stage(path: &Path, stage: u8) -> Result<Self> {
        Self::for_stage_json(&read_config(path)?, stage)
    }

    pub fn validate(&self) -> Result<()> {
        self.connector
            .validate()
            .map_err(|e| Error::Config(format!("connector: {e}")))?;
        self.data.validate()?;
        self.stage.validate()?;
        let c = &self.connector;
        if (self.data.height, self.data.width, self.data.d) != (c.height, c.width, c.d_in) {
            return Err(Error::Config(format!(
                "data grid {}x{}x{} does not match connector {}x{}x{}",
                self.data.height, self.data.width, self.data.d, c.height, c.width, c.d_in
            )));
        }
        if self.data.frames < c.slow_frames || self.data.frames > c.max_frames {
            return Err(Error::Config(format!(
                "data.frames {} outside [{}, {}]",
                self.data.frames, c.slow_frames, c.max_frames
            )));
        }
        if self.probe.max_objects < self.data.objects.1 {
            return Err(Error::Config("probe.max_objects below data.objects upper bound".into()));
        }
        if self.probe.event_position >= c.pooled_positions() {
            return Err(Error::Config("probe.event_position outside the pooled grid".into()));
        }
        if let Some((t, y, x)) = self.probe.occupancy_cell {
            if t >= self.data.frames || y >= c.height || x >= c.width {
                return Err(Error::Config("probe.occupancy_cell outside the video".into()));
            }
        }
        if self.eval.scenes == 0 {
            return Err(Error::Config("eval.scenes must be positive".into()));
        }
        if let Some((lo, hi)) = self.eval.objects {
            if lo == 0 || lo > hi || hi > self.data.types || hi > self.probe.max_objects {
                return Err(Error::Config(format!("eval.objects {:?} invalid", (lo, hi))));
            }
        }
        let q = &self.query;
        if c.d_slot % q.heads != 0 || q.heads == 0 {
            return Err(Error::Config("query.heads must divide connector.d_slot".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the effective configuration into the output directory.
    pub fn write_effective(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir)?;
        let path = self.output_dir.join(EFFECTIVE_CONFIG);
        write_atomic(&path, self.to_json().as_bytes())?;
        Ok(path)
    }

    /// Short stable hash of the effective configuration.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_json().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Overlays `user` onto `base`, recursing into objects. Keys absent from
/// `base` are kept so deserialization rejects them.
fn merge(base: &mut serde_json::Value, user: serde_json::Value) {
    match (base, user) {
        (serde_json::Value::Object(b), serde_json::Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
