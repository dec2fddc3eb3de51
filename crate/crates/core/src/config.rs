//! Experiment configuration, loaded from TOML (or JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::data::{dominant_attribute, DatasetSpec};
use crate::error::{Error, Result};
use crate::oracle::{Instruction, OracleArch, OracleTrainConfig};
use crate::rectify::GuidanceConfig;
use crate::velocity::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub decoder: DecoderSpec,
    pub velocity: VelocitySpec,
    pub oracle: OracleSpec,
    pub guidance: GuidanceConfig,
    pub schedule: ScheduleSpec,
    pub run: RunSpec,
    pub sweep: SweepSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSpec {
    /// `false` uses the identity map.
    pub random: bool,
    pub seed: u64,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self {
            random: true,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VelocitySpec {
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub embedding_dim: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for VelocitySpec {
    fn default() -> Self {
        Self {
            hidden_widths: vec![64, 64],
            activation: Activation::Silu,
            embedding_dim: 4,
            seed: 1,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSpec {
    /// Rows in the uniform-pair dataset the oracle is trained on.
    pub sample_count: usize,
    pub arch: OracleArch,
    pub train: OracleTrainConfig,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            sample_count: 4000,
            arch: OracleArch::default(),
            train: OracleTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub num_steps: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { num_steps: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedInstructionSet {
    /// Pairs other than each object's dominant attribute.
    Rare,
    Dominant,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InstructionSet {
    Named(NamedInstructionSet),
    /// Explicit `[object, attribute]` pairs.
    Explicit(Vec<[usize; 2]>),
}

impl InstructionSet {
    pub fn resolve(&self, num_objects: usize, num_attributes: usize) -> Result<Vec<Instruction>> {
        let all =
            (0..num_objects).flat_map(|k| (0..num_attributes).map(move |j| Instruction::new(k, j)));
        let out: Vec<Instruction> = match self {
            InstructionSet::Named(NamedInstructionSet::All) => all.collect(),
            InstructionSet::Named(NamedInstructionSet::Rare) => all
                .filter(|i| {
                    i.attribute_id != Some(dominant_attribute(i.object_id.unwrap(), num_attributes))
                })
                .collect(),
            InstructionSet::Named(NamedInstructionSet::Dominant) => all
                .filter(|i| {
                    i.attribute_id == Some(dominant_attribute(i.object_id.unwrap(), num_attributes))
                })
                .collect(),
            InstructionSet::Explicit(pairs) => {
                for [k, j] in pairs {
                    if *k >= num_objects || *j >= num_attributes {
                        return Err(Error::UnknownLabel(format!("instruction ({k},{j})")));
                    }
                }
                pairs
                    .iter()
                    .map(|[k, j]| Instruction::new(*k, *j))
                    .collect()
            }
        };
        if out.is_empty() {
            return Err(Error::InvalidConfig("instruction set is empty".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub num_seeds: usize,
    /// Seed of the first trajectory; trajectory `i` uses `seed_base + i`.
    pub seed_base: u64,
    pub instructions: InstructionSet,
    pub output_dir: PathBuf,
    /// Write one alignment CSV per trajectory.
    pub write_trajectories: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            num_seeds: 100,
            seed_base: 0,
            instructions: InstructionSet::Named(NamedInstructionSet::Rare),
            output_dir: PathBuf::from("out"),
            write_trajectories: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    #[serde(rename = "K")]
    pub k: Vec<usize>,
    pub window: Vec<[usize; 2]>,
    pub eta: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            k: vec![0, 1, 3, 5],
            window: vec![[0, 5], [5, 10], [10, 15], [15, 20], [20, 25]],
            eta: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.velocity.train.validate()?;
        if self.schedule.num_steps == 0 {
            return Err(Error::InvalidConfig(
                "schedule.num_steps must be positive".into(),
            ));
        }
        self.guidance.validate(self.schedule.num_steps)?;
        if self.run.num_seeds == 0 {
            return Err(Error::InvalidConfig(
                "run.num_seeds must be at least 1".into(),
            ));
        }
        self.run.instructions.resolve(
            self.dataset.num_object_labels,
            self.dataset.num_attribute_labels,
        )?;
        Ok(())
    }

    /// Parses TOML, falling back to JSON when the text is not TOML.
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: Self = match toml::from_str(text) {
            Ok(c) => c,
            Err(toml_err) => match serde_json::from_str(text) {
                Ok(c) => c,
                Err(json_err) if text.trim_start().starts_with('{') => {
                    return Err(Error::InvalidConfig(format!("json: {json_err}")))
                }
                Err(_) => return Err(Error::InvalidConfig(format!("toml: {toml_err}"))),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

/// Bundled experiment recipes.
pub mod recipes {
    use super::ExperimentConfig;
    use crate::error::Result;

    pub const CAPABILITY_MISMATCH: &str = include_str!("../recipes/capability_mismatch.toml");

    /// Biased small generator against a uniform-pair oracle, with the toy-scale
    /// guidance scale.
    pub fn capability_mismatch() -> Result<ExperimentConfig> {
        ExperimentConfig::from_str(CAPABILITY_MISMATCH)
    }
}
