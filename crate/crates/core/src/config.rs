//! Experiment configuration: one TOML file drives scenario generation,
//! partitioning, protocol runs and reporting. Every field has a default, so
//! an empty file is a valid experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{Protocol, RoundConfig};
use crate::imbalance::{ImbalanceLevel, MaskMode};
use crate::model::ArchConfig;
use crate::scenario::ScenarioConfig;

/// How the dataset is split across vehicles before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PartitionSpec {
    /// Keep the generator's ownership and masks.
    Identity,
    /// Stratified round-robin deal (labels spread evenly).
    Iid,
    /// Label-removal skew on top of the IID deal.
    Label {
        level: String,
        #[serde(default = "default_top_probability")]
        top_probability: f64,
    },
    /// RGB/LiDAR masking on top of the intrinsic masks.
    Modality {
        mode: String,
        #[serde(default)]
        rate: Option<f64>,
        #[serde(default)]
        k: Option<usize>,
    },
}

fn default_top_probability() -> f64 {
    0.7
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec::Iid
    }
}

impl PartitionSpec {
    /// Build the partition for a dataset under this spec.
    pub fn build<R: crate::scalar::Real>(
        &self,
        data: &crate::dataset::DatasetFile<R>,
        vehicles: usize,
        seed: u64,
    ) -> Result<crate::dataset::Partition> {
        use crate::imbalance;
        match self {
            PartitionSpec::Identity => Ok(crate::dataset::Partition::identity(data)),
            PartitionSpec::Iid => imbalance::make_iid_partition(data, vehicles, seed),
            PartitionSpec::Label { level, top_probability } => {
                let level: ImbalanceLevel = level.parse()?;
                let base = imbalance::make_iid_partition(data, vehicles, seed)?;
                imbalance::make_label_imbalanced_partition(&base, data, level, seed, *top_probability)
            }
            PartitionSpec::Modality { mode, rate, k } => {
                let base = crate::dataset::Partition::identity(data);
                let mode = match mode.as_str() {
                    "partial" => MaskMode::Partial {
                        rate: rate.ok_or_else(|| Error::config("partial mode needs `rate`"))?,
                    },
                    "complete" => MaskMode::Complete {
                        k: k.ok_or_else(|| Error::config("complete mode needs `k`"))?,
                    },
                    other => return Err(Error::config(format!("unknown mask mode {other:?}"))),
                };
                imbalance::make_modality_masked_partition(&base, mode, seed)
            }
        }
    }
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// One experiment cell runs per (protocol, seed).
    pub seeds: Vec<u64>,
    pub protocols: Vec<String>,
    /// Load this dataset instead of generating one from `scenario`.
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub scenario: ScenarioConfig,
    pub partition: PartitionSpec,
    pub arch: ArchConfig,
    pub rounds: RoundConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            protocols: vec!["GFL4BS".into(), "FedAvg".into()],
            dataset: None,
            out_dir: None,
            scenario: ScenarioConfig::default(),
            partition: PartitionSpec::default(),
            arch: ArchConfig::default(),
            rounds: RoundConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let text =
            toml::to_string_pretty(self).map_err(|e| Error::config(format!("serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds list must be nonempty"));
        }
        if self.protocols.is_empty() {
            return Err(Error::config("protocols list must be nonempty"));
        }
        for p in &self.protocols {
            p.parse::<Protocol>()?;
        }
        self.scenario.validate()?;
        self.arch.validate()?;
        Ok(())
    }

    pub fn parsed_protocols(&self) -> Vec<Protocol> {
        self.protocols
            .iter()
            .map(|p| p.parse().expect("validated"))
            .collect()
    }

    /// Output root: explicit config, else the `FEDBEAM_OUT` environment
    /// variable, else `./runs`.
    pub fn resolve_out_dir(&self) -> PathBuf {
        if let Some(dir) = &self.out_dir {
            return dir.clone();
        }
        if let Ok(dir) = std::env::var("FEDBEAM_OUT") {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        PathBuf::from("runs")
    }
}
