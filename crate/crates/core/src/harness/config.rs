//! Experiment configuration: a sectioned TOML document with strict keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationWeights, ShiftScope};
use crate::error::{Error, Result};
use crate::local_training::{Algorithm, LocalConfig};
use crate::params::ModelSpec;
use crate::quantization::{check_bits, KMeansOptions, QuantSpec, Scheme};

/// `bits` value meaning "inferior clients upload full precision".
pub const FULL_PRECISION_BITS: u8 = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub federation: FederationConfig,
    pub local: LocalSection,
    #[serde(default)]
    pub quantization: QuantizationConfig,
    #[serde(default)]
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        samples_per_class: usize,
        test_samples_per_class: usize,
        separation: f64,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PartitionConfig {
    Shard {
        #[serde(default = "default_labels_per_client")]
        labels_per_client: usize,
    },
    Dirichlet {
        alpha: f64,
        #[serde(default = "default_inferior_fraction")]
        inferior_fraction: f64,
    },
}

fn default_labels_per_client() -> usize {
    2
}

fn default_inferior_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub participation: f64,
    pub rounds: u64,
    pub shift_enabled: bool,
    #[serde(default)]
    pub shift_scope: ShiftScope,
    #[serde(default)]
    pub aggregation_weights: AggregationWeights,
    /// Keep SCAFFOLD control variates pinned at zero.
    #[serde(default)]
    pub freeze_controls: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalSection {
    pub algorithm: Algorithm,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    #[serde(default)]
    pub momentum: f32,
    #[serde(default = "default_prox_mu")]
    pub prox_mu: f32,
}

fn default_prox_mu() -> f32 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizationConfig {
    pub scheme: Scheme,
    /// 1..=16, or 32 for full precision.
    pub bits: u8,
    #[serde(default)]
    pub kmeans: KMeansOptions,
}

impl Default for QuantizationConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Kmeans,
            bits: 4,
            kmeans: KMeansOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads for client training; 0 uses every core.
    #[serde(default)]
    pub parallelism: usize,
    /// Write every inferior upload as an `.fsq` file.
    #[serde(default)]
    pub dump_payloads: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            parallelism: 0,
            dump_payloads: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    /// Read `path`, apply `section.key=value` overrides, then validate.
    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let f = &self.federation;
        if f.rounds == 0 {
            return Err(Error::config("federation.rounds must be at least 1"));
        }
        if f.num_clients < 2 {
            return Err(Error::config("federation.num_clients must be at least 2"));
        }
        if !(f.participation > 0.0 && f.participation <= 1.0) {
            return Err(Error::config("federation.participation must be in (0, 1]"));
        }
        if self.quantization.bits != FULL_PRECISION_BITS {
            check_bits(self.quantization.bits)
                .map_err(|_| Error::config("quantization.bits must be in 1..=16 or 32"))?;
        }
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds must not be empty"));
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                samples_per_class,
                test_samples_per_class,
                separation,
            } => {
                if *samples_per_class == 0 || *test_samples_per_class == 0 {
                    return Err(Error::config("dataset sample counts must be positive"));
                }
                if !(*separation >= 0.0 && separation.is_finite()) {
                    return Err(Error::config("dataset.separation must be non-negative"));
                }
            }
            DatasetConfig::Csv { test_fraction, .. } => {
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(Error::config("dataset.test_fraction must be in (0, 1)"));
                }
            }
        }
        self.local_config().validate()
    }

    pub fn local_config(&self) -> LocalConfig {
        let q = &self.quantization;
        LocalConfig {
            algorithm: self.local.algorithm,
            epochs: self.local.epochs,
            batch_size: self.local.batch_size,
            lr: self.local.lr,
            momentum: self.local.momentum,
            prox_mu: self.local.prox_mu,
            quant: (q.bits != FULL_PRECISION_BITS).then_some(QuantSpec {
                scheme: q.scheme,
                bits: q.bits,
                kmeans: q.kmeans,
            }),
        }
    }
}

/// Set a dotted key such as `federation.rounds=10`. The value is parsed as a
/// TOML value and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
