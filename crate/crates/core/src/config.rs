//! Experiment configuration (TOML) and its materialization into engine inputs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bound::{BoundTrialConfig, Scheme};
use crate::data::{
    generate, load_delimited, partition_dirichlet, partition_iid, partition_label_sorted, DatasetShard, GeneratorSpec,
    Sample,
};
use crate::engine::{AlgoKind, ParticipationMode, ParticipationSpec, RunSpec, ScheduleSpec};
use crate::error::{Error, Result};
use crate::metrics::EvalSource;
use crate::model::ModelSpec;
use crate::params::BlockLayout;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub algorithm: AlgoKind,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Metrics row every `cadence` global steps; 0 emits only the last step.
    #[serde(default = "default_cadence")]
    pub cadence: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub schedule: ScheduleSpec,
    #[serde(default = "default_participation")]
    pub participation: ParticipationMode,
    /// `K(·)`; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundTrialConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identities: Option<IdentityConfig>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_cadence() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

fn default_participation() -> ParticipationMode {
    ParticipationMode::Full
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: crate::model::Family,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Number of leading blocks treated as representation; the model's
    /// default is every block but the last.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub representation_blocks: Option<usize>,
}

impl ModelConfig {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec { family: self.family.clone(), input_dim: self.input_dim, output_dim: self.output_dim }
    }

    pub fn layout(&self) -> Result<BlockLayout> {
        let spec = self.spec();
        spec.validate()?;
        Ok(match self.representation_blocks {
            None => spec.layout(),
            Some(n) if n <= spec.num_blocks() => spec.layout_with_representation(n),
            Some(n) => {
                return Err(Error::Config(format!(
                    "representation_blocks = {n} exceeds the model's {} blocks",
                    spec.num_blocks()
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Number of clients.
    pub clients: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
    /// Delimited text file, one sample per line, label last.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_file: Option<PathBuf>,
    /// Per-client draws from `D_k` (generator only, no partitioner).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_per_client: Option<usize>,
    /// Size of a pooled generator dataset that is then partitioned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
    /// Size of the pooled held-out set, partitioned like the training pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionConfig {
    Iid,
    LabelSorted { classes_per_client: usize },
    Dirichlet { concentration: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Fresh draws per client for Monte-Carlo population risk.
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    /// Record the per-round averaged model and sample sets.
    #[serde(default)]
    pub roundwise: bool,
}

fn default_mc() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityConfig {
    pub k: usize,
    pub k_hat: Vec<usize>,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    pub draws: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
}

fn default_schemes() -> Vec<Scheme> {
    vec![Scheme::I, Scheme::II]
}

impl Default for IdentityConfig {
    fn default() -> Self {
        Self { k: 10, k_hat: vec![3, 10], schemes: default_schemes(), draws: 100_000, seed: 0, weights: None, x: None }
    }
}

/// Everything needed to start one seeded run.
#[derive(Debug, Clone)]
pub struct Materialized {
    pub model: ModelSpec,
    pub layout: Arc<BlockLayout>,
    pub shards: Vec<DatasetShard>,
    pub spec: RunSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization, output directory excluded.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.out = PathBuf::new();
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }

    pub fn client_weights(&self) -> Vec<f64> {
        let k = self.data.clients;
        self.weights.clone().unwrap_or_else(|| vec![1.0 / k as f64; k])
    }

    /// Schema checks that need no data.
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.model.layout()?;
        let d = &self.data;
        if d.clients == 0 {
            return Err(Error::Config("data.clients must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        match (&d.generator, &d.file) {
            (Some(_), Some(_)) => return Err(Error::Config("data: give either generator or file, not both".into())),
            (None, None) => return Err(Error::Config("data: a generator or a file is required".into())),
            (Some(_), None) => match (d.n_per_client, d.pool_size) {
                (Some(_), None) if d.partition.is_some() => {
                    return Err(Error::Config("data.partition applies to pool_size, not n_per_client".into()))
                }
                (Some(_), None) => {}
                (None, Some(_)) if d.partition.is_none() => {
                    return Err(Error::Config("data.pool_size needs data.partition".into()))
                }
                (None, Some(_)) => {}
                _ => return Err(Error::Config("data: give exactly one of n_per_client and pool_size".into())),
            },
            (None, Some(_)) => {
                if d.partition.is_none() {
                    return Err(Error::Config("data.file needs data.partition".into()));
                }
            }
        }
        ParticipationSpec { mode: self.participation.clone(), base_weights: self.client_weights() }.validate()?;
        Ok(())
    }

    fn partition(&self, samples: &[Sample], seed: u64) -> Result<Vec<DatasetShard>> {
        let k = self.data.clients;
        match self.data.partition.as_ref().expect("validated") {
            PartitionConfig::Iid => partition_iid(samples, k, seed),
            PartitionConfig::LabelSorted { classes_per_client } => {
                partition_label_sorted(samples, k, *classes_per_client)
            }
            PartitionConfig::Dirichlet { concentration } => partition_dirichlet(samples, k, *concentration, seed),
        }
    }

    /// Build data, layout and run settings for `seed`. The generator seed is
    /// offset by the run seed so that every seed sees fresh data.
    pub fn materialize(&self, seed: u64, workers: usize) -> Result<Materialized> {
        let model = self.model.spec();
        let layout = Arc::new(self.model.layout()?);
        let k = self.data.clients;
        let d = &self.data;
        let (shards, eval) = if let Some(g) = &d.generator {
            let g = GeneratorSpec { kind: g.kind.clone(), seed: g.seed.wrapping_add(seed) };
            let prepared = g.prepare(k)?;
            let shards = match (d.n_per_client, d.pool_size) {
                (Some(n), _) => generate(&g, n, k)?,
                (None, Some(n)) => self.partition(&prepared.pool(n, 0), seed)?,
                _ => unreachable!("validated"),
            };
            let eval = match (d.holdout_size, d.pool_size) {
                (Some(h), Some(_)) => Some(EvalSource::Holdout(self.partition(&prepared.pool(h, 1), seed)?)),
                (Some(_), None) => {
                    return Err(Error::Config("data.holdout_size applies to pooled data only".into()));
                }
                _ => Some(EvalSource::Generator {
                    gen: prepared,
                    mc_samples: self.eval.as_ref().map_or(default_mc(), |e| e.mc_samples),
                }),
            };
            (shards, eval)
        } else {
            let (samples, _) = load_delimited(d.file.as_ref().expect("validated"))?;
            let shards = self.partition(&samples, seed)?;
            let eval = match &d.holdout_file {
                Some(p) => Some(EvalSource::Holdout(self.partition(&load_delimited(p)?.0, seed)?)),
                None => None,
            };
            (shards, eval)
        };
        let mut spec = RunSpec::new(self.algorithm, self.schedule.clone(), k, seed);
        spec.participation =
            ParticipationSpec { mode: self.participation.clone(), base_weights: self.client_weights() };
        spec.cadence = self.cadence;
        spec.eval = eval;
        spec.workers = workers;
        spec.record_trace = self.eval.as_ref().is_some_and(|e| e.roundwise);
        Ok(Materialized { model, layout, shards, spec })
    }
}
