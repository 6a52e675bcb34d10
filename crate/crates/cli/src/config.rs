//! JSON run configuration. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vpflow_core::eval::{BaselineConfig, InitialSource};
use vpflow_core::flow::FlowConfig;
use vpflow_core::nn::DeepSetArch;
use vpflow_core::pic::{DatasetSpec, GridSpec, PhysicsParams};
use vpflow_core::train::{AdamConfig, TrainConfig};
use vpflow_core::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridSection,
    pub physics: PhysicsSection,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub flow: FlowSection,
    pub train: TrainSection,
    pub baseline: BaselineSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub cells: usize,
    pub box_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsSection {
    pub charge: f64,
    pub eps0: f64,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub n_particles: usize,
    /// Simulator steps per example.
    pub steps: usize,
    pub snapshot_stride: usize,
    pub mu_q: f64,
    pub mu_p: f64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub set_dim: usize,
    pub init_a: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub steps: usize,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialMode {
    /// Start the model from each test example's simulated initial state.
    Snapshot,
    /// Start from a fresh draw of the example's Gaussian.
    Fresh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub initial: InitialMode,
    /// Times reported by `interpolate` when `--times` is not given.
    pub times: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub test_data: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub baseline_checkpoint: PathBuf,
}

impl PathsSection {
    pub fn all(&self) -> [(&'static str, &Path); 6] {
        [
            ("train_data", &self.train_data),
            ("val_data", &self.val_data),
            ("test_data", &self.test_data),
            ("checkpoint", &self.checkpoint),
            ("metrics", &self.metrics),
            ("baseline_checkpoint", &self.baseline_checkpoint),
        ]
    }
}

/// A parsed configuration together with the digest of its source bytes.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl LoadedConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig =
            serde_json::from_slice(&bytes).with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(LoadedConfig {
            config,
            sha256: sha256_hex(&bytes),
        })
    }
}

fn field(name: &str, reason: impl Into<String>) -> anyhow::Error {
    Error::InvalidConfig {
        field: name.to_string(),
        reason: reason.into(),
    }
    .into()
}

impl RunConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        self.grid_spec().validate()?;
        self.physics_params().validate()?;
        if self.physics.dt == 0.0 {
            return Err(field("physics.dt", "must be nonzero"));
        }
        let d = &self.dataset;
        if d.n_particles == 0 {
            return Err(field("dataset.n_particles", "must be >= 1"));
        }
        if d.steps == 0 {
            return Err(field("dataset.steps", "must be >= 1"));
        }
        if d.snapshot_stride == 0 || d.steps % d.snapshot_stride != 0 {
            return Err(field("dataset.snapshot_stride", "must divide dataset.steps"));
        }
        for (name, count) in [
            ("dataset.train_count", d.train_count),
            ("dataset.val_count", d.val_count),
            ("dataset.test_count", d.test_count),
        ] {
            if count == 0 {
                return Err(field(name, "must be >= 1"));
            }
        }
        if !(d.mu_q.is_finite() && d.mu_p.is_finite()) {
            return Err(field("dataset.mu_q", "means must be finite"));
        }
        self.arch().validate()?;
        if !(self.model.init_a > 0.0 && self.model.init_a.is_finite()) {
            return Err(field("model.init_a", "must be positive"));
        }
        self.train_config().validate()?;
        if !(self.train.learning_rate > 0.0) {
            return Err(field("train.learning_rate", "must be positive"));
        }
        self.flow_config().check_horizon(self.horizon())?;
        self.baseline_config().validate()?;
        if !(self.baseline.learning_rate > 0.0) {
            return Err(field("baseline.learning_rate", "must be positive"));
        }
        let mut seen = BTreeSet::new();
        for (name, p) in self.paths.all() {
            if p.as_os_str().is_empty() {
                return Err(field(&format!("paths.{name}"), "must not be empty"));
            }
            if !seen.insert(p) {
                bail!("invalid config field `paths.{name}`: {} is used by another path", p.display());
            }
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            cells: self.grid.cells,
            box_length: self.grid.box_length,
        }
    }

    pub fn physics_params(&self) -> PhysicsParams {
        PhysicsParams {
            charge: self.physics.charge,
            eps0: self.physics.eps0,
            dt: self.physics.dt,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            grid: self.grid_spec(),
            physics: self.physics_params(),
            n_particles: self.dataset.n_particles,
            steps: self.dataset.steps,
            snapshot_stride: self.dataset.snapshot_stride,
            mu_q: self.dataset.mu_q,
            mu_p: self.dataset.mu_p,
        }
    }

    /// Simulated time span `T` of every example.
    pub fn horizon(&self) -> f64 {
        self.dataset.steps as f64 * self.physics.dt
    }

    pub fn arch(&self) -> DeepSetArch {
        DeepSetArch {
            hidden: self.model.hidden,
            set_dim: self.model.set_dim,
        }
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            steps: self.flow.steps,
            dt: self.flow.dt,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: AdamConfig {
                learning_rate: t.learning_rate,
                beta1: t.beta1,
                beta2: t.beta2,
                epsilon: t.epsilon,
            },
            seed: self.seed,
            flow: self.flow_config(),
            checkpoint_every: t.checkpoint_every,
            clip_norm: t.clip_norm,
        }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        let b = &self.baseline;
        BaselineConfig {
            hidden: b.hidden,
            epochs: b.epochs,
            batch_size: b.batch_size,
            adam: AdamConfig {
                learning_rate: b.learning_rate,
                ..AdamConfig::default()
            },
            seed: self.seed,
        }
    }

    pub fn initial_source(&self) -> InitialSource {
        match self.eval.initial {
            InitialMode::Snapshot => InitialSource::Snapshot,
            InitialMode::Fresh => InitialSource::Fresh { seed: self.seed },
        }
    }
}
