//! Run configuration: strict JSON with validation that names the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tag_core::affinity::DiagonalMode;
use tag_core::bench::{BenchSpec, ModelSpec, SelectionSpec};
use tag_core::data::PlantedSpec;
use tag_core::hashing::json_hash;
use tag_core::model::LossKind;
use tag_core::probe::{BatchSource, ProbeSchedule, TrainConfig};
use tag_core::TagError;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksetConfig {
    pub kind: ModelKind,
    pub n: usize,
    pub clusters: Vec<Vec<usize>>,
    pub noise: f64,
    pub feature_dim: usize,
    pub samples: SampleSizes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub init_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub eta: f64,
    pub steps: usize,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    EveryK,
    Window,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub mode: ScheduleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<f64>,
    pub batch_source: BatchSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Train,
    Val,
}

impl From<SelectionMode> for DiagonalMode {
    fn from(m: SelectionMode) -> Self {
        match m {
            SelectionMode::Train => DiagonalMode::TrainExcluded,
            SelectionMode::Val => DiagonalMode::ValidationIncluded,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub budget: usize,
    pub mode: SelectionMode,
    /// Per-network parameter cap `c`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_group_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub data: u64,
    pub trainer: u64,
}

fn default_random_samples() -> usize {
    200
}

fn default_exact_limit() -> usize {
    100_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default = "default_random_samples")]
    pub random_samples: usize,
    #[serde(default = "default_exact_limit")]
    pub random_exact_limit: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            random_samples: default_random_samples(),
            random_exact_limit: default_exact_limit(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub taskset: TasksetConfig,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub schedule: ScheduleConfig,
    pub selection: SelectionConfig,
    pub seeds: SeedConfig,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn config_field(core_name: &str) -> &str {
    match core_name {
        "n_tasks" => "taskset.n",
        "noise" => "taskset.noise",
        "feature_dim" => "taskset.feature_dim",
        "samples" => "taskset.samples",
        "random_samples" => "baselines.random_samples",
        other => other,
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::ConfigSyntax {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Hash of the canonical serialization, ignoring the output directory.
    pub fn canonical_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        json_hash(&c)
    }

    /// `run_id` if set, else the first 12 hex digits of the config hash.
    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| self.canonical_hash()[..12].to_string())
    }

    pub fn schedule(&self) -> CliResult<ProbeSchedule> {
        let s = &self.schedule;
        let base = match s.mode {
            ScheduleKind::EveryK => {
                if s.start.is_some() || s.end.is_some() {
                    return Err(CliError::invalid("schedule.start", "only valid with mode = window"));
                }
                ProbeSchedule::every(s.k.ok_or_else(|| CliError::invalid("schedule.k", "required for mode = every_k"))?)
            }
            ScheduleKind::Window => {
                if s.k.is_some() {
                    return Err(CliError::invalid("schedule.k", "only valid with mode = every_k"));
                }
                let start = s.start.ok_or_else(|| CliError::invalid("schedule.start", "required for mode = window"))?;
                let end = s.end.ok_or_else(|| CliError::invalid("schedule.end", "required for mode = window"))?;
                ProbeSchedule::window(start, end)
            }
        };
        Ok(base.on(s.batch_source))
    }

    pub fn bench_spec(&self) -> CliResult<BenchSpec> {
        let t = &self.taskset;
        let spec = BenchSpec {
            data: PlantedSpec {
                n_tasks: t.n,
                clusters: t.clusters.clone(),
                feature_dim: t.feature_dim,
                train_samples: t.samples.train,
                validation_samples: t.samples.validation,
                test_samples: t.samples.test,
                noise: t.noise,
                seed: self.seeds.data,
            },
            model: ModelSpec {
                kind: match t.kind {
                    ModelKind::Linear => LossKind::LinearRegression,
                    ModelKind::Mlp => LossKind::MlpRegression,
                },
                width: self.model.width,
                init_scale: self.model.init_scale,
            },
            trainer: TrainConfig::new(self.trainer.eta, self.trainer.steps, self.trainer.batch_size, self.seeds.trainer),
            schedule: self.schedule()?,
            selection: SelectionSpec {
                budget: self.selection.budget,
                mode: self.selection.mode.into(),
                max_group_size: self.selection.max_group_size,
                latency_limit: self.selection.latency_limit,
            },
            random_samples: self.baselines.random_samples,
        };
        Ok(spec)
    }

    /// Checks every precondition that can be checked without training.
    pub fn validate(&self) -> CliResult<()> {
        let t = &self.taskset;
        if t.n == 0 {
            return Err(CliError::invalid("taskset.n", "must be >= 1"));
        }
        if t.n > tag_core::selector::MAX_TASKS {
            return Err(CliError::invalid("taskset.n", format!("at most {} tasks", tag_core::selector::MAX_TASKS)));
        }
        if !(t.noise >= 0.0) || !t.noise.is_finite() {
            return Err(CliError::invalid("taskset.noise", "must be finite and >= 0"));
        }
        if t.feature_dim < t.clusters.len() {
            return Err(CliError::invalid("taskset.feature_dim", "need at least one dimension per cluster"));
        }
        for (name, v) in [("train", t.samples.train), ("validation", t.samples.validation), ("test", t.samples.test)] {
            if v == 0 {
                return Err(CliError::invalid(format!("taskset.samples.{name}"), "must be >= 1"));
            }
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(CliError::invalid("run_id", "use letters, digits, '-' or '_'"));
            }
        }
        if self.baselines.random_samples == 0 {
            return Err(CliError::invalid("baselines.random_samples", "must be >= 1"));
        }
        if self.baselines.random_exact_limit == 0 {
            return Err(CliError::invalid("baselines.random_exact_limit", "must be >= 1"));
        }
        let spec = self.bench_spec()?;
        spec.validate().map_err(|e| match e {
            TagError::InvalidParameter { name, reason } => CliError::invalid(config_field(name), reason),
            TagError::InvalidPartition(msg) => CliError::invalid("taskset.clusters", msg),
            other => CliError::Core(other),
        })
    }
}

pub fn parse_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    RunConfig::from_json(&text, path)
}
