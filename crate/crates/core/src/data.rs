//! Synthetic task sets with a planted cluster structure.
//!
//! Every cluster owns one unit-norm latent direction; the directions of
//! different clusters are mutually orthogonal. Task `i` in cluster `k`
//! regresses `y = s_i · (f_kᵀ x) + noise · ε` on standard-normal features `x`,
//! where `s_i` is a task-specific signed scale in `±[0.5, 1.5]`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TagError};
use crate::model::{dot, random_orthonormal, Batch, LossKind, TaskSet};
use crate::rng::{derive_seed_labeled, rng_from_seed, TagRng};
use crate::selector::TaskGroup;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub n_tasks: usize,
    pub clusters: Vec<Vec<usize>>,
    pub feature_dim: usize,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub test_samples: usize,
    pub noise: f64,
    pub seed: u64,
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_tasks;
        if n == 0 {
            return Err(TagError::invalid("n_tasks", "must be at least 1"));
        }
        let mut seen = vec![false; n];
        for c in &self.clusters {
            if c.is_empty() {
                return Err(TagError::InvalidPartition("empty cluster".into()));
            }
            for &t in c {
                if t >= n {
                    return Err(TagError::InvalidPartition(format!("task {t} out of range 0..{n}")));
                }
                if std::mem::replace(&mut seen[t], true) {
                    return Err(TagError::InvalidPartition(format!("task {t} appears twice")));
                }
            }
        }
        if let Some(t) = seen.iter().position(|s| !s) {
            return Err(TagError::InvalidPartition(format!("task {t} is in no cluster")));
        }
        if self.feature_dim < self.clusters.len() {
            return Err(TagError::invalid(
                "feature_dim",
                format!("need at least one dimension per cluster ({})", self.clusters.len()),
            ));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(TagError::invalid("noise", format!("must be >= 0, got {}", self.noise)));
        }
        if self.train_samples == 0 || self.validation_samples == 0 || self.test_samples == 0 {
            return Err(TagError::invalid("samples", "train/validation/test sizes must be positive"));
        }
        Ok(())
    }

    pub fn planted_groups(&self) -> Vec<TaskGroup> {
        let mut g: Vec<TaskGroup> = self.clusters.iter().map(|c| TaskGroup::from_ids(c)).collect();
        g.sort();
        g
    }
}

/// Generated data and its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTaskset {
    pub tasks: TaskSet,
    pub train: Batch,
    pub validation: Batch,
    pub test: Batch,
    /// Unit latent direction per cluster.
    pub factors: Vec<Vec<f64>>,
    /// Cluster index of every task.
    pub cluster_of: Vec<usize>,
    /// Signed target scale of every task.
    pub scales: Vec<f64>,
}

pub fn build_planted_taskset(spec: &PlantedSpec, kind: LossKind) -> Result<PlantedTaskset> {
    spec.validate()?;
    if kind == LossKind::Quadratic {
        return Err(TagError::invalid("loss_kind", "planted task sets are regression tasks"));
    }
    let basis = random_orthonormal(spec.feature_dim, derive_seed_labeled(spec.seed, "factors"));
    let d = spec.feature_dim;
    let factors: Vec<Vec<f64>> = (0..spec.clusters.len())
        .map(|k| basis[k * d..(k + 1) * d].to_vec())
        .collect();
    let mut cluster_of = vec![0; spec.n_tasks];
    for (k, c) in spec.clusters.iter().enumerate() {
        for &t in c {
            cluster_of[t] = k;
        }
    }
    let mut rng = rng_from_seed(derive_seed_labeled(spec.seed, "scales"));
    let scales: Vec<f64> = (0..spec.n_tasks)
        .map(|_| {
            let mag = rng.random_range(0.5..1.5);
            if rng.random::<bool>() { mag } else { -mag }
        })
        .collect();

    let gen = |label: &str, rows: usize| -> Result<Batch> {
        let mut rng = rng_from_seed(derive_seed_labeled(spec.seed, label));
        let inputs: Vec<f64> = (0..rows * d).map(|_| rng.sample(StandardNormal)).collect();
        let mut targets = vec![Vec::with_capacity(rows); spec.n_tasks];
        for r in 0..rows {
            let x = &inputs[r * d..(r + 1) * d];
            let latent: Vec<f64> = factors.iter().map(|f| dot(f, x)).collect();
            for (t, col) in targets.iter_mut().enumerate() {
                let eps: f64 = rng.sample(StandardNormal);
                col.push(scales[t] * latent[cluster_of[t]] + spec.noise * eps);
            }
        }
        Batch::new(rows, d, inputs, targets)
    };

    Ok(PlantedTaskset {
        tasks: TaskSet::uniform(spec.n_tasks, kind)?,
        train: gen("train", spec.train_samples)?,
        validation: gen("validation", spec.validation_samples)?,
        test: gen("test", spec.test_samples)?,
        factors,
        cluster_of,
        scales,
    })
}

impl PlantedTaskset {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// The task set restricted to `group`, relabelled `0..|group|` in
    /// ascending id order.
    pub fn restrict(&self, group: TaskGroup) -> Result<PlantedTaskset> {
        let ids = group.ids();
        if ids.is_empty() || ids.iter().any(|&i| i >= self.n_tasks()) {
            return Err(TagError::invalid("group", format!("{group} does not fit {} tasks", self.n_tasks())));
        }
        let kind = self.tasks.tasks()[0].loss_kind;
        Ok(PlantedTaskset {
            tasks: TaskSet::uniform(ids.len(), kind)?,
            train: self.train.select_tasks(&ids),
            validation: self.validation.select_tasks(&ids),
            test: self.test.select_tasks(&ids),
            factors: self.factors.clone(),
            cluster_of: ids.iter().map(|&i| self.cluster_of[i]).collect(),
            scales: ids.iter().map(|&i| self.scales[i]).collect(),
        })
    }
}

/// Draws minibatches (with replacement) from a fixed pool.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: TagRng,
}

impl BatchSampler {
    pub fn new(seed: u64) -> Self {
        Self { rng: rng_from_seed(seed) }
    }

    pub fn draw(&mut self, pool: &Batch, batch_size: usize) -> Batch {
        let idx: Vec<usize> = (0..batch_size).map(|_| self.rng.random_range(0..pool.rows())).collect();
        pool.select_rows(&idx)
    }
}
