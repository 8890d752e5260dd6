//! End-to-end pipelines on planted task sets: the grouping pipeline, the
//! exhaustive oracle, baselines and comparative reports.
//!
//! Every network a [`Benchmark`] trains is keyed by its task group and seeded
//! from `(trainer seed, group mask)`, so the same group always yields the same
//! network no matter which method asked for it. Trained groups are memoized.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{average_affinity, AffinityMatrix, DiagonalMode};
use crate::data::{build_planted_taskset, PlantedSpec, PlantedTaskset};
use crate::error::{Result, TagError};
use crate::hashing::{json_hash, sha256_hex};
use crate::model::{Architecture, LossKind, MultiTaskModel};
use crate::probe::{train_with_probe, AffinitySample, BatchSource, ProbeSchedule, StepFilter, TrainConfig, TrainingData};
use crate::rng::{derive_seed, derive_seed_labeled, rng_from_seed};
use crate::selector::{
    binomial, enumerate_candidate_groups, random_grouping_expectation, solve_branch_and_bound, Candidate, CandidateFilter,
    GroupingSolution, ParamLimit, RandomGroupingEstimate, SelectionProblem, SolverStats, TaskGroup,
};

/// Largest task count the exhaustive oracle accepts.
pub const EXHAUSTIVE_MAX_TASKS: usize = 6;
/// Largest task count the pairwise baseline accepts.
pub const HOA_MAX_TASKS: usize = 8;
/// Largest number of covers the exhaustive oracle will score.
pub const MAX_COVERS: u128 = 5_000_000;

pub const METHOD_TAG: &str = "TAG";
pub const METHOD_CS: &str = "CS";
pub const METHOD_HOA: &str = "HOA";
pub const METHOD_MTL_ALL: &str = "MTL-all";
pub const METHOD_EXHAUSTIVE: &str = "exhaustive-optimal";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: LossKind,
    pub width: usize,
    pub init_scale: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == LossKind::Quadratic {
            return Err(TagError::invalid("model.kind", "benchmarks need a regression model"));
        }
        if self.width == 0 {
            return Err(TagError::invalid("model.width", "must be >= 1"));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(TagError::invalid("model.init_scale", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        match self.kind {
            LossKind::MlpRegression => Architecture::Mlp {
                input_dim,
                width: self.width,
            },
            _ => Architecture::Linear {
                input_dim,
                width: self.width,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSpec {
    pub budget: usize,
    pub mode: DiagonalMode,
    #[serde(default)]
    pub max_group_size: Option<usize>,
    /// Per-network parameter-count cap `c`.
    #[serde(default)]
    pub latency_limit: Option<usize>,
}

impl SelectionSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.budget == 0 {
            return Err(TagError::invalid("selection.budget", "must be >= 1"));
        }
        if self.budget > n {
            return Err(TagError::invalid("selection.budget", format!("must be <= number of tasks ({n})")));
        }
        if self.max_group_size == Some(0) {
            return Err(TagError::invalid("selection.max_group_size", "must be >= 1"));
        }
        if self.latency_limit == Some(0) {
            return Err(TagError::invalid("selection.latency_limit", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub data: PlantedSpec,
    pub model: ModelSpec,
    /// Per-network hyperparameters; its schedule is ignored.
    pub trainer: TrainConfig,
    pub schedule: ProbeSchedule,
    pub selection: SelectionSpec,
    /// Sampled groupings for the trained-loss random baseline when exact
    /// enumeration is too large.
    pub random_samples: usize,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.trainer.validate()?;
        self.schedule.validate()?;
        self.selection.validate(self.data.n_tasks)?;
        if self.selection.mode == DiagonalMode::ValidationIncluded && self.schedule.batch_source != BatchSource::Validation {
            return Err(TagError::invalid(
                "selection.mode",
                "validation diagonal mode needs schedule.batch_source = validation",
            ));
        }
        if self.random_samples == 0 {
            return Err(TagError::invalid("random_samples", "must be >= 1"));
        }
        Ok(())
    }

    /// Hash of everything that must match across methods in one report.
    pub fn fairness_hash(&self) -> String {
        let mut trainer = self.trainer.clone();
        trainer.schedule = None;
        trainer.record_trajectory = false;
        json_hash(&(&self.data, &self.model, &trainer))
    }

    pub fn candidate_filter(&self) -> CandidateFilter {
        let arch = self.model.architecture(self.data.feature_dim);
        CandidateFilter {
            max_size: self.selection.max_group_size,
            param_limit: self.selection.latency_limit.map(|limit| ParamLimit {
                shared: arch.shared_len(),
                per_head: arch.head_len(),
                limit,
            }),
            predicate: None,
        }
    }
}

/// One trained group network, evaluated per task (indexed by rank in the group).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRun {
    pub group: TaskGroup,
    pub validation_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
    pub steps: usize,
}

impl GroupRun {
    pub fn test_loss_of(&self, task: usize) -> Option<f64> {
        self.group.rank_of(task).map(|r| self.test_loss[r])
    }

    pub fn validation_loss_of(&self, task: usize) -> Option<f64> {
        self.group.rank_of(task).map(|r| self.validation_loss[r])
    }
}

/// SGD steps and networks spent by one method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingCost {
    /// Training runs needed to decide the grouping.
    pub grouping_runs: usize,
    pub grouping_steps: usize,
    /// Runs that train the chosen networks afterwards.
    pub final_runs: usize,
    pub final_steps: usize,
}

impl TrainingCost {
    pub fn total_steps(&self) -> usize {
        self.grouping_steps + self.final_steps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingEvaluation {
    pub method: String,
    pub budget: usize,
    pub grouping: GroupingSolution,
    /// Served test loss, indexed by task id.
    pub per_task_test_loss: Vec<f64>,
    pub total_test_loss: f64,
    pub training_cost: TrainingCost,
    pub fairness_hash: String,
}

impl GroupingEvaluation {
    /// Total equals the task-ordered sum of served losses.
    pub fn check_total(&self) -> bool {
        let sum = self.per_task_test_loss.iter().fold(0.0, |a, v| a + v);
        sum == self.total_test_loss
    }

    /// Chosen groups are pairwise disjoint.
    pub fn is_partition(&self) -> bool {
        let mut seen = 0u32;
        self.grouping.groups.iter().all(|g| {
            let fresh = seen & g.mask() == 0;
            seen |= g.mask();
            fresh
        })
    }
}

/// Outcome of the single probed run on all tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRun {
    pub samples: Vec<AffinitySample>,
    pub cosine_samples: Vec<AffinitySample>,
    pub affinity: AffinityMatrix,
    /// Averaged gradient cosines; always in train diagonal mode.
    pub cosine: AffinityMatrix,
    pub steps: usize,
    pub probed_steps: usize,
}

/// Trained-loss and score-level random grouping baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomGroupingBaseline {
    pub budget: usize,
    /// Expected total affinity score of a random feasible grouping.
    pub score_level: RandomGroupingEstimate,
    /// Expected total test loss of a random feasible grouping, each task served
    /// by its lowest-validation-loss network among the chosen ones.
    pub trained_loss_mean: f64,
    pub trained_loss_std_error: f64,
    pub trained_loss_exact: bool,
    pub groupings: u64,
    pub networks_trained: usize,
    pub fairness_hash: String,
}

pub struct Benchmark {
    spec: BenchSpec,
    data: PlantedTaskset,
    fairness: String,
    memo: Mutex<BTreeMap<u32, Arc<GroupRun>>>,
    probe: OnceLock<Result<Arc<ProbeRun>>>,
}

impl Benchmark {
    pub fn new(spec: BenchSpec) -> Result<Self> {
        spec.validate()?;
        let data = build_planted_taskset(&spec.data, spec.model.kind)?;
        Ok(Self {
            fairness: spec.fairness_hash(),
            spec,
            data,
            memo: Mutex::new(BTreeMap::new()),
            probe: OnceLock::new(),
        })
    }

    pub fn spec(&self) -> &BenchSpec {
        &self.spec
    }

    pub fn data(&self) -> &PlantedTaskset {
        &self.data
    }

    pub fn n_tasks(&self) -> usize {
        self.data.n_tasks()
    }

    pub fn fairness_hash(&self) -> &str {
        &self.fairness
    }

    /// Distinct group networks trained so far.
    pub fn networks_trained(&self) -> usize {
        self.memo.lock().expect("memo lock").len()
    }

    fn group_seed(&self, group: TaskGroup) -> u64 {
        derive_seed(self.spec.trainer.seed, group.mask() as u64)
    }

    fn group_config(&self, group: TaskGroup) -> TrainConfig {
        let mut c = self.spec.trainer.clone();
        c.schedule = None;
        c.record_trajectory = false;
        c.seed = derive_seed_labeled(self.group_seed(group), "batches");
        c
    }

    fn group_model(&self, group: TaskGroup) -> Result<MultiTaskModel> {
        MultiTaskModel::init(
            self.spec.model.architecture(self.spec.data.feature_dim),
            group.len(),
            self.spec.model.init_scale,
            derive_seed_labeled(self.group_seed(group), "init"),
        )
    }

    fn train_group_uncached(&self, group: TaskGroup) -> Result<GroupRun> {
        let sub = self.data.restrict(group)?;
        let config = self.group_config(group);
        let out = train_with_probe(
            &sub.tasks,
            self.group_model(group)?,
            &TrainingData {
                train: &sub.train,
                validation: &sub.validation,
            },
            &config,
        )?;
        let eval = |batch| {
            sub.tasks
                .tasks()
                .iter()
                .map(|t| out.model.task_loss(batch, t))
                .collect::<Result<Vec<_>>>()
        };
        log::debug!("trained group {group}");
        Ok(GroupRun {
            group,
            validation_loss: eval(&sub.validation)?,
            test_loss: eval(&sub.test)?,
            steps: config.steps,
        })
    }

    /// Trains (or recalls) one group network.
    pub fn train_group(&self, group: TaskGroup) -> Result<Arc<GroupRun>> {
        Ok(self.train_groups(&[group])?.remove(0))
    }

    /// Trains every missing group, in parallel when enabled; returns runs in input order.
    pub fn train_groups(&self, groups: &[TaskGroup]) -> Result<Vec<Arc<GroupRun>>> {
        let missing: Vec<TaskGroup> = {
            let memo = self.memo.lock().expect("memo lock");
            let mut m: Vec<TaskGroup> = groups.iter().copied().filter(|g| !memo.contains_key(&g.mask())).collect();
            m.sort();
            m.dedup();
            m
        };
        #[cfg(feature = "parallel")]
        let fresh: Vec<Result<GroupRun>> = {
            use rayon::prelude::*;
            missing.par_iter().map(|g| self.train_group_uncached(*g)).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let fresh: Vec<Result<GroupRun>> = missing.iter().map(|g| self.train_group_uncached(*g)).collect();
        let mut memo = self.memo.lock().expect("memo lock");
        for run in fresh {
            let run = run?;
            memo.insert(run.group.mask(), Arc::new(run));
        }
        Ok(groups.iter().map(|g| Arc::clone(&memo[&g.mask()])).collect())
    }

    /// The single probed run on all tasks; computed once.
    pub fn probe_run(&self) -> Result<Arc<ProbeRun>> {
        self.probe.get_or_init(|| self.probe_run_uncached().map(Arc::new)).clone()
    }

    fn probe_run_uncached(&self) -> Result<ProbeRun> {
        let n = self.n_tasks();
        let full = TaskGroup::full(n);
        let config = self.group_config(full).with_schedule(self.spec.schedule);
        let out = train_with_probe(
            &self.data.tasks,
            self.group_model(full)?,
            &TrainingData {
                train: &self.data.train,
                validation: &self.data.validation,
            },
            &config,
        )?;
        let affinity = average_affinity(&out.samples, n, StepFilter::All, self.spec.selection.mode)?;
        let cosine = average_affinity(&out.cosine_samples, n, StepFilter::All, DiagonalMode::TrainExcluded)?;
        Ok(ProbeRun {
            affinity,
            cosine,
            steps: config.steps,
            probed_steps: out.probed_steps.len(),
            samples: out.samples,
            cosine_samples: out.cosine_samples,
        })
    }

    fn evaluate(&self, method: &str, budget: usize, grouping: GroupingSolution, mut cost: TrainingCost) -> Result<GroupingEvaluation> {
        let runs = self.train_groups(&grouping.groups)?;
        let n = self.n_tasks();
        let mut per_task = Vec::with_capacity(n);
        for t in 0..n {
            let run = &runs[grouping.serving[t]];
            per_task.push(run.test_loss_of(t).ok_or(TagError::Uncovered(t))?);
        }
        if cost.final_runs == 0 && cost.final_steps == 0 {
            cost.final_runs = runs.len();
            cost.final_steps = runs.iter().map(|r| r.steps).sum();
        }
        Ok(GroupingEvaluation {
            method: method.to_string(),
            budget,
            total_test_loss: per_task.iter().fold(0.0, |a, v| a + v),
            per_task_test_loss: per_task,
            grouping,
            training_cost: cost,
            fairness_hash: self.fairness.clone(),
        })
    }

    fn probe_cost(&self, probe: &ProbeRun) -> TrainingCost {
        TrainingCost {
            grouping_runs: 1,
            grouping_steps: probe.steps,
            ..TrainingCost::default()
        }
    }

    /// Probe once on all tasks, average, select, retrain the chosen groups and
    /// evaluate served tasks on test data.
    pub fn tag_pipeline(&self, budget: usize) -> Result<GroupingEvaluation> {
        let probe = self.probe_run()?;
        let problem = SelectionProblem::from_affinity(&probe.affinity, budget, &self.spec.candidate_filter())?;
        let sol = solve_branch_and_bound(&problem)?;
        self.evaluate(METHOD_TAG, budget, sol, self.probe_cost(&probe))
    }

    /// Same pipeline driven by averaged gradient cosines.
    pub fn cs_baseline_grouping(&self, budget: usize) -> Result<GroupingEvaluation> {
        let probe = self.probe_run()?;
        let problem = SelectionProblem::from_affinity(&probe.cosine, budget, &self.spec.candidate_filter())?;
        let sol = solve_branch_and_bound(&problem)?;
        self.evaluate(METHOD_CS, budget, sol, self.probe_cost(&probe))
    }

    /// Pairs (plus singletons in validation mode) are trained; a larger group's
    /// per-task loss is estimated as the mean of that task's pairwise losses.
    /// Estimates use validation losses.
    pub fn hoa_baseline_grouping(&self, budget: usize) -> Result<GroupingEvaluation> {
        let n = self.n_tasks();
        if n > HOA_MAX_TASKS {
            return Err(TagError::GuardExceeded(format!("pairwise baseline allows at most {HOA_MAX_TASKS} tasks, got {n}")));
        }
        let mode = self.spec.selection.mode;
        let mut trained: Vec<TaskGroup> = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                trained.push(TaskGroup::from_ids(&[i, j]));
            }
        }
        if mode == DiagonalMode::ValidationIncluded {
            trained.extend((0..n).map(|i| TaskGroup::from_ids(&[i])));
        }
        let runs = self.train_groups(&trained)?;
        let by_mask: BTreeMap<u32, &GroupRun> = runs.iter().map(|r| (r.group.mask(), r.as_ref())).collect();
        let pair_loss = |t: usize, j: usize| by_mask[&TaskGroup::from_ids(&[t, j]).mask()].validation_loss_of(t).expect("member");

        let candidates = enumerate_candidate_groups(n, &self.spec.candidate_filter(), mode)?
            .into_iter()
            .map(|g| {
                let scores = (0..n)
                    .map(|t| {
                        g.contains(t).then(|| {
                            if g.len() == 1 {
                                -by_mask[&g.mask()].validation_loss_of(t).expect("member")
                            } else {
                                let others: Vec<usize> = g.iter().filter(|&j| j != t).collect();
                                -others.iter().map(|&j| pair_loss(t, j)).sum::<f64>() / others.len() as f64
                            }
                        })
                    })
                    .collect();
                Candidate { group: g, scores }
            })
            .collect();
        let problem = SelectionProblem::from_candidates(n, budget, mode, candidates)?;
        let sol = solve_branch_and_bound(&problem)?;
        let cost = TrainingCost {
            grouping_runs: runs.len(),
            grouping_steps: runs.iter().map(|r| r.steps).sum(),
            ..TrainingCost::default()
        };
        self.evaluate(METHOD_HOA, budget, sol, cost)
    }

    /// One network on all tasks.
    pub fn mtl_all(&self) -> Result<GroupingEvaluation> {
        let n = self.n_tasks();
        let sol = GroupingSolution {
            groups: vec![TaskGroup::full(n)],
            serving: vec![0; n],
            per_task_scores: vec![0.0; n],
            total_score: 0.0,
            stats: SolverStats::default(),
        };
        self.evaluate(METHOD_MTL_ALL, 1, sol, TrainingCost::default())
    }

    /// Candidate groups for oracle, random baseline and pairwise estimates.
    fn oracle_candidates(&self, mode: DiagonalMode) -> Result<Vec<TaskGroup>> {
        enumerate_candidate_groups(self.n_tasks(), &self.spec.candidate_filter(), mode)
    }

    /// Trains every admissible group and ranks every cover of at most `budget`
    /// groups by total test loss (each task served by its lowest-test-loss
    /// chosen network). Ties rank by ascending bitmask sequence.
    pub fn exhaustive_grouping_search(&self, budget: usize) -> Result<Vec<GroupingEvaluation>> {
        let n = self.n_tasks();
        if n > EXHAUSTIVE_MAX_TASKS {
            return Err(TagError::GuardExceeded(format!(
                "exhaustive search allows at most {EXHAUSTIVE_MAX_TASKS} tasks, got {n}"
            )));
        }
        if budget == 0 {
            return Err(TagError::invalid("budget", "must be >= 1"));
        }
        let groups = self.oracle_candidates(DiagonalMode::ValidationIncluded)?;
        let bmax = budget.min(groups.len());
        let covers: u128 = (1..=bmax).map(|s| binomial(groups.len(), s)).sum();
        if covers > MAX_COVERS {
            return Err(TagError::GuardExceeded(format!("{covers} covers exceed the limit {MAX_COVERS}")));
        }
        let runs = self.train_groups(&groups)?;
        let cost = TrainingCost {
            grouping_runs: runs.len(),
            grouping_steps: runs.iter().map(|r| r.steps).sum(),
            final_runs: 0,
            final_steps: 0,
        };
        let mut ranked: Vec<RankedCover> = Vec::new();
        for_each_cover(n, &groups, bmax, &mut |chosen| {
            let (serving, losses) = serve_by(n, chosen, |k, t| runs[k].test_loss_of(t));
            let total = losses.iter().fold(0.0, |a, v| a + v);
            ranked.push((total, chosen.to_vec(), serving, losses));
        });
        if ranked.is_empty() {
            return Err(TagError::Infeasible("no admissible cover".into()));
        }
        ranked.sort_by(|a, b| {
            a.0.total_cmp(&b.0).then_with(|| {
                let ka: Vec<u32> = a.1.iter().map(|&k| groups[k].mask()).collect();
                let kb: Vec<u32> = b.1.iter().map(|&k| groups[k].mask()).collect();
                ka.cmp(&kb)
            })
        });
        Ok(ranked
            .into_iter()
            .map(|(total, chosen, serving, losses)| GroupingEvaluation {
                method: METHOD_EXHAUSTIVE.to_string(),
                budget,
                grouping: GroupingSolution {
                    groups: chosen.iter().map(|&k| groups[k]).collect(),
                    serving,
                    per_task_scores: losses.iter().map(|l| -l).collect(),
                    total_score: -total,
                    stats: SolverStats::default(),
                },
                per_task_test_loss: losses,
                total_test_loss: total,
                training_cost: cost,
                fairness_hash: self.fairness.clone(),
            })
            .collect())
    }

    /// Expected outcome of a uniformly random feasible grouping under the
    /// selection mode's candidate set, both as an affinity score and as a
    /// trained test loss.
    pub fn random_grouping(&self, budget: usize, exact_limit: usize) -> Result<RandomGroupingBaseline> {
        let n = self.n_tasks();
        let probe = self.probe_run()?;
        let problem = SelectionProblem::from_affinity(&probe.affinity, budget, &self.spec.candidate_filter())?;
        let seed = derive_seed_labeled(self.spec.trainer.seed, "random-grouping");
        let score_level = random_grouping_expectation(&problem, self.spec.random_samples, seed, exact_limit)?;

        let groups = self.oracle_candidates(self.spec.selection.mode)?;
        let bmax = budget.min(groups.len());
        let mut covers: Vec<Vec<usize>> = Vec::new();
        let total: u128 = (1..=bmax).map(|s| binomial(groups.len(), s)).sum();
        let exact = total <= MAX_COVERS && {
            for_each_cover(n, &groups, bmax, &mut |c| covers.push(c.to_vec()));
            covers.len() <= exact_limit
        };
        if covers.is_empty() && exact {
            return Err(TagError::Infeasible("no admissible cover".into()));
        }
        let chosen_covers: Vec<Vec<usize>> = if exact {
            covers
        } else {
            sample_covers(n, &groups, bmax, self.spec.random_samples, seed)?
        };
        let needed: Vec<TaskGroup> = {
            let mut used: Vec<usize> = chosen_covers.iter().flatten().copied().collect();
            used.sort_unstable();
            used.dedup();
            used.into_iter().map(|k| groups[k]).collect()
        };
        let runs = self.train_groups(&needed)?;
        let by_mask: BTreeMap<u32, &GroupRun> = runs.iter().map(|r| (r.group.mask(), r.as_ref())).collect();
        let totals: Vec<f64> = chosen_covers
            .iter()
            .map(|chosen| {
                let (serving, _) = serve_by(n, chosen, |k, t| by_mask[&groups[k].mask()].validation_loss_of(t).map(|l| -l));
                (0..n)
                    .map(|t| by_mask[&groups[chosen[serving[t]]].mask()].test_loss_of(t).expect("member"))
                    .fold(0.0, |a, v| a + v)
            })
            .collect();
        let m = totals.len() as f64;
        let mean = totals.iter().sum::<f64>() / m;
        let std_error = if exact || totals.len() < 2 {
            0.0
        } else {
            (totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt()
        };
        Ok(RandomGroupingBaseline {
            budget,
            score_level,
            trained_loss_mean: mean,
            trained_loss_std_error: std_error,
            trained_loss_exact: exact,
            groupings: totals.len() as u64,
            networks_trained: needed.len(),
            fairness_hash: self.fairness.clone(),
        })
    }

    /// All methods at every budget. The oracle is included when the task count allows it.
    pub fn report(&self, budgets: &[usize], random_exact_limit: usize) -> Result<BenchmarkReport> {
        let n = self.n_tasks();
        let mut methods: BTreeMap<String, Vec<GroupingEvaluation>> = BTreeMap::new();
        let mut random = Vec::new();
        for &b in budgets {
            methods.entry(METHOD_TAG.into()).or_default().push(self.tag_pipeline(b)?);
            methods.entry(METHOD_CS.into()).or_default().push(self.cs_baseline_grouping(b)?);
            if n <= HOA_MAX_TASKS {
                methods.entry(METHOD_HOA.into()).or_default().push(self.hoa_baseline_grouping(b)?);
            }
            if n <= EXHAUSTIVE_MAX_TASKS {
                let best = self.exhaustive_grouping_search(b)?.swap_remove(0);
                methods.entry(METHOD_EXHAUSTIVE.into()).or_default().push(best);
            }
            random.push(self.random_grouping(b, random_exact_limit)?);
        }
        methods.insert(METHOD_MTL_ALL.into(), vec![self.mtl_all()?]);
        let probe = self.probe_run()?;
        Ok(BenchmarkReport {
            n_tasks: n,
            budgets: budgets.to_vec(),
            methods,
            random_grouping: random,
            affinity_asymmetry: probe.affinity.asymmetry(),
            cosine_asymmetry: probe.cosine.asymmetry(),
            planted_partition: self.spec.data.planted_groups(),
            provenance: ReportProvenance {
                seeds: {
                    let mut s = vec![self.spec.data.seed, self.spec.trainer.seed];
                    s.sort_unstable();
                    s.dedup();
                    s
                },
                fairness_hash: self.fairness.clone(),
                config_hashes: Vec::new(),
            },
        })
    }
}

/// `(total, chosen group indices, serving, per-task losses)`
type RankedCover = (f64, Vec<usize>, Vec<usize>, Vec<f64>);

/// Calls `f` with every ascending index list of at most `bmax` groups whose union covers `0..n`.
fn for_each_cover(n: usize, groups: &[TaskGroup], bmax: usize, f: &mut dyn FnMut(&[usize])) {
    let full = TaskGroup::full(n).mask();
    fn rec(groups: &[TaskGroup], start: usize, left: usize, acc: u32, full: u32, chosen: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if !chosen.is_empty() && acc == full {
            f(chosen);
        }
        if left == 0 {
            return;
        }
        for k in start..groups.len() {
            chosen.push(k);
            rec(groups, k + 1, left - 1, acc | groups[k].mask(), full, chosen, f);
            chosen.pop();
        }
    }
    rec(groups, 0, bmax, 0, full, &mut Vec::new(), f);
}

/// Serving map by highest `score(k, t)` (ties to the lowest position) plus the
/// served values negated back; `score` must be `Some` for members.
fn serve_by(n: usize, chosen: &[usize], score: impl Fn(usize, usize) -> Option<f64>) -> (Vec<usize>, Vec<f64>) {
    let mut serving = vec![0; n];
    let mut served = vec![0.0; n];
    for t in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for (pos, &k) in chosen.iter().enumerate() {
            if let Some(s) = score(k, t) {
                // test losses are minimized, so compare the negation
                let key = -s;
                if best.is_none_or(|(_, b)| key > b) {
                    best = Some((pos, key));
                }
            }
        }
        let (pos, key) = best.expect("cover serves every task");
        serving[t] = pos;
        served[t] = -key;
    }
    (serving, served)
}

fn sample_covers(n: usize, groups: &[TaskGroup], bmax: usize, samples: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let k = groups.len();
    let full = TaskGroup::full(n).mask();
    let weights: Vec<f64> = (1..=bmax).map(|s| binomial(k, s) as f64).collect();
    let wsum: f64 = weights.iter().sum();
    let mut rng = rng_from_seed(seed);
    let max_attempts = samples.saturating_mul(1000).max(100_000);
    let mut pool: Vec<usize> = (0..k).collect();
    let mut out = Vec::with_capacity(samples);
    let mut attempts = 0;
    while out.len() < samples {
        attempts += 1;
        if attempts > max_attempts {
            return Err(TagError::SamplingExhausted {
                attempts: max_attempts,
                what: "covering random grouping".into(),
            });
        }
        let mut u = rng.random::<f64>() * wsum;
        let mut size = bmax;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                size = i + 1;
                break;
            }
            u -= w;
        }
        for i in 0..size {
            let j = rng.random_range(i..k);
            pool.swap(i, j);
        }
        let mut chosen = pool[..size].to_vec();
        chosen.sort_unstable();
        if chosen.iter().fold(0, |acc, &c| acc | groups[c].mask()) == full {
            out.push(chosen);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub seeds: Vec<u64>,
    pub fairness_hash: String,
    /// Hashes of the run configurations merged into the report.
    pub config_hashes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub n_tasks: usize,
    pub budgets: Vec<usize>,
    /// Method name → one evaluation per budget (a single one for `MTL-all`).
    pub methods: BTreeMap<String, Vec<GroupingEvaluation>>,
    pub random_grouping: Vec<RandomGroupingBaseline>,
    pub affinity_asymmetry: f64,
    pub cosine_asymmetry: f64,
    pub planted_partition: Vec<TaskGroup>,
    pub provenance: ReportProvenance,
}

impl BenchmarkReport {
    /// A report holding a single evaluation.
    pub fn single(n_tasks: usize, eval: GroupingEvaluation) -> Self {
        Self {
            n_tasks,
            budgets: vec![eval.budget],
            provenance: ReportProvenance {
                seeds: Vec::new(),
                fairness_hash: eval.fairness_hash.clone(),
                config_hashes: Vec::new(),
            },
            methods: BTreeMap::from([(eval.method.clone(), vec![eval])]),
            random_grouping: Vec::new(),
            affinity_asymmetry: 0.0,
            cosine_asymmetry: 0.0,
            planted_partition: Vec::new(),
        }
    }

    pub fn evaluations(&self) -> impl Iterator<Item = &GroupingEvaluation> {
        self.methods.values().flatten()
    }

    /// Every evaluation and random baseline shares the report's fairness hash
    /// and has a consistent total.
    pub fn verify(&self) -> Result<()> {
        let h = &self.provenance.fairness_hash;
        for e in self.evaluations() {
            if &e.fairness_hash != h {
                return Err(TagError::Provenance(format!(
                    "{} (budget {}) was trained under {}, report expects {h}",
                    e.method, e.budget, e.fairness_hash
                )));
            }
            if !e.check_total() {
                return Err(TagError::Provenance(format!("{} total does not match its per-task losses", e.method)));
            }
        }
        if let Some(r) = self.random_grouping.iter().find(|r| &r.fairness_hash != h) {
            return Err(TagError::Provenance(format!("random baseline hash {} != {h}", r.fairness_hash)));
        }
        Ok(())
    }

    /// Combines reports from runs that share splits, architecture and trainer.
    pub fn merge(reports: Vec<BenchmarkReport>) -> Result<BenchmarkReport> {
        let mut it = reports.into_iter();
        let mut acc = it.next().ok_or_else(|| TagError::invalid("reports", "need at least one"))?;
        acc.verify()?;
        for r in it {
            r.verify()?;
            if r.provenance.fairness_hash != acc.provenance.fairness_hash || r.n_tasks != acc.n_tasks {
                return Err(TagError::Provenance(format!(
                    "cannot merge reports trained under {} and {}",
                    acc.provenance.fairness_hash, r.provenance.fairness_hash
                )));
            }
            for (m, evals) in r.methods {
                let slot = acc.methods.entry(m).or_default();
                for e in evals {
                    if !slot.iter().any(|x| x.budget == e.budget) {
                        slot.push(e);
                    }
                }
                slot.sort_by_key(|e| e.budget);
            }
            for rg in r.random_grouping {
                if !acc.random_grouping.iter().any(|x| x.budget == rg.budget) {
                    acc.random_grouping.push(rg);
                }
            }
            acc.random_grouping.sort_by_key(|r| r.budget);
            acc.budgets.extend(r.budgets);
            acc.provenance.seeds.extend(r.provenance.seeds);
            acc.provenance.config_hashes.extend(r.provenance.config_hashes);
            if acc.planted_partition.is_empty() {
                acc.planted_partition = r.planted_partition;
            }
        }
        acc.budgets.sort_unstable();
        acc.budgets.dedup();
        acc.provenance.seeds.sort_unstable();
        acc.provenance.seeds.dedup();
        acc.provenance.config_hashes.sort();
        acc.provenance.config_hashes.dedup();
        Ok(acc)
    }

    /// `method,budget,task,served_group,test_loss`
    pub fn per_task_csv(&self) -> String {
        let mut s = String::from("method,budget,task,served_group,test_loss\n");
        for e in self.evaluations() {
            for (t, loss) in e.per_task_test_loss.iter().enumerate() {
                let g = e.grouping.serving_group(t).ids().iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
                s.push_str(&format!("{},{},{},{},{}\n", e.method, e.budget, t, g, loss));
            }
        }
        s
    }

    /// `method,budget,total_test_loss,grouping_runs,grouping_steps,total_steps`
    pub fn plot_csv(&self) -> String {
        let mut s = String::from("method,budget,total_test_loss,grouping_runs,grouping_steps,total_steps\n");
        for e in self.evaluations() {
            let c = e.training_cost;
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.method,
                e.budget,
                e.total_test_loss,
                c.grouping_runs,
                c.grouping_steps,
                c.total_steps()
            ));
        }
        for r in &self.random_grouping {
            s.push_str(&format!("RG,{},{},{},,\n", r.budget, r.trained_loss_mean, r.networks_trained));
        }
        s
    }

    /// File name → content for every report artifact.
    pub fn render(&self) -> Result<Vec<(&'static str, String)>> {
        let json = serde_json::to_string_pretty(self).map_err(|e| TagError::Parse(e.to_string()))?;
        Ok(vec![
            (REPORT_JSON, json + "\n"),
            (PER_TASK_CSV, self.per_task_csv()),
            (PLOT_CSV, self.plot_csv()),
        ])
    }
}

pub const REPORT_JSON: &str = "report.json";
pub const PER_TASK_CSV: &str = "per_task_losses.csv";
pub const PLOT_CSV: &str = "plotdata.csv";

/// Writes the report files into `out_dir` after checking provenance; returns
/// `(file name, sha256)` for each.
pub fn write_report(report: &BenchmarkReport, out_dir: &Path) -> Result<Vec<(String, String)>> {
    report.verify()?;
    std::fs::create_dir_all(out_dir).map_err(|e| TagError::Provenance(format!("{}: {e}", out_dir.display())))?;
    let mut hashes = Vec::new();
    for (name, content) in report.render()? {
        let path = out_dir.join(name);
        std::fs::write(&path, &content).map_err(|e| TagError::Provenance(format!("{}: {e}", path.display())))?;
        hashes.push((name.to_string(), sha256_hex(content.as_bytes())));
    }
    Ok(hashes)
}

pub fn read_report(dir: &Path) -> Result<BenchmarkReport> {
    let path = dir.join(REPORT_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| TagError::Parse(format!("{}: {e}", path.display())))?;
    let report: BenchmarkReport = serde_json::from_str(&text).map_err(|e| TagError::Parse(format!("{}: {e}", path.display())))?;
    report.verify()?;
    Ok(report)
}
