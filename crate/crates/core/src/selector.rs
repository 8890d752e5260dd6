//! Budgeted network selection.
//!
//! Given per-group, per-task scores, choose at most `b` distinct groups that
//! cover every task and serve each task from the chosen group that scores it
//! highest, maximising the summed serving scores. A task may also train in
//! chosen groups it is not served from.
//!
//! Tie-break: among optimal solutions the one whose ascending list of group
//! bitmasks is lexicographically smallest wins; serving ties go to the lowest
//! group index. Totals are summed in task order, and every solver produces
//! bit-identical scores for the same solution.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::affinity::{group_onto_task_score, AffinityMatrix, DiagonalMode};
use crate::error::{Result, TagError};
use crate::rng::rng_from_seed;

/// Maximum task count for candidate enumeration.
pub const MAX_TASKS: usize = 20;
/// Guards for the brute-force oracle.
pub const EXHAUSTIVE_MAX_CANDIDATES: usize = 64;
pub const EXHAUSTIVE_MAX_BUDGET: usize = 4;

/// A set of task ids stored as a bitmask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskGroup(u32);

impl TaskGroup {
    pub fn from_mask(mask: u32) -> Self {
        Self(mask)
    }

    pub fn from_ids(ids: &[usize]) -> Self {
        Self(ids.iter().fold(0, |m, &i| m | (1 << i)))
    }

    pub fn full(n: usize) -> Self {
        Self(if n >= 32 { u32::MAX } else { (1u32 << n) - 1 })
    }

    pub fn mask(self) -> u32 {
        self.0
    }

    pub fn contains(self, id: usize) -> bool {
        id < 32 && self.0 & (1 << id) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |&i| self.0 & (1 << i) != 0)
    }

    pub fn ids(self) -> Vec<usize> {
        self.iter().collect()
    }

    /// Position of `id` among the group's members (ascending).
    pub fn rank_of(self, id: usize) -> Option<usize> {
        self.contains(id).then(|| (self.0 & ((1u32 << id) - 1)).count_ones() as usize)
    }
}

impl fmt::Display for TaskGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, i) in self.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
        }
        write!(f, "}}")
    }
}

impl Serialize for TaskGroup {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.ids().serialize(s)
    }
}

impl<'de> Deserialize<'de> for TaskGroup {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let ids = Vec::<usize>::deserialize(d)?;
        if let Some(bad) = ids.iter().find(|&&i| i >= 32) {
            return Err(serde::de::Error::custom(format!("task id {bad} out of range")));
        }
        Ok(TaskGroup::from_ids(&ids))
    }
}

/// Per-network parameter cap: a group is admissible if
/// `shared + |group| · per_head < limit`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamLimit {
    pub shared: usize,
    pub per_head: usize,
    pub limit: usize,
}

impl ParamLimit {
    pub fn admits(&self, group: TaskGroup) -> bool {
        self.shared + group.len() * self.per_head < self.limit
    }
}

#[derive(Clone, Debug, Default)]
pub struct CandidateFilter {
    pub max_size: Option<usize>,
    pub param_limit: Option<ParamLimit>,
    pub predicate: Option<fn(TaskGroup) -> bool>,
}

impl CandidateFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn max_size(size: usize) -> Self {
        Self {
            max_size: Some(size),
            ..Self::default()
        }
    }

    fn admits(&self, g: TaskGroup, mode: DiagonalMode) -> bool {
        if mode == DiagonalMode::TrainExcluded && g.len() == 1 {
            return false;
        }
        self.max_size.is_none_or(|m| g.len() <= m)
            && self.param_limit.is_none_or(|p| p.admits(g))
            && self.predicate.is_none_or(|p| p(g))
    }
}

/// Nonempty subsets of `0..n` admitted by the filter, in ascending bitmask order.
/// Singletons are dropped in train mode.
pub fn enumerate_candidate_groups(n: usize, filter: &CandidateFilter, mode: DiagonalMode) -> Result<Vec<TaskGroup>> {
    if n == 0 {
        return Err(TagError::invalid("n", "need at least one task"));
    }
    if n > MAX_TASKS {
        return Err(TagError::GuardExceeded(format!("{n} tasks > {MAX_TASKS}")));
    }
    Ok((1u32..(1u32 << n))
        .map(TaskGroup)
        .filter(|g| filter.admits(*g, mode))
        .collect())
}

/// A candidate network and its score onto each task (`None` when the task is
/// not a member or its score is missing).
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub group: TaskGroup,
    pub scores: Vec<Option<f64>>,
}

impl Candidate {
    fn best(&self) -> f64 {
        self.scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct SelectionProblem {
    n: usize,
    budget: usize,
    mode: DiagonalMode,
    /// Ascending bitmask order.
    candidates: Vec<Candidate>,
    index: HashMap<TaskGroup, usize>,
}

impl SelectionProblem {
    /// Scores every admitted group with the mean pairwise affinity onto each member.
    pub fn from_affinity(z: &AffinityMatrix, budget: usize, filter: &CandidateFilter) -> Result<Self> {
        let n = z.n();
        let groups = enumerate_candidate_groups(n, filter, z.diagonal_mode())?;
        let candidates = groups
            .into_iter()
            .map(|g| {
                let mut scores = vec![None; n];
                for t in g.iter() {
                    scores[t] = group_onto_task_score(g, t, z)?.score;
                }
                Ok(Candidate { group: g, scores })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_candidates(n, budget, z.diagonal_mode(), candidates)
    }

    pub fn from_candidates(n: usize, budget: usize, mode: DiagonalMode, mut candidates: Vec<Candidate>) -> Result<Self> {
        if budget == 0 {
            return Err(TagError::invalid("selection.budget", "must be >= 1"));
        }
        if n == 0 || n > MAX_TASKS {
            return Err(TagError::GuardExceeded(format!("{n} tasks")));
        }
        candidates.sort_by_key(|c| c.group);
        candidates.dedup_by_key(|c| c.group);
        for c in &candidates {
            if c.scores.len() != n {
                return Err(TagError::DimensionMismatch {
                    what: "candidate score vector",
                    expected: n,
                    got: c.scores.len(),
                });
            }
            if c.group.is_empty() || c.group.mask() >= (1u32 << n) {
                return Err(TagError::invalid("candidate", format!("{} does not fit {n} tasks", c.group)));
            }
            if let Some(t) = (0..n).find(|&t| c.scores[t].is_some() && !c.group.contains(t)) {
                return Err(TagError::invalid("candidate", format!("{} scores non-member {t}", c.group)));
            }
            if c.scores.iter().flatten().any(|s| !s.is_finite()) {
                return Err(TagError::NonFinite("candidate score"));
            }
        }
        let index = candidates.iter().enumerate().map(|(i, c)| (c.group, i)).collect();
        Ok(Self {
            n,
            budget,
            mode,
            candidates,
            index,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn mode(&self) -> DiagonalMode {
        self.mode
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn with_budget(&self, budget: usize) -> Result<Self> {
        Self::from_candidates(self.n, budget, self.mode, self.candidates.clone())
    }

    pub fn score(&self, group: TaskGroup, task: usize) -> Option<f64> {
        self.index.get(&group).and_then(|&i| self.candidates[i].scores[task])
    }

    fn candidate_index(&self, group: TaskGroup) -> Result<usize> {
        self.index
            .get(&group)
            .copied()
            .ok_or_else(|| TagError::invalid("group", format!("{group} is not a candidate")))
    }

    /// Evaluates a set of candidate indices: per-task best scores, serving
    /// (lowest position wins ties) and the task-ordered total.
    fn evaluate(&self, chosen: &[usize]) -> Option<(Vec<usize>, Vec<f64>, f64)> {
        let mut serving = Vec::with_capacity(self.n);
        let mut per_task = Vec::with_capacity(self.n);
        for t in 0..self.n {
            let mut best: Option<(usize, f64)> = None;
            for (pos, &ci) in chosen.iter().enumerate() {
                if let Some(s) = self.candidates[ci].scores[t] {
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((pos, s));
                    }
                }
            }
            let (pos, s) = best?;
            serving.push(pos);
            per_task.push(s);
        }
        let total = task_ordered_sum(&per_task);
        Some((serving, per_task, total))
    }

    fn solution(&self, mut chosen: Vec<usize>, stats: SolverStats) -> GroupingSolution {
        chosen.sort_unstable();
        let (serving, per_task_scores, total_score) = self.evaluate(&chosen).expect("feasible cover");
        GroupingSolution {
            groups: chosen.iter().map(|&i| self.candidates[i].group).collect(),
            serving,
            per_task_scores,
            total_score,
            stats,
        }
    }
}

fn task_ordered_sum(per_task: &[f64]) -> f64 {
    per_task.iter().fold(0.0, |acc, v| acc + v)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub nodes_expanded: u64,
    pub pruned: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingSolution {
    /// Ascending bitmask order.
    pub groups: Vec<TaskGroup>,
    /// Task id → index into `groups`.
    pub serving: Vec<usize>,
    pub per_task_scores: Vec<f64>,
    pub total_score: f64,
    pub stats: SolverStats,
}

impl GroupingSolution {
    pub fn key(&self) -> Vec<u32> {
        self.groups.iter().map(|g| g.mask()).collect()
    }

    pub fn serving_group(&self, task: usize) -> TaskGroup {
        self.groups[self.serving[task]]
    }
}

/// Serving map for a fixed list of chosen groups: each task goes to the
/// containing group with the highest score, ties to the lowest index.
pub fn assign_serving(problem: &SelectionProblem, groups: &[TaskGroup]) -> Result<Vec<usize>> {
    let idx = groups
        .iter()
        .map(|g| problem.candidate_index(*g))
        .collect::<Result<Vec<_>>>()?;
    let mut serving = Vec::with_capacity(problem.n());
    for t in 0..problem.n() {
        let mut best: Option<(usize, f64)> = None;
        for (pos, &ci) in idx.iter().enumerate() {
            if let Some(s) = problem.candidates[ci].scores[t] {
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((pos, s));
                }
            }
        }
        serving.push(best.ok_or(TagError::Uncovered(t))?.0);
    }
    Ok(serving)
}

fn better(total: f64, key: &[u32], best: &Option<(f64, Vec<u32>, Vec<usize>)>) -> bool {
    match best {
        None => true,
        Some((bt, bk, _)) => total > *bt || (total == *bt && key < bk.as_slice()),
    }
}

/// Brute-force optimum over every combination of at most `b` candidates.
pub fn solve_exhaustive_small(problem: &SelectionProblem) -> Result<GroupingSolution> {
    let k = problem.candidates.len();
    if k > EXHAUSTIVE_MAX_CANDIDATES || problem.budget > EXHAUSTIVE_MAX_BUDGET {
        return Err(TagError::GuardExceeded(format!(
            "exhaustive oracle limited to {EXHAUSTIVE_MAX_CANDIDATES} candidates and budget {EXHAUSTIVE_MAX_BUDGET} (got {k}, {})",
            problem.budget
        )));
    }
    let mut best: Option<(f64, Vec<u32>, Vec<usize>)> = None;
    let mut stats = SolverStats::default();
    for_each_combination(k, problem.budget, &mut |chosen| {
        stats.nodes_expanded += 1;
        if let Some((_, _, total)) = problem.evaluate(chosen) {
            let key: Vec<u32> = chosen.iter().map(|&i| problem.candidates[i].group.mask()).collect();
            if better(total, &key, &best) {
                best = Some((total, key, chosen.to_vec()));
            }
        }
    });
    let (_, _, chosen) = best.ok_or_else(|| TagError::Infeasible("no combination of candidates covers every task".into()))?;
    Ok(problem.solution(chosen, stats))
}

/// Calls `f` with every ascending index combination of size `1..=max_size`.
fn for_each_combination(k: usize, max_size: usize, f: &mut dyn FnMut(&[usize])) {
    fn rec(start: usize, k: usize, max_size: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        for i in start..k {
            cur.push(i);
            f(cur);
            if cur.len() < max_size {
                rec(i + 1, k, max_size, cur, f);
            }
            cur.pop();
        }
    }
    rec(0, k, max_size, &mut Vec::with_capacity(max_size), f);
}

/// Depth-first branch-and-bound over candidates sorted by their best per-task
/// score. A node is pruned when the admissible bound
/// `Σ_t max(current best onto t, best remaining candidate onto t)` falls
/// strictly below the incumbent; equal bounds are explored so the tie-break
/// matches the exhaustive oracle.
pub fn solve_branch_and_bound(problem: &SelectionProblem) -> Result<GroupingSolution> {
    let n = problem.n;
    let mut order: Vec<usize> = (0..problem.candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&problem.candidates[a], &problem.candidates[b]);
        cb.best().total_cmp(&ca.best()).then(ca.group.cmp(&cb.group))
    });
    // suffix[p][t]: best score onto t among order[p..]
    let mut suffix = vec![vec![f64::NEG_INFINITY; n]; order.len() + 1];
    for p in (0..order.len()).rev() {
        let c = &problem.candidates[order[p]];
        for t in 0..n {
            let s = c.scores[t].unwrap_or(f64::NEG_INFINITY);
            suffix[p][t] = suffix[p + 1][t].max(s);
        }
    }

    struct Search<'a> {
        problem: &'a SelectionProblem,
        order: Vec<usize>,
        suffix: Vec<Vec<f64>>,
        chosen: Vec<usize>,
        best: Option<(f64, Vec<u32>, Vec<usize>)>,
        stats: SolverStats,
    }

    impl Search<'_> {
        fn bound(&self, p: usize, cur: &[f64]) -> f64 {
            let remaining = self.chosen.len() < self.problem.budget;
            let per_task: Vec<f64> = cur
                .iter()
                .enumerate()
                .map(|(t, &c)| if remaining { c.max(self.suffix[p][t]) } else { c })
                .collect();
            if per_task.contains(&f64::NEG_INFINITY) {
                return f64::NEG_INFINITY;
            }
            task_ordered_sum(&per_task)
        }

        fn dfs(&mut self, p: usize, cur: &[f64]) {
            self.stats.nodes_expanded += 1;
            if p == self.order.len() || self.chosen.len() == self.problem.budget {
                return;
            }
            let bound = self.bound(p, cur);
            let prune = match &self.best {
                _ if bound == f64::NEG_INFINITY => true,
                Some((bt, _, _)) => bound < *bt,
                None => false,
            };
            if prune {
                self.stats.pruned += 1;
                return;
            }
            let ci = self.order[p];
            // include
            let cand = &self.problem.candidates[ci];
            let next: Vec<f64> = cur
                .iter()
                .zip(&cand.scores)
                .map(|(&c, s)| s.map_or(c, |s| c.max(s)))
                .collect();
            self.chosen.push(ci);
            if next.iter().all(|v| *v > f64::NEG_INFINITY) {
                let total = task_ordered_sum(&next);
                let mut sorted = self.chosen.clone();
                sorted.sort_unstable();
                let key: Vec<u32> = sorted.iter().map(|&i| self.problem.candidates[i].group.mask()).collect();
                if better(total, &key, &self.best) {
                    self.best = Some((total, key, sorted));
                }
            }
            self.dfs(p + 1, &next);
            self.chosen.pop();
            // exclude
            self.dfs(p + 1, cur);
        }
    }

    let mut search = Search {
        problem,
        order,
        suffix,
        chosen: Vec::with_capacity(problem.budget),
        best: None,
        stats: SolverStats::default(),
    };
    search.dfs(0, &vec![f64::NEG_INFINITY; n]);
    let stats = search.stats;
    let (_, _, chosen) = search
        .best
        .ok_or_else(|| TagError::Infeasible("the candidate filter admits no cover within the budget".into()))?;
    Ok(problem.solution(chosen, stats))
}

/// Independent check of every solution invariant.
pub fn validate_solution(problem: &SelectionProblem, sol: &GroupingSolution) -> Result<()> {
    let fail = |m: String| Err(TagError::Degenerate(m));
    if sol.groups.is_empty() || sol.groups.len() > problem.budget() {
        return fail(format!("{} groups for budget {}", sol.groups.len(), problem.budget()));
    }
    let mut seen = sol.groups.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != sol.groups.len() {
        return fail("duplicate groups".into());
    }
    if sol.serving.len() != problem.n() || sol.per_task_scores.len() != problem.n() {
        return fail("serving map does not cover every task".into());
    }
    let mut total = 0.0;
    for t in 0..problem.n() {
        let g = *sol.groups.get(sol.serving[t]).ok_or(TagError::Uncovered(t))?;
        if !g.contains(t) {
            return fail(format!("task {t} served from {g} which does not contain it"));
        }
        let s = problem.score(g, t).ok_or(TagError::Uncovered(t))?;
        if s != sol.per_task_scores[t] {
            return fail(format!("task {t} score mismatch"));
        }
        total += s;
    }
    if total != sol.total_score {
        return fail(format!("total {} != recomputed {total}", sol.total_score));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomGroupingEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub exact: bool,
    pub samples: u64,
}

/// Total combinations considered when checking whether exact enumeration applies.
const ENUMERATION_CAP: u128 = 2_000_000;

/// Expected total score of a feasible solution drawn uniformly at random.
/// A feasible solution is a set of at most `b` distinct candidates covering
/// every task, served by [`assign_serving`]. When there are at most
/// `exact_limit` feasible solutions the expectation is computed exactly.
pub fn random_grouping_expectation(
    problem: &SelectionProblem,
    trials: usize,
    seed: u64,
    exact_limit: usize,
) -> Result<RandomGroupingEstimate> {
    if trials == 0 {
        return Err(TagError::invalid("trials", "must be >= 1"));
    }
    let k = problem.candidates.len();
    let bmax = problem.budget.min(k);
    let combos: u128 = (1..=bmax).map(|s| binomial(k, s)).sum();
    if combos <= ENUMERATION_CAP {
        let mut totals = Vec::new();
        for_each_combination(k, bmax, &mut |chosen| {
            if let Some((_, _, t)) = problem.evaluate(chosen) {
                totals.push(t);
            }
        });
        if totals.is_empty() {
            return Err(TagError::Infeasible("no feasible grouping".into()));
        }
        if totals.len() <= exact_limit {
            return Ok(RandomGroupingEstimate {
                mean: totals.iter().sum::<f64>() / totals.len() as f64,
                std_error: 0.0,
                exact: true,
                samples: totals.len() as u64,
            });
        }
    }
    sample_expectation(problem, trials, seed, bmax)
}

fn sample_expectation(problem: &SelectionProblem, trials: usize, seed: u64, bmax: usize) -> Result<RandomGroupingEstimate> {
    let k = problem.candidates.len();
    if k == 0 {
        return Err(TagError::Infeasible("no candidates".into()));
    }
    let weights: Vec<f64> = (1..=bmax).map(|s| binomial(k, s) as f64).collect();
    let wsum: f64 = weights.iter().sum();
    let mut rng = rng_from_seed(seed);
    let max_attempts = trials.saturating_mul(1000).max(100_000);
    let mut attempts = 0usize;
    let mut totals = Vec::with_capacity(trials);
    let mut pool: Vec<usize> = (0..k).collect();
    while totals.len() < trials {
        attempts += 1;
        if attempts > max_attempts {
            return Err(TagError::SamplingExhausted {
                attempts: max_attempts,
                what: "feasible random grouping".into(),
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
        if let Some((_, _, t)) = problem.evaluate(&chosen) {
            totals.push(t);
        }
    }
    let m = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / m;
    let var = if totals.len() > 1 {
        totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    Ok(RandomGroupingEstimate {
        mean,
        std_error: (var / m).sqrt(),
        exact: false,
        samples: totals.len() as u64,
    })
}

/// `C(n, k)`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub affinity_csv_hash: Option<String>,
}

/// `grouping.json` payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingReport {
    pub tasks: usize,
    pub budget: usize,
    pub mode: DiagonalMode,
    pub groups: Vec<TaskGroup>,
    pub serving: BTreeMap<String, usize>,
    pub per_task_scores: Vec<f64>,
    pub total_score: f64,
    pub solver: SolverStats,
    pub provenance: Provenance,
}

impl GroupingReport {
    pub fn new(problem: &SelectionProblem, sol: &GroupingSolution, provenance: Provenance) -> Self {
        Self {
            tasks: problem.n(),
            budget: problem.budget(),
            mode: problem.mode(),
            groups: sol.groups.clone(),
            // zero-padded keys keep the JSON object in numeric order
            serving: sol
                .serving
                .iter()
                .enumerate()
                .map(|(t, g)| (format!("{t:02}"), *g))
                .collect(),
            per_task_scores: sol.per_task_scores.clone(),
            total_score: sol.total_score,
            solver: sol.stats,
            provenance,
        }
    }
}
