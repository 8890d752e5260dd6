//! Multi-task models with hard parameter sharing.
//!
//! A model is a flat vector of shared (trunk) parameters plus one flat head
//! vector per task. The [`Architecture`] acts as the layout registry: it knows
//! how the flat vectors are sliced into weight matrices and biases.
//!
//! Supported losses:
//! * quadratic: `w · ½ (θ − opt)ᵀ H (θ − opt)` on the shared vector, no head;
//! * linear regression: `w · mean (vᵀ W x − y)²` with a linear trunk `W`;
//! * MLP regression: `w · mean (vᵀ tanh(W x + b) + c − y)²`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TagError};
use crate::rng::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TagError::NonFinite("parameter vector"));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, c: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * c).collect())
    }

    pub(crate) fn add_assign(&mut self, other: &ParamVector) {
        assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    /// Bit patterns of every entry, for exact trajectory comparisons.
    pub fn bits(&self) -> Vec<u64> {
        self.0.iter().map(|v| v.to_bits()).collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `params − eta · gradient`. Pure: the inputs are left untouched.
pub fn sgd_step(params: &ParamVector, gradient: &ParamVector, eta: f64) -> Result<ParamVector> {
    if params.len() != gradient.len() {
        return Err(TagError::DimensionMismatch {
            what: "gradient length",
            expected: params.len(),
            got: gradient.len(),
        });
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(TagError::invalid("eta", format!("must be positive, got {eta}")));
    }
    let next: Vec<f64> = params
        .0
        .iter()
        .zip(&gradient.0)
        .map(|(p, g)| p - eta * g)
        .collect();
    ParamVector::new(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Quadratic,
    LinearRegression,
    MlpRegression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub loss_kind: LossKind,
    pub loss_weight: f64,
}

impl TaskSpec {
    pub fn new(id: usize, loss_kind: LossKind) -> Self {
        Self {
            id,
            loss_kind,
            loss_weight: 1.0,
        }
    }

    pub fn with_weight(mut self, loss_weight: f64) -> Self {
        self.loss_weight = loss_weight;
        self
    }
}

/// Tasks with contiguous ids `0..n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    tasks: Vec<TaskSpec>,
}

impl TaskSet {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(TagError::invalid("tasks", "task set is empty"));
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.id != i {
                return Err(TagError::invalid(
                    "tasks",
                    format!("task ids must be contiguous from 0; position {i} holds id {}", t.id),
                ));
            }
            if !(t.loss_weight > 0.0) || !t.loss_weight.is_finite() {
                return Err(TagError::invalid(
                    "loss_weight",
                    format!("task {i} has non-positive weight {}", t.loss_weight),
                ));
            }
        }
        Ok(Self { tasks })
    }

    pub fn uniform(n: usize, kind: LossKind) -> Result<Self> {
        Self::new((0..n).map(|i| TaskSpec::new(i, kind)).collect())
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn task(&self, id: usize) -> Result<&TaskSpec> {
        self.tasks.get(id).ok_or(TagError::UnknownTask(id))
    }

    pub fn set_weight(&mut self, id: usize, weight: f64) -> Result<()> {
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(TagError::invalid("loss_weight", format!("{weight}")));
        }
        let t = self.tasks.get_mut(id).ok_or(TagError::UnknownTask(id))?;
        t.loss_weight = weight;
        Ok(())
    }
}

/// A batch of rows with one regression target column per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    rows: usize,
    cols: usize,
    inputs: Vec<f64>,
    targets: Vec<Vec<f64>>,
}

impl Batch {
    pub fn new(rows: usize, cols: usize, inputs: Vec<f64>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if rows == 0 {
            return Err(TagError::invalid("batch_size", "must be at least 1"));
        }
        if inputs.len() != rows * cols {
            return Err(TagError::DimensionMismatch {
                what: "batch inputs",
                expected: rows * cols,
                got: inputs.len(),
            });
        }
        for t in &targets {
            if t.len() != rows {
                return Err(TagError::DimensionMismatch {
                    what: "batch targets",
                    expected: rows,
                    got: t.len(),
                });
            }
        }
        if inputs.iter().chain(targets.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(TagError::NonFinite("batch"));
        }
        Ok(Self {
            rows,
            cols,
            inputs,
            targets,
        })
    }

    /// A one-row, zero-feature batch for models that ignore data (quadratic tasks).
    pub fn empty_for(n_tasks: usize) -> Self {
        Self {
            rows: 1,
            cols: 0,
            inputs: Vec::new(),
            targets: vec![vec![0.0]; n_tasks],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_tasks(&self) -> usize {
        self.targets.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.inputs[r * self.cols..(r + 1) * self.cols]
    }

    pub fn targets(&self, task: usize) -> Result<&[f64]> {
        self.targets
            .get(task)
            .map(Vec::as_slice)
            .ok_or(TagError::UnknownTask(task))
    }

    pub fn select_rows(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
        }
        let targets = self
            .targets
            .iter()
            .map(|t| indices.iter().map(|&i| t[i]).collect())
            .collect();
        Batch {
            rows: indices.len(),
            cols: self.cols,
            inputs,
            targets,
        }
    }

    /// Keeps only the listed task columns, relabelled `0..ids.len()`.
    pub fn select_tasks(&self, ids: &[usize]) -> Batch {
        Batch {
            rows: self.rows,
            cols: self.cols,
            inputs: self.inputs.clone(),
            targets: ids.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }
}

/// `L(θ) = ½ (θ − opt)ᵀ H (θ − opt)` with `H = R diag(λ) Rᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticTask {
    eigenvalues: Vec<f64>,
    /// Column-major orthonormal eigenvectors (`dim × dim`).
    rotation: Vec<f64>,
    optimum: ParamVector,
    /// Row-major assembled Hessian.
    hessian: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Rotation {
    AxisAligned,
    Random { seed: u64 },
}

impl QuadraticTask {
    /// Builds a quadratic from an explicit spectrum and column-major rotation.
    pub fn from_parts(eigenvalues: Vec<f64>, rotation: Vec<f64>, optimum: ParamVector) -> Result<Self> {
        let dim = eigenvalues.len();
        if dim == 0 {
            return Err(TagError::invalid("dim", "must be at least 1"));
        }
        if eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(TagError::invalid("spectrum", "eigenvalues must be positive and finite"));
        }
        if rotation.len() != dim * dim || optimum.len() != dim {
            return Err(TagError::DimensionMismatch {
                what: "quadratic rotation/optimum",
                expected: dim,
                got: optimum.len(),
            });
        }
        let mut hessian = vec![0.0; dim * dim];
        for r in 0..dim {
            for c in 0..dim {
                hessian[r * dim + c] = (0..dim)
                    .map(|k| rotation[k * dim + r] * eigenvalues[k] * rotation[k * dim + c])
                    .sum();
            }
        }
        // exact symmetry
        for r in 0..dim {
            for c in (r + 1)..dim {
                let m = 0.5 * (hessian[r * dim + c] + hessian[c * dim + r]);
                hessian[r * dim + c] = m;
                hessian[c * dim + r] = m;
            }
        }
        Ok(Self {
            eigenvalues,
            rotation,
            optimum,
            hessian,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn optimum(&self) -> &ParamVector {
        &self.optimum
    }

    pub fn hessian(&self) -> &[f64] {
        &self.hessian
    }

    pub fn alpha(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn beta(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(0.0, f64::max)
    }

    fn hess_times(&self, d: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|r| dot(&self.hessian[r * n..(r + 1) * n], d)).collect()
    }

    pub fn loss_at(&self, theta: &[f64]) -> f64 {
        let d: Vec<f64> = theta.iter().zip(self.optimum.as_slice()).map(|(t, o)| t - o).collect();
        0.5 * dot(&d, &self.hess_times(&d))
    }

    pub fn gradient_at(&self, theta: &[f64]) -> Vec<f64> {
        let d: Vec<f64> = theta.iter().zip(self.optimum.as_slice()).map(|(t, o)| t - o).collect();
        self.hess_times(&d)
    }
}

/// Builds a quadratic whose Hessian spectrum spans `[alpha, beta]` with both
/// extremes attained. Interior eigenvalues (for `dim > 2`) are drawn uniformly
/// from the interval using `seed`.
pub fn build_quadratic_task(
    alpha: f64,
    beta: f64,
    dim: usize,
    optimum: ParamVector,
    rotation: Rotation,
    seed: u64,
) -> Result<QuadraticTask> {
    if !(alpha > 0.0) || !(beta >= alpha) || !beta.is_finite() {
        return Err(TagError::invalid(
            "spectrum",
            format!("need 0 < alpha <= beta, got alpha={alpha}, beta={beta}"),
        ));
    }
    if dim < 2 {
        return Err(TagError::invalid("dim", format!("need dim >= 2, got {dim}")));
    }
    if optimum.len() != dim {
        return Err(TagError::DimensionMismatch {
            what: "optimum",
            expected: dim,
            got: optimum.len(),
        });
    }
    let mut rng = rng_from_seed(seed);
    let mut eig = vec![alpha];
    for _ in 2..dim {
        eig.push(rng.random_range(alpha..=beta));
    }
    eig.push(beta);
    let rot = match rotation {
        Rotation::AxisAligned => {
            let mut r = vec![0.0; dim * dim];
            for i in 0..dim {
                r[i * dim + i] = 1.0;
            }
            r
        }
        Rotation::Random { seed } => random_orthonormal(dim, seed),
    };
    QuadraticTask::from_parts(eig, rot, optimum)
}

/// Column-major random orthonormal basis via modified Gram-Schmidt on
/// Gaussian columns.
pub fn random_orthonormal(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while cols.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for c in &cols {
                let p = dot(&v, c);
                for (x, y) in v.iter_mut().zip(c) {
                    *x -= p * y;
                }
            }
        }
        let n = dot(&v, &v).sqrt();
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        cols.push(v);
    }
    cols.into_iter().flatten().collect()
}

/// Layout registry and architecture descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    /// Shared vector is θ; one quadratic per task; heads are empty.
    Quadratic { tasks: Vec<QuadraticTask> },
    /// Shared `W` (`width × input_dim`, row-major); head `v` (`width`).
    Linear { input_dim: usize, width: usize },
    /// Shared `[W (width × input_dim), b (width)]`; head `[v (width), c]`.
    Mlp { input_dim: usize, width: usize },
}

impl Architecture {
    pub fn loss_kind(&self) -> LossKind {
        match self {
            Architecture::Quadratic { .. } => LossKind::Quadratic,
            Architecture::Linear { .. } => LossKind::LinearRegression,
            Architecture::Mlp { .. } => LossKind::MlpRegression,
        }
    }

    pub fn shared_len(&self) -> usize {
        match self {
            Architecture::Quadratic { tasks } => tasks.first().map_or(0, QuadraticTask::dim),
            Architecture::Linear { input_dim, width } => input_dim * width,
            Architecture::Mlp { input_dim, width } => input_dim * width + width,
        }
    }

    pub fn head_len(&self) -> usize {
        match self {
            Architecture::Quadratic { .. } => 0,
            Architecture::Linear { width, .. } => *width,
            Architecture::Mlp { width, .. } => width + 1,
        }
    }

    /// Total parameter count of a network serving `n_tasks` heads.
    pub fn param_count(&self, n_tasks: usize) -> usize {
        self.shared_len() + n_tasks * self.head_len()
    }

    fn input_dim(&self) -> Option<usize> {
        match self {
            Architecture::Quadratic { .. } => None,
            Architecture::Linear { input_dim, .. } | Architecture::Mlp { input_dim, .. } => Some(*input_dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskModel {
    architecture: Architecture,
    shared: ParamVector,
    heads: Vec<ParamVector>,
}

/// Loss value with optional gradients.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub shared_grad: Option<ParamVector>,
    pub head_grad: Option<ParamVector>,
}

impl MultiTaskModel {
    pub fn new(architecture: Architecture, shared: ParamVector, heads: Vec<ParamVector>) -> Result<Self> {
        if let Architecture::Quadratic { tasks } = &architecture {
            if tasks.is_empty() {
                return Err(TagError::invalid("architecture", "quadratic model needs at least one task"));
            }
            if let Some(q) = tasks.iter().find(|q| q.dim() != tasks[0].dim()) {
                return Err(TagError::DimensionMismatch {
                    what: "quadratic task dimension",
                    expected: tasks[0].dim(),
                    got: q.dim(),
                });
            }
            if heads.len() != tasks.len() {
                return Err(TagError::DimensionMismatch {
                    what: "head count",
                    expected: tasks.len(),
                    got: heads.len(),
                });
            }
        }
        if let Architecture::Linear { input_dim, width } | Architecture::Mlp { input_dim, width } = &architecture {
            if *input_dim == 0 || *width == 0 {
                return Err(TagError::invalid("architecture", "input_dim and width must be positive"));
            }
        }
        if shared.len() != architecture.shared_len() {
            return Err(TagError::DimensionMismatch {
                what: "shared parameters",
                expected: architecture.shared_len(),
                got: shared.len(),
            });
        }
        for h in &heads {
            if h.len() != architecture.head_len() {
                return Err(TagError::DimensionMismatch {
                    what: "head parameters",
                    expected: architecture.head_len(),
                    got: h.len(),
                });
            }
        }
        Ok(Self {
            architecture,
            shared,
            heads,
        })
    }

    /// Gaussian initialisation `N(0, init_scale²)` for every trainable entry.
    /// Quadratic models start at the origin.
    pub fn init(architecture: Architecture, n_tasks: usize, init_scale: f64, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len)
                .map(|_| init_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let shared = match architecture {
            Architecture::Quadratic { .. } => vec![0.0; architecture.shared_len()],
            _ => draw(architecture.shared_len()),
        };
        let heads = (0..n_tasks).map(|_| draw(architecture.head_len())).collect::<Vec<_>>();
        Self::new(
            architecture,
            ParamVector::new(shared)?,
            heads.into_iter().map(ParamVector::new).collect::<Result<_>>()?,
        )
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn shared(&self) -> &ParamVector {
        &self.shared
    }

    pub fn heads(&self) -> &[ParamVector] {
        &self.heads
    }

    pub fn head(&self, task: usize) -> Result<&ParamVector> {
        self.heads.get(task).ok_or(TagError::UnknownTask(task))
    }

    pub fn n_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn with_shared(&self, shared: ParamVector) -> Result<Self> {
        Self::new(self.architecture.clone(), shared, self.heads.clone())
    }

    pub(crate) fn set_params(&mut self, shared: ParamVector, heads: Vec<ParamVector>) {
        debug_assert_eq!(shared.len(), self.shared.len());
        debug_assert_eq!(heads.len(), self.heads.len());
        self.shared = shared;
        self.heads = heads;
    }

    fn check(&self, batch: &Batch, task: &TaskSpec) -> Result<()> {
        if task.id >= self.heads.len() || task.id >= batch.n_tasks() {
            return Err(TagError::UnknownTask(task.id));
        }
        if task.loss_kind != self.architecture.loss_kind() {
            return Err(TagError::invalid(
                "loss_kind",
                format!(
                    "task {} is {:?} but the model is {:?}",
                    task.id,
                    task.loss_kind,
                    self.architecture.loss_kind()
                ),
            ));
        }
        if let Some(d) = self.architecture.input_dim() {
            if batch.cols() != d {
                return Err(TagError::DimensionMismatch {
                    what: "batch feature dimension",
                    expected: d,
                    got: batch.cols(),
                });
            }
        }
        Ok(())
    }

    /// Loss of `task` on `batch`, scaled by its loss weight.
    pub fn task_loss(&self, batch: &Batch, task: &TaskSpec) -> Result<f64> {
        Ok(self.evaluate(batch, task, false, false)?.loss)
    }

    /// Loss evaluated at substitute shared parameters, heads unchanged.
    pub fn task_loss_with_shared(&self, shared: &ParamVector, batch: &Batch, task: &TaskSpec) -> Result<f64> {
        if shared.len() != self.shared.len() {
            return Err(TagError::DimensionMismatch {
                what: "shared parameters",
                expected: self.shared.len(),
                got: shared.len(),
            });
        }
        self.check(batch, task)?;
        Ok(self
            .eval_raw(shared.as_slice(), self.heads[task.id].as_slice(), batch, task, false, false)
            .loss)
    }

    pub fn shared_gradient(&self, batch: &Batch, task: &TaskSpec) -> Result<ParamVector> {
        Ok(self.evaluate(batch, task, true, false)?.shared_grad.expect("requested"))
    }

    pub fn head_gradient(&self, batch: &Batch, task: &TaskSpec) -> Result<ParamVector> {
        Ok(self.evaluate(batch, task, false, true)?.head_grad.expect("requested"))
    }

    pub fn evaluate(&self, batch: &Batch, task: &TaskSpec, want_shared: bool, want_head: bool) -> Result<LossEval> {
        self.check(batch, task)?;
        Ok(self.eval_raw(
            self.shared.as_slice(),
            self.heads[task.id].as_slice(),
            batch,
            task,
            want_shared,
            want_head,
        ))
    }

    fn eval_raw(
        &self,
        shared: &[f64],
        head: &[f64],
        batch: &Batch,
        task: &TaskSpec,
        want_shared: bool,
        want_head: bool,
    ) -> LossEval {
        let w = task.loss_weight;
        let (loss, gs, gh) = match &self.architecture {
            Architecture::Quadratic { tasks } => {
                let q = &tasks[task.id];
                let loss = q.loss_at(shared);
                let gs = want_shared.then(|| q.gradient_at(shared));
                (loss, gs, want_head.then(Vec::new))
            }
            Architecture::Linear { input_dim, width } => {
                linear_eval(shared, head, batch, batch.targets[task.id].as_slice(), *input_dim, *width, want_shared, want_head)
            }
            Architecture::Mlp { input_dim, width } => {
                mlp_eval(shared, head, batch, batch.targets[task.id].as_slice(), *input_dim, *width, want_shared, want_head)
            }
        };
        let scale = |g: Vec<f64>| ParamVector(g.into_iter().map(|v| v * w).collect());
        LossEval {
            loss: w * loss,
            shared_grad: gs.map(scale),
            head_grad: gh.map(scale),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn linear_eval(
    shared: &[f64],
    head: &[f64],
    batch: &Batch,
    y: &[f64],
    input_dim: usize,
    width: usize,
    want_shared: bool,
    want_head: bool,
) -> (f64, Option<Vec<f64>>, Option<Vec<f64>>) {
    let n = batch.rows() as f64;
    let mut loss = 0.0;
    let mut gs = want_shared.then(|| vec![0.0; width * input_dim]);
    let mut gh = want_head.then(|| vec![0.0; width]);
    let mut h = vec![0.0; width];
    for r in 0..batch.rows() {
        let x = batch.row(r);
        for (k, hk) in h.iter_mut().enumerate() {
            *hk = dot(&shared[k * input_dim..(k + 1) * input_dim], x);
        }
        let resid = dot(head, &h) - y[r];
        loss += resid * resid;
        let dpred = 2.0 * resid / n;
        if let Some(gh) = gh.as_mut() {
            for (g, hk) in gh.iter_mut().zip(&h) {
                *g += dpred * hk;
            }
        }
        if let Some(gs) = gs.as_mut() {
            for k in 0..width {
                let coef = dpred * head[k];
                for (g, xi) in gs[k * input_dim..(k + 1) * input_dim].iter_mut().zip(x) {
                    *g += coef * xi;
                }
            }
        }
    }
    (loss / n, gs, gh)
}

#[allow(clippy::too_many_arguments)]
fn mlp_eval(
    shared: &[f64],
    head: &[f64],
    batch: &Batch,
    y: &[f64],
    input_dim: usize,
    width: usize,
    want_shared: bool,
    want_head: bool,
) -> (f64, Option<Vec<f64>>, Option<Vec<f64>>) {
    let n = batch.rows() as f64;
    let (weights, bias) = shared.split_at(width * input_dim);
    let (v, c) = (&head[..width], head[width]);
    let mut loss = 0.0;
    let mut gs = want_shared.then(|| vec![0.0; width * input_dim + width]);
    let mut gh = want_head.then(|| vec![0.0; width + 1]);
    let mut h = vec![0.0; width];
    for r in 0..batch.rows() {
        let x = batch.row(r);
        for k in 0..width {
            h[k] = (dot(&weights[k * input_dim..(k + 1) * input_dim], x) + bias[k]).tanh();
        }
        let resid = dot(v, &h) + c - y[r];
        loss += resid * resid;
        let dpred = 2.0 * resid / n;
        if let Some(gh) = gh.as_mut() {
            for k in 0..width {
                gh[k] += dpred * h[k];
            }
            gh[width] += dpred;
        }
        if let Some(gs) = gs.as_mut() {
            for k in 0..width {
                let dz = dpred * v[k] * (1.0 - h[k] * h[k]);
                for (g, xi) in gs[k * input_dim..(k + 1) * input_dim].iter_mut().zip(x) {
                    *g += dz * xi;
                }
                gs[width * input_dim + k] += dz;
            }
        }
    }
    (loss / n, gs, gh)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn counterexample_model() -> MultiTaskModel {
        let q = build_quadratic_task(1.0, 10.0, 2, ParamVector::zeros(2), Rotation::AxisAligned, 0).unwrap();
        MultiTaskModel::new(
            Architecture::Quadratic { tasks: vec![q] },
            pv(&[-2.0, -1.0]),
            vec![ParamVector::zeros(0)],
        )
        .unwrap()
    }

    #[test]
    fn counterexample_loss_and_gradient() {
        let m = counterexample_model();
        let t = TaskSpec::new(0, LossKind::Quadratic);
        let b = Batch::empty_for(1);
        assert_eq!(m.task_loss(&b, &t).unwrap(), 7.0);
        assert_eq!(m.shared_gradient(&b, &t).unwrap().as_slice(), &[-2.0, -10.0]);
    }

    #[test]
    fn loss_and_gradient_vanish_at_optimum() {
        let opt = pv(&[0.3, -1.2, 2.0]);
        let q = build_quadratic_task(0.5, 4.0, 3, opt.clone(), Rotation::Random { seed: 5 }, 1).unwrap();
        let m = MultiTaskModel::new(Architecture::Quadratic { tasks: vec![q] }, opt, vec![ParamVector::zeros(0)]).unwrap();
        let t = TaskSpec::new(0, LossKind::Quadratic);
        let b = Batch::empty_for(1);
        assert_eq!(m.task_loss(&b, &t).unwrap(), 0.0);
        assert!(m.shared_gradient(&b, &t).unwrap().as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn linear_single_sample_loss_and_head_gradient() {
        // trunk identity-ish: h = W x with W = [1, 0], x = (2, 5) -> h = 2; head v = 1 -> prediction 2
        let arch = Architecture::Linear { input_dim: 2, width: 1 };
        let m = MultiTaskModel::new(arch, pv(&[1.0, 0.0]), vec![pv(&[1.0])]).unwrap();
        let b = Batch::new(1, 2, vec![2.0, 5.0], vec![vec![0.0]]).unwrap();
        let t = TaskSpec::new(0, LossKind::LinearRegression);
        assert_eq!(m.task_loss(&b, &t).unwrap(), 4.0);
        // 2 (wᵀh − y) h = 2 · 2 · 2
        assert_eq!(m.head_gradient(&b, &t).unwrap().as_slice(), &[8.0]);
    }

    #[test]
    fn head_gradient_zero_when_interpolating() {
        let arch = Architecture::Linear { input_dim: 2, width: 2 };
        let m = MultiTaskModel::new(arch, pv(&[1.0, 0.0, 0.0, 1.0]), vec![pv(&[3.0, -1.0])]).unwrap();
        let b = Batch::new(2, 2, vec![1.0, 2.0, -1.0, 0.5], vec![vec![1.0, -3.5]]).unwrap();
        let t = TaskSpec::new(0, LossKind::LinearRegression);
        assert_eq!(m.task_loss(&b, &t).unwrap(), 0.0);
        assert!(m.head_gradient(&b, &t).unwrap().as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn sgd_step_cases() {
        assert_eq!(sgd_step(&pv(&[1.0, 0.0]), &pv(&[1.0, 0.0]), 0.5).unwrap().as_slice(), &[0.5, 0.0]);
        let p = pv(&[0.25, -3.0]);
        assert_eq!(sgd_step(&p, &ParamVector::zeros(2), 0.1).unwrap(), p);
        assert!(matches!(
            sgd_step(&p, &ParamVector::zeros(3), 0.1),
            Err(TagError::DimensionMismatch { .. })
        ));
        assert!(matches!(sgd_step(&p, &p, 0.0), Err(TagError::InvalidParameter { name: "eta", .. })));
        assert!(matches!(sgd_step(&p, &p, -1.0), Err(TagError::InvalidParameter { .. })));
    }

    #[test]
    fn sgd_step_along_unit_direction_reaches_reference_loss() {
        let m = counterexample_model();
        let d = pv(&[8.0, -2.0]);
        let unit = d.scaled(1.0 / d.norm());
        let next = sgd_step(m.shared(), &unit, 0.09).unwrap();
        let t = TaskSpec::new(0, LossKind::Quadratic);
        let loss = m.task_loss_with_shared(&next, &Batch::empty_for(1), &t).unwrap();
        assert!((loss - 6.96).abs() <= 0.03, "{loss}");
    }

    #[test]
    fn quadratic_builder_rejects_bad_spectrum() {
        let o = ParamVector::zeros(2);
        assert!(build_quadratic_task(0.0, 1.0, 2, o.clone(), Rotation::AxisAligned, 0).is_err());
        assert!(build_quadratic_task(2.0, 1.0, 2, o.clone(), Rotation::AxisAligned, 0).is_err());
        assert!(build_quadratic_task(1.0, 2.0, 1, pv(&[0.0]), Rotation::AxisAligned, 0).is_err());
    }

    #[test]
    fn isotropic_quadratic_when_alpha_equals_beta() {
        let q = build_quadratic_task(3.0, 3.0, 4, ParamVector::zeros(4), Rotation::Random { seed: 2 }, 0).unwrap();
        assert_eq!(q.beta() / q.alpha(), 1.0);
        let h = q.hessian();
        for r in 0..4 {
            for c in 0..4 {
                let expect = if r == c { 3.0 } else { 0.0 };
                assert!((h[r * 4 + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unknown_task_and_dimension_errors() {
        let m = counterexample_model();
        let b = Batch::empty_for(1);
        assert_eq!(
            m.task_loss(&b, &TaskSpec::new(3, LossKind::Quadratic)),
            Err(TagError::UnknownTask(3))
        );
        let arch = Architecture::Linear { input_dim: 3, width: 1 };
        let lm = MultiTaskModel::init(arch, 1, 0.5, 1).unwrap();
        let wrong = Batch::new(1, 2, vec![1.0, 2.0], vec![vec![0.0]]).unwrap();
        assert!(matches!(
            lm.task_loss(&wrong, &TaskSpec::new(0, LossKind::LinearRegression)),
            Err(TagError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn batch_validation() {
        assert!(Batch::new(0, 1, vec![], vec![]).is_err());
        assert!(Batch::new(1, 2, vec![1.0], vec![]).is_err());
        assert!(Batch::new(1, 1, vec![f64::NAN], vec![]).is_err());
        assert!(Batch::new(2, 1, vec![1.0, 2.0], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn taskset_validation() {
        assert!(TaskSet::new(vec![TaskSpec::new(1, LossKind::Quadratic)]).is_err());
        assert!(TaskSet::new(vec![TaskSpec::new(0, LossKind::Quadratic).with_weight(0.0)]).is_err());
        assert_eq!(TaskSet::uniform(3, LossKind::MlpRegression).unwrap().len(), 3);
    }
}
