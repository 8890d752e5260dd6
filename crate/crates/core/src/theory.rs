//! Executable checks of the convex-setting results on exact quadratics.
//!
//! For a loss `L_a` that is `α`-strongly convex and `β`-smooth, with `g_a` its
//! gradient at `θ` and `g_b`, `g_c` two other shared-parameter gradients:
//!
//! * inner-product inequality: if `g_b` lowers `L_a` at least as much as `g_c`
//!   does (one step of size `η`), then
//!   `g_a·g_c − (βη/2)‖g_c‖² + (αη/2)‖g_b‖² ≤ g_a·g_b`;
//! * combined-step claim: with `η ≤ 1/β`, equal gradient norms, the same
//!   affinity ordering and `cos(g_a, g_c)` below a threshold, the combined step
//!   `g_a + g_b` lowers `L_a` at least as much as `g_a + g_c`.
//!
//! Everything here is closed-form arithmetic on [`QuadraticTask`]s.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TagError};
use crate::model::{build_quadratic_task, dot, ParamVector, QuadraticTask, Rotation};
use crate::rng::{derive_seed, derive_seed_labeled, rng_from_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryScenario {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub theta: Vec<f64>,
    pub g_a: Vec<f64>,
    pub g_b: Vec<f64>,
    pub g_c: Vec<f64>,
    pub loss: QuadraticTask,
}

impl TheoryScenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= self.beta) {
            return Err(TagError::invalid("alpha/beta", "need 0 < alpha <= beta"));
        }
        if !(self.eta > 0.0) {
            return Err(TagError::invalid("eta", "must be positive"));
        }
        let d = self.loss.dim();
        for (name, v) in [("theta", &self.theta), ("g_a", &self.g_a), ("g_b", &self.g_b), ("g_c", &self.g_c)] {
            if v.len() != d {
                return Err(TagError::DimensionMismatch {
                    what: name_static(name),
                    expected: d,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }

    /// `L_a(θ − η g)`.
    pub fn loss_after(&self, g: &[f64]) -> f64 {
        let moved: Vec<f64> = self.theta.iter().zip(g).map(|(t, gi)| t - self.eta * gi).collect();
        self.loss.loss_at(&moved)
    }

    pub fn initial_loss(&self) -> f64 {
        self.loss.loss_at(&self.theta)
    }

    /// Affinity of a one-step update along `g` onto task `a`.
    pub fn affinity(&self, g: &[f64]) -> Option<f64> {
        let before = self.initial_loss();
        (before != 0.0).then(|| 1.0 - self.loss_after(g) / before)
    }

    /// `Z_{b→a} ≥ Z_{c→a}`; falls back to comparing losses when `L_a(θ) = 0`.
    pub fn affinity_ordering(&self) -> bool {
        match (self.affinity(&self.g_b), self.affinity(&self.g_c)) {
            (Some(zb), Some(zc)) => zb >= zc,
            _ => self.loss_after(&self.g_b) <= self.loss_after(&self.g_c),
        }
    }
}

fn name_static(name: &str) -> &'static str {
    match name {
        "theta" => "theta",
        "g_a" => "g_a",
        "g_b" => "g_b",
        _ => "g_c",
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerProductCheck {
    pub premise_holds: bool,
    pub inequality_holds: bool,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`.
    pub slack: f64,
}

/// Evaluates the inner-product inequality and its premise. The inequality is
/// judged with a rounding allowance of `1e−12` times the magnitude of its terms.
pub fn check_lemma1(s: &TheoryScenario) -> InnerProductCheck {
    let ac = dot(&s.g_a, &s.g_c);
    let ab = dot(&s.g_a, &s.g_b);
    let cc = dot(&s.g_c, &s.g_c);
    let bb = dot(&s.g_b, &s.g_b);
    let smooth = s.beta * s.eta / 2.0 * cc;
    let convex = s.alpha * s.eta / 2.0 * bb;
    let lhs = ac - smooth + convex;
    let rhs = ab;
    let tol = 1e-12 * (ac.abs() + smooth + convex + ab.abs());
    InnerProductCheck {
        premise_holds: s.affinity_ordering(),
        inequality_holds: lhs <= rhs + tol,
        lhs,
        rhs,
        slack: rhs - lhs,
    }
}

/// Which reading of the cosine threshold to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdForm {
    /// `(η/4)·β/(β−α) − 1`.
    Proof,
    /// `(η/4)·αβ/(β−α) − 1`.
    Statement,
}

impl std::str::FromStr for ThresholdForm {
    type Err = TagError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proof" => Ok(Self::Proof),
            "statement" => Ok(Self::Statement),
            other => Err(TagError::invalid("threshold-form", format!("expected proof|statement, got {other}"))),
        }
    }
}

pub fn prop1_cos_threshold(alpha: f64, beta: f64, eta: f64, form: ThresholdForm) -> Result<f64> {
    if !(alpha > 0.0) || !(beta >= alpha) {
        return Err(TagError::invalid("alpha/beta", format!("need 0 < alpha <= beta, got {alpha}, {beta}")));
    }
    if alpha == beta {
        return Err(TagError::invalid("alpha/beta", "threshold is singular when alpha == beta"));
    }
    let ratio = match form {
        ThresholdForm::Proof => beta / (beta - alpha),
        ThresholdForm::Statement => alpha * beta / (beta - alpha),
    };
    Ok(eta / 4.0 * ratio - 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedStepCheck {
    pub step_size_ok: bool,
    pub equal_norms: bool,
    pub affinity_ordering: bool,
    pub cosine_condition: bool,
    pub hypotheses_hold: bool,
    pub threshold: f64,
    pub cosine: f64,
    /// `L_a(θ − η(g_a + g_b))`.
    pub loss_ab: f64,
    /// `L_a(θ − η(g_a + g_c))`.
    pub loss_ac: f64,
    pub conclusion_holds: bool,
}

/// Relative tolerance for the equal-norm hypothesis.
pub const NORM_TOLERANCE: f64 = 1e-9;

pub fn check_prop1(s: &TheoryScenario, form: ThresholdForm) -> Result<CombinedStepCheck> {
    let threshold = prop1_cos_threshold(s.alpha, s.beta, s.eta, form)?;
    let (na, nb, nc) = (norm(&s.g_a), norm(&s.g_b), norm(&s.g_c));
    let scale = na.max(nb).max(nc);
    let equal_norms = (na - nb).abs() <= NORM_TOLERANCE * scale && (na - nc).abs() <= NORM_TOLERANCE * scale;
    let step_size_ok = s.eta <= 1.0 / s.beta;
    let affinity_ordering = s.affinity_ordering();
    let cos = cosine(&s.g_a, &s.g_c);
    let cosine_condition = cos <= threshold;
    let loss_ab = s.loss_after(&add(&s.g_a, &s.g_b));
    let loss_ac = s.loss_after(&add(&s.g_a, &s.g_c));
    Ok(CombinedStepCheck {
        step_size_ok,
        equal_norms,
        affinity_ordering,
        cosine_condition,
        hypotheses_hold: step_size_ok && equal_norms && affinity_ordering && cosine_condition,
        threshold,
        cosine: cos,
        loss_ab,
        loss_ac,
        conclusion_holds: loss_ab <= loss_ac,
    })
}

/// Norm convention for the counterexample's gradient directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientNorm {
    /// `g_a`, `g_b`, `g_c` all rescaled to unit length.
    Unit,
    /// `g_a` kept as the true gradient; `g_b`, `g_c` rescaled to `‖g_a‖`.
    MatchTrueGradient,
}

pub const COUNTEREXAMPLE_ETA: f64 = 0.09;
pub const COUNTEREXAMPLE_THETA: [f64; 2] = [-2.0, -1.0];
pub const COUNTEREXAMPLE_B: [f64; 2] = [8.0, -2.0];
pub const COUNTEREXAMPLE_C: [f64; 2] = [-12.0, 2.0];
pub const COUNTEREXAMPLE_C_ALT: [f64; 2] = [-0.2, 15.0];

/// Reference losses, in table order.
pub const COUNTEREXAMPLE_REFERENCE: [(&str, f64); 7] = [
    ("initial", 7.00),
    ("single_b", 6.96),
    ("single_c", 6.98),
    ("combined_ab", 6.09),
    ("combined_ac", 6.07),
    ("alt_single_c", 7.96),
    ("alt_combined_ac", 6.98),
];

/// `L_a(x₁, x₂) = ½(x₁² + 10x₂²)`.
pub fn counterexample_loss() -> QuadraticTask {
    build_quadratic_task(1.0, 10.0, 2, ParamVector::zeros(2), Rotation::AxisAligned, 0).expect("valid spectrum")
}

/// The counterexample scenario with a chosen `g_c` direction.
pub fn counterexample_scenario(c_direction: [f64; 2], convention: GradientNorm) -> TheoryScenario {
    counterexample_scenario_with(COUNTEREXAMPLE_ETA, COUNTEREXAMPLE_B, c_direction, convention)
}

pub fn counterexample_scenario_with(
    eta: f64,
    b_direction: [f64; 2],
    c_direction: [f64; 2],
    convention: GradientNorm,
) -> TheoryScenario {
    let loss = counterexample_loss();
    let theta = COUNTEREXAMPLE_THETA.to_vec();
    let grad = loss.gradient_at(&theta);
    let target_norm = match convention {
        GradientNorm::Unit => 1.0,
        GradientNorm::MatchTrueGradient => norm(&grad),
    };
    let rescale = |v: &[f64]| {
        let n = norm(v);
        v.iter().map(|x| x / n * target_norm).collect::<Vec<_>>()
    };
    TheoryScenario {
        alpha: 1.0,
        beta: 10.0,
        eta,
        g_a: rescale(&grad),
        g_b: rescale(&b_direction),
        g_c: rescale(&c_direction),
        theta,
        loss,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleTable {
    pub convention: GradientNorm,
    pub initial: f64,
    pub single_b: f64,
    pub single_c: f64,
    pub combined_ab: f64,
    pub combined_ac: f64,
    pub alt_single_c: f64,
    pub alt_combined_ac: f64,
}

impl CounterexampleTable {
    pub fn values(&self) -> [f64; 7] {
        [
            self.initial,
            self.single_b,
            self.single_c,
            self.combined_ab,
            self.combined_ac,
            self.alt_single_c,
            self.alt_combined_ac,
        ]
    }

    /// `g_b` beats `g_c` as a single step.
    pub fn single_ordering(&self) -> bool {
        self.single_b < self.single_c
    }

    /// …but `g_a + g_c` beats `g_a + g_b`.
    pub fn combined_inversion(&self) -> bool {
        self.combined_ac < self.combined_ab
    }

    /// With the alternate `g_c` both orderings agree.
    pub fn alternate_consistent(&self) -> bool {
        self.single_b < self.alt_single_c && self.combined_ab < self.alt_combined_ac
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<16} {:>10} {:>10}\n", "quantity", "loss", "reference");
        for ((label, reference), v) in COUNTEREXAMPLE_REFERENCE.iter().zip(self.values()) {
            s.push_str(&format!("{label:<16} {v:>10.4} {reference:>10.2}\n"));
        }
        s
    }
}

pub fn run_counterexample(convention: GradientNorm) -> CounterexampleTable {
    let s = counterexample_scenario(COUNTEREXAMPLE_C, convention);
    let alt = counterexample_scenario(COUNTEREXAMPLE_C_ALT, convention);
    CounterexampleTable {
        convention,
        initial: s.initial_loss(),
        single_b: s.loss_after(&s.g_b),
        single_c: s.loss_after(&s.g_c),
        combined_ab: s.loss_after(&add(&s.g_a, &s.g_b)),
        combined_ac: s.loss_after(&add(&s.g_a, &s.g_c)),
        alt_single_c: alt.loss_after(&alt.g_c),
        alt_combined_ac: alt.loss_after(&add(&alt.g_a, &alt.g_c)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EtaPolicy {
    Fixed(f64),
    /// Uniform on `(0, 1/β]`.
    UpToInverseBeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Enforce {
    /// `g_b`, `g_c` random; no hypothesis enforced.
    Nothing,
    /// Swap `g_b` and `g_c` if needed so that `Z_{b→a} ≥ Z_{c→a}`.
    AffinityPremise,
    /// All four combined-step hypotheses.
    CombinedStep(ThresholdForm),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub alpha: f64,
    pub beta: f64,
    pub dim: usize,
    pub eta: EtaPolicy,
    pub enforce: Enforce,
}

pub const MAX_REJECTION_ATTEMPTS: usize = 10_000;

/// Random rotated quadratic with spectrum `[alpha, beta]`, `g_a` the true
/// gradient at a random point and `g_b`, `g_c` random directions of norm `‖g_a‖`.
pub fn random_scenario(spec: &ScenarioSpec, seed: u64) -> Result<TheoryScenario> {
    if !(spec.alpha > 0.0) || !(spec.beta > spec.alpha) {
        return Err(TagError::invalid("alpha/beta", "need 0 < alpha < beta"));
    }
    if spec.dim < 2 {
        return Err(TagError::invalid("dim", "need dim >= 2"));
    }
    let d = spec.dim;
    let loss = build_quadratic_task(
        spec.alpha,
        spec.beta,
        d,
        ParamVector::zeros(d),
        Rotation::Random {
            seed: derive_seed_labeled(seed, "rotation"),
        },
        derive_seed_labeled(seed, "spectrum"),
    )?;
    let mut rng = rng_from_seed(derive_seed_labeled(seed, "vectors"));
    let eta = match spec.eta {
        EtaPolicy::Fixed(e) => e,
        EtaPolicy::UpToInverseBeta => (1.0 - rng.random::<f64>()) / spec.beta,
    };
    if !(eta > 0.0) {
        return Err(TagError::invalid("eta", "must be positive"));
    }
    let gauss = |rng: &mut crate::rng::TagRng| -> Vec<f64> { (0..d).map(|_| rng.sample(StandardNormal)).collect() };
    let (theta, g_a) = loop {
        let theta = gauss(&mut rng);
        let g = loss.gradient_at(&theta);
        if norm(&g) > 1e-8 {
            break (theta, g);
        }
    };
    let na = norm(&g_a);
    let random_dir = |rng: &mut crate::rng::TagRng| -> Vec<f64> {
        loop {
            let v = gauss(rng);
            let n = norm(&v);
            if n > 1e-8 {
                return v.iter().map(|x| x / n * na).collect();
            }
        }
    };
    let mut s = TheoryScenario {
        alpha: spec.alpha,
        beta: spec.beta,
        eta,
        theta,
        g_b: random_dir(&mut rng),
        g_c: random_dir(&mut rng),
        g_a,
        loss,
    };
    match spec.enforce {
        Enforce::Nothing => {}
        Enforce::AffinityPremise => {
            if !s.affinity_ordering() {
                std::mem::swap(&mut s.g_b, &mut s.g_c);
            }
        }
        Enforce::CombinedStep(form) => {
            let threshold = prop1_cos_threshold(spec.alpha, spec.beta, eta, form)?;
            if !(eta <= 1.0 / spec.beta) {
                return Err(TagError::invalid("eta", "combined-step hypotheses need eta <= 1/beta"));
            }
            // g_c at a cosine drawn uniformly from [−1, min(threshold, 1)]
            let hi = threshold.min(1.0);
            let c = -1.0 + (hi + 1.0) * rng.random::<f64>();
            let unit_a: Vec<f64> = s.g_a.iter().map(|x| x / na).collect();
            let perp = loop {
                let mut p = gauss(&mut rng);
                let proj = dot(&p, &unit_a);
                p.iter_mut().zip(&unit_a).for_each(|(x, u)| *x -= proj * u);
                let pn = norm(&p);
                if pn > 1e-8 {
                    break p.into_iter().map(|x| x / pn).collect::<Vec<_>>();
                }
            };
            let sin = (1.0 - c * c).max(0.0).sqrt();
            s.g_c = unit_a.iter().zip(&perp).map(|(u, p)| na * (c * u + sin * p)).collect();
            let mut found = false;
            for _ in 0..MAX_REJECTION_ATTEMPTS {
                if s.affinity_ordering() {
                    found = true;
                    break;
                }
                s.g_b = random_dir(&mut rng);
            }
            if !found {
                return Err(TagError::SamplingExhausted {
                    attempts: MAX_REJECTION_ATTEMPTS,
                    what: "g_b with higher affinity than g_c".into(),
                });
            }
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessReport {
    pub name: String,
    pub trials: usize,
    pub seed: u64,
    pub dim: usize,
    /// Trials whose hypotheses held and were therefore judged.
    pub evaluated: usize,
    pub violations: usize,
    /// Smallest slack seen (negative means a violation).
    pub min_slack: f64,
    /// Smallest slack relative to `L_a(θ)` (combined-step harness) or to the
    /// inequality's magnitude (inner-product harness).
    pub min_relative_slack: f64,
    pub threshold_form: Option<ThresholdForm>,
    /// Up to 10 violating trial indices.
    pub violating_trials: Vec<usize>,
    pub rejected: usize,
}

/// Harness scenario draw: `α ~ U[0.1, 1]`, `β/α ~ U[1.5, 100]`, `η ~ U(0, 1/β]`.
pub fn harness_scenario(seed: u64, trial: usize, dim: usize, enforce: Enforce) -> Result<TheoryScenario> {
    let ts = derive_seed(seed, trial as u64);
    let mut rng = rng_from_seed(derive_seed_labeled(ts, "constants"));
    let alpha = rng.random_range(0.1..=1.0);
    let ratio = rng.random_range(1.5..=100.0);
    random_scenario(
        &ScenarioSpec {
            alpha,
            beta: alpha * ratio,
            dim,
            eta: EtaPolicy::UpToInverseBeta,
            enforce,
        },
        ts,
    )
}

enum Outcome {
    Rejected,
    Skipped,
    Judged { ok: bool, slack: f64, rel: f64 },
}

fn run_trials(trials: usize, f: impl Fn(usize) -> Outcome + Sync + Send) -> Vec<Outcome> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..trials).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..trials).map(f).collect()
    }
}

fn summarize(name: &str, trials: usize, seed: u64, dim: usize, form: Option<ThresholdForm>, outcomes: Vec<Outcome>) -> HarnessReport {
    let mut r = HarnessReport {
        name: name.to_string(),
        trials,
        seed,
        dim,
        evaluated: 0,
        violations: 0,
        min_slack: f64::INFINITY,
        min_relative_slack: f64::INFINITY,
        threshold_form: form,
        violating_trials: Vec::new(),
        rejected: 0,
    };
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Outcome::Rejected => r.rejected += 1,
            Outcome::Skipped => {}
            Outcome::Judged { ok, slack, rel } => {
                r.evaluated += 1;
                r.min_slack = r.min_slack.min(slack);
                r.min_relative_slack = r.min_relative_slack.min(rel);
                if !ok {
                    r.violations += 1;
                    if r.violating_trials.len() < 10 {
                        r.violating_trials.push(i);
                    }
                }
            }
        }
    }
    r
}

/// Random scenarios with the affinity premise enforced; every one must satisfy
/// the inner-product inequality.
pub fn run_inner_product_harness(trials: usize, seed: u64, dim: usize) -> HarnessReport {
    let outcomes = run_trials(trials, |t| match harness_scenario(seed, t, dim, Enforce::AffinityPremise) {
        Err(_) => Outcome::Rejected,
        Ok(s) => {
            let c = check_lemma1(&s);
            if !c.premise_holds {
                return Outcome::Skipped;
            }
            let mag = c.lhs.abs().max(c.rhs.abs()).max(f64::MIN_POSITIVE);
            Outcome::Judged {
                ok: c.inequality_holds,
                slack: c.slack,
                rel: c.slack / mag,
            }
        }
    });
    summarize("inner_product_inequality", trials, seed, dim, None, outcomes)
}

/// Random scenarios with all combined-step hypotheses enforced by construction;
/// reports how often `g_a + g_b` fails to beat `g_a + g_c`.
pub fn run_combined_step_harness(trials: usize, seed: u64, dim: usize, form: ThresholdForm) -> HarnessReport {
    let outcomes = run_trials(trials, |t| match harness_scenario(seed, t, dim, Enforce::CombinedStep(form)) {
        Err(_) => Outcome::Rejected,
        Ok(s) => match check_prop1(&s, form) {
            Ok(c) if c.hypotheses_hold => Outcome::Judged {
                ok: c.conclusion_holds,
                slack: c.loss_ac - c.loss_ab,
                rel: (c.loss_ac - c.loss_ab) / s.initial_loss(),
            },
            _ => Outcome::Skipped,
        },
    });
    summarize("combined_step_ordering", trials, seed, dim, Some(form), outcomes)
}

/// `verify` command payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub trials: usize,
    pub seed: u64,
    pub threshold_form: ThresholdForm,
    pub inner_product: HarnessReport,
    pub combined_step: HarnessReport,
    pub violations: usize,
}

pub const HARNESS_DIM: usize = 2;

pub fn verify(trials: usize, seed: u64, form: ThresholdForm) -> VerifyReport {
    let inner_product = run_inner_product_harness(trials, seed, HARNESS_DIM);
    let combined_step = run_combined_step_harness(trials, derive_seed_labeled(seed, "combined-step"), HARNESS_DIM, form);
    VerifyReport {
        trials,
        seed,
        threshold_form: form,
        violations: inner_product.violations + combined_step.violations,
        inner_product,
        combined_step,
    }
}
