//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criterion 4 is a known-open result. It is reported as FAIL but only fails
//! the process when `TAG_ACCEPTANCE_STRICT=1`.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tag_core::affinity::{average_affinity, matrix_correlation, DiagonalMode, EntrySelection};
use tag_core::bench::{BenchSpec, Benchmark, ModelSpec, SelectionSpec, METHOD_HOA, METHOD_TAG};
use tag_core::data::{build_planted_taskset, PlantedSpec, PlantedTaskset};
use tag_core::model::{Architecture, Batch, LossKind, MultiTaskModel, ParamVector, TaskSpec};
use tag_core::probe::{reprobe_trajectory, train_with_probe, BatchSource, ProbeSchedule, StepFilter, TrainConfig, TrainingData};
use tag_core::selector::{solve_branch_and_bound, solve_exhaustive_small, CandidateFilter, SelectionProblem};
use tag_core::theory::{
    counterexample_scenario, prop1_cos_threshold, run_inner_product_harness, verify, GradientNorm, ThresholdForm, COUNTEREXAMPLE_C,
    COUNTEREXAMPLE_C_ALT, COUNTEREXAMPLE_ETA, COUNTEREXAMPLE_REFERENCE, HARNESS_DIM,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn counterexample_table() -> Outcome {
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_tag"))
        .args(["counterexample", "--json"])
        .output()
        .expect("binary runs");
    let elapsed = t0.elapsed();
    if out.status.code() != Some(0) {
        return outcome(false, format!("exit status {:?}", out.status.code()));
    }
    let v: serde_json::Value = match serde_json::from_slice(&out.stdout) {
        Ok(v) => v,
        Err(e) => return outcome(false, format!("unparseable output: {e}")),
    };
    let mut worst = 0.0f64;
    let mut values = Vec::new();
    for (label, reference) in COUNTEREXAMPLE_REFERENCE {
        let x = v[label].as_f64().unwrap_or(f64::NAN);
        worst = worst.max((x - reference).abs());
        values.push(x);
    }
    let initial_exact = values[0] == 7.0;
    let single = values[1] < values[2];
    let combined = values[4] < values[3];
    let pass = initial_exact && worst <= 0.03 && single && combined && elapsed < Duration::from_secs(1);
    outcome(
        pass,
        format!(
            "initial {} exact={initial_exact}, max deviation {worst:.4}, b<c single {single}, a+c<a+b combined {combined}, {}",
            values[0],
            secs(elapsed)
        ),
    )
}

fn threshold_consistency() -> Outcome {
    let t0 = Instant::now();
    let thr = prop1_cos_threshold(1.0, 10.0, COUNTEREXAMPLE_ETA, ThresholdForm::Proof).unwrap();
    let orig = counterexample_scenario(COUNTEREXAMPLE_C, GradientNorm::Unit);
    let alt = counterexample_scenario(COUNTEREXAMPLE_C_ALT, GradientNorm::Unit);
    let cos_orig = cosine(&orig.g_a, &orig.g_c);
    let cos_alt = cosine(&alt.g_a, &alt.g_c);
    let exact = (thr - (-0.975)).abs() <= 1e-12;
    let pass = exact && cos_alt <= thr && cos_orig > thr && t0.elapsed() < Duration::from_secs(1);
    outcome(
        pass,
        format!("threshold {thr}, cos alt {cos_alt:.6} <= thr, cos original {cos_orig:.6} > thr"),
    )
}

fn inner_product_harness() -> Outcome {
    let t0 = Instant::now();
    let r = run_inner_product_harness(10_000, 42, HARNESS_DIM);
    let elapsed = t0.elapsed();
    let held = r.evaluated - r.violations;
    let pass = r.evaluated == 10_000 && r.violations == 0 && elapsed < Duration::from_secs(10);
    outcome(
        pass,
        format!("{held}/{} held, min slack {:.3e}, {}", r.evaluated, r.min_slack, secs(elapsed)),
    )
}

fn combined_step_harness() -> Outcome {
    let t0 = Instant::now();
    let proof = verify(10_000, 42, ThresholdForm::Proof).combined_step;
    let statement = verify(10_000, 42, ThresholdForm::Statement).combined_step;
    let elapsed = t0.elapsed();
    let held = proof.evaluated - proof.violations;
    let pass = proof.evaluated == 10_000 && proof.violations == 0 && elapsed < Duration::from_secs(10);
    outcome(
        pass,
        format!(
            "{held}/{} held (threshold form proof), min relative slack {:.4}, first violating trials {:?}; \
             statement form {}/{} held; {}",
            proof.evaluated,
            proof.min_relative_slack,
            proof.violating_trials,
            statement.evaluated - statement.violations,
            statement.evaluated,
            secs(elapsed)
        ),
    )
}

fn random_matrix(n: usize, mode: DiagonalMode, rng: &mut ChaCha8Rng) -> tag_core::affinity::AffinityMatrix {
    let coarse = rng.random::<bool>();
    let values = (0..n)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    Some(if coarse { (v * 4.0).round() / 4.0 } else { v })
                })
                .collect()
        })
        .collect();
    tag_core::affinity::AffinityMatrix::from_values(values, mode).unwrap()
}

fn solver_oracle() -> Outcome {
    let t0 = Instant::now();
    let (mut equal, mut identical) = (0, 0);
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + seed);
        let n = [3, 4, 5][seed as usize % 3];
        let b = [1, 2, 3][(seed as usize / 3) % 3];
        let mode = if rng.random::<bool>() { DiagonalMode::TrainExcluded } else { DiagonalMode::ValidationIncluded };
        let z = random_matrix(n, mode, &mut rng);
        let p = SelectionProblem::from_affinity(&z, b, &CandidateFilter::all()).unwrap();
        let bb = solve_branch_and_bound(&p).unwrap();
        let ex = solve_exhaustive_small(&p).unwrap();
        if bb.total_score == ex.total_score {
            equal += 1;
        }
        if bb.key() == ex.key() && bb.serving == ex.serving {
            identical += 1;
        }
    }
    let elapsed = t0.elapsed();
    outcome(
        equal == 200 && identical == 200 && elapsed < Duration::from_secs(30),
        format!("equal totals {equal}/200, identical solutions {identical}/200, {}", secs(elapsed)),
    )
}

fn small_planted(n: usize, clusters: Vec<Vec<usize>>, seed: u64) -> PlantedTaskset {
    build_planted_taskset(
        &PlantedSpec {
            n_tasks: n,
            clusters,
            feature_dim: 6,
            train_samples: 128,
            validation_samples: 64,
            test_samples: 64,
            noise: 0.1,
            seed,
        },
        LossKind::MlpRegression,
    )
    .unwrap()
}

fn mlp(n: usize, seed: u64) -> MultiTaskModel {
    MultiTaskModel::init(Architecture::Mlp { input_dim: 6, width: 3 }, n, 0.3, seed).unwrap()
}

fn weight_invariance() -> Outcome {
    let d = small_planted(4, vec![vec![0, 1], vec![2, 3]], 5);
    let data = TrainingData {
        train: &d.train,
        validation: &d.validation,
    };
    let mut config = TrainConfig::new(0.05, 60, 16, 5).with_schedule(ProbeSchedule::every(1));
    config.record_trajectory = true;
    let init = mlp(4, 5);
    let out = train_with_probe(&d.tasks, init.clone(), &data, &config).unwrap();
    let mut worst = 0.0f64;
    let mut compared = 0;
    for target in 0..4 {
        for c in [0.01, 1.0, 100.0] {
            let mut tasks = d.tasks.clone();
            tasks.set_weight(target, c).unwrap();
            let scaled = reprobe_trajectory(&tasks, &init, &out.trajectory, &data, &config).unwrap();
            for (a, b) in out.samples.iter().zip(&scaled) {
                if a.target == target && a.source != target {
                    let (x, y) = (a.value.unwrap(), b.value.unwrap());
                    worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE));
                    compared += 1;
                }
            }
        }
    }
    outcome(worst <= 1e-12, format!("{compared} entries compared, max relative change {worst:.2e}"))
}

fn trajectory_bits(d: &PlantedTaskset, config: &TrainConfig) -> Vec<u64> {
    let data = TrainingData {
        train: &d.train,
        validation: &d.validation,
    };
    let out = train_with_probe(&d.tasks, mlp(3, 9), &data, config).unwrap();
    out.trajectory
        .iter()
        .flat_map(|s| {
            let mut b = s.shared.bits();
            s.heads.iter().for_each(|h| b.extend(h.bits()));
            b
        })
        .collect()
}

fn non_interference() -> Outcome {
    let d = small_planted(3, vec![vec![0, 1, 2]], 9);
    let mut off = TrainConfig::new(0.05, 80, 16, 9);
    off.record_trajectory = true;
    let base = trajectory_bits(&d, &off);
    let schedules = [
        ProbeSchedule::every(1),
        ProbeSchedule::every(10),
        ProbeSchedule::window(0.25, 0.5),
        ProbeSchedule::every(1).on(BatchSource::Validation),
    ];
    let same = schedules
        .iter()
        .filter(|s| trajectory_bits(&d, &off.clone().with_schedule(**s)) == base)
        .count();
    outcome(same == schedules.len(), format!("{same}/{} probed trajectories bit-identical", schedules.len()))
}

const FD_H: f64 = 1e-5;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[k] += FD_H;
            m[k] -= FD_H;
            (f(&p) - f(&m)) / (2.0 * FD_H)
        })
        .collect()
}

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

fn gradient_error(kind: LossKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, batch, spec) = if kind == LossKind::Quadratic {
        let dim = rng.random_range(2..=6);
        let alpha = rng.random_range(0.1..1.0);
        let beta = alpha * rng.random_range(1.5..50.0);
        let optimum = ParamVector::new(gauss(&mut rng, dim)).unwrap();
        let q = tag_core::model::build_quadratic_task(alpha, beta, dim, optimum, tag_core::model::Rotation::Random { seed }, seed)
            .unwrap();
        let arch = Architecture::Quadratic { tasks: vec![q] };
        let model = MultiTaskModel::new(arch, ParamVector::new(gauss(&mut rng, dim)).unwrap(), vec![ParamVector::zeros(0)]).unwrap();
        (model, Batch::empty_for(1), TaskSpec::new(0, kind))
    } else {
        let input_dim = rng.random_range(1..=6);
        let width = rng.random_range(1..=4);
        let rows = rng.random_range(1..=10);
        let n = rng.random_range(1..=3);
        let arch = if kind == LossKind::MlpRegression {
            Architecture::Mlp { input_dim, width }
        } else {
            Architecture::Linear { input_dim, width }
        };
        let model = MultiTaskModel::init(arch, n, 0.8, seed).unwrap();
        let inputs = gauss(&mut rng, rows * input_dim);
        let targets = (0..n).map(|_| gauss(&mut rng, rows)).collect();
        let batch = Batch::new(rows, input_dim, inputs, targets).unwrap();
        let task = rng.random_range(0..n);
        (model, batch, TaskSpec::new(task, kind))
    };
    let spec = spec.with_weight(rng.random_range(0.1..3.0));
    let shared = model.shared().as_slice().to_vec();
    let analytic = model.shared_gradient(&batch, &spec).unwrap();
    let numeric = central_difference(
        |x| model.task_loss_with_shared(&ParamVector::new(x.to_vec()).unwrap(), &batch, &spec).unwrap(),
        &shared,
    );
    let mut err = rel_err(analytic.as_slice(), &numeric);
    let head = model.head(spec.id).unwrap().as_slice().to_vec();
    if !head.is_empty() {
        let analytic = model.head_gradient(&batch, &spec).unwrap();
        let numeric = central_difference(
            |x| {
                let mut heads = model.heads().to_vec();
                heads[spec.id] = ParamVector::new(x.to_vec()).unwrap();
                MultiTaskModel::new(model.architecture().clone(), model.shared().clone(), heads)
                    .unwrap()
                    .task_loss(&batch, &spec)
                    .unwrap()
            },
            &head,
        );
        err = err.max(rel_err(analytic.as_slice(), &numeric));
    }
    err
}

fn gradient_checks() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, kind) in [
        ("linear", LossKind::LinearRegression),
        ("mlp", LossKind::MlpRegression),
        ("quadratic", LossKind::Quadratic),
    ] {
        let errs: Vec<f64> = (0..100).map(|s| gradient_error(kind, 500 + s)).collect();
        let ok = errs.iter().filter(|e| **e <= 1e-6).count();
        let worst = errs.iter().copied().fold(0.0, f64::max);
        pass &= ok == 100;
        parts.push(format!("{name} {ok}/100 (max {worst:.1e})"));
    }
    outcome(pass, parts.join(", "))
}

fn planted_spec(seed: u64) -> BenchSpec {
    BenchSpec {
        data: PlantedSpec {
            n_tasks: 6,
            clusters: vec![vec![0, 1, 2], vec![3, 4, 5]],
            feature_dim: 8,
            train_samples: 256,
            validation_samples: 128,
            test_samples: 512,
            noise: 0.1,
            seed,
        },
        model: ModelSpec {
            kind: LossKind::LinearRegression,
            width: 1,
            init_scale: 0.3,
        },
        trainer: TrainConfig::new(0.05, 400, 32, seed),
        schedule: ProbeSchedule::every(1),
        selection: SelectionSpec {
            budget: 2,
            mode: DiagonalMode::TrainExcluded,
            max_group_size: None,
            latency_limit: None,
        },
        random_samples: 200,
    }
}

fn planted_recovery() -> Outcome {
    let t0 = Instant::now();
    let (mut recovered, mut beats_random, mut split_optimal, mut cover_optimal) = (0, 0, 0, 0);
    let mut misses = Vec::new();
    for seed in 0..20u64 {
        let bench = Benchmark::new(planted_spec(seed)).unwrap();
        let planted = bench.spec().data.planted_groups();
        let tag = bench.tag_pipeline(2).unwrap();
        if tag.grouping.groups == planted {
            recovered += 1;
        }
        let rg = bench.random_grouping(2, 100_000).unwrap();
        if tag.total_test_loss <= rg.trained_loss_mean {
            beats_random += 1;
        } else {
            misses.push(seed);
        }
        let ranked = bench.exhaustive_grouping_search(2).unwrap();
        let best_split = ranked.iter().find(|e| e.is_partition() && e.grouping.groups.len() == 2).unwrap();
        if best_split.grouping.groups == planted {
            split_optimal += 1;
        }
        if ranked[0].grouping.groups == planted {
            cover_optimal += 1;
        }
    }
    let elapsed = t0.elapsed();
    let pass = recovered >= 16 && beats_random >= 18 && split_optimal >= 18 && elapsed < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "TAG recovers planted {recovered}/20, TAG <= random-grouping expectation {beats_random}/20 (misses {misses:?}), \
             planted is the best 2-split {split_optimal}/20 (best of all covers {cover_optimal}/20), {}",
            secs(elapsed)
        ),
    )
}

fn ablations() -> Outcome {
    let bench = Benchmark::new(planted_spec(3)).unwrap();
    let probe = bench.probe_run().unwrap();
    let dense = average_affinity(&probe.samples, 6, StepFilter::All, DiagonalMode::TrainExcluded).unwrap();
    let strided = average_affinity(&probe.samples, 6, StepFilter::EveryK(10), DiagonalMode::TrainExcluded).unwrap();
    let r_stride = matrix_correlation(&dense, &strided, EntrySelection::OffDiagonal).unwrap();

    let mut val_spec = planted_spec(3);
    val_spec.schedule = val_spec.schedule.on(BatchSource::Validation);
    val_spec.selection.mode = DiagonalMode::ValidationIncluded;
    let val = Benchmark::new(val_spec).unwrap();
    let zv = val.probe_run().unwrap().affinity.with_diagonal_mode(DiagonalMode::TrainExcluded);
    let r_source = matrix_correlation(&dense, &zv, EntrySelection::OffDiagonal).unwrap();
    outcome(
        r_stride >= 0.95 && r_source >= 0.9,
        format!("Pearson stride 1 vs 10 = {r_stride:.4}, train vs validation batches = {r_source:.4}"),
    )
}

fn cost_structure() -> Outcome {
    let bench = Benchmark::new(planted_spec(3)).unwrap();
    let report = bench.report(&[2], 100_000).unwrap();
    let tag = &report.methods[METHOD_TAG][0].training_cost;
    let hoa = &report.methods[METHOD_HOA][0].training_cost;
    outcome(
        tag.grouping_runs == 1 && hoa.grouping_runs == 15,
        format!(
            "TAG {} run(s) / {} steps, HOA {} runs / {} steps",
            tag.grouping_runs, tag.grouping_steps, hoa.grouping_runs, hoa.grouping_steps
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let strict = std::env::var("TAG_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let known_open = [4];
    let criteria: [Criterion; 11] = [
        (1, "counterexample table", counterexample_table),
        (2, "cosine threshold consistency", threshold_consistency),
        (3, "inner-product inequality harness", inner_product_harness),
        (4, "combined-step ordering harness", combined_step_harness),
        (5, "branch-and-bound matches exhaustive oracle", solver_oracle),
        (6, "affinity invariant to target loss weight", weight_invariance),
        (7, "probe non-interference", non_interference),
        (8, "gradient checks", gradient_checks),
        (9, "planted-structure recovery", planted_recovery),
        (10, "schedule and batch-source ablations", ablations),
        (11, "grouping cost structure", cost_structure),
    ];
    let mut fatal = 0;
    for (id, name, run) in criteria {
        let o = run();
        let open = known_open.contains(&id);
        let tag = match (o.pass, open) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known open)",
            (false, false) => "FAIL",
        };
        println!("{tag} criterion {id:>2} {name}: {}", o.detail);
        if !o.pass && (strict || !open) {
            fatal += 1;
        }
    }
    if fatal > 0 {
        println!("{fatal} blocking failure(s)");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
