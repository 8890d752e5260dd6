//! Pipelines and oracles on planted task sets.

use tag_core::affinity::{average_affinity, matrix_correlation, DiagonalMode, EntrySelection};
use tag_core::bench::{
    read_report, write_report, BenchSpec, Benchmark, BenchmarkReport, ModelSpec, SelectionSpec, METHOD_TAG,
};
use tag_core::data::PlantedSpec;
use tag_core::model::LossKind;
use tag_core::probe::{BatchSource, ProbeSchedule, StepFilter, TrainConfig};
use tag_core::selector::{binomial, SelectionProblem, solve_branch_and_bound, CandidateFilter, TaskGroup};

fn spec(n: usize, clusters: Vec<Vec<usize>>, seed: u64) -> BenchSpec {
    BenchSpec {
        data: PlantedSpec {
            n_tasks: n,
            clusters,
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

fn two_clusters(seed: u64) -> BenchSpec {
    spec(6, vec![vec![0, 1, 2], vec![3, 4, 5]], seed)
}

fn val_mode(mut s: BenchSpec) -> BenchSpec {
    s.schedule = s.schedule.on(BatchSource::Validation);
    s.selection.mode = DiagonalMode::ValidationIncluded;
    s
}

#[test]
fn seed_3_oracle_prefers_the_planted_split() {
    let bench = Benchmark::new(two_clusters(3)).unwrap();
    let ranked = bench.exhaustive_grouping_search(2).unwrap();
    let planted = bench.spec().data.planted_groups();
    let best_split = ranked.iter().find(|e| e.is_partition() && e.grouping.groups.len() == 2).unwrap();
    assert_eq!(best_split.grouping.groups, planted);
    let together = ranked.iter().find(|e| e.grouping.groups == vec![TaskGroup::full(6)]).unwrap();
    assert!(best_split.total_test_loss < together.total_test_loss);
    assert!(ranked.iter().all(|e| e.check_total()));
    assert_eq!(bench.networks_trained(), 63);

    let tag = bench.tag_pipeline(2).unwrap();
    assert_eq!(tag.grouping.groups, planted);
    assert_eq!(tag.training_cost.grouping_runs, 1);
}

#[test]
fn exhaustive_memo_and_budget_monotonicity() {
    let bench = Benchmark::new(spec(4, vec![vec![0, 1], vec![2, 3]], 8)).unwrap();
    let mut last = f64::INFINITY;
    for b in 1..=4 {
        let best = bench.exhaustive_grouping_search(b).unwrap().swap_remove(0);
        assert_eq!(bench.networks_trained(), 15);
        assert!(best.total_test_loss <= last);
        last = best.total_test_loss;
    }
    let again = Benchmark::new(spec(4, vec![vec![0, 1], vec![2, 3]], 8)).unwrap();
    assert_eq!(again.exhaustive_grouping_search(2).unwrap(), bench.exhaustive_grouping_search(2).unwrap());
}

#[test]
fn two_tasks_one_cluster_group_together() {
    let mut s = spec(2, vec![vec![0, 1]], 6);
    s.selection.budget = 1;
    let bench = Benchmark::new(s).unwrap();
    let tag = bench.tag_pipeline(1).unwrap();
    assert_eq!(tag.grouping.groups, vec![TaskGroup::full(2)]);
    let alone: f64 = (0..2)
        .map(|t| bench.train_group(TaskGroup::from_ids(&[t])).unwrap().test_loss[0])
        .sum();
    assert!(tag.total_test_loss <= alone, "{} vs {alone}", tag.total_test_loss);
}

#[test]
fn full_budget_in_validation_mode_beats_singletons() {
    let bench = Benchmark::new(val_mode(spec(4, vec![vec![0, 1], vec![2, 3]], 2))).unwrap();
    let probe = bench.probe_run().unwrap();
    let problem = SelectionProblem::from_affinity(&probe.affinity, 4, &CandidateFilter::all()).unwrap();
    let sol = solve_branch_and_bound(&problem).unwrap();
    let singletons: f64 = (0..4).map(|t| probe.affinity.get(t, t).unwrap()).fold(0.0, |a, v| a + v);
    assert!(sol.total_score >= singletons);
}

#[test]
fn pairwise_baseline_costs_and_estimates() {
    let bench = Benchmark::new(two_clusters(3)).unwrap();
    let hoa = bench.hoa_baseline_grouping(2).unwrap();
    assert_eq!(hoa.training_cost.grouping_runs, binomial(6, 2) as usize);
    let tag = bench.tag_pipeline(2).unwrap();
    assert_eq!(tag.training_cost.grouping_runs, 1);
    assert!(hoa.training_cost.grouping_steps >= 15 * tag.training_cost.grouping_steps);

    let small = Benchmark::new(val_mode(spec(3, vec![vec![0, 1, 2]], 1))).unwrap();
    assert_eq!(small.hoa_baseline_grouping(3).unwrap().training_cost.grouping_runs, 6);
}

#[test]
fn cosine_matrix_is_symmetric() {
    let bench = Benchmark::new(two_clusters(5)).unwrap();
    let probe = bench.probe_run().unwrap();
    assert!(probe.cosine.asymmetry() < 1e-12);
    assert!(probe.affinity.asymmetry() > 0.0);
    let cs = bench.cs_baseline_grouping(2).unwrap();
    assert!(cs.check_total());
}

#[test]
fn stride_and_batch_source_preserve_affinity() {
    let bench = Benchmark::new(two_clusters(3)).unwrap();
    let probe = bench.probe_run().unwrap();
    let dense = average_affinity(&probe.samples, 6, StepFilter::All, DiagonalMode::TrainExcluded).unwrap();
    let strided = average_affinity(&probe.samples, 6, StepFilter::EveryK(10), DiagonalMode::TrainExcluded).unwrap();
    let r = matrix_correlation(&dense, &strided, EntrySelection::OffDiagonal).unwrap();
    assert!(r >= 0.95, "stride correlation {r}");

    let val = Benchmark::new(val_mode(two_clusters(3))).unwrap();
    let zv = val.probe_run().unwrap().affinity.with_diagonal_mode(DiagonalMode::TrainExcluded);
    let r = matrix_correlation(&dense, &zv, EntrySelection::OffDiagonal).unwrap();
    assert!(r >= 0.9, "train/validation correlation {r}");
}

#[test]
fn reports_round_trip_and_check_provenance() {
    let bench = Benchmark::new(spec(3, vec![vec![0, 1], vec![2]], 4)).unwrap();
    let report = bench.report(&[1, 2], 100_000).unwrap();
    report.verify().unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_report(&report, dir.path()).unwrap();
    let back = read_report(dir.path()).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.render().unwrap(), report.render().unwrap());
    let rerun = Benchmark::new(spec(3, vec![vec![0, 1], vec![2]], 4)).unwrap().report(&[1, 2], 100_000).unwrap();
    assert_eq!(rerun.render().unwrap(), report.render().unwrap());

    let single = BenchmarkReport::single(3, report.methods[METHOD_TAG][0].clone());
    single.verify().unwrap();
    assert_eq!(single.plot_csv().lines().count(), 2);

    let mut tampered = report.clone();
    tampered.methods.get_mut(METHOD_TAG).unwrap()[0].fairness_hash = "0".repeat(64);
    assert!(tampered.verify().is_err());
    assert!(write_report(&tampered, dir.path()).is_err());

    let mut other = spec(3, vec![vec![0, 1], vec![2]], 4);
    other.trainer.steps = 100;
    let other = Benchmark::new(other).unwrap().report(&[1], 100_000).unwrap();
    assert!(BenchmarkReport::merge(vec![report.clone(), other]).is_err());
    assert_eq!(BenchmarkReport::merge(vec![report.clone(), report.clone()]).unwrap(), report);
}
