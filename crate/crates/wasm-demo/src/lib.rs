//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export takes plain numbers or strings and returns a JSON string. The
//! `*_json` functions hold the logic and are what the native tests call.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use serde::Serialize;
use tag_core::affinity::{AffinityMatrix, DiagonalMode};
use tag_core::bench::{BenchSpec, Benchmark, ModelSpec, SelectionSpec};
use tag_core::data::PlantedSpec;
use tag_core::model::LossKind;
use tag_core::probe::{ProbeSchedule, TrainConfig};
use tag_core::selector::{solve_branch_and_bound, CandidateFilter, GroupingReport, Provenance, SelectionProblem};
use tag_core::theory::{check_prop1, counterexample_scenario_with, GradientNorm, ThresholdForm, COUNTEREXAMPLE_B};
use wasm_bindgen::prelude::*;

/// Largest task count the planted demo accepts.
pub const DEMO_MAX_TASKS: usize = 8;

#[derive(Serialize)]
struct Explorer {
    eta: f64,
    g_c: [f64; 2],
    affinity_b: Option<f64>,
    affinity_c: Option<f64>,
    loss_ab: f64,
    loss_ac: f64,
    cosine: f64,
    threshold: f64,
    single_prefers_b: bool,
    combined_prefers_b: bool,
}

#[derive(Serialize)]
struct PlantedDemo {
    n: usize,
    planted: Vec<Vec<usize>>,
    affinity: Vec<Vec<Option<f64>>>,
    groups: Vec<Vec<usize>>,
    serving: Vec<usize>,
    total_test_loss: f64,
    all_together_test_loss: f64,
    recovered: bool,
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("value serializes")
}

/// Counterexample loss with a user-chosen `g_c` direction and step size.
pub fn explore_counterexample_json(eta: f64, cx: f64, cy: f64) -> Result<String, String> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err("eta must be positive".into());
    }
    if cx == 0.0 && cy == 0.0 || !cx.is_finite() || !cy.is_finite() {
        return Err("g_c direction must be a finite non-zero vector".into());
    }
    let s = counterexample_scenario_with(eta, COUNTEREXAMPLE_B, [cx, cy], GradientNorm::Unit);
    let check = check_prop1(&s, ThresholdForm::Proof).map_err(|e| e.to_string())?;
    Ok(to_json(&Explorer {
        eta,
        g_c: [cx, cy],
        affinity_b: s.affinity(&s.g_b),
        affinity_c: s.affinity(&s.g_c),
        loss_ab: check.loss_ab,
        loss_ac: check.loss_ac,
        cosine: check.cosine,
        threshold: check.threshold,
        single_prefers_b: s.affinity_ordering(),
        combined_prefers_b: check.loss_ab <= check.loss_ac,
    }))
}

/// Two planted clusters, one probed run, TAG selection at `budget`.
pub fn planted_run_json(n: usize, noise: f64, seed: u64, budget: usize) -> Result<String, String> {
    if !(2..=DEMO_MAX_TASKS).contains(&n) {
        return Err(format!("n must be in 2..={DEMO_MAX_TASKS}"));
    }
    let half = n / 2;
    let spec = BenchSpec {
        data: PlantedSpec {
            n_tasks: n,
            clusters: vec![(0..half).collect(), (half..n).collect()],
            feature_dim: 8,
            train_samples: 256,
            validation_samples: 128,
            test_samples: 256,
            noise,
            seed,
        },
        model: ModelSpec {
            kind: LossKind::LinearRegression,
            width: 1,
            init_scale: 0.3,
        },
        trainer: TrainConfig::new(0.05, 300, 32, seed),
        schedule: ProbeSchedule::every(1),
        selection: SelectionSpec {
            budget,
            mode: DiagonalMode::TrainExcluded,
            max_group_size: None,
            latency_limit: None,
        },
        random_samples: 1,
    };
    let bench = Benchmark::new(spec).map_err(|e| e.to_string())?;
    let tag = bench.tag_pipeline(budget).map_err(|e| e.to_string())?;
    let together = bench.mtl_all().map_err(|e| e.to_string())?;
    let probe = bench.probe_run().map_err(|e| e.to_string())?;
    let planted = bench.spec().data.planted_groups();
    Ok(to_json(&PlantedDemo {
        n,
        planted: planted.iter().map(|g| g.ids()).collect(),
        affinity: probe.affinity.values().clone(),
        groups: tag.grouping.groups.iter().map(|g| g.ids()).collect(),
        serving: tag.grouping.serving.clone(),
        total_test_loss: tag.total_test_loss,
        all_together_test_loss: together.total_test_loss,
        recovered: tag.grouping.groups == planted,
    }))
}

/// Group selection on an affinity matrix given as CSV (`source\target,0,1,…`).
pub fn select_json(csv: &str, budget: usize, validation_mode: bool) -> Result<String, String> {
    let mode = if validation_mode {
        DiagonalMode::ValidationIncluded
    } else {
        DiagonalMode::TrainExcluded
    };
    let z = AffinityMatrix::from_csv(csv, mode).map_err(|e| e.to_string())?;
    if z.n() > DEMO_MAX_TASKS {
        return Err(format!("at most {DEMO_MAX_TASKS} tasks in the demo"));
    }
    let problem = SelectionProblem::from_affinity(&z, budget, &CandidateFilter::all()).map_err(|e| e.to_string())?;
    let sol = solve_branch_and_bound(&problem).map_err(|e| e.to_string())?;
    let none = Provenance {
        seed: None,
        config_hash: None,
        affinity_csv_hash: None,
    };
    Ok(to_json(&GroupingReport::new(&problem, &sol, none)))
}

#[wasm_bindgen]
pub fn explore_counterexample(eta: f64, cx: f64, cy: f64) -> Result<String, JsValue> {
    explore_counterexample_json(eta, cx, cy).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn planted_run(n: usize, noise: f64, seed: u64, budget: usize) -> Result<String, JsValue> {
    planted_run_json(n, noise, seed, budget).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn select_groups(csv: &str, budget: usize, validation_mode: bool) -> Result<String, JsValue> {
    select_json(csv, budget, validation_mode).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;
    use tag_core::theory::{COUNTEREXAMPLE_C, COUNTEREXAMPLE_ETA};

    #[test]
    fn explorer_reproduces_the_inversion() {
        let [cx, cy] = COUNTEREXAMPLE_C;
        let v: Value = serde_json::from_str(&explore_counterexample_json(COUNTEREXAMPLE_ETA, cx, cy).unwrap()).unwrap();
        assert_eq!(v["single_prefers_b"], true);
        assert_eq!(v["combined_prefers_b"], false);
        assert!(explore_counterexample_json(0.09, 0.0, 0.0).is_err());
        assert!(explore_counterexample_json(-1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn selection_on_hand_instance() {
        let csv = "source\\target,0,1,2\n0,,0.8,-0.6\n1,0.9,,-0.2\n2,-0.5,-0.4,\n";
        let v: Value = serde_json::from_str(&select_json(csv, 2, false).unwrap()).unwrap();
        assert!((v["total_score"].as_f64().unwrap() - 1.5).abs() < 1e-12);
        assert!(select_json("garbage", 2, false).is_err());
    }

    #[test]
    fn planted_demo_runs() {
        let v: Value = serde_json::from_str(&planted_run_json(4, 0.1, 3, 2).unwrap()).unwrap();
        assert_eq!(v["groups"].as_array().unwrap().len(), 2);
        assert!(v["total_test_loss"].as_f64().unwrap() <= v["all_together_test_loss"].as_f64().unwrap());
        assert!(planted_run_json(1, 0.1, 3, 1).is_err());
    }
}
