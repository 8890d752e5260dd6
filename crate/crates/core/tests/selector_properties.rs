//! Branch-and-bound against exhaustive enumeration, and selection invariants.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tag_core::affinity::{AffinityMatrix, DiagonalMode};
use tag_core::selector::{
    solve_branch_and_bound, solve_exhaustive_small, validate_solution, CandidateFilter, SelectionProblem,
};

fn random_matrix(n: usize, mode: DiagonalMode, rng: &mut ChaCha8Rng) -> AffinityMatrix {
    // coarse values make exact ties common, which exercises the tie-break
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
    AffinityMatrix::from_values(values, mode).unwrap()
}

#[test]
fn branch_and_bound_matches_exhaustive_on_200_instances() {
    let mut identical = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = [3, 4, 5][seed as usize % 3];
        let b = [1, 2, 3][(seed as usize / 3) % 3];
        let mode = if rng.random::<bool>() { DiagonalMode::TrainExcluded } else { DiagonalMode::ValidationIncluded };
        let z = random_matrix(n, mode, &mut rng);
        let problem = SelectionProblem::from_affinity(&z, b, &CandidateFilter::all()).unwrap();
        let bb = solve_branch_and_bound(&problem).unwrap();
        let ex = solve_exhaustive_small(&problem).unwrap();
        validate_solution(&problem, &bb).unwrap();
        assert_eq!(bb.total_score, ex.total_score, "seed {seed}");
        if bb.key() == ex.key() && bb.serving == ex.serving {
            identical += 1;
        }
    }
    assert_eq!(identical, 200);
}

fn instance() -> impl Strategy<Value = (usize, bool, u64)> {
    (3usize..=5, any::<bool>(), any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimum_is_nondecreasing_in_budget((n, train, seed) in instance()) {
        let mode = if train { DiagonalMode::TrainExcluded } else { DiagonalMode::ValidationIncluded };
        let z = random_matrix(n, mode, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut last = f64::NEG_INFINITY;
        for b in 1..=n {
            let p = SelectionProblem::from_affinity(&z, b, &CandidateFilter::all()).unwrap();
            let s = solve_branch_and_bound(&p).unwrap();
            prop_assert!(s.total_score >= last);
            last = s.total_score;
        }
    }

    #[test]
    fn shifting_a_target_column_shifts_the_optimum((n, train, seed) in instance(), shift in -2.0f64..2.0, b in 1usize..=3) {
        let mode = if train { DiagonalMode::TrainExcluded } else { DiagonalMode::ValidationIncluded };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random_matrix(n, mode, &mut rng);
        let target = rng.random_range(0..n);
        let shifted = z.map_entries(|_, j, v| if j == target { v + shift } else { v }).unwrap();
        let b = b.min(n);
        let s0 = solve_branch_and_bound(&SelectionProblem::from_affinity(&z, b, &CandidateFilter::all()).unwrap()).unwrap();
        let s1 = solve_branch_and_bound(&SelectionProblem::from_affinity(&shifted, b, &CandidateFilter::all()).unwrap()).unwrap();
        prop_assert!((s1.total_score - s0.total_score - shift).abs() <= 1e-9);
    }

    #[test]
    fn solver_respects_max_group_size((n, train, seed) in instance(), cap in 2usize..=3) {
        let mode = if train { DiagonalMode::TrainExcluded } else { DiagonalMode::ValidationIncluded };
        let z = random_matrix(n, mode, &mut ChaCha8Rng::seed_from_u64(seed));
        let p = SelectionProblem::from_affinity(&z, n.min(3), &CandidateFilter::max_size(cap)).unwrap();
        let s = solve_branch_and_bound(&p).unwrap();
        prop_assert!(s.groups.iter().all(|g| g.len() <= cap));
        prop_assert_eq!(s.total_score, solve_exhaustive_small(&p).unwrap().total_score);
    }
}
