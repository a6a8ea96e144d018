use ddln_core::conservation::{
    check_assumption_a, conservation_defect, m_bound_violations, m_matrix, min_layer_permutation, reconstruct_theta,
    reconstruction_error, sigma_lower_bound, sign_census,
};
use ddln_core::experiments::random_problem;
use ddln_core::flow::{integrate, StepController};
use ddln_core::model::{init_layers, InitScheme};
use proptest::prelude::*;

#[test]
fn random_inits_satisfy_assumption_a() {
    let mut violations = 0;
    for seed in 0..1000 {
        let layers = 2 + (seed % 4) as usize;
        let s = init_layers(8, layers, &InitScheme::Uniform { scale: 1.0 }, seed).unwrap();
        if !check_assumption_a(&s).holds() {
            violations += 1;
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn zero_first_layer_puts_every_minimum_in_layer_one() {
    for seed in 0..50 {
        let s = init_layers(8, 6, &InitScheme::ZeroFirstLayer { scale: 1.4 }, seed).unwrap();
        let idx = check_assumption_a(&s);
        assert!(idx.holds());
        assert!(idx.k.iter().all(|&k| k == 0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn invariants_hold_along_runs(seed in 0u64..10_000, layers in 2usize..=5, dim in 1usize..=8) {
        let loss = random_problem(10, dim, seed).unwrap();
        let s = init_layers(dim, layers, &InitScheme::Uniform { scale: 1.0 }, seed).unwrap();
        let traj = integrate(&s, &loss, &StepController::fixed(1e-3, 3.0)).unwrap();
        let idx = check_assumption_a(&s);
        prop_assume!(idx.holds());

        let defect = conservation_defect(&traj);
        prop_assert!(defect.iter().all(|&e| e <= 1e-6));
        prop_assert!(sign_census(&traj, &idx).verified());
        prop_assert!(reconstruction_error(&traj).unwrap() <= 1e-6);
        let bound = sigma_lower_bound(&s, &idx).unwrap();
        prop_assert_eq!(m_bound_violations(&traj, &bound, 1e-9), 0);
    }

    #[test]
    fn reconstruction_is_exact_at_the_start(seed in 0u64..10_000, layers in 2usize..=6) {
        let s = init_layers(5, layers, &InitScheme::Uniform { scale: 2.0 }, seed).unwrap();
        let idx = check_assumption_a(&s);
        let perm = min_layer_permutation(&s, &idx).unwrap();
        let theta = reconstruct_theta(&perm.first_layer(&s), &perm).unwrap();
        let direct = s.theta();
        for i in 0..5 {
            prop_assert!((theta[i] - direct[i]).abs() <= 1e-12 * direct[i].abs().max(1e-12));
        }
        // the permuted stack multiplies out to the same theta
        let v = perm.permute(&s).theta();
        for i in 0..5 {
            prop_assert!((v[i] - direct[i]).abs() <= 1e-15 * direct[i].abs());
        }
    }

    #[test]
    fn m_dominates_sigma_at_the_start(seed in 0u64..10_000, layers in 2usize..=6) {
        let s = init_layers(6, layers, &InitScheme::Uniform { scale: 1.0 }, seed).unwrap();
        let idx = check_assumption_a(&s);
        let bound = sigma_lower_bound(&s, &idx).unwrap();
        let m = m_matrix(&s);
        for (mi, b) in m.iter().zip(&bound.per_coordinate) {
            prop_assert!(*mi >= *b);
            prop_assert!(*b >= bound.sigma);
        }
        prop_assert!(bound.sigma > 0.0);
    }
}
