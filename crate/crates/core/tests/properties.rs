mod common;

use common::*;
use droop_core::criteria::{self, CriterionVerdict, SubsetPolicy};
use droop_core::equilibrium::{residual_norm, single_inverter_equilibria};
use droop_core::linalg::sym_eigen;
use droop_core::linearization::{eigen_stability, full_jacobian, lyapunov_derivative, stability_of, Mode, Verdict};
use droop_core::random::{random_instance, random_single_inverter, Instance};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64) -> Instance {
    random_instance(&mut ChaCha8Rng::seed_from_u64(seed), 6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jacobian_matches_finite_differences(seed in any::<u64>()) {
        let inst = instance(seed);
        let an = analysis(&inst);
        let j = full_jacobian(&an.lin);
        let fd = fd_jacobian(&inst.eq, &inst.params, &inst.net, &an.lin.nodes);
        prop_assert!(relative_deviation(&j, &fd) < 1e-6);
        if an.lin.mode() == Mode::Free {
            let m = an.lin.len();
            let mut shift = DVector::zeros(3 * m);
            shift.rows_mut(0, m).fill(1.0);
            prop_assert!((&j * shift).amax() < 1e-12);
        }
    }

    #[test]
    fn uniform_phase_shift_changes_nothing(seed in any::<u64>(), c in -3.0f64..3.0) {
        let mut inst = instance(seed);
        prop_assume!(inst.eq.slack.is_none());
        let before = stability_of(&inst.eq, &inst.params, &inst.net).unwrap();
        inst.eq.state = inst.eq.state.shifted(c);
        prop_assert!(residual_norm(&inst.eq.state, &inst.params, &inst.net, None).unwrap() < 1e-8);
        let after = stability_of(&inst.eq, &inst.params, &inst.net).unwrap();
        prop_assert_eq!(before.verdict, after.verdict);
        for (a, b) in before.eigenvalues.iter().zip(&after.eigenvalues) {
            prop_assert!((a - b).norm() < 1e-8 * (1.0 + a.norm()));
        }
    }

    #[test]
    fn reduced_definiteness_predicts_eigen_verdict(seed in any::<u64>()) {
        let inst = instance(seed);
        let an = analysis(&inst);
        let report = eigen_stability(&full_jacobian(&an.lin), an.lin.mode()).unwrap();
        if let Some(prediction) = reduced_prediction(&an.lin) {
            prop_assert!(agrees(prediction, &report), "{:?} vs {:?}", prediction, report.verdict);
        }
    }

    #[test]
    fn both_schur_forms_agree_with_reduced_matrix(seed in any::<u64>()) {
        let inst = instance(seed);
        let an = analysis(&inst);
        let i = criteria::lemma2_i(&an);
        let ii = criteria::lemma2_ii(&an);
        let decided = [&i, &ii].iter().all(|r| r.margin.is_none_or(|m| m.abs() > 1e-8));
        prop_assume!(decided);
        prop_assert_eq!(i.verdict, ii.verdict);
        if let Some(prediction) = reduced_prediction(&an.lin) {
            prop_assert_eq!(i.verdict == CriterionVerdict::Satisfied, prediction);
        }
    }

    #[test]
    fn sufficient_criteria_are_sound(seed in any::<u64>()) {
        let inst = instance(seed);
        let v = verdicts(&inst);
        let report = stability_of(&inst.eq, &inst.params, &inst.net).unwrap();
        for name in ["cor4", "cor5", "lemma2_I", "lemma2_II"] {
            if verdict_of(&v, name) == CriterionVerdict::Satisfied {
                prop_assert_eq!(report.verdict, Verdict::Stable, "{} certified an unstable point", name);
            }
        }
        if verdict_of(&v, "cor2") == CriterionVerdict::Satisfied {
            prop_assert_eq!(report.verdict, Verdict::Unstable);
        }
        if verdict_of(&v, "cor1") == CriterionVerdict::Satisfied {
            let an = analysis(&inst);
            prop_assert!(sym_eigen(&an.lin.h_tilde).0.last().copied().unwrap() < 0.0);
        }
    }

    #[test]
    fn exhaustive_subset_search_finds_the_best_indicator(seed in any::<u64>()) {
        let inst = instance(seed);
        let an = analysis(&inst);
        let r = criteria::cor2_instability(&an, &SubsetPolicy::default());
        let ht = &an.lin.h_tilde;
        let m = ht.nrows();
        let best = (1u32..1 << m)
            .map(|mask| {
                let s: Vec<usize> = (0..m).filter(|&k| mask >> k & 1 == 1).collect();
                s.iter().flat_map(|&a| s.iter().map(move |&b| ht[(a, b)])).sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((r.margin.unwrap() - best).abs() < 1e-9 * (1.0 + best.abs()));
    }

    #[test]
    fn lyapunov_function_decreases(seed in any::<u64>(), dir in prop::collection::vec(-1.0f64..1.0, 18)) {
        let inst = instance(seed);
        let an = analysis(&inst);
        let m = an.lin.len();
        let x = DVector::from_iterator(3 * m, dir.iter().copied().cycle().take(3 * m));
        let closed = lyapunov_derivative(&an.lin, &x);
        let matrix = lyapunov_rate_from_matrices(&an.lin, &x);
        prop_assert!((closed - matrix).abs() < 1e-9 * (1.0 + closed.abs()));
        prop_assert!(matrix <= 1e-12 * (1.0 + x.norm_squared()));
    }

    #[test]
    fn quartic_matches_scalar_root_search(seed in any::<u64>()) {
        let p = random_single_inverter(&mut ChaCha8Rng::seed_from_u64(seed));
        let quartic = single_inverter_equilibria(&p).unwrap();
        let oracle: Vec<(f64, f64)> = single_inverter_oracle(&p)
            .into_iter()
            .filter(|&(d, e)| single_inverter_residual(&p, d, e) < 1e-8)
            .collect();
        prop_assert_eq!(quartic.len(), oracle.len());
        for eq in &quartic {
            let (d, e) = (eq.state.delta[0], eq.state.e[0]);
            prop_assert!(oracle.iter().any(|&(od, oe)| angle_distance(d, od) < 1e-6 && (e - oe).abs() < 1e-6));
        }
    }
}

#[test]
fn free_mode_excludes_exactly_one_zero_mode() {
    for seed in 0..40 {
        let inst = instance(seed);
        let an = analysis(&inst);
        let report = eigen_stability(&full_jacobian(&an.lin), an.lin.mode()).unwrap();
        assert_eq!(report.zero_mode_excluded, an.lin.mode() == Mode::Free);
        assert!(report.diagnostic.is_none());
    }
}
