//! Independent reference computations shared by the integration suites.
#![allow(dead_code)]

use std::f64::consts::PI;

use droop_core::criteria::{self, Analysis, CriterionVerdict, SubsetPolicy};
use droop_core::equilibrium::{Equilibrium, SingleInverterParams};
use droop_core::grid::GridNetwork;
use droop_core::linalg::Definiteness;
use droop_core::linearization::{
    definiteness_on_subspace, full_jacobian, lyapunov_matrix, reduced_jacobian, LinearizedSystem, StabilityReport,
};
use droop_core::model::{vector_field, InverterParams, SystemState};
use droop_core::random::Instance;
use nalgebra::{DMatrix, DVector};

/// Central differences of the vector field over the dynamic coordinates,
/// in `(delta, omega, E)` block order.
pub fn fd_jacobian(eq: &Equilibrium, params: &InverterParams, net: &GridNetwork, nodes: &[usize]) -> DMatrix<f64> {
    let m = nodes.len();
    let n = net.len();
    let base = eq.state.to_vec();
    let coord = |block: usize, k: usize| block * n + nodes[k];
    let eval = |y: &[f64]| -> Vec<f64> {
        let f = vector_field(&SystemState::from_slice(y), params, net, eq.slack)
            .unwrap()
            .to_vec();
        (0..3 * m).map(|r| f[coord(r / m, r % m)]).collect()
    };
    let mut j = DMatrix::zeros(3 * m, 3 * m);
    for c in 0..3 * m {
        let i = coord(c / m, c % m);
        let h = 1e-6 * base[i].abs().max(1.0);
        let (mut up, mut down) = (base.clone(), base.clone());
        up[i] += h;
        down[i] -= h;
        let (fu, fd) = (eval(&up), eval(&down));
        for r in 0..3 * m {
            j[(r, c)] = (fu[r] - fd[r]) / (2.0 * h);
        }
    }
    j
}

/// Largest entrywise deviation relative to the Jacobian's scale.
pub fn relative_deviation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / a.amax().max(1.0)
}

/// Verdict predicted by the reduced symmetric matrix: negative definite on
/// the relevant subspace means stable, not negative semidefinite means
/// unstable, anything in between is undecided.
pub fn reduced_prediction(lin: &LinearizedSystem) -> Option<bool> {
    match definiteness_on_subspace(&reduced_jacobian(lin).unwrap(), lin.reduced_subspace()) {
        Definiteness::NegativeDefinite => Some(true),
        Definiteness::IndefiniteOrPositive => Some(false),
        Definiteness::NegativeSemidefiniteOnly => None,
    }
}

/// Whether an eigenvalue verdict agrees with a definiteness prediction.
pub fn agrees(prediction: bool, report: &StabilityReport) -> bool {
    use droop_core::linearization::Verdict;
    match prediction {
        true => report.verdict == Verdict::Stable,
        false => report.verdict == Verdict::Unstable,
    }
}

/// `x^T (P J + J^T P) x`, the Lyapunov derivative from the matrices.
pub fn lyapunov_rate_from_matrices(lin: &LinearizedSystem, x: &DVector<f64>) -> f64 {
    let p = lyapunov_matrix(lin);
    let j = full_jacobian(lin);
    let sym = &p * &j + j.transpose() * &p;
    (x.transpose() * sym * x)[(0, 0)]
}

/// Criterion verdicts of one instance, keyed as in `evaluate_all`.
pub fn verdicts(inst: &Instance) -> Vec<(String, CriterionVerdict)> {
    criteria::evaluate_all(&inst.eq, &inst.params, &inst.net, &SubsetPolicy::default())
        .unwrap()
        .into_iter()
        .map(|r| (r.name, r.verdict))
        .collect()
}

pub fn verdict_of(list: &[(String, CriterionVerdict)], name: &str) -> CriterionVerdict {
    list.iter().find(|(n, _)| n == name).map(|(_, v)| *v).unwrap()
}

pub fn analysis(inst: &Instance) -> Analysis<'_> {
    Analysis::new(&inst.eq, &inst.params, &inst.net).unwrap()
}

/// Single-inverter equilibria found without the quartic: for each branch of
/// `delta` the voltage balance is a scalar function of `E`, scanned on a
/// dense grid and refined by bisection. Returns `(delta, E)` pairs.
pub fn single_inverter_oracle(p: &SingleInverterParams) -> Vec<(f64, f64)> {
    let target = p.pd + p.omega_d / p.kappa;
    let coupling = p.b * p.e_hat;
    let e_min = (target.abs() / coupling).max(1e-9);
    // voltage balance chi B E^2 + E (1 - chi B E_hat cos) = Ed + chi Qd caps E
    let e_max = e_min + 1.0 + p.ed + p.chi * p.qd.abs() + p.e_hat + 1.0 / (p.chi * p.b);
    let mut out = Vec::new();
    for branch in [1.0, -1.0] {
        let delta_of = |e: f64| {
            let s = (target / (coupling * e)).clamp(-1.0, 1.0);
            if branch > 0.0 {
                s.asin()
            } else {
                PI - s.asin()
            }
        };
        let g = |e: f64| {
            let d = delta_of(e);
            let q = p.b * e * (e - p.e_hat * d.cos());
            -e + p.ed - p.chi * (q - p.qd)
        };
        const STEPS: usize = 20_000;
        // quadratic spacing resolves the square-root behaviour at e_min
        let at = |k: usize| e_min + (e_max - e_min) * (k as f64 / STEPS as f64).powi(2);
        let mut prev = (at(0), g(at(0)));
        for k in 1..=STEPS {
            let e = at(k);
            let v = g(e);
            if v == 0.0 || prev.1 * v < 0.0 {
                let (mut lo, mut hi) = (prev.0, e);
                let mut glo = prev.1;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let gm = g(mid);
                    if gm == 0.0 {
                        lo = mid;
                        hi = mid;
                        break;
                    }
                    if glo * gm < 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                        glo = gm;
                    }
                }
                let e = 0.5 * (lo + hi);
                out.push((delta_of(e), e));
            }
            prev = (e, v);
        }
    }
    // both branches meet at e_min when the root sits exactly there
    out.dedup_by(|a, b| (a.1 - b.1).abs() < 1e-9 && angle_distance(a.0, b.0) < 1e-9);
    out
}

/// Residual of the single-inverter stationarity conditions.
pub fn single_inverter_residual(p: &SingleInverterParams, delta: f64, e: f64) -> f64 {
    let target = p.pd + p.omega_d / p.kappa;
    let active = p.b * p.e_hat * e * delta.sin() - target;
    let q = p.b * e * (e - p.e_hat * delta.cos());
    let voltage = -e + p.ed - p.chi * (q - p.qd);
    active.abs().max(voltage.abs())
}

pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}
