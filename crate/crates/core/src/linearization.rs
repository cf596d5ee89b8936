//! Linearized dynamics around an equilibrium and eigenvalue-based verdicts.
//!
//! Perturbations of the dynamic nodes are stacked as `(xi, nu, eps)` for
//! angle, frequency and voltage. With a slack node the slack is not a
//! dynamic node: its couplings still enter the diagonals of `Lambda`, `A`
//! and `H`, but it has no rows, so `Lambda` is a grounded Laplacian and the
//! Jacobian has no structural zero mode. Without a slack node all nodes are
//! dynamic and a uniform phase shift is an exact zero mode.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize, Serializer};

use crate::equilibrium::Equilibrium;
use crate::error::{Error, Result};
use crate::grid::GridNetwork;
use crate::linalg::{asymmetry, classify_negative, complement_basis, eigenvalues, projected_eigenvalues, Definiteness};
use crate::model::InverterParams;

/// Real-part margin for the stable/unstable decision.
pub const STABILITY_EPS: f64 = 1e-9;
/// Eigenvalues below this magnitude are zero-mode candidates in free mode.
pub const ZERO_MODE_TOL: f64 = 1e-8;
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedSystem {
    pub lambda: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub h: DMatrix<f64>,
    /// `H - X^-1 E^-1`.
    pub h_tilde: DMatrix<f64>,
    pub e: DVector<f64>,
    pub tau: DVector<f64>,
    pub kappa: DVector<f64>,
    pub chi: DVector<f64>,
    /// Original indices of the dynamic nodes, in matrix order.
    pub nodes: Vec<usize>,
    /// True when a slack node anchors the phase.
    pub anchored: bool,
}

impl LinearizedSystem {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mode(&self) -> Mode {
        if self.anchored {
            Mode::SlackAnchored
        } else {
            Mode::Free
        }
    }

    /// Subspace on which angle-block definiteness is meaningful: the
    /// complement of the uniform shift, or everything when anchored.
    pub fn angle_subspace(&self) -> Subspace {
        if self.anchored {
            Subspace::Full
        } else {
            Subspace::D1
        }
    }

    /// The matching subspace for the stacked `(xi, eps)` space.
    pub fn reduced_subspace(&self) -> Subspace {
        if self.anchored {
            Subspace::Full
        } else {
            Subspace::D2
        }
    }
}

/// Builds `Lambda`, `A`, `H` and `H_tilde` at a lossless equilibrium.
pub fn build_linearization(eq: &Equilibrium, params: &InverterParams, net: &GridNetwork) -> Result<LinearizedSystem> {
    if !net.is_lossless() {
        return Err(Error::Unsupported("linearization requires a lossless network".into()));
    }
    let n = net.len();
    eq.state.check_len(n)?;
    params.validate(n)?;
    let b = net.susceptance();
    let d = &eq.state.delta;
    let e = &eq.state.e;
    let nodes: Vec<usize> = (0..n).filter(|&j| Some(j) != eq.slack).collect();
    let m = nodes.len();

    let mut lambda = DMatrix::zeros(m, m);
    let mut a = DMatrix::zeros(m, m);
    let mut h = DMatrix::zeros(m, m);
    for (r, &j) in nodes.iter().enumerate() {
        let mut lam_jj = 0.0;
        let mut a_jj = 0.0;
        let mut h_jj = b[(j, j)];
        for k in 0..n {
            let (s, c) = (d[k] - d[j]).sin_cos();
            h_jj += b[(j, k)] * c * e[k] / e[j];
            if k != j {
                lam_jj += e[j] * e[k] * b[(j, k)] * c;
                a_jj += e[k] * b[(j, k)] * s;
            }
        }
        for (col, &l) in nodes.iter().enumerate() {
            if l == j {
                lambda[(r, col)] = lam_jj;
                a[(r, col)] = a_jj;
                h[(r, col)] = h_jj;
            } else {
                let (s, c) = (d[l] - d[j]).sin_cos();
                lambda[(r, col)] = -e[j] * e[l] * b[(j, l)] * c;
                a[(r, col)] = -e[l] * b[(j, l)] * s;
                h[(r, col)] = b[(j, l)] * c;
            }
        }
    }
    let pick = |v: &[f64]| DVector::from_iterator(m, nodes.iter().map(|&j| v[j]));
    let ev = pick(e);
    let chi = pick(&params.chi);
    let mut h_tilde = h.clone();
    for k in 0..m {
        h_tilde[(k, k)] -= 1.0 / (chi[k] * ev[k]);
    }
    Ok(LinearizedSystem {
        lambda,
        a,
        h,
        h_tilde,
        e: ev,
        tau: pick(&params.tau),
        kappa: pick(&params.kappa),
        chi,
        nodes,
        anchored: eq.slack.is_some(),
    })
}

/// The `3m x 3m` Jacobian
///
/// ```text
/// [ 0            I      0          ]
/// [ -T^-1 K Lam  -T^-1  T^-1 K A^T ]
/// [ T^-1 X E A   0      T^-1 X E H~]
/// ```
pub fn full_jacobian(lin: &LinearizedSystem) -> DMatrix<f64> {
    let m = lin.len();
    let mut j = DMatrix::zeros(3 * m, 3 * m);
    for r in 0..m {
        j[(r, m + r)] = 1.0;
        j[(m + r, m + r)] = -1.0 / lin.tau[r];
        let kt = lin.kappa[r] / lin.tau[r];
        let xet = lin.chi[r] * lin.e[r] / lin.tau[r];
        for c in 0..m {
            j[(m + r, c)] = -kt * lin.lambda[(r, c)];
            j[(m + r, 2 * m + c)] = kt * lin.a[(c, r)];
            j[(2 * m + r, c)] = xet * lin.a[(r, c)];
            j[(2 * m + r, 2 * m + c)] = xet * lin.h_tilde[(r, c)];
        }
    }
    j
}

/// The symmetric `2m x 2m` matrix `[[-Lambda, A^T], [A, H~]]`.
pub fn reduced_jacobian(lin: &LinearizedSystem) -> Result<DMatrix<f64>> {
    let m = lin.len();
    let mut xi = DMatrix::zeros(2 * m, 2 * m);
    xi.view_mut((0, 0), (m, m)).copy_from(&(-&lin.lambda));
    xi.view_mut((0, m), (m, m)).copy_from(&lin.a.transpose());
    xi.view_mut((m, 0), (m, m)).copy_from(&lin.a);
    xi.view_mut((m, m), (m, m)).copy_from(&lin.h_tilde);
    let asym = asymmetry(&xi);
    if asym > SYMMETRY_TOL * xi.amax().max(1.0) {
        return Err(Error::Consistency(format!("reduced Jacobian asymmetric by {asym:.3e}")));
    }
    Ok(xi)
}

/// Block-diagonal weight of the quadratic Lyapunov function in `(xi, nu, eps)`
/// order: `xi^T Lam xi + nu^T K^-1 T nu - 2 xi^T A^T eps - eps^T H~ eps`.
pub fn lyapunov_matrix(lin: &LinearizedSystem) -> DMatrix<f64> {
    let m = lin.len();
    let mut p = DMatrix::zeros(3 * m, 3 * m);
    p.view_mut((0, 0), (m, m)).copy_from(&lin.lambda);
    for k in 0..m {
        p[(m + k, m + k)] = lin.tau[k] / lin.kappa[k];
    }
    p.view_mut((0, 2 * m), (m, m)).copy_from(&(-lin.a.transpose()));
    p.view_mut((2 * m, 0), (m, m)).copy_from(&(-&lin.a));
    p.view_mut((2 * m, 2 * m), (m, m)).copy_from(&(-&lin.h_tilde));
    p
}

/// Time derivative of the Lyapunov function along the linear flow,
/// `-2 nu^T K^-1 nu - 2 w^T T^-1 X E w` with `w = A xi + H~ eps`.
pub fn lyapunov_derivative(lin: &LinearizedSystem, x: &DVector<f64>) -> f64 {
    let m = lin.len();
    let xi = x.rows(0, m);
    let nu = x.rows(m, m);
    let eps = x.rows(2 * m, m);
    let w = &lin.a * xi + &lin.h_tilde * eps;
    let mut v = 0.0;
    for k in 0..m {
        v -= 2.0 * nu[k] * nu[k] / lin.kappa[k];
        v -= 2.0 * w[k] * w[k] * lin.chi[k] * lin.e[k] / lin.tau[k];
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SlackAnchored,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Stable,
    Unstable,
    Marginal,
}

fn complex_pairs<S: Serializer>(v: &[Complex<f64>], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|z| [z.re, z.im]))
}

fn complex_pair<S: Serializer>(z: &Complex<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    [z.re, z.im].serialize(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    /// Full spectrum, sorted by decreasing real part.
    #[serde(serialize_with = "complex_pairs")]
    pub eigenvalues: Vec<Complex<f64>>,
    #[serde(serialize_with = "complex_pair")]
    pub dominant: Complex<f64>,
    pub verdict: Verdict,
    pub zero_mode_excluded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl StabilityReport {
    pub fn is_stable(&self) -> bool {
        self.verdict == Verdict::Stable
    }
}

/// Classifies a Jacobian by its spectrum. In free mode exactly one
/// eigenvalue with `|mu| < ZERO_MODE_TOL` is discarded; none or several
/// such eigenvalues yield a marginal verdict.
pub fn eigen_stability(j: &DMatrix<f64>, mode: Mode) -> Result<StabilityReport> {
    if j.nrows() != j.ncols() {
        return Err(Error::Dimension {
            what: "Jacobian columns",
            expected: j.nrows(),
            got: j.ncols(),
        });
    }
    let mut ev = eigenvalues(j)?;
    ev.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));

    let mut diagnostic = None;
    let mut zero_mode_excluded = false;
    let mut excluded = None;
    if mode == Mode::Free {
        let near_zero: Vec<usize> = (0..ev.len()).filter(|&k| ev[k].norm() < ZERO_MODE_TOL).collect();
        match near_zero.len() {
            1 => {
                excluded = Some(near_zero[0]);
                zero_mode_excluded = true;
            }
            0 => diagnostic = Some("no eigenvalue close enough to zero to be the phase-shift mode".into()),
            k => diagnostic = Some(format!("{k} eigenvalues near zero; degenerate zero mode")),
        }
    }
    let dominant = ev
        .iter()
        .enumerate()
        .filter(|(k, _)| Some(*k) != excluded)
        .map(|(_, z)| *z)
        .next()
        .unwrap_or(Complex::new(f64::NEG_INFINITY, 0.0));

    let verdict = if diagnostic.is_some() {
        Verdict::Marginal
    } else if dominant.re < -STABILITY_EPS {
        Verdict::Stable
    } else if dominant.re > STABILITY_EPS {
        Verdict::Unstable
    } else {
        Verdict::Marginal
    };
    Ok(StabilityReport {
        eigenvalues: ev,
        dominant,
        verdict,
        zero_mode_excluded,
        diagnostic,
    })
}

/// Linearizes and classifies in one step.
pub fn stability_of(eq: &Equilibrium, params: &InverterParams, net: &GridNetwork) -> Result<StabilityReport> {
    let lin = build_linearization(eq, params, net)?;
    eigen_stability(&full_jacobian(&lin), lin.mode())
}

/// Subspaces orthogonal to uniform phase shifts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subspace {
    /// Complement of `(1, ..., 1)`.
    D1,
    /// Complement of `(1, ..., 1, 0, ..., 0)` with ones on the first half.
    D2,
    Full,
}

/// Ascending eigenvalues of `M` restricted to `subspace`.
pub fn subspace_spectrum(m: &DMatrix<f64>, subspace: Subspace) -> Vec<f64> {
    let dim = m.nrows();
    match subspace {
        Subspace::Full => crate::linalg::sym_eigen(m).0,
        Subspace::D1 => projected_eigenvalues(m, &complement_basis(dim, dim)),
        Subspace::D2 => projected_eigenvalues(m, &complement_basis(dim, dim / 2)),
    }
}

pub fn definiteness_on_subspace(m: &DMatrix<f64>, subspace: Subspace) -> Definiteness {
    classify_negative(&subspace_spectrum(m, subspace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{single_inverter_equilibria, solve_newton, SingleInverterParams};
    use crate::grid::Line;
    use crate::model::{vector_field, SystemState};

    fn two_node(b: f64) -> GridNetwork {
        GridNetwork::build(
            2,
            &[Line {
                from: 0,
                to: 1,
                b,
                g: 0.0,
            }],
            &[],
            true,
        )
        .unwrap()
    }

    fn flat_eq(n: usize) -> Equilibrium {
        Equilibrium {
            state: SystemState::flat(n),
            residual_norm: 0.0,
            method: crate::equilibrium::Method::Newton,
            slack: None,
            iterations: 0,
        }
    }

    fn single(chi: f64, pd: f64) -> SingleInverterParams {
        SingleInverterParams {
            tau: 0.1,
            kappa: 1.0,
            chi,
            pd,
            qd: 0.05,
            ed: 1.0,
            omega_d: 0.0,
            b: 1.5,
            e_hat: 1.0,
        }
    }

    #[test]
    fn flat_two_node_blocks() {
        let params = InverterParams::uniform(2, 0.1, 1.0, 0.1);
        let lin = build_linearization(&flat_eq(2), &params, &two_node(1.5)).unwrap();
        let expect_l = DMatrix::from_row_slice(2, 2, &[1.5, -1.5, -1.5, 1.5]);
        // the diagonal sum runs over k = j as well: B_jj + B_jj + B_jl
        let expect_h = DMatrix::from_row_slice(2, 2, &[-1.5, 1.5, 1.5, -1.5]);
        assert!((&lin.lambda - expect_l).amax() < 1e-15);
        assert!(lin.a.amax() < 1e-15);
        assert!((&lin.h - expect_h).amax() < 1e-15);
        let xi = reduced_jacobian(&lin).unwrap();
        assert!(xi.view((0, 2), (2, 2)).amax() < 1e-15);
    }

    #[test]
    fn lossy_network_rejected() {
        let net = GridNetwork::build(
            2,
            &[Line {
                from: 0,
                to: 1,
                b: 1.0,
                g: 0.1,
            }],
            &[],
            false,
        )
        .unwrap();
        let params = InverterParams::uniform(2, 0.1, 1.0, 0.1);
        assert!(matches!(
            build_linearization(&flat_eq(2), &params, &net),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn single_inverter_matches_closed_form_jacobian() {
        let sp = single(0.05, 1.2);
        let net = sp.network().unwrap();
        let params = sp.inverter_params();
        for eq in single_inverter_equilibria(&sp).unwrap() {
            let lin = build_linearization(&eq, &params, &net).unwrap();
            assert_eq!(lin.len(), 1);
            let j = full_jacobian(&lin);
            let (d, e) = (eq.state.delta[0], eq.state.e[0]);
            let (tau, kappa, chi, b, eh) = (sp.tau, sp.kappa, sp.chi, sp.b, sp.e_hat);
            let c = b * eh * d.cos();
            let s = b * eh * d.sin();
            let expect = DMatrix::from_row_slice(
                3,
                3,
                &[
                    0.0,
                    1.0,
                    0.0,
                    -kappa * e * c / tau,
                    -1.0 / tau,
                    -kappa * s / tau,
                    -chi * e * s / tau,
                    0.0,
                    -(1.0 + chi * (2.0 * b * e - c)) / tau,
                ],
            );
            assert!((j - expect).amax() < 1e-12);
        }
    }

    fn finite_difference(
        eq: &Equilibrium,
        params: &InverterParams,
        net: &GridNetwork,
        nodes: &[usize],
    ) -> DMatrix<f64> {
        let n = net.len();
        let m = nodes.len();
        let h = 1e-6;
        let mut out = DMatrix::zeros(3 * m, 3 * m);
        let flat = |s: &SystemState| -> Vec<f64> {
            let f = vector_field(s, params, net, eq.slack).unwrap().to_vec();
            (0..3)
                .flat_map(|blk| nodes.iter().map(move |&j| blk * n + j))
                .map(|i| f[i])
                .collect()
        };
        for (c, idx) in (0..3)
            .flat_map(|blk| nodes.iter().map(move |&j| blk * n + j))
            .enumerate()
        {
            let mut y = eq.state.to_vec();
            y[idx] += h;
            let plus = flat(&SystemState::from_slice(&y));
            y[idx] -= 2.0 * h;
            let minus = flat(&SystemState::from_slice(&y));
            for r in 0..3 * m {
                out[(r, c)] = (plus[r] - minus[r]) / (2.0 * h);
            }
        }
        out
    }

    fn three_bus() -> (GridNetwork, InverterParams) {
        let net = GridNetwork::build(
            3,
            &[
                Line {
                    from: 0,
                    to: 1,
                    b: 2.0,
                    g: 0.0,
                },
                Line {
                    from: 1,
                    to: 2,
                    b: 1.2,
                    g: 0.0,
                },
                Line {
                    from: 0,
                    to: 2,
                    b: 0.7,
                    g: 0.0,
                },
            ],
            &[],
            true,
        )
        .unwrap();
        let mut params = InverterParams::uniform(3, 0.1, 1.0, 0.1);
        params.pd = vec![0.6, -0.2, -0.3];
        params.kappa = vec![1.0, 0.5, 2.0];
        params.tau = vec![0.1, 0.2, 0.15];
        params.chi = vec![0.1, 0.2, 0.05];
        params.qd = vec![0.05, 0.0, -0.05];
        (net, params)
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (net, params) = three_bus();
        for slack in [None, Some(2)] {
            let eq = solve_newton(&net, &params, slack, None).unwrap();
            let lin = build_linearization(&eq, &params, &net).unwrap();
            let j = full_jacobian(&lin);
            let fd = finite_difference(&eq, &params, &net, &lin.nodes);
            let rel = (&j - &fd).amax() / j.amax();
            assert!(rel < 1e-6, "slack {slack:?}: rel err {rel:e}");
        }
    }

    #[test]
    fn free_mode_zero_mode_and_symmetry() {
        let (net, params) = three_bus();
        let eq = solve_newton(&net, &params, None, None).unwrap();
        let lin = build_linearization(&eq, &params, &net).unwrap();
        let j = full_jacobian(&lin);
        let mut shift = DVector::zeros(9);
        shift.rows_mut(0, 3).fill(1.0);
        assert!((&j * shift).amax() < 1e-12);
        assert!(asymmetry(&lin.lambda) < 1e-12);
        assert!(lin.lambda.row_sum().amax() < 1e-12);
        let report = eigen_stability(&j, Mode::Free).unwrap();
        assert!(report.zero_mode_excluded);
        assert_eq!(report.verdict, Verdict::Stable);
    }

    #[test]
    fn lyapunov_derivative_matches_quadratic_form() {
        let (net, params) = three_bus();
        let eq = solve_newton(&net, &params, None, None).unwrap();
        let lin = build_linearization(&eq, &params, &net).unwrap();
        let j = full_jacobian(&lin);
        let p = lyapunov_matrix(&lin);
        for k in 0..5 {
            let x = DVector::from_fn(9, |i, _| ((i * 7 + k * 3) as f64 * 0.37).sin());
            let direct = 2.0 * x.dot(&(&p * (&j * &x)));
            assert!((direct - lyapunov_derivative(&lin, &x)).abs() < 1e-10);
        }
    }

    #[test]
    fn explicit_spectrum() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0, -3.0]));
        let r = eigen_stability(&d, Mode::SlackAnchored).unwrap();
        assert_eq!(r.verdict, Verdict::Stable);
        assert!((r.dominant.re + 1.0).abs() < 1e-15);
        assert!(!r.zero_mode_excluded);
        let r = eigen_stability(&DMatrix::zeros(2, 2), Mode::Free).unwrap();
        assert_eq!(r.verdict, Verdict::Marginal);
        assert!(r.diagnostic.is_some());
    }

    #[test]
    fn report_json_shape() {
        let d = DMatrix::from_row_slice(2, 2, &[0.0, -2.0, 2.0, -0.5]);
        let r = eigen_stability(&d, Mode::SlackAnchored).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["eigenvalues"].as_array().unwrap().len(), 2);
        assert_eq!(v["dominant"].as_array().unwrap().len(), 2);
        assert_eq!(v["verdict"], "stable");
        assert_eq!(v["zero_mode_excluded"], false);
    }

    #[test]
    fn laplacian_definiteness_by_subspace() {
        let params = InverterParams::uniform(2, 0.1, 1.0, 0.1);
        let lin = build_linearization(&flat_eq(2), &params, &two_node(1.5)).unwrap();
        let neg = -&lin.lambda;
        assert_eq!(
            definiteness_on_subspace(&neg, Subspace::D1),
            Definiteness::NegativeDefinite
        );
        assert_eq!(
            definiteness_on_subspace(&neg, Subspace::Full),
            Definiteness::NegativeSemidefiniteOnly
        );
    }

    #[test]
    fn single_inverter_branches_split_stable_and_unstable() {
        let sp = single(0.05, 1.2);
        let eqs = single_inverter_equilibria(&sp).unwrap();
        let net = sp.network().unwrap();
        let params = sp.inverter_params();
        let verdicts: Vec<Verdict> = eqs
            .iter()
            .map(|eq| stability_of(eq, &params, &net).unwrap().verdict)
            .collect();
        // high-voltage branch (small angle) stable, low-voltage branch a saddle
        assert_eq!(verdicts, vec![Verdict::Stable, Verdict::Unstable]);
    }

    #[test]
    fn symmetric_tree_spectrum_is_resolved() {
        use crate::systems::{SystemDef, UniformParams};
        // repeated eigenvalues from the tree's symmetry stall plain QR
        let def = SystemDef::Tree(UniformParams {
            tau: 0.1,
            kappa: 1.0,
            chi: 0.9746153846153846,
            b: 1.5,
            p: 0.38461538461538464,
            qd: 0.05,
            ed: 1.0,
            omega_d: 0.0,
        });
        let sys = def.realize().unwrap();
        let eq = &sys.equilibria().unwrap()[0];
        let lin = build_linearization(eq, &sys.params, &sys.net).unwrap();
        let j = full_jacobian(&lin);
        let report = eigen_stability(&j, lin.mode()).unwrap();
        assert_eq!(report.eigenvalues.len(), j.nrows());
        let jc = j.map(|x| Complex::new(x, 0.0));
        let scale = j.norm();
        for mu in &report.eigenvalues {
            let shifted = &jc - DMatrix::<Complex<f64>>::identity(j.nrows(), j.nrows()) * *mu;
            let smin = shifted.singular_values().min();
            assert!(smin < 1e-6 * scale, "mu = {mu}, smin = {smin}");
        }
    }
}
