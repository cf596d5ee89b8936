//! Explicit stability and instability conditions built from the blocks of
//! the linearization.
//!
//! Every criterion reports a signed margin; `Satisfied` exactly when the
//! margin is strictly positive. Criteria whose hypothesis fails report
//! `NotApplicable` with no margin.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::equilibrium::Equilibrium;
use crate::error::{Error, Result};
use crate::grid::GridNetwork;
use crate::linalg::{pinv, spectral_norm, sym_eigen, DEFINITENESS_TOL};
use crate::linearization::{build_linearization, subspace_spectrum, LinearizedSystem};
use crate::model::InverterParams;

/// Relative singular-value cutoff of the pseudoinverse of `Lambda`.
pub const PINV_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    SufficientForStability,
    NecessaryForStability,
    SufficientForInstability,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriterionVerdict {
    Satisfied,
    Violated,
    NotApplicable,
}

impl CriterionVerdict {
    /// CSV encoding: 1 satisfied, 0 violated, -1 not applicable.
    pub fn code(self) -> i8 {
        match self {
            CriterionVerdict::Satisfied => 1,
            CriterionVerdict::Violated => 0,
            CriterionVerdict::NotApplicable => -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub name: String,
    pub kind: Kind,
    pub verdict: CriterionVerdict,
    pub margin: Option<f64>,
    /// Per-node margins for nodewise criteria, in dynamic-node order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CriterionResult {
    fn scored(name: &str, kind: Kind, margin: f64) -> Self {
        CriterionResult {
            name: name.into(),
            kind,
            verdict: if margin > 0.0 {
                CriterionVerdict::Satisfied
            } else {
                CriterionVerdict::Violated
            },
            margin: Some(margin),
            detail: None,
            note: None,
        }
    }

    fn not_applicable(name: &str, kind: Kind, note: impl Into<String>) -> Self {
        CriterionResult {
            name: name.into(),
            kind,
            verdict: CriterionVerdict::NotApplicable,
            margin: None,
            detail: None,
            note: Some(note.into()),
        }
    }

    fn with_detail(mut self, detail: Vec<f64>) -> Self {
        self.detail = Some(detail);
        self
    }

    fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    pub fn is_satisfied(&self) -> bool {
        self.verdict == CriterionVerdict::Satisfied
    }
}

/// Spectral quantities of `Lambda` shared by several criteria.
///
/// In free mode `lambda2` is the algebraic connectivity (smallest eigenvalue
/// on the complement of the uniform vector); with a slack node it is the
/// smallest eigenvalue of the grounded Laplacian and `lambda_pinv` is its
/// inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralAux {
    pub lambda2: f64,
    pub fiedler: DVector<f64>,
    pub lambda_pinv: DMatrix<f64>,
    pub norm_a: f64,
    pub norm_at: f64,
    /// `H~^-1`, absent when `H~` is numerically singular.
    pub h_tilde_inv: Option<DMatrix<f64>>,
    /// `||A^T H~^-1 A||_2`, absent when `H~` is numerically singular.
    pub norm_at_hinv_a: Option<f64>,
}

impl SpectralAux {
    pub fn connected(&self) -> bool {
        self.lambda2 > DEFINITENESS_TOL
    }
}

pub fn spectral_aux(lin: &LinearizedSystem) -> Result<SpectralAux> {
    let m = lin.len();
    let first = usize::from(!lin.anchored);
    if m <= first {
        return Err(Error::Unsupported(
            "spectral quantities need at least two coupled nodes".into(),
        ));
    }
    let (values, vectors) = sym_eigen(&lin.lambda);
    let lambda2 = values[first];
    let mut fiedler = vectors.column(first).into_owned();
    if !lin.anchored {
        // remove any leakage of the uniform mode before normalizing
        let mean = fiedler.mean();
        fiedler.add_scalar_mut(-mean);
    }
    let norm = fiedler.norm();
    if norm > 0.0 {
        fiedler /= norm;
    }
    let (norm_a, norm_at) = (spectral_norm(&lin.a), spectral_norm(&lin.a.transpose()));

    let (hv, _) = sym_eigen(&lin.h_tilde);
    let hscale = hv.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let hmin = hv.iter().fold(f64::INFINITY, |acc, x| acc.min(x.abs()));
    let h_tilde_inv = if hmin > 1e-12 * hscale.max(1.0) {
        lin.h_tilde.clone().try_inverse()
    } else {
        None
    };
    let norm_at_hinv_a = h_tilde_inv
        .as_ref()
        .map(|hi| spectral_norm(&(lin.a.transpose() * hi * &lin.a)));
    Ok(SpectralAux {
        lambda2,
        fiedler,
        lambda_pinv: pinv(&lin.lambda, PINV_TOL),
        norm_a,
        norm_at,
        h_tilde_inv,
        norm_at_hinv_a,
    })
}

/// The transformation `U = [[I, -Lam^+ A^T], [0, I]]` and block-diagonal
/// `S = diag(-Lam, H~ + A Lam^+ A^T)` with `Xi = U^T S U` whenever the
/// columns of `A^T` lie in the range of `Lambda`.
pub fn schur_factors(lin: &LinearizedSystem, aux: &SpectralAux) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = lin.len();
    let mut u = DMatrix::identity(2 * m, 2 * m);
    u.view_mut((0, m), (m, m))
        .copy_from(&(-(&aux.lambda_pinv * lin.a.transpose())));
    let mut s = DMatrix::zeros(2 * m, 2 * m);
    s.view_mut((0, 0), (m, m)).copy_from(&(-&lin.lambda));
    s.view_mut((m, m), (m, m)).copy_from(&schur_voltage_block(lin, aux));
    (u, s)
}

fn schur_voltage_block(lin: &LinearizedSystem, aux: &SpectralAux) -> DMatrix<f64> {
    &lin.h_tilde + &lin.a * &aux.lambda_pinv * lin.a.transpose()
}

fn max_eig(m: &DMatrix<f64>) -> f64 {
    sym_eigen(m).0.last().copied().unwrap_or(f64::NEG_INFINITY)
}

/// Everything the criteria need about one equilibrium.
#[derive(Debug, Clone)]
pub struct Analysis<'a> {
    pub eq: &'a Equilibrium,
    pub params: &'a InverterParams,
    pub net: &'a GridNetwork,
    pub lin: LinearizedSystem,
    pub aux: SpectralAux,
}

impl<'a> Analysis<'a> {
    pub fn new(eq: &'a Equilibrium, params: &'a InverterParams, net: &'a GridNetwork) -> Result<Self> {
        let lin = build_linearization(eq, params, net)?;
        let aux = spectral_aux(&lin)?;
        Ok(Analysis {
            eq,
            params,
            net,
            lin,
            aux,
        })
    }

    /// `sum_l B_jl (E_j + E_l)` over all nodes, diagonal and slack
    /// neighbour included, for each dynamic node. Bounds the Gershgorin
    /// disc of row `j` of `H~` scaled by `E_j`, up to the `1/chi_j` term.
    fn gershgorin_sums(&self) -> Vec<f64> {
        let b = self.net.susceptance();
        let e = &self.eq.state.e;
        self.lin
            .nodes
            .iter()
            .map(|&j| (0..self.net.len()).map(|l| b[(j, l)] * (e[j] + e[l])).sum())
            .collect()
    }
}

/// Positive cosine of every line angle; margin is the smallest cosine.
pub fn angle_condition(eq: &Equilibrium, net: &GridNetwork) -> CriterionResult {
    let d = &eq.state.delta;
    let margin = net
        .couplings()
        .iter()
        .map(|&(j, l)| (d[j] - d[l]).cos())
        .fold(f64::INFINITY, f64::min);
    CriterionResult::scored("angle_condition", Kind::SufficientForStability, margin)
        .with_note("sufficient for a positive-definite angle block")
}

/// `Lambda` positive definite on the angle subspace and
/// `H~ + A Lam^+ A^T` negative definite.
pub fn lemma2_i(an: &Analysis) -> CriterionResult {
    let a = an.aux.lambda2;
    let b = -max_eig(&schur_voltage_block(&an.lin, &an.aux));
    let r = CriterionResult::scored("lemma2_I", Kind::Exact, a.min(b)).with_detail(vec![a, b]);
    match (a > 0.0, b > 0.0) {
        (true, true) => r,
        (false, _) => r.with_note("angle block not positive definite"),
        (true, false) => r.with_note("voltage Schur complement not negative definite"),
    }
}

/// `H~` negative definite and `Lambda + A^T H~^-1 A` positive definite on
/// the angle subspace.
pub fn lemma2_ii(an: &Analysis) -> CriterionResult {
    let Some(hinv) = an.aux.h_tilde_inv.as_ref() else {
        return CriterionResult::not_applicable("lemma2_II", Kind::Exact, "H~ is numerically singular");
    };
    let a = -max_eig(&an.lin.h_tilde);
    let block = &an.lin.lambda + an.lin.a.transpose() * hinv * &an.lin.a;
    let b = subspace_spectrum(&block, an.lin.angle_subspace())
        .first()
        .copied()
        .unwrap_or(f64::INFINITY);
    let r = CriterionResult::scored("lemma2_II", Kind::Exact, a.min(b)).with_detail(vec![a, b]);
    match (a > 0.0, b > 0.0) {
        (true, true) => r,
        (false, _) => r.with_note("H~ not negative definite"),
        (true, false) => r.with_note("angle Schur complement not positive definite"),
    }
}

/// Nodewise `1/chi_j > sum_l B_jl (E_j + E_l)`, a Gershgorin bound
/// certifying `H~` negative definite. The diagonal `B_jj` is part of the sum.
/// Stated under the angle condition, so not applicable without it.
pub fn cor1_voltage(an: &Analysis) -> CriterionResult {
    const NAME: &str = "cor1";
    if !angle_condition(an.eq, an.net).is_satisfied() {
        return CriterionResult::not_applicable(NAME, Kind::SufficientForStability, "angle condition fails");
    }
    let margins: Vec<f64> = an
        .gershgorin_sums()
        .iter()
        .enumerate()
        .map(|(r, sum)| 1.0 / an.lin.chi[r] - sum)
        .collect();
    let margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    CriterionResult::scored(NAME, Kind::SufficientForStability, margin).with_detail(margins)
}

/// How node subsets are chosen for the instability certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetPolicy {
    /// Enumerate all non-empty subsets up to this many dynamic nodes.
    pub exhaustive_limit: usize,
    /// Random subsets tried beyond the limit (besides singletons and the
    /// full set).
    pub random_subsets: usize,
    pub seed: u64,
}

impl Default for SubsetPolicy {
    fn default() -> Self {
        SubsetPolicy {
            exhaustive_limit: 15,
            random_subsets: 1000,
            seed: 0,
        }
    }
}

/// Largest `x^T H~ x` over 0/1 indicator vectors `x` of the tested subsets,
/// with the maximizing subset.
fn best_indicator(ht: &DMatrix<f64>, policy: &SubsetPolicy) -> (f64, Vec<usize>) {
    let m = ht.nrows();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    if m == 0 {
        return best;
    }
    if m <= policy.exhaustive_limit {
        // Gray-code walk: one membership flip per step
        let mut member = vec![false; m];
        let mut s = DVector::<f64>::zeros(m);
        let mut value = 0.0;
        let mut best_code = 0u64;
        for step in 1u64..(1u64 << m) {
            let k = step.trailing_zeros() as usize;
            if member[k] {
                value -= 2.0 * s[k] - ht[(k, k)];
                s -= ht.column(k);
            } else {
                value += 2.0 * s[k] + ht[(k, k)];
                s += ht.column(k);
            }
            member[k] = !member[k];
            if value > best.0 {
                best.0 = value;
                best_code = step ^ (step >> 1);
            }
        }
        best.1 = (0..m).filter(|&k| best_code >> k & 1 == 1).collect();
        return best;
    }
    let eval = |set: &[usize]| -> f64 { set.iter().flat_map(|&j| set.iter().map(move |&l| ht[(j, l)])).sum() };
    let mut consider = |set: Vec<usize>| {
        let v = eval(&set);
        if v > best.0 {
            best = (v, set);
        }
    };
    for k in 0..m {
        consider(vec![k]);
    }
    consider((0..m).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    for _ in 0..policy.random_subsets {
        let set: Vec<usize> = (0..m).filter(|_| rng.random_bool(0.5)).collect();
        if !set.is_empty() {
            consider(set);
        }
    }
    best
}

/// Instability certificate: a node set `S` with
/// `sum_{j in S} 1/(chi_j E_j) < sum_{j,l in S} H_jl`.
/// The margin is the largest excess over the tested subsets.
pub fn cor2_instability(an: &Analysis, policy: &SubsetPolicy) -> CriterionResult {
    let (value, set) = best_indicator(&an.lin.h_tilde, policy);
    let nodes: Vec<String> = set.iter().map(|&k| an.lin.nodes[k].to_string()).collect();
    CriterionResult::scored("cor2", Kind::SufficientForInstability, value)
        .with_note(format!("best subset {{{}}}", nodes.join(",")))
}

/// `sum_j chi_j E_j (A v_F)_j^2`, the leading-order voltage correction to
/// the algebraic connectivity.
pub fn cor3_correction(lin: &LinearizedSystem, fiedler: &DVector<f64>) -> f64 {
    let av = &lin.a * fiedler;
    (0..lin.len()).map(|j| lin.chi[j] * lin.e[j] * av[j] * av[j]).sum()
}

/// Leading-order necessary condition `lambda2 > sum_j chi_j E_j (A v_F)_j^2`.
/// Diagnostic only.
pub fn cor3_necessary(an: &Analysis) -> CriterionResult {
    let rhs = cor3_correction(&an.lin, &an.aux.fiedler);
    CriterionResult::scored("cor3", Kind::NecessaryForStability, an.aux.lambda2 - rhs)
        .with_note("leading order in chi; diagnostic")
}

/// `lambda2 > 0` and nodewise
/// `1/chi_j > sum_l B_jl (E_j + E_l) + E_j ||A|| ||A^T|| / lambda2`:
/// the cor1 bound applied to `H~ + ||A|| ||A^T|| / lambda2`.
pub fn cor4_sufficient(an: &Analysis) -> CriterionResult {
    const NAME: &str = "cor4";
    let l2 = an.aux.lambda2;
    if !(l2 > 0.0) {
        return CriterionResult::scored(NAME, Kind::SufficientForStability, l2)
            .with_note("angle block not positive definite");
    }
    let penalty = an.aux.norm_a * an.aux.norm_at / l2;
    let margins: Vec<f64> = an
        .gershgorin_sums()
        .iter()
        .enumerate()
        .map(|(r, sum)| 1.0 / an.lin.chi[r] - sum - an.lin.e[r] * penalty)
        .collect();
    let margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    CriterionResult::scored(NAME, Kind::SufficientForStability, margin).with_detail(margins)
}

/// Given `H~` negative definite: `lambda2 > ||A^T H~^-1 A||`.
pub fn cor5_sufficient(an: &Analysis) -> CriterionResult {
    const NAME: &str = "cor5";
    let Some(norm) = an.aux.norm_at_hinv_a else {
        return CriterionResult::not_applicable(NAME, Kind::SufficientForStability, "H~ is numerically singular");
    };
    if !(max_eig(&an.lin.h_tilde) < 0.0) {
        return CriterionResult::not_applicable(NAME, Kind::SufficientForStability, "H~ not negative definite");
    }
    CriterionResult::scored(NAME, Kind::SufficientForStability, an.aux.lambda2 - norm)
}

/// All criteria in a fixed order: angle condition, the two exact Schur
/// criteria, then the five corollaries.
pub fn evaluate_all(
    eq: &Equilibrium,
    params: &InverterParams,
    net: &GridNetwork,
    policy: &SubsetPolicy,
) -> Result<Vec<CriterionResult>> {
    let an = Analysis::new(eq, params, net)?;
    Ok(vec![
        angle_condition(eq, net),
        lemma2_i(&an),
        lemma2_ii(&an),
        cor1_voltage(&an),
        cor2_instability(&an, policy),
        cor3_necessary(&an),
        cor4_sufficient(&an),
        cor5_sufficient(&an),
    ])
}

/// Looks up a result by name.
pub fn find<'r>(results: &'r [CriterionResult], name: &str) -> Option<&'r CriterionResult> {
    results.iter().find(|r| r.name == name)
}
